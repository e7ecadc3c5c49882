//! Finite MDP model, compact matrix form and the exact `Q*` oracle.
//!
//! State-action vectors use action-major stacking: the entry for the pair
//! `(s, a)` (0-based) lives at `a * |S| + s`, so a vector reads
//! `Q(., 0), Q(., 1), ...`, matching `e_a ⊗ e_s`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance used for every probability-row check.
pub const STOCHASTIC_TOL: f64 = 1e-12;

/// Whether rewards must satisfy `max |r| <= 1`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardBound {
    /// Reject any reward with magnitude above one.
    #[default]
    Unit,
    /// Accept larger rewards; every bound is scaled by `max(1, R_max)`.
    Scaled,
}

/// Raw, unvalidated MDP description as read from a file.
///
/// All tables are flat and row-major: `transition` and `reward` are indexed
/// by `(s, a, s')`, `behavior_policy` by `(s, a)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MdpDescription {
    pub num_states: usize,
    pub num_actions: usize,
    pub discount: f64,
    pub transition: Vec<f64>,
    pub reward: Vec<f64>,
    pub behavior_policy: Vec<f64>,
    pub state_dist: Vec<f64>,
    #[serde(default, skip_serializing_if = "is_unit")]
    pub reward_bound: RewardBound,
}

fn is_unit(b: &RewardBound) -> bool {
    *b == RewardBound::Unit
}

/// A validated finite MDP with a fixed behavior policy and state distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct Mdp {
    desc: MdpDescription,
    visit: Vec<f64>,
    r_max: f64,
}

fn check_len(field: &'static str, v: &[f64], expected: usize) -> Result<()> {
    if v.len() != expected {
        return Err(Error::Shape {
            field,
            expected,
            found: v.len(),
        });
    }
    Ok(())
}

fn check_rows(field: &'static str, v: &[f64], width: usize, label: impl Fn(usize) -> String) -> Result<()> {
    if let Some(i) = v.iter().position(|x| !x.is_finite() || *x < 0.0) {
        return Err(Error::InvalidField {
            field,
            reason: format!("entry {i} = {} is not a probability", v[i]),
        });
    }
    for (row, chunk) in v.chunks(width).enumerate() {
        let sum: f64 = chunk.iter().sum();
        if (sum - 1.0).abs() > STOCHASTIC_TOL {
            return Err(Error::NotStochastic {
                field,
                row: label(row),
                sum,
            });
        }
    }
    Ok(())
}

impl MdpDescription {
    /// Checks every model invariant and returns the validated [`Mdp`].
    pub fn validate(self) -> Result<Mdp> {
        let (ns, na) = (self.num_states, self.num_actions);
        if ns == 0 {
            return Err(Error::InvalidField {
                field: "num_states",
                reason: "must be positive".into(),
            });
        }
        if na == 0 {
            return Err(Error::InvalidField {
                field: "num_actions",
                reason: "must be positive".into(),
            });
        }
        if !(0.0..1.0).contains(&self.discount) {
            return Err(Error::Discount(self.discount));
        }
        check_len("transition", &self.transition, ns * na * ns)?;
        check_len("reward", &self.reward, ns * na * ns)?;
        check_len("behavior_policy", &self.behavior_policy, ns * na)?;
        check_len("state_dist", &self.state_dist, ns)?;

        check_rows("transition", &self.transition, ns, |row| {
            format!("(s={}, a={})", row / na + 1, row % na + 1)
        })?;
        check_rows("behavior_policy", &self.behavior_policy, na, |row| {
            format!("(s={})", row + 1)
        })?;
        check_rows("state_dist", &self.state_dist, ns, |_| "0".into())?;

        if let Some(i) = self.reward.iter().position(|r| !r.is_finite()) {
            return Err(Error::InvalidField {
                field: "reward",
                reason: format!("entry {i} is not finite"),
            });
        }
        let r_max = self.reward.iter().fold(0.0_f64, |m, r| m.max(r.abs()));
        if r_max > 1.0 && self.reward_bound == RewardBound::Unit {
            return Err(Error::RewardBound { r_max });
        }

        let mut visit = vec![0.0; ns * na];
        for s in 0..ns {
            for a in 0..na {
                let d = self.state_dist[s] * self.behavior_policy[s * na + a];
                if d <= 0.0 {
                    return Err(Error::ZeroVisit {
                        state: s + 1,
                        action: a + 1,
                    });
                }
                visit[a * ns + s] = d;
            }
        }

        Ok(Mdp {
            desc: self,
            visit,
            r_max,
        })
    }
}

impl Mdp {
    pub fn num_states(&self) -> usize {
        self.desc.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.desc.num_actions
    }

    /// `|S||A|`, the length of every Q-vector.
    pub fn size(&self) -> usize {
        self.desc.num_states * self.desc.num_actions
    }

    pub fn discount(&self) -> f64 {
        self.desc.discount
    }

    /// Action-major position of the pair `(s, a)`.
    pub fn index(&self, s: usize, a: usize) -> usize {
        a * self.desc.num_states + s
    }

    /// Next-state distribution `P(. | s, a)`.
    pub fn transition_row(&self, s: usize, a: usize) -> &[f64] {
        let ns = self.desc.num_states;
        let start = (s * self.desc.num_actions + a) * ns;
        &self.desc.transition[start..start + ns]
    }

    pub fn reward(&self, s: usize, a: usize, s_next: usize) -> f64 {
        let ns = self.desc.num_states;
        self.desc.reward[(s * self.desc.num_actions + a) * ns + s_next]
    }

    /// `β(. | s)`.
    pub fn behavior_row(&self, s: usize) -> &[f64] {
        let na = self.desc.num_actions;
        &self.desc.behavior_policy[s * na..(s + 1) * na]
    }

    pub fn state_dist(&self) -> &[f64] {
        &self.desc.state_dist
    }

    /// Visit probability `d(s, a) = p(s) β(a|s)`.
    pub fn visit(&self, s: usize, a: usize) -> f64 {
        self.visit[self.index(s, a)]
    }

    /// Visit probabilities in action-major order.
    pub fn visit_probs(&self) -> &[f64] {
        &self.visit
    }

    /// `R_max = max |r(s,a,s')|`.
    pub fn r_max(&self) -> f64 {
        self.r_max
    }

    /// Factor `c = max(1, R_max)` by which every finite-time bound scales.
    pub fn reward_scale(&self) -> f64 {
        self.r_max.max(1.0)
    }

    pub fn description(&self) -> &MdpDescription {
        &self.desc
    }

    /// Builds the compact matrices `P`, `R` and `D`.
    pub fn compact(&self) -> CompactMatrices {
        let (ns, na) = (self.num_states(), self.num_actions());
        let n = ns * na;
        let mut p = vec![0.0; n * ns];
        let mut r = vec![0.0; n];
        for s in 0..ns {
            for a in 0..na {
                let i = self.index(s, a);
                let row = self.transition_row(s, a);
                p[i * ns..(i + 1) * ns].copy_from_slice(row);
                r[i] = row
                    .iter()
                    .enumerate()
                    .map(|(sn, prob)| prob * self.reward(s, a, sn))
                    .sum();
            }
        }
        let d = self.visit.clone();
        let d_min = d.iter().copied().fold(f64::INFINITY, f64::min);
        let d_max = d.iter().copied().fold(0.0, f64::max);
        CompactMatrices {
            num_states: ns,
            num_actions: na,
            discount: self.discount(),
            p,
            r,
            d,
            d_min,
            d_max,
        }
    }
}

/// A Q-function flattened in action-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct QVector {
    values: Vec<f64>,
    num_states: usize,
}

impl QVector {
    pub fn zeros(num_states: usize, num_actions: usize) -> Self {
        Self {
            values: vec![0.0; num_states * num_actions],
            num_states,
        }
    }

    /// Wraps an action-major vector.
    ///
    /// # Panics
    /// If `values.len()` is not a multiple of `num_states`.
    pub fn from_vec(num_states: usize, values: Vec<f64>) -> Self {
        assert!(
            num_states > 0 && values.len() % num_states == 0,
            "length {} is not a multiple of |S| = {num_states}",
            values.len()
        );
        Self { values, num_states }
    }

    /// Builds a vector from `f(s, a)`.
    pub fn from_fn(num_states: usize, num_actions: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut q = Self::zeros(num_states, num_actions);
        for a in 0..num_actions {
            for s in 0..num_states {
                q.values[a * num_states + s] = f(s, a);
            }
        }
        q
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.values.len() / self.num_states
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn index(&self, s: usize, a: usize) -> usize {
        a * self.num_states + s
    }

    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.values[self.index(s, a)]
    }

    pub fn set(&mut self, s: usize, a: usize, v: f64) {
        let i = self.index(s, a);
        self.values[i] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    pub fn inf_norm(&self) -> f64 {
        inf_norm(&self.values)
    }

    /// Elementwise `self - other`.
    pub fn sub(&self, other: &QVector) -> QVector {
        assert_eq!(self.len(), other.len());
        QVector {
            values: self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect(),
            num_states: self.num_states,
        }
    }

    /// `max_u q(s, u)`.
    pub fn state_max(&self, s: usize) -> f64 {
        (0..self.num_actions())
            .map(|a| self.get(s, a))
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

pub(crate) fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

/// Deterministic policy: one action per state.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Policy(pub Vec<usize>);

impl Policy {
    pub fn action(&self, s: usize) -> usize {
        self.0[s]
    }

    pub fn num_states(&self) -> usize {
        self.0.len()
    }

    /// One-hot encoding as a stochastic policy.
    pub fn to_stochastic(&self, num_actions: usize) -> StochasticPolicy {
        let ns = self.0.len();
        let mut probs = vec![0.0; ns * num_actions];
        for (s, &a) in self.0.iter().enumerate() {
            probs[s * num_actions + a] = 1.0;
        }
        StochasticPolicy { probs, num_actions }
    }

    /// `Π^π` for this policy.
    pub fn selector_matrix(&self, num_actions: usize) -> DMatrix<f64> {
        action_transition_matrix(&self.to_stochastic(num_actions))
    }

    /// `Π^π v`: picks `v(s, π(s))` for every state.
    pub fn select_into(&self, v: &[f64], out: &mut [f64]) {
        let ns = self.0.len();
        for (s, (o, &a)) in out.iter_mut().zip(&self.0).enumerate() {
            *o = v[a * ns + s];
        }
    }
}

/// Stochastic policy `π(a|s)`, stored row-major by `(s, a)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StochasticPolicy {
    pub probs: Vec<f64>,
    pub num_actions: usize,
}

impl StochasticPolicy {
    pub fn num_states(&self) -> usize {
        self.probs.len() / self.num_actions
    }
}

/// Greedy policy of `q`; ties go to the lowest action index.
pub fn greedy_policy(q: &QVector) -> Policy {
    let mut out = Policy(vec![0; q.num_states()]);
    greedy_into(q.as_slice(), q.num_states(), &mut out);
    out
}

/// Allocation-free greedy policy for hot loops.
pub(crate) fn greedy_into(q: &[f64], num_states: usize, out: &mut Policy) {
    let na = q.len() / num_states;
    for s in 0..num_states {
        let mut best = 0;
        let mut best_val = q[s];
        for a in 1..na {
            let v = q[a * num_states + s];
            if v > best_val {
                best = a;
                best_val = v;
            }
        }
        out.0[s] = best;
    }
}

/// The `|S| x |S||A|` action transition matrix: row `s` is `π(s)^T ⊗ e_s^T`.
pub fn action_transition_matrix(policy: &StochasticPolicy) -> DMatrix<f64> {
    let ns = policy.num_states();
    let na = policy.num_actions;
    let mut m = DMatrix::zeros(ns, ns * na);
    for s in 0..ns {
        for a in 0..na {
            m[(s, a * ns + s)] = policy.probs[s * na + a];
        }
    }
    m
}

/// The compact matrices `P` (`|S||A| x |S|`), `R` and the diagonal of `D`.
///
/// `P` is stored row-major so the hot loops can take row slices.
#[derive(Debug, Clone, PartialEq)]
pub struct CompactMatrices {
    pub num_states: usize,
    pub num_actions: usize,
    pub discount: f64,
    pub p: Vec<f64>,
    pub r: Vec<f64>,
    pub d: Vec<f64>,
    pub d_min: f64,
    pub d_max: f64,
}

impl CompactMatrices {
    pub fn size(&self) -> usize {
        self.num_states * self.num_actions
    }

    /// Row `i` of `P`: the next-state distribution of pair `i`.
    pub fn p_row(&self, i: usize) -> &[f64] {
        &self.p[i * self.num_states..(i + 1) * self.num_states]
    }

    pub fn p_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.size(), self.num_states, &self.p)
    }

    pub fn d_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(&self.d))
    }

    pub fn r_vector(&self) -> nalgebra::DVector<f64> {
        nalgebra::DVector::from_column_slice(&self.r)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

/// Bellman optimality operator:
/// `(TQ)(s,a) = R(s,a) + γ Σ_{s'} P(s'|s,a) max_u Q(s',u)`.
pub fn bellman_optimality_apply(m: &CompactMatrices, q: &QVector) -> QVector {
    let maxes: Vec<f64> = (0..m.num_states).map(|s| q.state_max(s)).collect();
    let values = (0..m.size())
        .map(|i| m.r[i] + m.discount * dot(m.p_row(i), &maxes))
        .collect();
    QVector::from_vec(m.num_states, values)
}

/// Default accuracy of the `Q*` oracle.
pub const QSTAR_TOL: f64 = 1e-12;

/// Computes `Q*` by value iteration from zero, then evaluates the greedy
/// policy of the result exactly.
///
/// Value iteration stops once `‖TQ - Q‖∞ <= tol (1-γ)/γ`, which puts the
/// iterate within `tol` of the fixed point, or after the residual has not
/// improved for 100 sweeps. The policy evaluation solve replaces the iterate
/// when its Bellman residual is no larger.
pub fn solve_qstar(mdp: &Mdp, tol: f64) -> QVector {
    let m = mdp.compact();
    let q = value_iteration(&m, tol);
    let policy = greedy_policy(&q);
    match evaluate_policy(&m, &policy) {
        Some(exact) => {
            let res = |v: &QVector| bellman_optimality_apply(&m, v).sub(v).inf_norm();
            if greedy_policy(&exact) == policy && res(&exact) <= res(&q) {
                exact
            } else {
                q
            }
        }
        None => q,
    }
}

/// `Q_π = (I − γ P Π_π)⁻¹ R` for a deterministic policy.
pub fn evaluate_policy(m: &CompactMatrices, policy: &Policy) -> Option<QVector> {
    let n = m.size();
    let sel = policy.selector_matrix(m.num_actions);
    let lhs = DMatrix::identity(n, n) - m.p_matrix() * sel * m.discount;
    let sol = lhs.lu().solve(&m.r_vector())?;
    Some(QVector::from_vec(m.num_states, sol.as_slice().to_vec()))
}

fn value_iteration(m: &CompactMatrices, tol: f64) -> QVector {
    assert!(tol > 0.0, "tol must be positive");
    let gamma = m.discount;
    let mut q = QVector::zeros(m.num_states, m.num_actions);
    if gamma == 0.0 {
        return bellman_optimality_apply(m, &q);
    }
    let threshold = tol * (1.0 - gamma) / gamma;
    let mut best = f64::INFINITY;
    let mut stalled = 0;
    loop {
        let next = bellman_optimality_apply(m, &q);
        let residual = inf_norm(&next.sub(&q).into_vec());
        q = next;
        if residual <= threshold {
            break;
        }
        if residual < best {
            best = residual;
            stalled = 0;
        } else {
            stalled += 1;
            if stalled >= 100 {
                break;
            }
        }
    }
    q
}

/// Names of the embedded example MDPs.
pub const BUILTINS: [&str; 3] = ["example1", "example3", "paper2state"];

/// Returns the raw description of an embedded example.
///
/// * `example1`: one state, one action, reward 1, γ = 0.9.
/// * `example3`: one state, two actions, reward 1 for action 1, γ = 0.9,
///   uniform behavior.
/// * `paper2state`: the two-state, two-action benchmark with rewards
///   −3, 2, 1, −1 (accepted through [`RewardBound::Scaled`]).
pub fn builtin(name: &str) -> Result<MdpDescription> {
    match name {
        "example1" => Ok(MdpDescription {
            num_states: 1,
            num_actions: 1,
            discount: 0.9,
            transition: vec![1.0],
            reward: vec![1.0],
            behavior_policy: vec![1.0],
            state_dist: vec![1.0],
            reward_bound: RewardBound::Unit,
        }),
        "example3" => Ok(MdpDescription {
            num_states: 1,
            num_actions: 2,
            discount: 0.9,
            transition: vec![1.0, 1.0],
            reward: vec![1.0, 0.0],
            behavior_policy: vec![0.5, 0.5],
            state_dist: vec![1.0],
            reward_bound: RewardBound::Unit,
        }),
        "paper2state" => Ok(MdpDescription {
            num_states: 2,
            num_actions: 2,
            discount: 0.9,
            // (s, a, s') row-major: rows (1,1), (1,2), (2,1), (2,2)
            transition: vec![
                0.3863, 0.6137, //
                0.8639, 0.1361, //
                0.3604, 0.6396, //
                0.7971, 0.2029,
            ],
            reward: vec![
                -3.0, -3.0, //
                2.0, 2.0, //
                1.0, 1.0, //
                -1.0, -1.0,
            ],
            behavior_policy: vec![0.2, 0.8, 0.7, 0.3],
            state_dist: vec![0.2, 0.8],
            reward_bound: RewardBound::Scaled,
        }),
        other => Err(Error::UnknownBuiltin(other.to_string())),
    }
}

/// Validated builtin MDP.
pub fn builtin_mdp(name: &str) -> Result<Mdp> {
    builtin(name)?.validate()
}
