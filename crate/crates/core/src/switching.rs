//! Q-learning as a stochastic affine switching system, together with the
//! lower and upper comparison systems and the noise-free error system.
//!
//! For a greedy policy `π` (the mode) the system matrices are
//!
//! ```text
//! A_π = I + α(γ D P Π_π − D)
//! b_π = αγ D P (Π_π − Π_{π*}) Q*
//! B_π = A_π − A_{π*} = αγ D P (Π_π − Π_{π*})
//! ```
//!
//! Two routes compute them. [`realize_matrices`] materializes dense
//! matrices and is the reference. [`SwitchingModel`] applies the same maps
//! in `O(|S|²|A|)` without forming them; the coupled simulator uses it.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::mdp::{dot, greedy_into, greedy_policy, inf_norm, CompactMatrices, Mdp, Policy, QVector, QSTAR_TOL};
use crate::sampler::{check_stepsize, noise_into, Sample, Sampler};

/// Dense `A_Q`, `b_Q`, `B_Q` for one greedy policy.
#[derive(Debug, Clone, PartialEq)]
pub struct SwitchingMatrices {
    pub policy: Policy,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub b_mat: DMatrix<f64>,
}

/// Realizes `A_Q`, `b_Q` and `B_Q` at `q` with the greedy policies of `q`
/// and `q_star`.
pub fn realize_matrices(q: &QVector, q_star: &QVector, m: &CompactMatrices, alpha: f64) -> SwitchingMatrices {
    let policy = greedy_policy(q);
    let star = greedy_policy(q_star);
    let n = m.size();
    let d = m.d_matrix();
    let dp = &d * m.p_matrix();
    let pi_q = policy.selector_matrix(m.num_actions);
    let pi_star = star.selector_matrix(m.num_actions);
    let gamma = m.discount;

    let a = DMatrix::identity(n, n) + (&dp * &pi_q * gamma - &d) * alpha;
    let b_mat = &dp * (&pi_q - &pi_star) * (alpha * gamma);
    let qs = DVector::from_column_slice(q_star.as_slice());
    let b = &b_mat * qs;
    SwitchingMatrices { policy, a, b, b_mat }
}

fn shifted(q_star: &QVector, x: DVector<f64>) -> QVector {
    let v = q_star.as_slice().iter().zip(x.iter()).map(|(s, e)| s + e).collect();
    QVector::from_vec(q_star.num_states(), v)
}

fn error_of(q: &QVector, q_star: &QVector) -> DVector<f64> {
    DVector::from_vec(q.sub(q_star).into_vec())
}

/// Lower comparison system: `Q* + A_{Q*}(q_lower − Q*) + αw`.
///
/// `at_star` must be realized at `Q*`; `w` is the noise of the original
/// system at its current iterate.
pub fn step_lower(q_lower: &QVector, w: &[f64], at_star: &SwitchingMatrices, q_star: &QVector, alpha: f64) -> QVector {
    let x = &at_star.a * error_of(q_lower, q_star) + DVector::from_column_slice(w) * alpha;
    shifted(q_star, x)
}

/// Upper comparison system: `Q* + A_{Q_k}(q_upper − Q*) + αw`.
///
/// `at_current` must be realized at the original iterate `Q_k`, not at
/// `q_upper`.
pub fn step_upper(
    q_upper: &QVector,
    w: &[f64],
    at_current: &SwitchingMatrices,
    q_star: &QVector,
    alpha: f64,
) -> QVector {
    let x = &at_current.a * error_of(q_upper, q_star) + DVector::from_column_slice(w) * alpha;
    shifted(q_star, x)
}

/// Error system: `A_{Q_k} err + B_{Q_k}(q_lower − Q*)`. No noise enters.
pub fn step_error(err: &QVector, q_lower: &QVector, at_current: &SwitchingMatrices, q_star: &QVector) -> QVector {
    let e = DVector::from_column_slice(err.as_slice());
    let v = &at_current.a * e + &at_current.b_mat * error_of(q_lower, q_star);
    QVector::from_vec(err.num_states(), v.iter().copied().collect())
}

/// Original system in switching form: `Q* + A_{Q_k}(Q_k − Q*) + b_{Q_k} + αw`.
pub fn step_original(q: &QVector, w: &[f64], at_current: &SwitchingMatrices, q_star: &QVector, alpha: f64) -> QVector {
    let x = &at_current.a * error_of(q, q_star) + &at_current.b + DVector::from_column_slice(w) * alpha;
    shifted(q_star, x)
}

/// Matrix-free switching model for a fixed MDP, step size and `Q*`.
#[derive(Debug, Clone)]
pub struct SwitchingModel {
    compact: CompactMatrices,
    sampler: Sampler,
    q_star: QVector,
    star_policy: Policy,
    alpha: f64,
}

impl SwitchingModel {
    /// Solves for `Q*` and builds the model.
    pub fn new(mdp: &Mdp, alpha: f64) -> Result<Self> {
        let q_star = crate::mdp::solve_qstar(mdp, QSTAR_TOL);
        Self::with_qstar(mdp, alpha, q_star)
    }

    pub fn with_qstar(mdp: &Mdp, alpha: f64, q_star: QVector) -> Result<Self> {
        check_stepsize(alpha)?;
        Ok(Self {
            compact: mdp.compact(),
            sampler: Sampler::new(mdp),
            star_policy: greedy_policy(&q_star),
            q_star,
            alpha,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn q_star(&self) -> &QVector {
        &self.q_star
    }

    pub fn star_policy(&self) -> &Policy {
        &self.star_policy
    }

    pub fn compact(&self) -> &CompactMatrices {
        &self.compact
    }

    pub fn sampler(&self) -> &Sampler {
        &self.sampler
    }

    pub fn size(&self) -> usize {
        self.compact.size()
    }

    /// `ρ = 1 − α d_min (1 − γ)`.
    pub fn rho(&self) -> f64 {
        1.0 - self.alpha * self.compact.d_min * (1.0 - self.compact.discount)
    }

    /// Dense realization at `q` (reference route).
    pub fn realize(&self, q: &QVector) -> SwitchingMatrices {
        realize_matrices(q, &self.q_star, &self.compact, self.alpha)
    }

    /// `out = A_π x`.
    pub fn apply_a(&self, policy: &Policy, x: &[f64], sel: &mut [f64], out: &mut [f64]) {
        let m = &self.compact;
        let (alpha, gamma) = (self.alpha, m.discount);
        policy.select_into(x, sel);
        for (i, o) in out.iter_mut().enumerate() {
            let d = m.d[i];
            *o = x[i] + alpha * (gamma * d * dot(m.p_row(i), sel) - d * x[i]);
        }
    }

    /// `out = B_π v = αγ D P (Π_π − Π_{π*}) v`.
    pub fn apply_b(&self, policy: &Policy, v: &[f64], diff: &mut [f64], out: &mut [f64]) {
        let m = &self.compact;
        let ns = m.num_states;
        for (s, dd) in diff.iter_mut().enumerate() {
            *dd = v[policy.action(s) * ns + s] - v[self.star_policy.action(s) * ns + s];
        }
        let scale = self.alpha * m.discount;
        for (i, o) in out.iter_mut().enumerate() {
            *o = scale * m.d[i] * dot(m.p_row(i), diff);
        }
    }

    /// `out = b_π`.
    pub fn affine(&self, policy: &Policy, diff: &mut [f64], out: &mut [f64]) {
        self.apply_b(policy, self.q_star.as_slice(), diff, out);
    }

    /// Starts a coupled run at `Q_0 = Q^L_0 = Q^U_0 = q0`.
    pub fn simulator(&self, q0: &QVector, rng: ChaCha8Rng) -> CoupledSimulator<'_> {
        CoupledSimulator::new(self, q0, rng)
    }
}

/// Steps the original, lower, upper and error systems on one shared sample
/// stream. The noise is computed once per step from the original iterate
/// and injected into all three stochastic systems.
///
/// States are kept in error coordinates `x = Q − Q*`.
#[derive(Debug, Clone)]
pub struct CoupledSimulator<'m> {
    model: &'m SwitchingModel,
    rng: ChaCha8Rng,
    k: u64,
    x: Vec<f64>,
    xl: Vec<f64>,
    xu: Vec<f64>,
    err: Vec<f64>,
    q: Vec<f64>,
    q_avg: Vec<f64>,
    policy: Policy,
    w: Vec<f64>,
    last_sample: Option<Sample>,
    last_gap_min: f64,
    last_affine_max: f64,
    // scratch
    sel: Vec<f64>,
    b: Vec<f64>,
    t1: Vec<f64>,
    t2: Vec<f64>,
    t3: Vec<f64>,
}

impl<'m> CoupledSimulator<'m> {
    pub fn new(model: &'m SwitchingModel, q0: &QVector, rng: ChaCha8Rng) -> Self {
        Self::with_start(model, &StartState::coincident(q0.clone()), rng)
    }

    /// Starts from separate comparison-system initial conditions.
    ///
    /// # Panics
    /// If the lengths disagree with the model or `Q^L_0 <= Q_0 <= Q^U_0`
    /// fails elementwise.
    pub fn with_start(model: &'m SwitchingModel, start: &StartState, rng: ChaCha8Rng) -> Self {
        let n = model.size();
        let ns = model.compact.num_states;
        for v in [&start.q, &start.lower, &start.upper] {
            assert_eq!(v.len(), n, "initial vector has the wrong length");
        }
        assert!(start.is_ordered(), "need Q^L_0 <= Q_0 <= Q^U_0");
        let x: Vec<f64> = start.q.sub(&model.q_star).into_vec();
        let xl: Vec<f64> = start.lower.sub(&model.q_star).into_vec();
        let xu: Vec<f64> = start.upper.sub(&model.q_star).into_vec();
        let err = xu.iter().zip(&xl).map(|(u, l)| u - l).collect();
        let mut sim = Self {
            model,
            rng,
            k: 0,
            xl,
            xu,
            x,
            err,
            q: vec![0.0; n],
            q_avg: vec![0.0; n],
            policy: Policy(vec![0; ns]),
            w: vec![0.0; n],
            last_sample: None,
            last_gap_min: 0.0,
            last_affine_max: 0.0,
            sel: vec![0.0; ns],
            b: vec![0.0; n],
            t1: vec![0.0; n],
            t2: vec![0.0; n],
            t3: vec![0.0; n],
        };
        sim.refresh_iterate();
        sim.q_avg.copy_from_slice(&sim.q);
        sim
    }

    fn refresh_iterate(&mut self) {
        for ((q, s), x) in self.q.iter_mut().zip(self.model.q_star.as_slice()).zip(&self.x) {
            *q = s + x;
        }
        greedy_into(&self.q, self.model.compact.num_states, &mut self.policy);
    }

    /// Consumes one sample and advances every system by one step.
    pub fn step(&mut self) -> Sample {
        let model = self.model;
        let m = &model.compact;
        let alpha = model.alpha;
        let sample = model.sampler.sample(&mut self.rng);

        noise_into(m, &self.q, &self.policy, &sample, &mut self.sel, &mut self.w);

        let kp1 = (self.k + 1) as f64;
        for (avg, q) in self.q_avg.iter_mut().zip(&self.q) {
            *avg += (q - *avg) / kp1;
        }

        // Per-step gaps h_{Q_k} >= 0 and b_{Q_k} <= 0.
        model.apply_b(&self.policy, &self.q, &mut self.sel, &mut self.t1);
        self.last_gap_min = self.t1.iter().copied().fold(f64::INFINITY, f64::min);
        model.affine(&self.policy, &mut self.sel, &mut self.b);
        self.last_affine_max = self.b.iter().copied().fold(f64::NEG_INFINITY, f64::max);

        // error system, from the pre-step lower state
        model.apply_a(&self.policy, &self.err, &mut self.sel, &mut self.t1);
        model.apply_b(&self.policy, &self.xl, &mut self.sel, &mut self.t2);
        for ((e, a), bx) in self.err.iter_mut().zip(&self.t1).zip(&self.t2) {
            *e = a + bx;
        }

        model.apply_a(&self.policy, &self.x, &mut self.sel, &mut self.t1);
        model.apply_a(&self.policy, &self.xu, &mut self.sel, &mut self.t2);
        model.apply_a(&model.star_policy, &self.xl, &mut self.sel, &mut self.t3);
        for i in 0..self.x.len() {
            let aw = alpha * self.w[i];
            self.x[i] = self.t1[i] + self.b[i] + aw;
            self.xu[i] = self.t2[i] + aw;
            self.xl[i] = self.t3[i] + aw;
        }

        self.k += 1;
        self.last_sample = Some(sample);
        self.refresh_iterate();
        sample
    }

    pub fn step_count(&self) -> u64 {
        self.k
    }

    /// Current `Q_k`.
    pub fn q(&self) -> &[f64] {
        &self.q
    }

    /// Current `Q̃_k`.
    pub fn q_avg(&self) -> &[f64] {
        &self.q_avg
    }

    /// `Q_k − Q*`.
    pub fn error(&self) -> &[f64] {
        &self.x
    }

    /// `Q^L_k − Q*`.
    pub fn lower_error(&self) -> &[f64] {
        &self.xl
    }

    /// `Q^U_k − Q*`.
    pub fn upper_error(&self) -> &[f64] {
        &self.xu
    }

    /// `Q^U_k − Q^L_k` as propagated by the error system.
    pub fn gap(&self) -> &[f64] {
        &self.err
    }

    /// Noise that produced the current step (zero before the first step).
    pub fn last_noise(&self) -> &[f64] {
        &self.w
    }

    pub fn last_sample(&self) -> Option<Sample> {
        self.last_sample
    }

    /// `min h_{Q_{k-1}}` of the last step (should be `>= 0`).
    pub fn last_gap_min(&self) -> f64 {
        self.last_gap_min
    }

    /// `max b_{Q_{k-1}}` of the last step (should be `<= 0`).
    pub fn last_affine_max(&self) -> f64 {
        self.last_affine_max
    }

    pub fn policy(&self) -> &Policy {
        &self.policy
    }

    /// Worst sandwich slack `min_i min(x_i − x^L_i, x^U_i − x_i)` and its
    /// index. Negative values are violations.
    pub fn sandwich_slack(&self) -> (f64, usize) {
        let mut worst = (f64::INFINITY, 0);
        for i in 0..self.x.len() {
            let s = (self.x[i] - self.xl[i]).min(self.xu[i] - self.x[i]);
            if s < worst.0 {
                worst = (s, i);
            }
        }
        worst
    }

    /// Snapshot of the current step.
    pub fn record(&self) -> TrajectoryRecord {
        let qs = self.model.q_star.as_slice();
        let ns = self.model.compact.num_states;
        let plus = |x: &[f64]| QVector::from_vec(ns, qs.iter().zip(x).map(|(s, e)| s + e).collect());
        TrajectoryRecord {
            k: self.k,
            q: QVector::from_vec(ns, self.q.clone()),
            q_lower: plus(&self.xl),
            q_upper: plus(&self.xu),
            q_avg: QVector::from_vec(ns, self.q_avg.clone()),
            err_upper_lower: QVector::from_vec(ns, self.err.clone()),
            sample: self.last_sample,
            noise_infnorm: self.last_sample.map(|_| inf_norm(&self.w)),
        }
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// Initial conditions of the original and comparison systems.
#[derive(Debug, Clone, PartialEq)]
pub struct StartState {
    pub q: QVector,
    pub lower: QVector,
    pub upper: QVector,
}

impl StartState {
    /// `Q^L_0 = Q^U_0 = Q_0`.
    pub fn coincident(q0: QVector) -> Self {
        Self {
            lower: q0.clone(),
            upper: q0.clone(),
            q: q0,
        }
    }

    /// `Q^L_0 = Q_0 − spread`, `Q^U_0 = Q_0 + spread` elementwise.
    pub fn spread(q0: QVector, spread: f64) -> Self {
        let ns = q0.num_states();
        let shift = |d: f64| QVector::from_vec(ns, q0.as_slice().iter().map(|v| v + d).collect());
        Self {
            lower: shift(-spread),
            upper: shift(spread),
            q: q0,
        }
    }

    pub fn is_ordered(&self) -> bool {
        let (l, q, u) = (self.lower.as_slice(), self.q.as_slice(), self.upper.as_slice());
        l.iter().zip(q).zip(u).all(|((l, q), u)| l <= q && q <= u)
    }
}

/// State of all systems after `k` steps. `sample` and `noise_infnorm`
/// describe the step that produced it and are absent at `k = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub k: u64,
    pub q: QVector,
    pub q_lower: QVector,
    pub q_upper: QVector,
    pub q_avg: QVector,
    pub err_upper_lower: QVector,
    pub sample: Option<Sample>,
    pub noise_infnorm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoupledTrajectory {
    pub q_star: QVector,
    pub records: Vec<TrajectoryRecord>,
}

/// Runs one coupled trajectory of `num_steps` steps from `q0` and keeps
/// every `stride`-th record (plus the final one).
pub fn co_simulate(model: &SwitchingModel, num_steps: u64, seed: u64, q0: &QVector, stride: u64) -> CoupledTrajectory {
    co_simulate_from(model, num_steps, seed, &StartState::coincident(q0.clone()), stride)
}

/// [`co_simulate`] with separate comparison-system initial conditions.
pub fn co_simulate_from(
    model: &SwitchingModel,
    num_steps: u64,
    seed: u64,
    start: &StartState,
    stride: u64,
) -> CoupledTrajectory {
    use rand::SeedableRng;
    let stride = stride.max(1);
    let mut sim = CoupledSimulator::with_start(model, start, ChaCha8Rng::seed_from_u64(seed));
    let mut records = vec![sim.record()];
    for k in 1..=num_steps {
        sim.step();
        if k % stride == 0 || k == num_steps {
            records.push(sim.record());
        }
    }
    CoupledTrajectory {
        q_star: model.q_star.clone(),
        records,
    }
}

/// Iterates `x_{k+1} = A_{H_k} x_k` under an externally chosen mode sequence
/// (cycled when shorter than `num_steps`) and returns `‖Q_k − Q*‖∞` for
/// `k = 0..=num_steps`.
pub fn simulate_deterministic_switched(
    model: &SwitchingModel,
    q0: &QVector,
    policies: &[Policy],
    num_steps: usize,
) -> Vec<f64> {
    assert!(!policies.is_empty(), "need at least one mode");
    let n = model.size();
    let mut x = q0.sub(&model.q_star).into_vec();
    let mut next = vec![0.0; n];
    let mut sel = vec![0.0; model.compact.num_states];
    let mut norms = Vec::with_capacity(num_steps + 1);
    norms.push(inf_norm(&x));
    for k in 0..num_steps {
        model.apply_a(&policies[k % policies.len()], &x, &mut sel, &mut next);
        std::mem::swap(&mut x, &mut next);
        norms.push(inf_norm(&x));
    }
    norms
}

/// Uniformly random deterministic policy.
pub fn random_policy<R: Rng + ?Sized>(rng: &mut R, num_states: usize, num_actions: usize) -> Policy {
    Policy((0..num_states).map(|_| rng.gen_range(0..num_actions)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::builtin_mdp;
    use crate::sampler::noise_vector;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;

    fn model(name: &str, alpha: f64) -> SwitchingModel {
        SwitchingModel::new(&builtin_mdp(name).unwrap(), alpha).unwrap()
    }

    #[test]
    fn example1_matrices() {
        for alpha in [0.1, 0.5, 0.9] {
            let m = model("example1", alpha);
            let sw = m.realize(&QVector::from_vec(1, vec![3.0]));
            assert_abs_diff_eq!(sw.a[(0, 0)], 1.0 - 0.1 * alpha, epsilon = 1e-15);
            assert_eq!(sw.b[0], 0.0);
        }
    }

    #[test]
    fn example3_affine_term() {
        let alpha = 0.3;
        let m = model("example3", alpha);
        // Q(1,1) < Q(1,2): the greedy policy picks action 2
        let sw = m.realize(&QVector::from_vec(1, vec![0.0, 1.0]));
        assert_eq!(sw.policy, Policy(vec![1]));
        // b = α · (−0.9 [0.5; 0.5]) since Q* = (10, 9)
        for i in 0..2 {
            assert_abs_diff_eq!(sw.b[i], alpha * -0.45, epsilon = 1e-9);
        }
        let sw = m.realize(&QVector::from_vec(1, vec![1.0, 1.0]));
        assert_eq!(sw.b.iter().copied().collect::<Vec<_>>(), vec![0.0, 0.0]);
    }

    #[test]
    fn realize_at_qstar_has_no_switching_terms() {
        let m = model("paper2state", 0.2);
        let sw = m.realize(m.q_star());
        assert!(sw.b_mat.iter().all(|&v| v == 0.0));
        assert!(sw.b.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn structured_operators_match_dense() {
        let m = model("paper2state", 0.37);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = m.size();
        let mut sel = vec![0.0; 2];
        let mut out = vec![0.0; n];
        for _ in 0..200 {
            let q = QVector::from_vec(2, (0..n).map(|_| rng.gen_range(-20.0..20.0)).collect());
            let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let sw = m.realize(&q);
            let dv = DVector::from_column_slice(&v);

            m.apply_a(&sw.policy, &v, &mut sel, &mut out);
            let dense = &sw.a * &dv;
            for i in 0..n {
                assert_abs_diff_eq!(out[i], dense[i], epsilon = 1e-12);
            }
            m.apply_b(&sw.policy, &v, &mut sel, &mut out);
            let dense = &sw.b_mat * &dv;
            for i in 0..n {
                assert_abs_diff_eq!(out[i], dense[i], epsilon = 1e-12);
            }
            m.affine(&sw.policy, &mut sel, &mut out);
            for (o, b) in out.iter().zip(sw.b.iter()) {
                assert_abs_diff_eq!(*o, *b, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn lower_and_upper_equilibria() {
        let m = model("paper2state", 0.1);
        let qs = m.q_star().clone();
        let at_star = m.realize(&qs);
        let zero = vec![0.0; 4];
        assert_eq!(step_lower(&qs, &zero, &at_star, &qs, 0.1), qs);
        assert_eq!(step_upper(&qs, &zero, &at_star, &qs, 0.1), qs);
        let e = step_error(&QVector::zeros(2, 2), &qs, &at_star, &qs);
        assert!(e.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lower_contracts_without_noise() {
        let m = model("paper2state", 0.6);
        let qs = m.q_star().clone();
        let at_star = m.realize(&qs);
        let rho = m.rho();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let ql = QVector::from_vec(2, (0..4).map(|_| rng.gen_range(-30.0..30.0)).collect());
            let next = step_lower(&ql, &[0.0; 4], &at_star, &qs, 0.6);
            assert!(next.sub(&qs).inf_norm() <= rho * ql.sub(&qs).inf_norm() + 1e-12);
        }
    }

    #[test]
    fn upper_minus_original_after_one_step_is_minus_b() {
        let alpha = 0.25;
        let m = model("paper2state", alpha);
        let qs = m.q_star().clone();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let q0 = QVector::from_vec(2, (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let smp = m.sampler().sample(&mut rng);
            let w = noise_vector(&q0, &smp, m.compact());
            let sw = m.realize(&q0);
            let up = step_upper(&q0, &w, &sw, &qs, alpha);
            let orig = step_original(&q0, &w, &sw, &qs, alpha);
            for i in 0..4 {
                let gap = up.as_slice()[i] - orig.as_slice()[i];
                assert_abs_diff_eq!(gap, -sw.b[i], epsilon = 1e-12);
                assert!(gap >= -1e-12);
            }
        }
    }

    #[test]
    fn error_system_is_upper_minus_lower() {
        let alpha = 0.4;
        let m = model("paper2state", alpha);
        let qs = m.q_star().clone();
        let at_star = m.realize(&qs);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let rnd = |rng: &mut ChaCha8Rng| QVector::from_vec(2, (0..4).map(|_| rng.gen_range(-20.0..20.0)).collect());
        for _ in 0..200 {
            let (q, ql, qu) = (rnd(&mut rng), rnd(&mut rng), rnd(&mut rng));
            let w: Vec<f64> = (0..4).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let sw = m.realize(&q);
            let err = qu.sub(&ql);
            let via_error = step_error(&err, &ql, &sw, &qs);
            let diff = step_upper(&qu, &w, &sw, &qs, alpha).sub(&step_lower(&ql, &w, &at_star, &qs, alpha));
            for i in 0..4 {
                assert_abs_diff_eq!(via_error.as_slice()[i], diff.as_slice()[i], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn example1_systems_coincide() {
        for alpha in [0.1, 0.5] {
            let m = model("example1", alpha);
            let traj = co_simulate(&m, 500, 7, &QVector::from_vec(1, vec![-0.3]), 1);
            for r in &traj.records {
                assert_eq!(r.q, r.q_lower);
                assert_eq!(r.q, r.q_upper);
                assert_eq!(r.err_upper_lower.as_slice(), &[0.0]);
            }
        }
    }

    #[test]
    fn co_simulate_is_deterministic() {
        let m = model("paper2state", 0.05);
        let q0 = QVector::from_vec(2, vec![0.5, -0.5, 0.25, 0.0]);
        let a = co_simulate(&m, 300, 42, &q0, 7);
        let b = co_simulate(&m, 300, 42, &q0, 7);
        assert_eq!(a, b);
        assert_eq!(a.records.len(), 1 + 300 / 7 + 1);
        assert_eq!(a.records.last().unwrap().k, 300);
    }

    #[test]
    fn coupled_sandwich_and_gap_consistency() {
        let m = model("paper2state", 0.9);
        let q0 = QVector::zeros(2, 2);
        let mut sim = m.simulator(&q0, ChaCha8Rng::seed_from_u64(3));
        for _ in 0..2000 {
            sim.step();
            assert!(sim.sandwich_slack().0 >= -1e-12);
            assert!(sim.last_gap_min() >= 0.0);
            assert!(sim.last_affine_max() <= 0.0);
            for i in 0..4 {
                let direct = sim.upper_error()[i] - sim.lower_error()[i];
                assert_abs_diff_eq!(sim.gap()[i], direct, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn spread_start_keeps_ordering() {
        let m = model("paper2state", 0.3);
        let start = StartState::spread(QVector::from_vec(2, vec![0.2, -0.4, 1.0, 0.0]), 2.0);
        assert!(start.is_ordered());
        let mut sim = CoupledSimulator::with_start(&m, &start, ChaCha8Rng::seed_from_u64(8));
        for g in sim.gap() {
            assert_abs_diff_eq!(*g, 4.0, epsilon = 1e-13);
        }
        for _ in 0..3000 {
            sim.step();
            assert!(sim.sandwich_slack().0 >= -1e-12);
            for i in 0..4 {
                let direct = sim.upper_error()[i] - sim.lower_error()[i];
                assert_abs_diff_eq!(sim.gap()[i], direct, epsilon = 1e-9);
            }
        }
    }

    #[test]
    #[should_panic(expected = "Q^L_0 <= Q_0 <= Q^U_0")]
    fn unordered_start_rejected() {
        let m = model("example1", 0.3);
        let mut start = StartState::coincident(QVector::from_vec(1, vec![0.0]));
        start.lower = QVector::from_vec(1, vec![1.0]);
        let _ = CoupledSimulator::with_start(&m, &start, ChaCha8Rng::seed_from_u64(0));
    }

    #[test]
    fn deterministic_switching_decays() {
        let m = model("paper2state", 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let pols: Vec<Policy> = (0..50).map(|_| random_policy(&mut rng, 2, 2)).collect();
        let q0 = QVector::from_vec(2, vec![1.0, -1.0, 0.5, 0.0]);
        let norms = simulate_deterministic_switched(&m, &q0, &pols, 200);
        let rho = m.rho();
        for (k, n) in norms.iter().enumerate() {
            assert!(*n <= rho.powi(k as i32) * norms[0] + 1e-10);
        }
        let at_star = simulate_deterministic_switched(&m, m.q_star(), &pols, 20);
        assert!(at_star.iter().all(|&v| v == 0.0));
    }
}
