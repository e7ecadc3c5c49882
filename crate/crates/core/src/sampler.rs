//! I.i.d. transition sampling and constant step-size Q-learning.

use rand::Rng;

use crate::error::{Error, Result};
use crate::mdp::{dot, greedy_into, CompactMatrices, Mdp, Policy, QVector};

/// One observed transition `(s, a, s', r)` (0-based indices).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub s: usize,
    pub a: usize,
    pub s_next: usize,
    pub r: f64,
}

/// Draws `s ~ p`, `a ~ β(.|s)`, `s' ~ P(.|s,a)` by inverse transform over
/// precomputed cumulative rows.
#[derive(Debug, Clone)]
pub struct Sampler {
    num_states: usize,
    num_actions: usize,
    state_cdf: Vec<f64>,
    behavior_cdf: Vec<f64>,
    transition_cdf: Vec<f64>,
    reward: Vec<f64>,
}

fn cumulative(rows: &[f64], width: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows.len());
    for row in rows.chunks(width) {
        let mut acc = 0.0;
        for p in row {
            acc += p;
            out.push(acc);
        }
    }
    out
}

/// First index whose cumulative mass exceeds `u`. Falls back to the last
/// index with positive mass when rounding leaves the row total below `u`.
fn invert(cdf: &[f64], u: f64) -> usize {
    match cdf.iter().position(|&c| u < c) {
        Some(i) => i,
        None => {
            let total = *cdf.last().unwrap();
            cdf.iter().position(|&c| c >= total).unwrap()
        }
    }
}

impl Sampler {
    pub fn new(mdp: &Mdp) -> Self {
        let desc = mdp.description();
        Self {
            num_states: mdp.num_states(),
            num_actions: mdp.num_actions(),
            state_cdf: cumulative(&desc.state_dist, mdp.num_states()),
            behavior_cdf: cumulative(&desc.behavior_policy, mdp.num_actions()),
            transition_cdf: cumulative(&desc.transition, mdp.num_states()),
            reward: desc.reward.clone(),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Sample {
        let (ns, na) = (self.num_states, self.num_actions);
        let s = invert(&self.state_cdf, rng.gen());
        let a = invert(&self.behavior_cdf[s * na..(s + 1) * na], rng.gen());
        let row = (s * na + a) * ns;
        let s_next = invert(&self.transition_cdf[row..row + ns], rng.gen());
        Sample {
            s,
            a,
            s_next,
            r: self.reward[row + s_next],
        }
    }
}

/// State of Algorithm 1: the iterate `Q_k`, the running average `Q̃_k` and
/// the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnerState {
    pub q: QVector,
    pub q_avg: QVector,
    pub step_count: u64,
    pub stepsize: f64,
}

pub(crate) fn check_stepsize(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::StepSize(alpha))
    }
}

impl LearnerState {
    /// Starts from `Q_0 = q0` with `Q̃_0 = Q_0`.
    pub fn new(q0: QVector, stepsize: f64) -> Result<Self> {
        check_stepsize(stepsize)?;
        Ok(Self {
            q_avg: q0.clone(),
            q: q0,
            step_count: 0,
            stepsize,
        })
    }

    /// Applies one asynchronous update with `sample`.
    pub fn step(&mut self, mdp_discount: f64, sample: &Sample) {
        let k = self.step_count as f64;
        for (avg, q) in self.q_avg.as_mut_slice().iter_mut().zip(self.q.as_slice()) {
            *avg += (q - *avg) / (k + 1.0);
        }
        let target = sample.r + mdp_discount * self.q.state_max(sample.s_next);
        let old = self.q.get(sample.s, sample.a);
        self.q.set(sample.s, sample.a, old + self.stepsize * (target - old));
        self.step_count += 1;
    }
}

/// Functional form of [`LearnerState::step`].
pub fn qlearning_step(state: &LearnerState, discount: f64, sample: &Sample) -> LearnerState {
    let mut next = state.clone();
    next.step(discount, sample);
    next
}

/// Uniform bound `max(R_max, ‖Q_0‖∞) / (1 - γ)` on every iterate.
pub fn q_max(mdp: &Mdp, q0: &QVector) -> f64 {
    mdp.r_max().max(q0.inf_norm()) / (1.0 - mdp.discount())
}

/// Drift `DR + γ D P Π_q q - D q` of the vector recursion.
pub fn expected_update(q: &QVector, m: &CompactMatrices) -> Vec<f64> {
    let mut policy = Policy(vec![0; m.num_states]);
    greedy_into(q.as_slice(), m.num_states, &mut policy);
    let mut sel = vec![0.0; m.num_states];
    let mut out = vec![0.0; m.size()];
    drift_into(m, q.as_slice(), &policy, &mut sel, &mut out);
    out
}

/// `out = DR + γ D P Π q - D q` for the supplied greedy policy.
pub(crate) fn drift_into(m: &CompactMatrices, q: &[f64], policy: &Policy, sel: &mut [f64], out: &mut [f64]) {
    policy.select_into(q, sel);
    let gamma = m.discount;
    for (i, o) in out.iter_mut().enumerate() {
        let d = m.d[i];
        *o = d * m.r[i] + gamma * d * dot(m.p_row(i), sel) - d * q[i];
    }
}

/// Noise `w = e r + γ e e_{s'}^T Π_q q - e e^T q - (DR + γDPΠ_q q - Dq)`
/// with `e = e_a ⊗ e_s`.
pub fn noise_vector(q: &QVector, sample: &Sample, m: &CompactMatrices) -> Vec<f64> {
    let mut policy = Policy(vec![0; m.num_states]);
    greedy_into(q.as_slice(), m.num_states, &mut policy);
    let mut sel = vec![0.0; m.num_states];
    let mut out = vec![0.0; m.size()];
    noise_into(m, q.as_slice(), &policy, sample, &mut sel, &mut out);
    out
}

pub(crate) fn noise_into(
    m: &CompactMatrices,
    q: &[f64],
    policy: &Policy,
    sample: &Sample,
    sel: &mut [f64],
    out: &mut [f64],
) {
    drift_into(m, q, policy, sel, out);
    for o in out.iter_mut() {
        *o = -*o;
    }
    let i = sample.a * m.num_states + sample.s;
    let observed = sample.r + m.discount * sel[sample.s_next] - q[i];
    out[i] += observed;
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{builtin_mdp, solve_qstar, QSTAR_TOL};
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn example1_sampler_is_degenerate() {
        let mdp = builtin_mdp("example1").unwrap();
        let sampler = Sampler::new(&mdp);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            assert_eq!(
                sampler.sample(&mut rng),
                Sample {
                    s: 0,
                    a: 0,
                    s_next: 0,
                    r: 1.0
                }
            );
        }
    }

    #[test]
    fn sampler_is_deterministic_per_seed() {
        let mdp = builtin_mdp("paper2state").unwrap();
        let sampler = Sampler::new(&mdp);
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..50).map(|_| sampler.sample(&mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(draw(11), draw(11));
        assert_ne!(draw(11), draw(12));
    }

    #[test]
    fn sample_rewards_come_from_table() {
        let mdp = builtin_mdp("paper2state").unwrap();
        let sampler = Sampler::new(&mdp);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let smp = sampler.sample(&mut rng);
            assert_eq!(smp.r, mdp.reward(smp.s, smp.a, smp.s_next));
        }
    }

    #[test]
    fn invert_handles_rounding_shortfall() {
        let cdf = [0.3, 0.6, 0.9999999999999999];
        assert_eq!(invert(&cdf, 0.99999999999999999), 2);
        assert_eq!(invert(&[0.5, 0.5, 1.0], 0.5), 2);
        assert_eq!(invert(&[0.5, 1.0, 1.0], 0.9999999), 1);
    }

    #[test]
    fn example1_single_step() {
        let mdp = builtin_mdp("example1").unwrap();
        let mut st = LearnerState::new(QVector::zeros(1, 1), 0.5).unwrap();
        st.step(
            mdp.discount(),
            &Sample {
                s: 0,
                a: 0,
                s_next: 0,
                r: 1.0,
            },
        );
        assert_eq!(st.q.as_slice(), &[0.5]);
        assert_eq!(st.q_avg.as_slice(), &[0.0]);
        assert_eq!(st.step_count, 1);
    }

    #[test]
    fn fixed_point_is_stationary_in_example1() {
        let mdp = builtin_mdp("example1").unwrap();
        let st = LearnerState::new(QVector::from_vec(1, vec![10.0]), 0.3).unwrap();
        let smp = Sample {
            s: 0,
            a: 0,
            s_next: 0,
            r: 1.0,
        };
        let next = qlearning_step(&st, mdp.discount(), &smp);
        assert_abs_diff_eq!(next.q.as_slice()[0], 10.0, epsilon = 1e-14);
    }

    #[test]
    fn only_sampled_entry_changes() {
        let mdp = builtin_mdp("paper2state").unwrap();
        let q0 = QVector::from_vec(2, vec![0.1, -0.2, 0.3, 0.4]);
        let st = LearnerState::new(q0.clone(), 0.2).unwrap();
        let smp = Sample {
            s: 1,
            a: 1,
            s_next: 0,
            r: -1.0,
        };
        let next = qlearning_step(&st, mdp.discount(), &smp);
        for i in 0..4 {
            if i != 3 {
                assert_eq!(next.q.as_slice()[i], q0.as_slice()[i]);
            }
        }
        let want = 0.4 + 0.2 * (-1.0 + 0.9 * 0.3_f64.max(0.1) - 0.4);
        assert_abs_diff_eq!(next.q.as_slice()[3], want, epsilon = 1e-15);
    }

    #[test]
    fn bad_stepsize_rejected() {
        for a in [0.0, 1.0, -0.5, 1.5] {
            assert_eq!(LearnerState::new(QVector::zeros(1, 1), a), Err(Error::StepSize(a)));
        }
    }

    #[test]
    fn example1_noise_is_zero() {
        let mdp = builtin_mdp("example1").unwrap();
        let m = mdp.compact();
        for q in [-1.0, 0.0, 0.37, 10.0] {
            let w = noise_vector(
                &QVector::from_vec(1, vec![q]),
                &Sample {
                    s: 0,
                    a: 0,
                    s_next: 0,
                    r: 1.0,
                },
                &m,
            );
            assert_eq!(w, vec![0.0]);
        }
    }

    #[test]
    fn example1_drift_at_zero() {
        let m = builtin_mdp("example1").unwrap().compact();
        assert_eq!(expected_update(&QVector::zeros(1, 1), &m), vec![1.0]);
    }

    #[test]
    fn drift_vanishes_at_qstar() {
        let mdp = builtin_mdp("paper2state").unwrap();
        let qs = solve_qstar(&mdp, QSTAR_TOL);
        let g = expected_update(&qs, &mdp.compact());
        assert!(g.iter().all(|x| x.abs() < 1e-12), "{g:?}");
    }

    #[test]
    fn paper2state_visit_frequency() {
        let mdp = builtin_mdp("paper2state").unwrap();
        let sampler = Sampler::new(&mdp);
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let n = 1_000_000;
        let hits = (0..n)
            .filter(|_| {
                let s = sampler.sample(&mut rng);
                s.s == 1 && s.a == 0
            })
            .count();
        let freq = hits as f64 / n as f64;
        assert!((freq - 0.56).abs() < 0.002, "freq {freq}");
    }
}
