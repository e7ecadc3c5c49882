//! Seeded Monte Carlo ensembles, the invariant checklist and step-size
//! comparisons.
//!
//! Trials run in parallel, but each owns its RNG stream (`base_seed + i`)
//! and results are folded in trial order, so every statistic is
//! bit-reproducible regardless of thread count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Dirichlet, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::{
    default_margin, lyapunov_certificate, mean_decay_check, sample_complexity, BoundConstants, BoundReport,
    CoordinateEnsemble,
};
use crate::error::{Error, Result};
use crate::mdp::{
    bellman_optimality_apply, builtin_mdp, inf_norm, Mdp, MdpDescription, QVector, BUILTINS,
};
use crate::sampler::{check_stepsize, noise_vector, LearnerState, Sample};
use crate::switching::{
    co_simulate_from, random_policy, simulate_deterministic_switched, CoupledSimulator, CoupledTrajectory, StartState,
    SwitchingModel,
};

/// Sandwich violations beyond this abort a run.
pub const SANDWICH_TOL: f64 = 1e-12;

const BATCH: usize = 256;

/// How each trial draws `Q_0`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase", deny_unknown_fields)]
pub enum InitMode {
    /// `Q_0 = 0`.
    #[default]
    Zero,
    /// A fixed vector ordered by `(s, a)` like `behavior_policy`.
    Fixed { values: Vec<f64> },
    /// Entries i.i.d. uniform on `[−1, 1]`.
    Uniform,
    /// `Q_0 = Q* + u`, `u` i.i.d. uniform on `[−1, 1]`.
    Offset,
}

fn default_stride() -> u64 {
    10
}

/// One Monte Carlo experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Builtin name, `random` (seeded by `base_seed`) or a path to an MDP file.
    pub mdp: String,
    pub alpha: f64,
    pub num_steps: u64,
    pub num_trials: usize,
    pub base_seed: u64,
    #[serde(default)]
    pub q0: InitMode,
    #[serde(default = "default_stride")]
    pub record_stride: u64,
    /// Start the comparison systems at `Q_0 ∓ spread`.
    #[serde(default)]
    pub spread: f64,
}

impl ExperimentConfig {
    pub fn new(mdp: impl Into<String>, alpha: f64, num_steps: u64, num_trials: usize, base_seed: u64) -> Self {
        Self {
            mdp: mdp.into(),
            alpha,
            num_steps,
            num_trials,
            base_seed,
            q0: InitMode::Zero,
            record_stride: default_stride(),
            spread: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_stepsize(self.alpha)?;
        let positive = |name: &'static str, v: u64| {
            if v == 0 {
                Err(Error::InvalidArgument {
                    name,
                    reason: "must be at least 1".into(),
                })
            } else {
                Ok(())
            }
        };
        positive("num_steps", self.num_steps)?;
        positive("num_trials", self.num_trials as u64)?;
        positive("record_stride", self.record_stride)?;
        if !(self.spread >= 0.0 && self.spread.is_finite()) {
            return Err(Error::InvalidArgument {
                name: "spread",
                reason: format!("must be finite and nonnegative, got {}", self.spread),
            });
        }
        Ok(())
    }

    /// Steps at which statistics are recorded: 0, every stride, and the last.
    pub fn recorded_steps(&self) -> Vec<u64> {
        let stride = self.record_stride.max(1);
        let mut ks: Vec<u64> = (0..=self.num_steps).step_by(stride as usize).collect();
        if *ks.last().unwrap() != self.num_steps {
            ks.push(self.num_steps);
        }
        ks
    }
}

fn dirichlet_row<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    Dirichlet::new(&vec![1.0; n]).expect("n >= 2").sample(rng)
}

/// Random MDP with Dirichlet(1) transition and behavior rows, uniform
/// rewards on `[−1, 1]`, a renormalized uniform state distribution and
/// `γ ~ U[0.5, 0.95]`.
pub fn random_mdp_sized<R: Rng + ?Sized>(rng: &mut R, num_states: usize, num_actions: usize) -> Result<Mdp> {
    let (ns, na) = (num_states, num_actions);
    let transition: Vec<f64> = (0..ns * na).flat_map(|_| dirichlet_row(rng, ns)).collect();
    let reward: Vec<f64> = (0..ns * na * ns).map(|_| rng.gen_range(-1.0..=1.0)).collect();
    let behavior_policy: Vec<f64> = (0..ns).flat_map(|_| dirichlet_row(rng, na)).collect();
    let raw: Vec<f64> = (0..ns).map(|_| rng.gen_range(0.0..1.0) + f64::MIN_POSITIVE).collect();
    let total: f64 = raw.iter().sum();
    let state_dist = raw.iter().map(|v| v / total).collect();
    MdpDescription {
        num_states: ns,
        num_actions: na,
        discount: rng.gen_range(0.5..=0.95),
        transition,
        reward,
        behavior_policy,
        state_dist,
        reward_bound: Default::default(),
    }
    .validate()
}

/// Random MDP with `|S|, |A|` drawn from `1..=5` (at least two pairs).
pub fn random_mdp(seed: u64) -> Result<Mdp> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ns = rng.gen_range(2..=5);
    let na = rng.gen_range(1..=5);
    random_mdp_sized(&mut rng, ns, na)
}

/// Resolves a builtin name, `random`, or a file path.
pub fn resolve_mdp(source: &str, seed: u64) -> Result<Mdp> {
    if source == "random" {
        random_mdp(seed)
    } else if BUILTINS.contains(&source) {
        builtin_mdp(source)
    } else {
        crate::io::read_mdp_file(source)?.validate()
    }
}

/// Seed of trial `trial`: `base_seed + trial`.
pub fn trial_seed(config: &ExperimentConfig, trial: usize) -> u64 {
    config.base_seed.wrapping_add(trial as u64)
}

/// Initial conditions of trial `trial`. `Q_0` is drawn from a stream
/// separate from the sample stream.
pub fn start_state(model: &SwitchingModel, config: &ExperimentConfig, trial: usize) -> Result<StartState> {
    let ns = model.compact().num_states;
    let na = model.compact().num_actions;
    let (mode, spread) = (&config.q0, config.spread);
    let mut rng = ChaCha8Rng::seed_from_u64(trial_seed(config, trial));
    rng.set_stream(1);
    let mut uniform = || QVector::from_fn(ns, na, |_, _| rng.gen_range(-1.0..=1.0));
    let q0 = match mode {
        InitMode::Zero => QVector::zeros(ns, na),
        InitMode::Fixed { values } => {
            if values.len() != ns * na {
                return Err(Error::Shape {
                    field: "q0.values",
                    expected: ns * na,
                    found: values.len(),
                });
            }
            QVector::from_fn(ns, na, |s, a| values[s * na + a])
        }
        InitMode::Uniform => uniform(),
        InitMode::Offset => {
            let u = uniform();
            QVector::from_vec(ns, model.q_star().as_slice().iter().zip(u.as_slice()).map(|(a, b)| a + b).collect())
        }
    };
    Ok(if spread > 0.0 {
        StartState::spread(q0, spread)
    } else {
        StartState::coincident(q0)
    })
}

/// Full recorded trajectory of trial `trial`.
pub fn simulate_trial(model: &SwitchingModel, config: &ExperimentConfig, trial: usize) -> Result<CoupledTrajectory> {
    config.validate()?;
    let start = start_state(model, config, trial)?;
    Ok(co_simulate_from(
        model,
        config.num_steps,
        trial_seed(config, trial),
        &start,
        config.record_stride,
    ))
}

/// Scalar summaries of one trial.
#[derive(Debug, Clone)]
struct TrialResult {
    // [error, lower, upper, gap, averaged, lower running mean] per record
    norms: [Vec<f64>; 6],
    err_coords: Vec<f64>,
    lower_coords: Vec<f64>,
    negatives: usize,
    worst_slack: f64,
    q0_norm: f64,
    max_q: f64,
    max_noise: f64,
    min_gap: f64,
    max_affine: f64,
    max_gap_drift: f64,
    gap_tail_var: f64,
    e0_sq: f64,
}

fn run_trial(model: &SwitchingModel, cfg: &ExperimentConfig, trial: usize) -> Result<TrialResult> {
    let seed = trial_seed(cfg, trial);
    let start = start_state(model, cfg, trial)?;
    let mut sim = CoupledSimulator::with_start(model, &start, ChaCha8Rng::seed_from_u64(seed));
    let n_rec = cfg.recorded_steps().len();
    let size = model.size();
    let mut out = TrialResult {
        norms: std::array::from_fn(|_| Vec::with_capacity(n_rec)),
        err_coords: Vec::with_capacity(n_rec * size),
        lower_coords: Vec::with_capacity(n_rec * size),
        negatives: 0,
        worst_slack: sim.sandwich_slack().0,
        q0_norm: start.q.inf_norm(),
        max_q: inf_norm(sim.q()),
        max_noise: 0.0,
        min_gap: f64::INFINITY,
        max_affine: f64::NEG_INFINITY,
        max_gap_drift: 0.0,
        gap_tail_var: 0.0,
        e0_sq: inf_norm(sim.error()).powi(2),
    };
    let q_star = model.q_star().as_slice();
    let record = |sim: &CoupledSimulator, out: &mut TrialResult, running: f64| {
        let avg_err = sim.q_avg().iter().zip(q_star).map(|(a, s)| (a - s).abs()).fold(0.0, f64::max);
        let vals = [
            inf_norm(sim.error()),
            inf_norm(sim.lower_error()),
            inf_norm(sim.upper_error()),
            inf_norm(sim.gap()),
            avg_err,
            running,
        ];
        for (v, n) in vals.into_iter().zip(out.norms.iter_mut()) {
            n.push(v);
        }
        out.err_coords.extend_from_slice(sim.error());
        out.lower_coords.extend_from_slice(sim.lower_error());
    };
    record(&sim, &mut out, inf_norm(sim.lower_error()));

    let n = cfg.num_steps;
    let stride = cfg.record_stride.max(1);
    let tail_start = n - (n / 10).max(1);
    let (mut tail_n, mut tail_mean, mut tail_m2) = (0.0_f64, 0.0_f64, 0.0_f64);
    let mut lower_sum = 0.0;
    for k in 1..=n {
        lower_sum += inf_norm(sim.lower_error());
        sim.step();
        let (slack, index) = sim.sandwich_slack();
        if slack < 0.0 {
            out.negatives += 1;
            if slack < -SANDWICH_TOL {
                return Err(Error::SandwichViolation {
                    trial,
                    step: k as usize,
                    index,
                    amount: -slack,
                });
            }
        }
        out.worst_slack = out.worst_slack.min(slack);
        out.max_q = out.max_q.max(inf_norm(sim.q()));
        out.max_noise = out.max_noise.max(inf_norm(sim.last_noise()));
        out.min_gap = out.min_gap.min(sim.last_gap_min());
        out.max_affine = out.max_affine.max(sim.last_affine_max());
        let mut gap_norm = 0.0_f64;
        let mut drift = 0.0_f64;
        for ((g, u), l) in sim.gap().iter().zip(sim.upper_error()).zip(sim.lower_error()) {
            gap_norm = gap_norm.max(g.abs());
            drift = drift.max((g - (u - l)).abs() / (1.0 + u.abs().max(l.abs())));
        }
        out.max_gap_drift = out.max_gap_drift.max(drift);
        if k > tail_start {
            tail_n += 1.0;
            let delta = gap_norm - tail_mean;
            tail_mean += delta / tail_n;
            tail_m2 += delta * (gap_norm - tail_mean);
        }
        if k % stride == 0 || k == n {
            record(&sim, &mut out, lower_sum / k as f64);
        }
    }
    out.gap_tail_var = if tail_n > 1.0 { tail_m2 / (tail_n - 1.0) } else { 0.0 };
    Ok(out)
}

/// Elementwise running mean and variance over trials.
#[derive(Debug, Clone)]
struct Moments {
    n: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Moments {
    fn new(len: usize) -> Self {
        Self {
            n: 0.0,
            mean: vec![0.0; len],
            m2: vec![0.0; len],
        }
    }

    fn push(&mut self, x: &[f64]) {
        self.n += 1.0;
        for ((m, s), v) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(x) {
            let delta = v - *m;
            *m += delta / self.n;
            *s += delta * (v - *m);
        }
    }

    fn std_err(&self) -> Vec<f64> {
        if self.n < 2.0 {
            return vec![0.0; self.mean.len()];
        }
        self.m2.iter().map(|s| (s / (self.n - 1.0) / self.n).sqrt()).collect()
    }

    fn series(&self) -> SeriesStats {
        SeriesStats {
            mean: self.mean.clone(),
            std_err: self.std_err(),
        }
    }

    fn estimate(&self) -> Estimate {
        Estimate {
            mean: self.mean[0],
            std_err: self.std_err()[0],
        }
    }

    fn coordinates(&self, steps: &[u64], size: usize) -> CoordinateEnsemble {
        let se = self.std_err();
        CoordinateEnsemble {
            steps: steps.to_vec(),
            mean: self.mean.chunks(size).map(<[f64]>::to_vec).collect(),
            std_err: se.chunks(size).map(<[f64]>::to_vec).collect(),
        }
    }
}

/// Trial mean and its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub std_err: f64,
}

/// Per-recorded-step trial means and standard errors of a scalar.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SeriesStats {
    pub mean: Vec<f64>,
    pub std_err: Vec<f64>,
}

/// Aggregated ensemble statistics. All `_norm` series are sup-norms.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleStats {
    pub steps: Vec<u64>,
    pub num_trials: usize,
    /// `‖Q_k − Q*‖`.
    pub error_norm: SeriesStats,
    /// `‖Q^L_k − Q*‖`.
    pub lower_norm: SeriesStats,
    /// `‖Q^U_k − Q*‖`.
    pub upper_norm: SeriesStats,
    /// `‖Q^U_k − Q^L_k‖`.
    pub gap_norm: SeriesStats,
    /// `‖Q̃_k − Q*‖`.
    pub averaged_norm: SeriesStats,
    /// `(1/k) Σ_{j<k} ‖Q^L_j − Q*‖` (the `k = 0` entry is `‖Q^L_0 − Q*‖`).
    pub lower_running_norm: SeriesStats,
    /// Coordinates of `Q_k − Q*`.
    pub error_coords: CoordinateEnsemble,
    /// Coordinates of `Q^L_k − Q*`.
    pub lower_coords: CoordinateEnsemble,
    /// Sandwich entries below `−SANDWICH_TOL` (zero whenever a run returns).
    pub violations: usize,
    /// Steps whose worst slack was negative at rounding level.
    pub rounding_slips: usize,
    /// Smallest `min(Q_k − Q^L_k, Q^U_k − Q_k)` seen.
    pub worst_slack: f64,
    pub max_q0_norm: f64,
    pub max_q_norm: f64,
    pub max_noise_norm: f64,
    /// Smallest entry of `h_{Q_k}` seen (nonnegative in theory).
    pub min_gap: f64,
    /// Largest entry of `b_{Q_k}` seen (nonpositive in theory).
    pub max_affine: f64,
    /// Largest relative mismatch between the error system and `Q^U − Q^L`.
    pub max_gap_drift: f64,
    /// Variance of `‖Q^U_k − Q^L_k‖` over the last tenth of the steps.
    pub gap_tail_variance: Estimate,
    /// `‖Q_0 − Q*‖²`.
    pub e0_sq: Estimate,
}

impl EnsembleStats {
    pub fn final_index(&self) -> usize {
        self.steps.len() - 1
    }

    /// Record index of step `k`, if recorded.
    pub fn index_of(&self, k: u64) -> Option<usize> {
        self.steps.binary_search(&k).ok()
    }
}

/// Loads the configured MDP and runs the ensemble.
pub fn run_ensemble(config: &ExperimentConfig) -> Result<EnsembleStats> {
    config.validate()?;
    let mdp = resolve_mdp(&config.mdp, config.base_seed)?;
    let model = SwitchingModel::new(&mdp, config.alpha)?;
    run_ensemble_on(&model, config)
}

/// Runs `config.num_trials` coupled trajectories of `model` (the config's
/// `mdp` and `alpha` fields are ignored).
pub fn run_ensemble_on(model: &SwitchingModel, config: &ExperimentConfig) -> Result<EnsembleStats> {
    config.validate()?;
    let steps = config.recorded_steps();
    let r = steps.len();
    let size = model.size();
    let mut norms: [Moments; 6] = std::array::from_fn(|_| Moments::new(r));
    let mut err_coords = Moments::new(r * size);
    let mut lower_coords = Moments::new(r * size);
    let mut tail = Moments::new(1);
    let mut e0 = Moments::new(1);
    let mut stats = EnsembleStats {
        steps: steps.clone(),
        num_trials: config.num_trials,
        error_norm: Default::default(),
        lower_norm: Default::default(),
        upper_norm: Default::default(),
        gap_norm: Default::default(),
        averaged_norm: Default::default(),
        lower_running_norm: Default::default(),
        error_coords: Default::default(),
        lower_coords: Default::default(),
        violations: 0,
        rounding_slips: 0,
        worst_slack: f64::INFINITY,
        max_q0_norm: 0.0,
        max_q_norm: 0.0,
        max_noise_norm: 0.0,
        min_gap: f64::INFINITY,
        max_affine: f64::NEG_INFINITY,
        max_gap_drift: 0.0,
        gap_tail_variance: Estimate { mean: 0.0, std_err: 0.0 },
        e0_sq: Estimate { mean: 0.0, std_err: 0.0 },
    };
    for lo in (0..config.num_trials).step_by(BATCH) {
        let hi = (lo + BATCH).min(config.num_trials);
        let batch: Vec<Result<TrialResult>> = (lo..hi).into_par_iter().map(|i| run_trial(model, config, i)).collect();
        for t in batch {
            let t = t?;
            for (m, v) in norms.iter_mut().zip(&t.norms) {
                m.push(v);
            }
            err_coords.push(&t.err_coords);
            lower_coords.push(&t.lower_coords);
            tail.push(&[t.gap_tail_var]);
            e0.push(&[t.e0_sq]);
            stats.rounding_slips += t.negatives;
            stats.worst_slack = stats.worst_slack.min(t.worst_slack);
            stats.max_q0_norm = stats.max_q0_norm.max(t.q0_norm);
            stats.max_q_norm = stats.max_q_norm.max(t.max_q);
            stats.max_noise_norm = stats.max_noise_norm.max(t.max_noise);
            stats.min_gap = stats.min_gap.min(t.min_gap);
            stats.max_affine = stats.max_affine.max(t.max_affine);
            stats.max_gap_drift = stats.max_gap_drift.max(t.max_gap_drift);
        }
    }
    let [e, l, u, g, a, lr] = norms;
    stats.error_norm = e.series();
    stats.lower_norm = l.series();
    stats.upper_norm = u.series();
    stats.gap_norm = g.series();
    stats.averaged_norm = a.series();
    stats.lower_running_norm = lr.series();
    stats.error_coords = err_coords.coordinates(&steps, size);
    stats.lower_coords = lower_coords.coordinates(&steps, size);
    stats.gap_tail_variance = tail.estimate();
    stats.e0_sq = e0.estimate();
    Ok(stats)
}

/// One row of [`step_size_contrast`].
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastRow {
    pub alpha: f64,
    pub initial_error: f64,
    pub terminal_error: Estimate,
    /// Trial mean of the last-decile variance of `‖Q^U_k − Q^L_k‖`.
    pub gap_tail_variance: Estimate,
}

/// Runs the same experiment at each step size, ordered by `α`.
pub fn step_size_contrast(mdp: &Mdp, alphas: &[f64], config: &ExperimentConfig) -> Result<Vec<ContrastRow>> {
    if alphas.is_empty() {
        return Err(Error::InvalidArgument {
            name: "alphas",
            reason: "need at least one step size".into(),
        });
    }
    let mut sorted = alphas.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q_star = crate::mdp::solve_qstar(mdp, crate::mdp::QSTAR_TOL);
    sorted
        .into_iter()
        .map(|alpha| {
            let model = SwitchingModel::with_qstar(mdp, alpha, q_star.clone())?;
            let cfg = ExperimentConfig {
                alpha,
                ..config.clone()
            };
            let stats = run_ensemble_on(&model, &cfg)?;
            let last = stats.final_index();
            Ok(ContrastRow {
                alpha,
                initial_error: stats.error_norm.mean[0],
                terminal_error: Estimate {
                    mean: stats.error_norm.mean[last],
                    std_err: stats.error_norm.std_err[last],
                },
                gap_tail_variance: stats.gap_tail_variance,
            })
        })
        .collect()
}

/// Sizes of the checks run by [`verify_all`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifyOptions {
    /// Random `Q` probes for the matrix and noise identities.
    pub probes: usize,
    /// Trials per Monte Carlo ensemble.
    pub trials: usize,
    /// Steps per trajectory.
    pub steps: u64,
    pub seed: u64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            probes: 200,
            trials: 200,
            steps: 2000,
            seed: 0,
        }
    }
}

/// Outcome of one check. `margin >= 0` means it passed with that slack.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub margin: f64,
    pub detail: String,
}

impl CheckResult {
    fn from_margin(name: &'static str, margin: f64, detail: String) -> Self {
        Self {
            name,
            passed: margin >= 0.0,
            // no "-0" in reports
            margin: margin + 0.0,
            detail,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerificationReport {
    /// Set when the MDP failed validation; no checks run then.
    pub validation: Option<Error>,
    pub checks: Vec<CheckResult>,
}

impl VerificationReport {
    pub fn passed(&self) -> bool {
        self.validation.is_none() && self.checks.iter().all(|c| c.passed)
    }
}

fn probe_q<R: Rng + ?Sized>(rng: &mut R, mdp: &Mdp, q_star: &QVector) -> QVector {
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    let radius = mdp.reward_scale() / (1.0 - mdp.discount());
    match rng.gen_range(0..3) {
        // near Q*, where the greedy policy changes
        0 => QVector::from_vec(
            ns,
            q_star.as_slice().iter().map(|v| v + rng.gen_range(-0.5..=0.5)).collect(),
        ),
        _ => QVector::from_fn(ns, na, |_, _| rng.gen_range(-radius..=radius)),
    }
}

/// Runs every invariant and bound check on `desc` at step size `alpha`.
pub fn verify_all(desc: MdpDescription, alpha: f64, opts: VerifyOptions) -> VerificationReport {
    let gate = desc.validate().and_then(|mdp| {
        check_stepsize(alpha)?;
        Ok(mdp)
    });
    let mdp = match gate {
        Ok(m) => m,
        Err(e) => {
            return VerificationReport {
                validation: Some(e),
                checks: Vec::new(),
            }
        }
    };
    let mut checks = Vec::new();
    let model = match SwitchingModel::new(&mdp, alpha) {
        Ok(m) => m,
        Err(e) => {
            return VerificationReport {
                validation: Some(e),
                checks,
            }
        }
    };
    let m = model.compact();
    let q_star = model.q_star();
    let rho = model.rho();
    let n = model.size();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);

    // Q* is the Bellman fixed point
    let scale = q_star.inf_norm().max(1.0);
    let resid = bellman_optimality_apply(m, q_star).sub(q_star).inf_norm();
    checks.push(CheckResult::from_margin(
        "qstar_fixed_point",
        1e-9 * scale - resid,
        format!("‖TQ* − Q*‖ = {resid:.3e}"),
    ));

    // ‖A_Q‖ <= ρ, row sums, nonnegativity, structured vs dense, gaps
    let (mut norm_margin, mut row_err, mut min_entry, mut kernel_err) = (f64::INFINITY, 0.0_f64, 0.0_f64, 0.0_f64);
    let (mut max_b, mut min_h) = (f64::NEG_INFINITY, f64::INFINITY);
    let mut sel = vec![0.0; m.num_states];
    let mut out = vec![0.0; n];
    for _ in 0..opts.probes {
        let q = probe_q(&mut rng, &mdp, q_star);
        let sw = model.realize(&q);
        for i in 0..n {
            let row = sw.a.row(i);
            let abs_sum: f64 = row.iter().map(|v| v.abs()).sum();
            norm_margin = norm_margin.min(rho + 1e-12 - abs_sum);
            let expected = 1.0 + alpha * m.d[i] * (m.discount - 1.0);
            row_err = row_err.max((row.sum() - expected).abs());
            min_entry = min_entry.min(row.min());
        }
        max_b = max_b.max(sw.b.max());
        let h = &sw.b_mat * nalgebra::DVector::from_column_slice(q.as_slice());
        min_h = min_h.min(h.min());
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        model.apply_a(&sw.policy, &x, &mut sel, &mut out);
        let dense = &sw.a * nalgebra::DVector::from_column_slice(&x);
        for (o, d) in out.iter().zip(dense.iter()) {
            kernel_err = kernel_err.max((o - d).abs());
        }
    }
    checks.push(CheckResult::from_margin(
        "system_matrix_contraction",
        norm_margin.min(1e-12 - row_err),
        format!("ρ = {rho:.9}, worst row-sum error {row_err:.3e}"),
    ));
    checks.push(CheckResult::from_margin(
        "system_matrix_nonnegative",
        min_entry,
        format!("smallest entry {min_entry:.3e}"),
    ));
    checks.push(CheckResult::from_margin(
        "structured_matches_dense",
        1e-12 - kernel_err,
        format!("max difference {kernel_err:.3e}"),
    ));
    checks.push(CheckResult::from_margin(
        "affine_term_nonpositive",
        -max_b,
        format!("max b_Q = {max_b:.3e}, min h_Q = {min_h:.3e}"),
    ));
    checks.push(CheckResult::from_margin(
        "comparison_gap_nonnegative",
        min_h,
        format!("min B_Q Q = {min_h:.3e}"),
    ));

    // E[w | Q] = 0, exhaustively over (s, a, s')
    let mut worst = 0.0_f64;
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    for _ in 0..opts.probes {
        let q = probe_q(&mut rng, &mdp, q_star);
        let mut acc = vec![0.0; n];
        for s in 0..ns {
            for a in 0..na {
                let d = mdp.visit(s, a);
                for (s_next, p) in mdp.transition_row(s, a).iter().enumerate() {
                    let w = noise_vector(
                        &q,
                        &Sample {
                            s,
                            a,
                            s_next,
                            r: mdp.reward(s, a, s_next),
                        },
                        m,
                    );
                    for (acc, w) in acc.iter_mut().zip(&w) {
                        *acc += d * p * w;
                    }
                }
            }
        }
        worst = worst.max(inf_norm(&acc) / q.inf_norm().max(mdp.r_max()).max(1.0));
    }
    checks.push(CheckResult::from_margin(
        "noise_zero_mean",
        1e-12 - worst,
        format!("max relative ‖E[w]‖ = {worst:.3e}"),
    ));

    // deterministic switching decays at rate ρ
    let mut decay_margin = f64::INFINITY;
    for _ in 0..10 {
        let pols: Vec<_> = (0..200).map(|_| random_policy(&mut rng, ns, na)).collect();
        let q0 = probe_q(&mut rng, &mdp, q_star);
        let norms = simulate_deterministic_switched(&model, &q0, &pols, 200);
        let mut bound = norms[0];
        for v in &norms {
            decay_margin = decay_margin.min(bound + 1e-10 - v);
            bound *= rho;
        }
    }
    checks.push(CheckResult::from_margin(
        "switched_decay",
        decay_margin,
        format!("ρ = {rho:.9}"),
    ));

    // Lyapunov certificate of A_{Q*}
    let a_star = model.realize(q_star).a;
    match lyapunov_certificate(&a_star, rho, default_margin(rho)) {
        Ok(c) => checks.push(CheckResult::from_margin(
            "lyapunov_certificate",
            (c.lambda_min - (1.0 - 1e-9))
                .min(c.lambda_max_bound + 1e-6 - c.lambda_max)
                .min(1e-8 - c.residual),
            format!(
                "λ_min = {:.6}, λ_max = {:.6e} <= {:.6e}, residual {:.3e}",
                c.lambda_min, c.lambda_max, c.lambda_max_bound, c.residual
            ),
        )),
        Err(e) => checks.push(CheckResult {
            name: "lyapunov_certificate",
            passed: false,
            margin: f64::NEG_INFINITY,
            detail: e.to_string(),
        }),
    }

    // Algorithm 1 and the switching model see the same sample stream
    let q0 = probe_q(&mut rng, &mdp, q_star);
    let mut sim = model.simulator(&q0, ChaCha8Rng::seed_from_u64(opts.seed));
    let mut learner = LearnerState::new(q0, alpha).expect("checked step size");
    let mut agree = 0.0_f64;
    for _ in 0..opts.steps {
        let s = sim.step();
        learner.step(mdp.discount(), &s);
        for ((x, y), (xa, ya)) in sim
            .q()
            .iter()
            .zip(learner.q.as_slice())
            .zip(sim.q_avg().iter().zip(learner.q_avg.as_slice()))
        {
            agree = agree.max((x - y).abs()).max((xa - ya).abs());
        }
    }
    let tol = 1e-9 * (mdp.reward_scale() / (1.0 - mdp.discount()));
    checks.push(CheckResult::from_margin(
        "switching_matches_qlearning",
        tol - agree,
        format!("max |Q_switch − Q_learn| = {agree:.3e}"),
    ));

    let ensemble = |q0: InitMode, seed: u64| {
        let cfg = ExperimentConfig {
            q0,
            record_stride: (opts.steps / 10).max(1),
            ..ExperimentConfig::new("", alpha, opts.steps, opts.trials, seed)
        };
        run_ensemble_on(&model, &cfg)
    };

    match ensemble(InitMode::Zero, opts.seed) {
        Ok(st) => push_ensemble_checks(&mut checks, &st, &mdp, alpha, rho),
        Err(e) => checks.push(CheckResult {
            name: "sandwich",
            passed: false,
            margin: f64::NEG_INFINITY,
            detail: e.to_string(),
        }),
    }
    match ensemble(InitMode::Offset, opts.seed.wrapping_add(1 << 32)) {
        Ok(st) => checks.push(overestimation_check(&st)),
        Err(e) => checks.push(CheckResult {
            name: "overestimation",
            passed: false,
            margin: f64::NEG_INFINITY,
            detail: e.to_string(),
        }),
    }

    // Φ₁ + Φ₂ <= δ at the constructed (α*, N*)
    let consts = BoundConstants::from_mdp(&mdp);
    let mut phi_margin = f64::INFINITY;
    let mut evaluated = 0;
    for eps in [0.1, 0.5, 1.0] {
        for delta in [0.05, 0.1, 0.5] {
            if let Ok(b) = sample_complexity(&consts, eps * consts.reward_scale, delta) {
                evaluated += 1;
                phi_margin = phi_margin.min(delta + 1e-12 - (b.phi1 + b.phi2));
            }
        }
    }
    checks.push(CheckResult::from_margin(
        "sample_complexity",
        phi_margin,
        format!("{evaluated} of 9 grid points representable"),
    ));

    VerificationReport {
        validation: None,
        checks,
    }
}

fn push_ensemble_checks(checks: &mut Vec<CheckResult>, st: &EnsembleStats, mdp: &Mdp, alpha: f64, rho: f64) {
    checks.push(CheckResult::from_margin(
        "sandwich",
        st.worst_slack + SANDWICH_TOL,
        format!("worst slack {:.3e} over {} trials", st.worst_slack, st.num_trials),
    ));
    let g = 1.0 - mdp.discount();
    let level = mdp.r_max().max(st.max_q0_norm);
    checks.push(CheckResult::from_margin(
        "iterate_bound",
        level / g + 1e-12 - st.max_q_norm,
        format!("max ‖Q_k‖ = {:.6} <= {:.6}", st.max_q_norm, level / g),
    ));
    checks.push(CheckResult::from_margin(
        "noise_bound",
        4.0 * level / g + 1e-12 - st.max_noise_norm,
        format!("max ‖w_k‖ = {:.6} <= {:.6}", st.max_noise_norm, 4.0 * level / g),
    ));
    checks.push(CheckResult::from_margin(
        "switching_gaps",
        st.min_gap.min(-st.max_affine),
        format!("min h = {:.3e}, max b = {:.3e}", st.min_gap, st.max_affine),
    ));
    checks.push(CheckResult::from_margin(
        "error_system_consistency",
        1e-9 - st.max_gap_drift,
        format!("max relative drift {:.3e}", st.max_gap_drift),
    ));

    let e0 = st.lower_norm.mean[0];
    let decay = mean_decay_check(&st.lower_coords, rho, e0);
    let worst = decay.rows.iter().map(|r| r.margin).fold(f64::INFINITY, f64::min);
    checks.push(CheckResult::from_margin(
        "mean_decay",
        worst,
        format!("{} recorded steps", decay.rows.len()),
    ));

    let report = BoundReport::new(BoundConstants::from_mdp(mdp), alpha, st.e0_sq.mean).expect("checked step size");
    let (mut m1, mut m2) = (f64::INFINITY, f64::INFINITY);
    for (i, &k) in st.steps.iter().enumerate().skip(1) {
        let l = &st.lower_running_norm;
        m1 = m1.min(report.thm1_rhs(k) + 3.0 * l.std_err[i] - l.mean[i]);
        let a = &st.averaged_norm;
        m2 = m2.min(report.thm2_rhs(k) + 3.0 * a.std_err[i] - a.mean[i]);
    }
    checks.push(CheckResult::from_margin("theorem1", m1, "lower-system running mean".into()));
    checks.push(CheckResult::from_margin("theorem2", m2, "averaged iterate".into()));
}

/// With `E[Q_0 − Q*] = 0`: lower system unbiased, iterate biased upward.
fn overestimation_check(st: &EnsembleStats) -> CheckResult {
    let mut margin = f64::INFINITY;
    for (lm, ls) in st.lower_coords.mean.iter().zip(&st.lower_coords.std_err) {
        for (m, s) in lm.iter().zip(ls) {
            margin = margin.min(3.0 * s + 1e-12 - m.abs());
        }
    }
    for (em, es) in st.error_coords.mean.iter().zip(&st.error_coords.std_err) {
        for (m, s) in em.iter().zip(es) {
            margin = margin.min(m + 3.0 * s + 1e-12);
        }
    }
    CheckResult::from_margin("overestimation", margin, format!("{} trials", st.num_trials))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::builtin;

    #[test]
    fn recorded_steps_include_ends() {
        let mut c = ExperimentConfig::new("example1", 0.1, 25, 1, 0);
        assert_eq!(c.recorded_steps(), vec![0, 10, 20, 25]);
        c.record_stride = 1;
        assert_eq!(c.recorded_steps().len(), 26);
    }

    #[test]
    fn config_validation() {
        let mut c = ExperimentConfig::new("example1", 0.1, 10, 1, 0);
        assert!(c.validate().is_ok());
        c.alpha = 1.0;
        assert_eq!(c.validate(), Err(Error::StepSize(1.0)));
        c.alpha = 0.1;
        c.num_trials = 0;
        assert!(matches!(c.validate(), Err(Error::InvalidArgument { name: "num_trials", .. })));
    }

    #[test]
    fn random_mdps_are_valid_and_seeded() {
        for seed in 0..30 {
            let m = random_mdp(seed).unwrap();
            assert!((2..=5).contains(&m.num_states()) && (1..=5).contains(&m.num_actions()));
            assert!(m.discount() >= 0.5 && m.discount() <= 0.95);
            assert!(m.r_max() <= 1.0);
            assert_eq!(m, random_mdp(seed).unwrap());
        }
    }

    #[test]
    fn example1_channels_identical() {
        let cfg = ExperimentConfig {
            q0: InitMode::Uniform,
            ..ExperimentConfig::new("example1", 0.3, 200, 8, 5)
        };
        let st = run_ensemble(&cfg).unwrap();
        assert_eq!(st.error_norm, st.lower_norm);
        assert_eq!(st.error_norm, st.upper_norm);
        assert!(st.gap_norm.mean.iter().all(|v| *v == 0.0));
        assert_eq!(st.violations, 0);
    }

    #[test]
    fn ensemble_is_deterministic() {
        let cfg = ExperimentConfig::new("paper2state", 0.05, 300, 1, 9);
        assert_eq!(run_ensemble(&cfg).unwrap(), run_ensemble(&cfg).unwrap());
    }

    #[test]
    fn start_at_qstar_has_zero_lower_mean_decay() {
        // example1 has Q* = 10
        let cfg = ExperimentConfig {
            q0: InitMode::Fixed { values: vec![10.0] },
            ..ExperimentConfig::new("example1", 0.2, 50, 3, 1)
        };
        let st = run_ensemble(&cfg).unwrap();
        assert!(st.lower_coords.mean.iter().flatten().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn paper2state_error_trends_down() {
        let cfg = ExperimentConfig {
            record_stride: 1000,
            ..ExperimentConfig::new("paper2state", 0.002, 10_000, 100, 3)
        };
        let st = run_ensemble(&cfg).unwrap();
        assert_eq!(st.violations, 0);
        let m = &st.error_norm.mean;
        assert!(m[m.len() - 1] < m[0]);
    }

    #[test]
    fn contrast_orders_by_alpha() {
        let mdp = builtin_mdp("paper2state").unwrap();
        let cfg = ExperimentConfig {
            spread: 1.0,
            ..ExperimentConfig::new("paper2state", 0.5, 2000, 4, 0)
        };
        let rows = step_size_contrast(&mdp, &[0.9, 0.002], &cfg).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows[0].alpha < rows[1].alpha);
        assert!(rows[1].gap_tail_variance.mean > rows[0].gap_tail_variance.mean);
        assert_eq!(step_size_contrast(&mdp, &[0.3], &cfg).unwrap().len(), 1);
    }

    #[test]
    fn verify_example3_passes() {
        let opts = VerifyOptions {
            probes: 50,
            trials: 100,
            steps: 500,
            seed: 1,
        };
        let r = verify_all(builtin("example3").unwrap(), 0.1, opts);
        for c in &r.checks {
            assert!(c.passed, "{} failed: margin {:e} ({})", c.name, c.margin, c.detail);
        }
        assert!(r.passed());
    }

    #[test]
    fn verify_gates_on_validation() {
        let mut desc = builtin("example3").unwrap();
        desc.behavior_policy = vec![1.0, 0.0];
        let r = verify_all(desc, 0.1, VerifyOptions::default());
        assert!(matches!(r.validation, Some(Error::ZeroVisit { .. })));
        assert!(r.checks.is_empty());
        assert!(!r.passed());
    }
}
