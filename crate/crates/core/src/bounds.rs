//! Closed-form certificates and finite-time bounds.
//!
//! Every bound assumes `R_max <= 1` and `‖Q_0‖∞ <= 1`. For models accepted
//! with a larger reward bound, Q-learning is positively homogeneous in
//! `(r, Q_0)`, so the bounds for the rescaled problem `r / c` carry over
//! with `c = max(1, R_max)`: noise and averaged-iterate bounds scale by `c`,
//! variance-type constants by `c²`, and an accuracy target `ε` becomes
//! `ε / c`. With `c = 1` nothing changes.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::mdp::{CompactMatrices, Mdp};
use crate::sampler::check_stepsize;

/// Residual above which a Lyapunov solution is rejected.
pub const LYAPUNOV_RESIDUAL_LIMIT: f64 = 1e-8;
/// Largest `|S||A|` solved through the vectorized linear system.
pub const DIRECT_SOLVE_MAX: usize = 64;
/// Relative term-norm cutoff of the doubled series.
pub const SERIES_CUTOFF: f64 = 1e-14;

/// `ρ = 1 − α d_min (1 − γ)`.
pub fn decay_rate(m: &CompactMatrices, alpha: f64) -> Result<f64> {
    check_stepsize(alpha)?;
    let rho = 1.0 - alpha * m.d_min * (1.0 - m.discount);
    debug_assert!(rho > 0.0 && rho < 1.0);
    Ok(rho)
}

/// `(‖w‖∞ bound, E[wᵀw] bound) = (4/(1−γ), 16|S||A|/(1−γ)²)`.
pub fn noise_bounds(num_states: usize, num_actions: usize, discount: f64) -> (f64, f64) {
    let inf = 4.0 / (1.0 - discount);
    let var = 16.0 * (num_states * num_actions) as f64 / ((1.0 - discount) * (1.0 - discount));
    (inf, var)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LyapunovMethod {
    Direct,
    Series,
}

/// A certificate `M ≻ 0` with `AᵀMA = (ρ+ε)²(M − I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LyapunovCertificate {
    pub m: DMatrix<f64>,
    pub rho: f64,
    pub epsilon: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    /// `|S||A| / (1 − (ρ/(ρ+ε))²)`.
    pub lambda_max_bound: f64,
    /// `‖AᵀMA − (ρ+ε)²(M − I)‖∞`.
    pub residual: f64,
    pub method: LyapunovMethod,
}

fn inf_norm_mat(m: &DMatrix<f64>) -> f64 {
    (0..m.nrows())
        .map(|i| m.row(i).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// `‖AᵀMA − β(M − I)‖∞`.
pub fn lyapunov_residual(a: &DMatrix<f64>, m: &DMatrix<f64>, beta: f64) -> f64 {
    let n = a.nrows();
    let lhs = a.transpose() * m * a;
    let rhs = (m - DMatrix::identity(n, n)) * beta;
    inf_norm_mat(&(lhs - rhs))
}

/// Solves `M − c AᵀMA = I` (`c = (ρ+ε)⁻²`) through the `n² x n²` vectorized
/// system, with one round of iterative refinement.
pub fn lyapunov_direct(a: &DMatrix<f64>, scale: f64) -> Option<DMatrix<f64>> {
    let n = a.nrows();
    let nn = n * n;
    // vec(AᵀMA) = (Aᵀ ⊗ Aᵀ) vec(M), column-major vec
    let mut k = DMatrix::<f64>::identity(nn, nn);
    for j in 0..n {
        for i in 0..n {
            let row = i + n * j;
            for l in 0..n {
                let alj = a[(l, j)];
                if alj == 0.0 {
                    continue;
                }
                for kk in 0..n {
                    k[(row, kk + n * l)] -= scale * a[(kk, i)] * alj;
                }
            }
        }
    }
    let lu = k.lu();
    let rhs = nalgebra::DVector::from_column_slice(DMatrix::<f64>::identity(n, n).as_slice());
    let sol = lu.solve(&rhs)?;
    let mut m = DMatrix::from_column_slice(n, n, sol.as_slice());
    let resid = DMatrix::identity(n, n) - (&m - a.transpose() * &m * a * scale);
    if let Some(corr) = lu.solve(&nalgebra::DVector::from_column_slice(resid.as_slice())) {
        m += DMatrix::from_column_slice(n, n, corr.as_slice());
    }
    Some((&m + m.transpose()) * 0.5)
}

/// Sums `Σ_k c^k (A^k)ᵀ A^k` by repeated squaring: after `j` rounds the
/// partial sum holds the first `2^j` terms. Stops once the added block is
/// below [`SERIES_CUTOFF`] relative to the sum.
pub fn lyapunov_series(a: &DMatrix<f64>, scale: f64) -> DMatrix<f64> {
    let n = a.nrows();
    let mut m = DMatrix::<f64>::identity(n, n);
    let mut b = a * scale.sqrt();
    for _ in 0..200 {
        let term = b.transpose() * &m * &b;
        let term_norm = inf_norm_mat(&term);
        m += term;
        if term_norm <= SERIES_CUTOFF * inf_norm_mat(&m) {
            break;
        }
        b = &b * &b;
    }
    (&m + m.transpose()) * 0.5
}

/// Builds the certificate for `a = A_{Q*}`.
pub fn lyapunov_certificate(a: &DMatrix<f64>, rho: f64, epsilon: f64) -> Result<LyapunovCertificate> {
    let beta_root = rho + epsilon;
    if !(epsilon > 0.0 && beta_root > 0.0 && beta_root < 1.0) {
        return Err(Error::InvalidArgument {
            name: "epsilon",
            reason: format!("need ε > 0 and ρ + ε in (0, 1), got ρ = {rho}, ε = {epsilon}"),
        });
    }
    let n = a.nrows();
    let scale = 1.0 / (beta_root * beta_root);
    let (m, method) = match (n <= DIRECT_SOLVE_MAX).then(|| lyapunov_direct(a, scale)).flatten() {
        Some(m) => (m, LyapunovMethod::Direct),
        None => (lyapunov_series(a, scale), LyapunovMethod::Series),
    };
    let residual = lyapunov_residual(a, &m, beta_root * beta_root);
    if !(residual <= LYAPUNOV_RESIDUAL_LIMIT) {
        return Err(Error::LyapunovResidual {
            residual,
            limit: LYAPUNOV_RESIDUAL_LIMIT,
        });
    }
    let eig = m.clone().symmetric_eigen().eigenvalues;
    let lambda_min = eig.iter().copied().fold(f64::INFINITY, f64::min);
    let lambda_max = eig.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ratio = rho / beta_root;
    Ok(LyapunovCertificate {
        m,
        rho,
        epsilon,
        lambda_min,
        lambda_max,
        lambda_max_bound: n as f64 / (1.0 - ratio * ratio),
        residual,
        method,
    })
}

/// Default margin `ε = (1 − ρ)/2`, so that `ρ + ε = (1 + ρ)/2`.
pub fn default_margin(rho: f64) -> f64 {
    (1.0 - rho) / 2.0
}

/// Model constants entering the finite-time bounds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundConstants {
    pub num_states: usize,
    pub num_actions: usize,
    pub d_min: f64,
    pub d_max: f64,
    pub discount: f64,
    /// `c = max(1, R_max)`.
    pub reward_scale: f64,
}

impl BoundConstants {
    pub fn from_mdp(mdp: &Mdp) -> Self {
        let m = mdp.compact();
        Self {
            num_states: m.num_states,
            num_actions: m.num_actions,
            d_min: m.d_min,
            d_max: m.d_max,
            discount: m.discount,
            reward_scale: mdp.reward_scale(),
        }
    }

    fn sa(&self) -> f64 {
        (self.num_states * self.num_actions) as f64
    }

    /// `ρ` for step size `alpha`.
    pub fn rho(&self, alpha: f64) -> f64 {
        1.0 - alpha * self.d_min * (1.0 - self.discount)
    }

    /// Noise bounds for this model, scaled by `c` and `c²`.
    pub fn noise_bounds(&self) -> (f64, f64) {
        let (inf, var) = noise_bounds(self.num_states, self.num_actions, self.discount);
        let c = self.reward_scale;
        (c * inf, c * c * var)
    }

    /// Iterate bound `c / (1 − γ)` for `‖Q_0‖∞ <= 1`.
    pub fn q_max(&self) -> f64 {
        self.reward_scale / (1.0 - self.discount)
    }
}

/// Right-hand side of the lower-system bound on
/// `E‖(1/N) Σ_{k<N} Q^L_k − Q*‖∞`:
///
/// `sqrt(32 α |S|²|A|² c² / (d_min (1−γ)³) + (1/N) 2 |S|²|A|² e0_sq / (α d_min (1−γ)))`
///
/// where `e0_sq = E‖Q_0 − Q*‖∞²`.
pub fn theorem1_bound(c: &BoundConstants, alpha: f64, n: u64, e0_sq: f64) -> f64 {
    let sa2 = c.sa() * c.sa();
    let g = 1.0 - c.discount;
    let noise = c.reward_scale * c.reward_scale * 32.0 * alpha * sa2 / (c.d_min * g * g * g);
    let transient = 2.0 * sa2 * e0_sq / (alpha * c.d_min * g) / n as f64;
    (noise + transient).sqrt()
}

/// Right-hand side of the bound on `E‖Q̃_N − Q*‖∞`:
///
/// `c · (4γ d_max + d_min(1−γ)) / (d_min^{3/2} (1−γ)^{5/2}) · |S||A| · sqrt(32α + 4/(Nα))`.
pub fn theorem2_bound(c: &BoundConstants, alpha: f64, n: u64) -> f64 {
    c.reward_scale * theorem2_prefactor(c) * theorem2_radical(alpha, n)
}

/// `(4γ d_max + d_min(1−γ)) / (d_min^{3/2} (1−γ)^{5/2}) · |S||A|`, unscaled.
pub fn theorem2_prefactor(c: &BoundConstants) -> f64 {
    let g = 1.0 - c.discount;
    (4.0 * c.discount * c.d_max + c.d_min * g) / (c.d_min.powf(1.5) * g.powf(2.5)) * c.sa()
}

/// `sqrt(32α + 4/(Nα))`.
pub fn theorem2_radical(alpha: f64, n: u64) -> f64 {
    (32.0 * alpha + 4.0 / (n as f64 * alpha)).sqrt()
}

/// Which Markov-inequality term is tight at the chosen `(α, N)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binding {
    /// The step-size term `Φ₁`.
    StepSize,
    /// The horizon term `Φ₂`.
    Horizon,
}

/// Step size and sample count reaching `‖Q̃_N − Q*‖∞ < ε` with probability
/// at least `1 − δ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComplexityBudget {
    pub accuracy: f64,
    pub confidence: f64,
    pub alpha_star: f64,
    pub n_star: u128,
    pub phi1: f64,
    pub phi2: f64,
    pub binding: Binding,
}

fn phi_prefactor(c: &BoundConstants, eps_eff: f64) -> f64 {
    let g = 1.0 - c.discount;
    20.0 * c.d_max * c.sa() / (c.d_min * g * g) / eps_eff
}

/// `Φ₁ = (1/ε) 20 d_max|S||A| / (d_min(1−γ)²) · sqrt(2α / (d_min(1−γ)))`.
pub fn phi1(c: &BoundConstants, alpha: f64, accuracy: f64) -> f64 {
    let eps = accuracy / c.reward_scale;
    phi_prefactor(c, eps) * (2.0 * alpha / (c.d_min * (1.0 - c.discount))).sqrt()
}

/// `Φ₂ = (1/ε) 20 d_max|S||A| / (d_min(1−γ)²) · sqrt(2 / (N α d_min(1−γ)))`.
pub fn phi2(c: &BoundConstants, alpha: f64, n: f64, accuracy: f64) -> f64 {
    let eps = accuracy / c.reward_scale;
    phi_prefactor(c, eps) * (2.0 / (n * alpha * c.d_min * (1.0 - c.discount))).sqrt()
}

/// Chooses `α = δ²ε² d_min³(1−γ)⁵ / (3200 d_max²|S|²|A|²)` (so `Φ₁ = δ/2`)
/// and the smallest `N >= 3200 d_max²|S|²|A|² / (α ε²δ² d_min³(1−γ)⁵)`
/// (so `Φ₂ <= δ/2`).
pub fn sample_complexity(c: &BoundConstants, accuracy: f64, confidence: f64) -> Result<ComplexityBudget> {
    if !(accuracy > 0.0 && accuracy.is_finite()) {
        return Err(Error::InvalidArgument {
            name: "eps",
            reason: format!("accuracy must be positive, got {accuracy}"),
        });
    }
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(Error::InvalidArgument {
            name: "delta",
            reason: format!("confidence must lie in (0, 1), got {confidence}"),
        });
    }
    let eps = accuracy / c.reward_scale;
    let g = 1.0 - c.discount;
    let sa2 = c.sa() * c.sa();
    let dd = c.d_min.powi(3) * g.powi(5);
    let ed2 = confidence * confidence * eps * eps;
    let alpha_star = ed2 / 8.0 * dd / (400.0 * c.d_max * c.d_max * sa2);
    if !(alpha_star > 0.0 && alpha_star < 1.0) {
        return Err(Error::Complexity(format!(
            "step size {alpha_star:e} outside (0, 1); the target is too loose"
        )));
    }
    let n_real = (3200.0 * c.d_max * c.d_max * sa2 / (alpha_star * ed2 * dd)).ceil();
    if !(n_real.is_finite() && n_real < u128::MAX as f64) {
        return Err(Error::Complexity(format!("sample count {n_real:e} does not fit in 128 bits")));
    }
    let n_star = (n_real as u128).max(1);
    let p1 = phi1(c, alpha_star, accuracy);
    let p2 = phi2(c, alpha_star, n_star as f64, accuracy);
    Ok(ComplexityBudget {
        accuracy,
        confidence,
        alpha_star,
        n_star,
        phi1: p1,
        phi2: p2,
        binding: if p1 >= p2 { Binding::StepSize } else { Binding::Horizon },
    })
}

/// Everything the analysis reports for one model and step size.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundReport {
    pub constants: BoundConstants,
    pub alpha: f64,
    pub rho: f64,
    pub noise_infnorm_bound: f64,
    pub noise_var_bound: f64,
    pub qmax: f64,
    /// `E‖Q_0 − Q*‖∞²` used by the lower-system bound.
    pub e0_sq: f64,
}

impl BoundReport {
    pub fn new(constants: BoundConstants, alpha: f64, e0_sq: f64) -> Result<Self> {
        check_stepsize(alpha)?;
        let (inf, var) = constants.noise_bounds();
        Ok(Self {
            constants,
            alpha,
            rho: constants.rho(alpha),
            noise_infnorm_bound: inf,
            noise_var_bound: var,
            qmax: constants.q_max(),
            e0_sq,
        })
    }

    pub fn thm1_rhs(&self, n: u64) -> f64 {
        theorem1_bound(&self.constants, self.alpha, n, self.e0_sq)
    }

    pub fn thm2_rhs(&self, n: u64) -> f64 {
        theorem2_bound(&self.constants, self.alpha, n)
    }
}

/// Trial means and standard errors of a vector quantity at several steps.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CoordinateEnsemble {
    pub steps: Vec<u64>,
    pub mean: Vec<Vec<f64>>,
    pub std_err: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeanDecayRow {
    pub k: u64,
    /// `‖mean of (Q^L_k − Q*)‖∞`.
    pub mean_norm: f64,
    /// `ρ^k ‖Q^L_0 − Q*‖∞`.
    pub bound: f64,
    /// Smallest `bound + 3 SE_i − |mean_i|` over coordinates.
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeanDecayReport {
    pub rows: Vec<MeanDecayRow>,
    pub passed: bool,
}

/// Checks `‖E[Q^L_k] − Q*‖∞ <= ρ^k ‖Q^L_0 − Q*‖∞` coordinatewise with
/// three-standard-error slack (plus `1e-12` for rounding).
pub fn mean_decay_check(lower: &CoordinateEnsemble, rho: f64, e0: f64) -> MeanDecayReport {
    let rows: Vec<MeanDecayRow> = lower
        .steps
        .iter()
        .zip(&lower.mean)
        .zip(&lower.std_err)
        .map(|((&k, mean), se)| {
            let bound = rho.powf(k as f64) * e0;
            let margin = mean
                .iter()
                .zip(se)
                .map(|(m, s)| bound + 3.0 * s + 1e-12 - m.abs())
                .fold(f64::INFINITY, f64::min);
            MeanDecayRow {
                k,
                mean_norm: mean.iter().fold(0.0_f64, |a, m| a.max(m.abs())),
                bound,
                margin,
            }
        })
        .collect();
    let passed = rows.iter().all(|r| r.margin >= 0.0);
    MeanDecayReport { rows, passed }
}
