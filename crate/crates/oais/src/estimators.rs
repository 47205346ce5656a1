//! Importance sampling estimators: weighted particle sets, the unbiased IS
//! and self-normalised (SNIS) integral estimators, and Monte Carlo estimates
//! of the chi-square quantities `rho(theta) = E_q[pi^2/q^2]` and its
//! unnormalised counterpart `R(theta) = E_q[Pi^2/q^2] = Z^2 rho(theta)`.
//!
//! All weight arithmetic happens in log space with max-subtraction; ratios
//! `Pi/q` overflow directly for badly mismatched parameters.

use rand::RngCore;

use crate::error::{OaisError, Result};
use crate::numeric::{kahan_sum, log_sum_exp};
use crate::proposal::ExpFamilyProposal;
use crate::target::{TargetDensity, TestFunction};

/// Natural log of the largest finite f64; anything above this overflows when
/// exponentiated.
const MAX_EXP_ARG: f64 = 709.0;

/// `n` draws from `q_theta` with their log unnormalised weights
/// `log W = log Pi(x) - log q_theta(x)` and self-normalised weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleSet {
    points: Vec<f64>,
    dim: usize,
    log_unnorm_weights: Vec<f64>,
    snis_weights: Vec<f64>,
    theta_used: Vec<f64>,
}

impl ParticleSet {
    pub fn len(&self) -> usize {
        self.log_unnorm_weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_unnorm_weights.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn log_unnorm_weights(&self) -> &[f64] {
        &self.log_unnorm_weights
    }

    /// Self-normalised weights; softmax of the log weights, summing to one.
    pub fn snis_weights(&self) -> &[f64] {
        &self.snis_weights
    }

    /// The parameter the particles were drawn at. Gradient reuse is only
    /// valid at this exact theta.
    pub fn theta_used(&self) -> &[f64] {
        &self.theta_used
    }

    /// Effective sample size `(sum W)^2 / sum W^2 = 1 / sum w_i^2`, in `(0, n]`.
    pub fn ess(&self) -> f64 {
        1.0 / kahan_sum(self.snis_weights.iter().map(|w| w * w))
    }
}

/// Monte Carlo estimates of the divergence-style diagnostics at one theta.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DivergenceEstimate {
    /// Estimate of `rho(theta) >= 1`; requires the target's log Z.
    pub rho_hat: Option<f64>,
    /// Estimate of `R(theta) = Z^2 rho(theta)`; available unconditionally.
    pub r_hat: f64,
    /// Effective sample size of the generating particle set.
    pub ess: f64,
    /// Sample count.
    pub n: usize,
}

impl DivergenceEstimate {
    /// Diagnostics from an existing particle set (the draws are reused; no
    /// fresh sampling). `log_z` enables the normalised estimate.
    pub fn from_particles(ps: &ParticleSet, log_z: Option<f64>) -> Result<Self> {
        if ps.is_empty() {
            return Err(OaisError::DegenerateWeights);
        }
        let n = ps.len();
        let log_mean_sq = |shift: f64| -> Result<f64> {
            let logs: Vec<f64> = ps
                .log_unnorm_weights
                .iter()
                .map(|lw| 2.0 * (lw - shift))
                .collect();
            let lse = log_sum_exp(&logs);
            if lse == f64::NEG_INFINITY {
                return Err(OaisError::DegenerateWeights);
            }
            let log_mean = lse - (n as f64).ln();
            if log_mean > MAX_EXP_ARG {
                return Err(OaisError::WeightOverflow { log_mean });
            }
            Ok(log_mean.exp())
        };
        let r_hat = log_mean_sq(0.0)?;
        let rho_hat = match log_z {
            Some(z) => Some(log_mean_sq(z)?),
            None => None,
        };
        Ok(Self {
            rho_hat,
            r_hat,
            ess: ps.ess(),
            n,
        })
    }
}

/// Draws `n` iid particles from `q_theta` and weights them against the
/// target. Deterministic given the RNG state.
pub fn draw_particles<P: ExpFamilyProposal + ?Sized>(
    prop: &P,
    theta: &[f64],
    target: &TargetDensity,
    n: usize,
    rng: &mut dyn RngCore,
) -> Result<ParticleSet> {
    if n == 0 {
        return Err(OaisError::InvalidParameter("n must be >= 1".into()));
    }
    if theta.len() != prop.dim_theta() {
        return Err(OaisError::DimensionMismatch {
            expected: prop.dim_theta(),
            got: theta.len(),
        });
    }
    if prop.dim_x() != target.dim() {
        return Err(OaisError::DimensionMismatch {
            expected: target.dim(),
            got: prop.dim_x(),
        });
    }
    let dim = prop.dim_x();
    let points = prop.sample(theta, n, rng);
    let mut log_w = Vec::with_capacity(n);
    for i in 0..n {
        let x = &points[i * dim..(i + 1) * dim];
        log_w.push(target.log_unnorm(x)? - prop.log_density(theta, x));
    }
    let snis = softmax(&log_w)?;
    Ok(ParticleSet {
        points,
        dim,
        log_unnorm_weights: log_w,
        snis_weights: snis,
        theta_used: theta.to_vec(),
    })
}

fn softmax(log_w: &[f64]) -> Result<Vec<f64>> {
    let m = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return Err(OaisError::DegenerateWeights);
    }
    let unnorm: Vec<f64> = log_w.iter().map(|lw| (lw - m).exp()).collect();
    let total = kahan_sum(unnorm.iter().copied());
    if !(total > 0.0) {
        return Err(OaisError::DegenerateWeights);
    }
    Ok(unnorm.into_iter().map(|w| w / total).collect())
}

/// Unbiased IS estimate `(1/N) sum w(x_i) phi(x_i)` with `w = exp(log W -
/// log Z)`; needs the normalising constant.
pub fn is_estimate(
    ps: &ParticleSet,
    phi: &TestFunction,
    target_log_z: Option<f64>,
) -> Result<f64> {
    let log_z = target_log_z.ok_or(OaisError::MissingLogZ(
        "the unbiased IS estimate needs the target's log Z",
    ))?;
    let n = ps.len() as f64;
    let terms = (0..ps.len()).map(|i| {
        let w = (ps.log_unnorm_weights[i] - log_z).exp();
        w * phi.eval(ps.point(i))
    });
    Ok(kahan_sum(terms) / n)
}

/// Self-normalised estimate `sum_i w_i phi(x_i)`. Invariant to shifting all
/// log weights by a constant; an all-zero weight set is an error, not a NaN.
pub fn snis_estimate(ps: &ParticleSet, phi: &TestFunction) -> Result<f64> {
    if ps.is_empty() {
        return Err(OaisError::DegenerateWeights);
    }
    Ok(kahan_sum(
        (0..ps.len()).map(|i| ps.snis_weights[i] * phi.eval(ps.point(i))),
    ))
}

/// Draws `n` fresh particles at `theta` and estimates `rho`, `R`, and the
/// ESS in one pass.
pub fn estimate_rho<P: ExpFamilyProposal + ?Sized>(
    prop: &P,
    theta: &[f64],
    target: &TargetDensity,
    n: usize,
    rng: &mut dyn RngCore,
) -> Result<DivergenceEstimate> {
    let ps = draw_particles(prop, theta, target, n, rng)?;
    DivergenceEstimate::from_particles(&ps, target.log_z())
}
