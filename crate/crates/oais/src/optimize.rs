//! The adaptation loops: exact-gradient descent on `rho`, vanilla projected
//! SGD on the raw iterates, and projected SGD deployed through averaged
//! iterates. Each run owns two ChaCha streams derived from its seed — one
//! for estimation draws, one for gradient draws — so the averaged-iterate
//! run and its last-iterate shortcut produce identical parameter sequences.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{OaisError, Result};
use crate::estimators::{draw_particles, snis_estimate, DivergenceEstimate};
use crate::gradients::{grad_r_mc, grad_rho_mc, GradSource, GradientEstimate};
use crate::proposal::{ExpFamilyProposal, ParameterBox};
use crate::quadrature::{estimate_grad_lipschitz, grad_rho_quadrature};
use crate::target::{TargetDensity, TestFunction};

/// Gradient steps whose largest log weight exceeds this many nats are
/// flagged in the trace (the step is still taken).
pub const DEFAULT_GRAD_FLAG_CAP: f64 = 40.0;

/// Step-size schedule. The constant schedule serves exact gradient descent;
/// the inverse-square-root schedule `coeff / sqrt(k)` serves SGD, with the
/// coefficient read as alpha on the normalised path and beta on the
/// self-normalised path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Schedule {
    Constant { gamma: f64 },
    InverseSqrt { coeff: f64 },
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        let c = match self {
            Schedule::Constant { gamma } => *gamma,
            Schedule::InverseSqrt { coeff } => *coeff,
        };
        if !(c.is_finite() && c > 0.0) {
            return Err(OaisError::InvalidParameter(format!(
                "schedule coefficient must be positive and finite, got {c}"
            )));
        }
        Ok(())
    }

    /// Step size at iteration `k >= 1`.
    pub fn step_size(&self, k: usize) -> f64 {
        match self {
            Schedule::Constant { gamma } => *gamma,
            Schedule::InverseSqrt { coeff } => coeff / (k as f64).sqrt(),
        }
    }
}

/// Which density the gradient estimator sees: the normalised path adapts on
/// `grad rho` (needs log Z), the self-normalised path on `grad R`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightPath {
    Normalized,
    SelfNormalized,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationRecord {
    pub t: usize,
    /// Raw iterate after this step's projected update.
    pub theta: Vec<f64>,
    /// Average of iterates 0..t-1 (what the averaged algorithm deploys).
    pub theta_bar: Vec<f64>,
    pub gamma: f64,
    /// Self-normalised integral estimate at this iteration's proposal.
    pub estimate: f64,
    /// Diagnostics from the estimation draws: `rho` estimate when log Z is
    /// declared, `R` estimate, effective sample size.
    pub rho_hat: Option<f64>,
    pub r_hat: f64,
    pub ess: f64,
    pub grad_norm: f64,
    /// Set when the max log weight in the gradient exceeded the cap.
    pub grad_flagged: bool,
    /// Set when a non-finite gradient estimate forced the step to be skipped.
    pub grad_skipped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunTrace {
    pub method: String,
    pub theta0: Vec<f64>,
    pub seed: u64,
    pub schedule: Schedule,
    pub path: WeightPath,
    pub records: Vec<IterationRecord>,
    pub final_theta_bar: Vec<f64>,
    /// Wall time; excluded from the canonical byte serialisation.
    pub wall_time_secs: f64,
}

#[derive(Serialize)]
struct TraceView<'a> {
    method: &'a str,
    theta0: &'a [f64],
    seed: u64,
    schedule: &'a Schedule,
    path: &'a WeightPath,
    records: &'a [IterationRecord],
    final_theta_bar: &'a [f64],
}

impl RunTrace {
    /// Deterministic serialisation for reproducibility checks; identical
    /// config and seed yield identical bytes (wall time is excluded).
    pub fn canonical_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(&TraceView {
            method: &self.method,
            theta0: &self.theta0,
            seed: self.seed,
            schedule: &self.schedule,
            path: &self.path,
            records: &self.records,
            final_theta_bar: &self.final_theta_bar,
        })
        .expect("trace serialisation cannot fail")
    }

    /// Checks the trace invariants: every iterate lies in the box, and the
    /// recorded averages are recomputable from the iterate sequence.
    pub fn validate(&self, bx: &ParameterBox) -> Result<()> {
        if !bx.contains(&self.theta0) {
            return Err(OaisError::InvalidParameter(
                "theta0 outside the parameter box".into(),
            ));
        }
        let mut sum = self.theta0.clone();
        let mut prev = &self.theta0;
        for rec in &self.records {
            if !bx.contains(&rec.theta) {
                return Err(OaisError::InvalidParameter(format!(
                    "iterate at t = {} escaped the box",
                    rec.t
                )));
            }
            // sum currently holds theta_0 + .. + theta_{t-1}
            for (j, s) in sum.iter().enumerate() {
                let want = s / rec.t as f64;
                if (want - rec.theta_bar[j]).abs() > 1e-12 {
                    return Err(OaisError::InvalidParameter(format!(
                        "theta_bar at t = {} is not the running mean",
                        rec.t
                    )));
                }
            }
            for (s, v) in sum.iter_mut().zip(&rec.theta) {
                *s += v;
            }
            prev = &rec.theta;
        }
        let _ = prev;
        Ok(())
    }
}

/// Settings for one exact-gradient descent run.
#[derive(Debug, Clone)]
pub struct GdRun {
    pub schedule: Schedule,
    pub t_max: usize,
    pub n: usize,
    pub theta0: Vec<f64>,
    pub seed: u64,
}

/// Settings for one stochastic run.
#[derive(Debug, Clone)]
pub struct SgdRun {
    pub schedule: Schedule,
    pub t_max: usize,
    pub n: usize,
    pub theta0: Vec<f64>,
    pub seed: u64,
    pub path: WeightPath,
    pub grad_flag_cap: f64,
}

impl SgdRun {
    pub fn new(
        schedule: Schedule,
        t_max: usize,
        n: usize,
        theta0: Vec<f64>,
        seed: u64,
        path: WeightPath,
    ) -> Self {
        Self {
            schedule,
            t_max,
            n,
            theta0,
            seed,
            path,
            grad_flag_cap: DEFAULT_GRAD_FLAG_CAP,
        }
    }
}

/// Result of the last-iterate shortcut: the single terminal estimate and the
/// deployed averaged parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ShortcutResult {
    pub estimate: f64,
    pub theta_bar: Vec<f64>,
    pub divergence: DivergenceEstimate,
}

pub(crate) fn estimation_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    rng
}

fn gradient_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

fn check_common<P: ExpFamilyProposal + ?Sized>(
    prop: &P,
    target: &TargetDensity,
    bx: &ParameterBox,
    theta0: &[f64],
    t_max: usize,
    n: usize,
) -> Result<()> {
    if t_max == 0 {
        return Err(OaisError::InvalidParameter("t_max must be >= 1".into()));
    }
    if n == 0 {
        return Err(OaisError::InvalidParameter("n must be >= 1".into()));
    }
    if bx.dim() != prop.dim_theta() {
        return Err(OaisError::DimensionMismatch {
            expected: prop.dim_theta(),
            got: bx.dim(),
        });
    }
    if prop.dim_x() != target.dim() {
        return Err(OaisError::DimensionMismatch {
            expected: target.dim(),
            got: prop.dim_x(),
        });
    }
    if !bx.contains(theta0) {
        return Err(OaisError::InvalidParameter(format!(
            "theta0 {theta0:?} is outside the parameter box"
        )));
    }
    Ok(())
}

fn record_estimation<P: ExpFamilyProposal + ?Sized>(
    prop: &P,
    target: &TargetDensity,
    theta: &[f64],
    n: usize,
    phi: &TestFunction,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, DivergenceEstimate)> {
    let ps = draw_particles(prop, theta, target, n, rng)?;
    let est = snis_estimate(&ps, phi)?;
    let div = DivergenceEstimate::from_particles(&ps, target.log_z())?;
    Ok((est, div))
}

/// Exact-gradient OAIS: `theta_t = Proj(theta_{t-1} - gamma grad rho)`, with
/// the gradient from quadrature (dim <= 2). Requires a constant schedule
/// with `gamma <= 1/L`, `L` estimated as the max Hessian norm on a box grid.
pub fn run_exact_gd<P: ExpFamilyProposal + ?Sized>(
    prop: &P,
    target: &TargetDensity,
    bx: &ParameterBox,
    phi: &TestFunction,
    run: &GdRun,
) -> Result<RunTrace> {
    let start = Instant::now();
    run.schedule.validate()?;
    let gamma = match run.schedule {
        Schedule::Constant { gamma } => gamma,
        Schedule::InverseSqrt { .. } => {
            return Err(OaisError::BadSchedule(
                "exact gradient descent needs a constant schedule",
            ))
        }
    };
    check_common(prop, target, bx, &run.theta0, run.t_max, run.n)?;
    if target.dim() > 2 {
        return Err(OaisError::OracleUnavailable(
            "exact gradients need quadrature, which supports dim <= 2".into(),
        ));
    }
    let lipschitz = estimate_grad_lipschitz(prop, target, bx, 21)?;
    if gamma > (1.0 + 1e-9) / lipschitz {
        return Err(OaisError::StepTooLarge {
            gamma,
            inv_l: 1.0 / lipschitz,
        });
    }

    let mut est_rng = estimation_rng(run.seed);
    let mut theta = run.theta0.clone();
    let mut theta_sum = vec![0.0; theta.len()];
    let mut records = Vec::with_capacity(run.t_max);
    for t in 1..=run.t_max {
        for (s, v) in theta_sum.iter_mut().zip(&theta) {
            *s += v;
        }
        let theta_bar: Vec<f64> = theta_sum.iter().map(|s| s / t as f64).collect();
        let grad = grad_rho_quadrature(prop, target, &theta)?;
        let grad_norm = crate::numeric::norm2(&grad);
        let stepped: Vec<f64> = theta
            .iter()
            .zip(&grad)
            .map(|(th, g)| th - gamma * g)
            .collect();
        theta = bx.project(&stepped)?;
        let (estimate, div) = record_estimation(prop, target, &theta, run.n, phi, &mut est_rng)?;
        records.push(IterationRecord {
            t,
            theta: theta.clone(),
            theta_bar,
            gamma,
            estimate,
            rho_hat: div.rho_hat,
            r_hat: div.r_hat,
            ess: div.ess,
            grad_norm,
            grad_flagged: false,
            grad_skipped: false,
        });
    }
    let final_theta_bar = records
        .last()
        .map(|r| r.theta_bar.clone())
        .unwrap_or_else(|| run.theta0.clone());
    Ok(RunTrace {
        method: "exact-gd".into(),
        theta0: run.theta0.clone(),
        seed: run.seed,
        schedule: run.schedule,
        path: WeightPath::Normalized,
        records,
        final_theta_bar,
        wall_time_secs: start.elapsed().as_secs_f64(),
    })
}

type GradOverride<'a> = Option<&'a dyn Fn(&[f64]) -> Vec<f64>>;

fn stochastic_gradient<P: ExpFamilyProposal + ?Sized>(
    prop: &P,
    target: &TargetDensity,
    theta: &[f64],
    source: GradSource<'_>,
    path: WeightPath,
    rng: &mut ChaCha8Rng,
) -> Result<GradientEstimate> {
    match path {
        WeightPath::Normalized => grad_rho_mc(prop, theta, target, source, rng),
        WeightPath::SelfNormalized => grad_r_mc(prop, theta, target, source, rng),
    }
}

fn validate_sgd<P: ExpFamilyProposal + ?Sized>(
    prop: &P,
    target: &TargetDensity,
    bx: &ParameterBox,
    run: &SgdRun,
) -> Result<()> {
    run.schedule.validate()?;
    if matches!(run.schedule, Schedule::Constant { .. }) {
        return Err(OaisError::BadSchedule(
            "stochastic runs use the inverse-sqrt schedule",
        ));
    }
    if run.path == WeightPath::Normalized && target.log_z().is_none() {
        return Err(OaisError::MissingLogZ(
            "the normalized path needs the target's log Z",
        ));
    }
    check_common(prop, target, bx, &run.theta0, run.t_max, run.n)
}

/// Vanilla stochastic-gradient OAIS: the gradient at iteration `t` reuses
/// the particles drawn at `theta_{t-1}` (a bootstrap set at `theta_0` seeds
/// the first update), fresh particles at `theta_t` produce the estimate, and
/// the proposal follows the raw iterate.
pub fn run_sgd_vanilla<P: ExpFamilyProposal + ?Sized>(
    prop: &P,
    target: &TargetDensity,
    bx: &ParameterBox,
    phi: &TestFunction,
    run: &SgdRun,
) -> Result<RunTrace> {
    run_sgd_vanilla_impl(prop, target, bx, phi, run, None)
}

pub(crate) fn run_sgd_vanilla_impl<P: ExpFamilyProposal + ?Sized>(
    prop: &P,
    target: &TargetDensity,
    bx: &ParameterBox,
    phi: &TestFunction,
    run: &SgdRun,
    grad_override: GradOverride<'_>,
) -> Result<RunTrace> {
    let start = Instant::now();
    validate_sgd(prop, target, bx, run)?;
    let mut est_rng = estimation_rng(run.seed);
    let mut grad_rng = gradient_rng(run.seed);

    let mut theta = run.theta0.clone();
    let mut theta_sum = vec![0.0; theta.len()];
    let mut particles = draw_particles(prop, &theta, target, run.n, &mut est_rng)?;
    let mut records = Vec::with_capacity(run.t_max);
    for t in 1..=run.t_max {
        for (s, v) in theta_sum.iter_mut().zip(&theta) {
            *s += v;
        }
        let theta_bar: Vec<f64> = theta_sum.iter().map(|s| s / t as f64).collect();
        let gamma = run.schedule.step_size(t);

        let (vector, grad_norm, flagged) = match grad_override {
            Some(g) => {
                let v = g(&theta);
                let n = crate::numeric::norm2(&v);
                (v, n, false)
            }
            None => {
                let g = stochastic_gradient(
                    prop,
                    target,
                    &theta,
                    GradSource::Reuse(&particles),
                    run.path,
                    &mut grad_rng,
                )?;
                let flagged = g.max_log_ratio > run.grad_flag_cap;
                let n = g.norm();
                (g.vector, n, flagged)
            }
        };
        let skipped = !vector.iter().all(|v| v.is_finite());
        if !skipped {
            let stepped: Vec<f64> = theta
                .iter()
                .zip(&vector)
                .map(|(th, g)| th - gamma * g)
                .collect();
            theta = bx.project(&stepped)?;
        }
        particles = draw_particles(prop, &theta, target, run.n, &mut est_rng)?;
        let estimate = snis_estimate(&particles, phi)?;
        let div = DivergenceEstimate::from_particles(&particles, target.log_z())?;
        records.push(IterationRecord {
            t,
            theta: theta.clone(),
            theta_bar,
            gamma,
            estimate,
            rho_hat: div.rho_hat,
            r_hat: div.r_hat,
            ess: div.ess,
            grad_norm,
            grad_flagged: flagged,
            grad_skipped: skipped,
        });
    }
    let final_theta_bar = records
        .last()
        .map(|r| r.theta_bar.clone())
        .unwrap_or_else(|| run.theta0.clone());
    Ok(RunTrace {
        method: "sgd-vanilla".into(),
        theta0: run.theta0.clone(),
        seed: run.seed,
        schedule: run.schedule,
        path: run.path,
        records,
        final_theta_bar,
        wall_time_secs: start.elapsed().as_secs_f64(),
    })
}

/// Averaged-iterate stochastic-gradient OAIS: at each iteration the deployed
/// proposal is `q` at `theta_bar_t`, the estimate comes from draws at that
/// average, and the update uses an independent gradient sample at
/// `theta_{t-1}`. Estimation draws never feed the gradient.
pub fn run_sgd_averaged<P: ExpFamilyProposal + ?Sized>(
    prop: &P,
    target: &TargetDensity,
    bx: &ParameterBox,
    phi: &TestFunction,
    run: &SgdRun,
) -> Result<RunTrace> {
    run_sgd_averaged_impl(prop, target, bx, phi, run, None)
}

pub(crate) fn run_sgd_averaged_impl<P: ExpFamilyProposal + ?Sized>(
    prop: &P,
    target: &TargetDensity,
    bx: &ParameterBox,
    phi: &TestFunction,
    run: &SgdRun,
    grad_override: GradOverride<'_>,
) -> Result<RunTrace> {
    let start = Instant::now();
    validate_sgd(prop, target, bx, run)?;
    let mut est_rng = estimation_rng(run.seed);
    let mut grad_rng = gradient_rng(run.seed);

    let mut theta = run.theta0.clone();
    let mut theta_sum = vec![0.0; theta.len()];
    let mut records = Vec::with_capacity(run.t_max);
    for t in 1..=run.t_max {
        for (s, v) in theta_sum.iter_mut().zip(&theta) {
            *s += v;
        }
        let theta_bar: Vec<f64> = theta_sum.iter().map(|s| s / t as f64).collect();

        let (estimate, div) =
            record_estimation(prop, target, &theta_bar, run.n, phi, &mut est_rng)?;

        let gamma = run.schedule.step_size(t);
        let (vector, grad_norm, flagged) = match grad_override {
            Some(g) => {
                let v = g(&theta);
                let n = crate::numeric::norm2(&v);
                (v, n, false)
            }
            None => {
                let g = stochastic_gradient(
                    prop,
                    target,
                    &theta,
                    GradSource::Fresh(run.n),
                    run.path,
                    &mut grad_rng,
                )?;
                let flagged = g.max_log_ratio > run.grad_flag_cap;
                let n = g.norm();
                (g.vector, n, flagged)
            }
        };
        let skipped = !vector.iter().all(|v| v.is_finite());
        if !skipped {
            let stepped: Vec<f64> = theta
                .iter()
                .zip(&vector)
                .map(|(th, g)| th - gamma * g)
                .collect();
            theta = bx.project(&stepped)?;
        }
        records.push(IterationRecord {
            t,
            theta: theta.clone(),
            theta_bar,
            gamma,
            estimate,
            rho_hat: div.rho_hat,
            r_hat: div.r_hat,
            ess: div.ess,
            grad_norm,
            grad_flagged: flagged,
            grad_skipped: skipped,
        });
    }
    let final_theta_bar = records
        .last()
        .map(|r| r.theta_bar.clone())
        .unwrap_or_else(|| run.theta0.clone());
    Ok(RunTrace {
        method: "sgd-averaged".into(),
        theta0: run.theta0.clone(),
        seed: run.seed,
        schedule: run.schedule,
        path: run.path,
        records,
        final_theta_bar,
        wall_time_secs: start.elapsed().as_secs_f64(),
    })
}

/// Runs the averaged-iterate adaptation for `t_max - 1` iterations without
/// any estimation work, then performs the estimation steps once at
/// `t = t_max`. With a shared seed the deployed `theta_bar` equals the full
/// run's exactly, because gradient draws come from their own stream.
pub fn last_iterate_shortcut<P: ExpFamilyProposal + ?Sized>(
    prop: &P,
    target: &TargetDensity,
    bx: &ParameterBox,
    phi: &TestFunction,
    run: &SgdRun,
) -> Result<ShortcutResult> {
    validate_sgd(prop, target, bx, run)?;
    let mut est_rng = estimation_rng(run.seed);
    let mut grad_rng = gradient_rng(run.seed);

    let mut theta = run.theta0.clone();
    let mut theta_sum = vec![0.0; theta.len()];
    for t in 1..=run.t_max {
        for (s, v) in theta_sum.iter_mut().zip(&theta) {
            *s += v;
        }
        if t == run.t_max {
            break;
        }
        let gamma = run.schedule.step_size(t);
        let g = stochastic_gradient(
            prop,
            target,
            &theta,
            GradSource::Fresh(run.n),
            run.path,
            &mut grad_rng,
        )?;
        if g.is_finite() {
            let stepped: Vec<f64> = theta
                .iter()
                .zip(&g.vector)
                .map(|(th, gv)| th - gamma * gv)
                .collect();
            theta = bx.project(&stepped)?;
        }
    }
    let theta_bar: Vec<f64> = theta_sum
        .iter()
        .map(|s| s / run.t_max as f64)
        .collect();
    let ps = draw_particles(prop, &theta_bar, target, run.n, &mut est_rng)?;
    let estimate = snis_estimate(&ps, phi)?;
    let divergence = DivergenceEstimate::from_particles(&ps, target.log_z())?;
    Ok(ShortcutResult {
        estimate,
        theta_bar,
        divergence,
    })
}
