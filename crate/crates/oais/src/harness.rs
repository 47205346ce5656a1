//! Experiment runner: sweeps over `(N, t)` grids with independent seeded
//! replicates, log-log rate fitting, and bound checking against quadrature
//! oracles. Backs the `run`, `fit`, and `check` CLI subcommands.
//!
//! Replicate seeds derive from `(master seed, N, t, replicate)`, never from
//! execution order, so permuting the grids or the worker count leaves every
//! cell's output unchanged.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{OaisError, Result};
use crate::estimators::{draw_particles, snis_estimate};
use crate::numeric::{kahan_sum, norm2};
use crate::optimize::{
    last_iterate_shortcut, run_sgd_vanilla, Schedule, SgdRun, WeightPath, DEFAULT_GRAD_FLAG_CAP,
};
use crate::proposal::{gaussian_mean_family, GaussianMeanFamily, ParameterBox};
use crate::quadrature::{
    estimate_grad_lipschitz, grad_rho_quadrature, integral_quadrature, locate_rho_min,
    rho_gaussian_closed_form, rho_quadrature,
};
use crate::target::{
    make_gaussian_target_with_offset, make_mixture_target, TargetDensity, TargetKind, TestFunction,
};

pub const CSV_HEADER: &str = "method,target,path,N,t,seeds,mse,bias,mean_rho,mean_ess,theta_bar_norm";

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    ExactGd,
    SgdVanilla,
    SgdAveraged,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::ExactGd => "exact-gd",
            Method::SgdVanilla => "sgd-vanilla",
            Method::SgdAveraged => "sgd-averaged",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TargetSpec {
    Gaussian {
        mean: Vec<f64>,
        variance: f64,
        normalized: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        log_z_offset: Option<f64>,
    },
    Mixture {
        components: Vec<ComponentSpec>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentSpec {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProposalSpec {
    pub family: FamilyKind,
    pub variance: f64,
    pub box_lower: Vec<f64>,
    pub box_upper: Vec<f64>,
    /// Initial parameter; defaults to the box corner farthest from the
    /// located minimiser.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta0: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FamilyKind {
    GaussianMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PhiSpec {
    CoordMeanClamp { lo: f64, hi: f64 },
    IndicatorBelow { c: f64 },
}

/// One sweep: a method applied to a target/proposal pair over grids of
/// sample counts and iteration checkpoints, replicated across seeds.
/// Unknown keys in the JSON document are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub target: TargetSpec,
    pub proposal: ProposalSpec,
    pub method: Method,
    pub path: WeightPath,
    pub schedule: Schedule,
    pub n_grid: Vec<usize>,
    pub t_grid: Vec<usize>,
    pub seeds: u32,
    pub master_seed: u64,
    pub phi: PhiSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<std::path::PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_flag_cap: Option<f64>,
}

impl ExperimentConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: Self =
            serde_json::from_str(s).map_err(|e| OaisError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn build_target(&self) -> Result<TargetDensity> {
        match &self.target {
            TargetSpec::Gaussian {
                mean,
                variance,
                normalized,
                log_z_offset,
            } => {
                let offset = if *normalized {
                    0.0
                } else {
                    log_z_offset.unwrap_or(crate::target::DEFAULT_LOG_Z_OFFSET)
                };
                make_gaussian_target_with_offset(mean, *variance, offset)
            }
            TargetSpec::Mixture { components } => {
                let comps: Vec<(f64, Vec<f64>, f64)> = components
                    .iter()
                    .map(|c| (c.weight, c.mean.clone(), c.variance))
                    .collect();
                make_mixture_target(&comps)
            }
        }
    }

    pub fn build_proposal(&self) -> Result<GaussianMeanFamily> {
        let dim = match &self.target {
            TargetSpec::Gaussian { mean, .. } => mean.len(),
            TargetSpec::Mixture { components } => {
                components.first().map(|c| c.mean.len()).unwrap_or(0)
            }
        };
        match self.proposal.family {
            FamilyKind::GaussianMean => gaussian_mean_family(self.proposal.variance, dim),
        }
    }

    pub fn build_box(&self) -> Result<ParameterBox> {
        ParameterBox::new(
            self.proposal.box_lower.clone(),
            self.proposal.box_upper.clone(),
        )
    }

    pub fn build_phi(&self) -> Result<TestFunction> {
        match self.phi {
            PhiSpec::CoordMeanClamp { lo, hi } => TestFunction::coord_mean_clamp(lo, hi),
            PhiSpec::IndicatorBelow { c } => TestFunction::indicator_below(c),
        }
    }

    /// The configured theta0, or the box corner farthest from the located
    /// minimiser of rho.
    pub fn resolve_theta0(
        &self,
        prop: &GaussianMeanFamily,
        target: &TargetDensity,
        bx: &ParameterBox,
    ) -> Result<Vec<f64>> {
        if let Some(t0) = &self.theta0_or_none() {
            if !bx.contains(t0) {
                return Err(OaisError::InvalidConfig(
                    "theta0 lies outside the parameter box".into(),
                ));
            }
            return Ok(t0.clone());
        }
        let (theta_star, _) = locate_rho_min(prop, target, bx, 65)?;
        Ok(bx.corner_farthest_from(&theta_star))
    }

    fn theta0_or_none(&self) -> Option<Vec<f64>> {
        self.proposal.theta0.clone()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_grid.is_empty() || self.t_grid.is_empty() {
            return Err(OaisError::InvalidConfig("grids must be non-empty".into()));
        }
        if self.n_grid.iter().any(|&n| n == 0) {
            return Err(OaisError::InvalidConfig("N grid entries must be >= 1".into()));
        }
        if self.seeds == 0 {
            return Err(OaisError::InvalidConfig("seed count must be >= 1".into()));
        }
        self.schedule.validate().map_err(|e| {
            OaisError::InvalidConfig(format!("bad schedule: {e}"))
        })?;
        match (self.method, self.schedule) {
            (Method::ExactGd, Schedule::Constant { .. }) => {}
            (Method::ExactGd, _) => {
                return Err(OaisError::InvalidConfig(
                    "exact-gd needs a constant schedule".into(),
                ))
            }
            (_, Schedule::InverseSqrt { .. }) => {}
            (m, _) => {
                return Err(OaisError::InvalidConfig(format!(
                    "{m} needs an inverse-sqrt schedule"
                )))
            }
        }
        // Everything must resolve.
        let target = self.build_target()?;
        let prop = self.build_proposal()?;
        let bx = self.build_box()?;
        self.build_phi()?;
        if bx.dim() != target.dim() {
            return Err(OaisError::InvalidConfig(format!(
                "box dimension {} does not match target dimension {}",
                bx.dim(),
                target.dim()
            )));
        }
        if self.path == WeightPath::Normalized && target.log_z().is_none() {
            return Err(OaisError::InvalidConfig(
                "the normalized path needs a target with a declared log Z".into(),
            ));
        }
        if target.dim() > 2 {
            // Above quadrature reach only the in-family Gaussian fixture has
            // the analytic moments the oracle columns need.
            let in_family = matches!(
                target.kind(),
                TargetKind::Gaussian { variance, .. }
                    if (*variance - prop.variance()).abs() < 1e-12
            );
            if !in_family {
                return Err(OaisError::InvalidConfig(
                    "targets with dim > 2 must be in-family Gaussian fixtures".into(),
                ));
            }
        }
        Ok(())
    }

    fn target_label(&self) -> &'static str {
        match self.target {
            TargetSpec::Gaussian { .. } => "gaussian",
            TargetSpec::Mixture { .. } => "mixture",
        }
    }

    fn path_label(&self) -> &'static str {
        match self.path {
            WeightPath::Normalized => "normalized",
            WeightPath::SelfNormalized => "self-normalized",
        }
    }
}

// ---------------------------------------------------------------------------
// Sweep
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub method: String,
    pub target: String,
    pub path: String,
    pub n: usize,
    pub t: usize,
    pub seeds: u32,
    pub mse: f64,
    pub bias: f64,
    pub mean_rho: f64,
    pub mean_ess: f64,
    pub theta_bar_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepTable {
    pub config: ExperimentConfig,
    pub ground_truth: f64,
    pub rows: Vec<SweepRow>,
}

struct TerminalSample {
    estimate: f64,
    theta_dep: Vec<f64>,
    ess: f64,
}

fn derive_seed(master: u64, n: usize, t: usize, rep: u32) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update((n as u64).to_le_bytes());
    h.update((t as u64).to_le_bytes());
    h.update((rep as u64).to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest is long enough"))
}

/// Oracle value of rho at a deployed parameter, by quadrature in low
/// dimension and by the in-family closed form above it.
fn rho_oracle(
    prop: &GaussianMeanFamily,
    target: &TargetDensity,
    theta: &[f64],
) -> Result<f64> {
    if target.dim() <= 2 {
        return rho_quadrature(prop, target, theta);
    }
    match target.kind() {
        TargetKind::Gaussian { mean, variance }
            if (*variance - prop.variance()).abs() < 1e-12 =>
        {
            Ok(rho_gaussian_closed_form(prop, mean, theta))
        }
        _ => Err(OaisError::OracleUnavailable(
            "no rho oracle for this target above dim 2".into(),
        )),
    }
}

fn sample_fixed<P: crate::proposal::ExpFamilyProposal + ?Sized>(
    prop: &P,
    target: &TargetDensity,
    theta: &[f64],
    n: usize,
    phi: &TestFunction,
    seed: u64,
) -> Result<TerminalSample> {
    let mut rng = crate::optimize::estimation_rng(seed);
    let ps = draw_particles(prop, theta, target, n, &mut rng)?;
    Ok(TerminalSample {
        estimate: snis_estimate(&ps, phi)?,
        theta_dep: theta.to_vec(),
        ess: ps.ess(),
    })
}

/// Runs the configured sweep. Each `(N, t)` cell aggregates `seeds`
/// independent replicates; cells execute in a worker pool and reduce in
/// replicate order, so the result is identical for any thread count.
pub fn run_sweep(config: &ExperimentConfig) -> Result<SweepTable> {
    config.validate()?;
    let target = config.build_target()?;
    let prop = config.build_proposal()?;
    let bx = config.build_box()?;
    let phi = config.build_phi()?;
    let theta0 = config.resolve_theta0(&prop, &target, &bx)?;
    let ground_truth = integral_quadrature(&target, &phi)?;
    let cap = config.grad_flag_cap.unwrap_or(DEFAULT_GRAD_FLAG_CAP);

    // Exact GD adapts deterministically and independently of N, so the
    // iterate path is shared by every cell and replicate.
    let gd_path: Option<Vec<Vec<f64>>> = if config.method == Method::ExactGd {
        let gamma = match config.schedule {
            Schedule::Constant { gamma } => gamma,
            _ => unreachable!("validated above"),
        };
        let lipschitz = estimate_grad_lipschitz(&prop, &target, &bx, 21)?;
        if gamma > (1.0 + 1e-9) / lipschitz {
            return Err(OaisError::StepTooLarge {
                gamma,
                inv_l: 1.0 / lipschitz,
            });
        }
        let t_top = *config.t_grid.iter().max().expect("grid non-empty");
        let mut path = Vec::with_capacity(t_top + 1);
        let mut theta = theta0.clone();
        path.push(theta.clone());
        for _ in 0..t_top {
            let g = grad_rho_quadrature(&prop, &target, &theta)?;
            let stepped: Vec<f64> = theta.iter().zip(&g).map(|(t, g)| t - gamma * g).collect();
            theta = bx.project(&stepped)?;
            path.push(theta.clone());
        }
        Some(path)
    } else {
        None
    };

    let mut tasks = Vec::new();
    for &n in &config.n_grid {
        for &t in &config.t_grid {
            for rep in 0..config.seeds {
                tasks.push((n, t, rep));
            }
        }
    }

    let samples: Vec<TerminalSample> = tasks
        .par_iter()
        .map(|&(n, t, rep)| -> Result<TerminalSample> {
            let seed = derive_seed(config.master_seed, n, t, rep);
            if t == 0 {
                return sample_fixed(&prop, &target, &theta0, n, &phi, seed);
            }
            match config.method {
                Method::ExactGd => {
                    let theta_t = &gd_path.as_ref().expect("precomputed")[t];
                    sample_fixed(&prop, &target, theta_t, n, &phi, seed)
                }
                Method::SgdAveraged => {
                    let mut run = SgdRun::new(
                        config.schedule,
                        t,
                        n,
                        theta0.clone(),
                        seed,
                        config.path,
                    );
                    run.grad_flag_cap = cap;
                    let out = last_iterate_shortcut(&prop, &target, &bx, &phi, &run)?;
                    Ok(TerminalSample {
                        estimate: out.estimate,
                        theta_dep: out.theta_bar,
                        ess: out.divergence.ess,
                    })
                }
                Method::SgdVanilla => {
                    let mut run = SgdRun::new(
                        config.schedule,
                        t,
                        n,
                        theta0.clone(),
                        seed,
                        config.path,
                    );
                    run.grad_flag_cap = cap;
                    let trace = run_sgd_vanilla(&prop, &target, &bx, &phi, &run)?;
                    let last = trace.records.last().expect("t >= 1");
                    Ok(TerminalSample {
                        estimate: last.estimate,
                        theta_dep: last.theta.clone(),
                        ess: last.ess,
                    })
                }
            }
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::new();
    let mut idx = 0;
    for &n in &config.n_grid {
        for &t in &config.t_grid {
            let cell = &samples[idx..idx + config.seeds as usize];
            idx += config.seeds as usize;
            let k = cell.len() as f64;
            let mse = kahan_sum(
                cell.iter()
                    .map(|s| (s.estimate - ground_truth) * (s.estimate - ground_truth)),
            ) / k;
            let bias = kahan_sum(cell.iter().map(|s| s.estimate)) / k - ground_truth;
            let mean_ess = kahan_sum(cell.iter().map(|s| s.ess)) / k;
            let mut rho_sum = 0.0;
            let mut norm_sum = 0.0;
            for s in cell {
                rho_sum += rho_oracle(&prop, &target, &s.theta_dep)?;
                norm_sum += norm2(&s.theta_dep);
            }
            rows.push(SweepRow {
                method: config.method.to_string(),
                target: config.target_label().to_string(),
                path: config.path_label().to_string(),
                n,
                t,
                seeds: config.seeds,
                mse,
                bias,
                mean_rho: rho_sum / k,
                mean_ess,
                theta_bar_norm: norm_sum / k,
            });
        }
    }
    Ok(SweepTable {
        config: config.clone(),
        ground_truth,
        rows,
    })
}

// ---------------------------------------------------------------------------
// Rate fitting
// ---------------------------------------------------------------------------

/// Least-squares line on `(log x, log y)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    pub points: usize,
}

pub fn fit_rate(xs: &[f64], ys: &[f64]) -> Result<RateFit> {
    if xs.len() != ys.len() || xs.len() < 3 {
        return Err(OaisError::TooFewPoints(xs.len().min(ys.len())));
    }
    for w in xs.windows(2) {
        if !(w[0] < w[1]) {
            return Err(OaisError::InvalidParameter(
                "xs must be strictly increasing".into(),
            ));
        }
    }
    if xs[0] <= 0.0 {
        return Err(OaisError::NonPositiveFitData(format!("x = {}", xs[0])));
    }
    if let Some(bad) = ys.iter().find(|y| !(**y > 0.0)) {
        return Err(OaisError::NonPositiveFitData(format!("y = {bad}")));
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = lx
        .iter()
        .zip(&ly)
        .map(|(x, y)| {
            let e = y - (intercept + slope * x);
            e * e
        })
        .sum();
    let ss_tot: f64 = ly.iter().map(|y| (y - my) * (y - my)).sum();
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    Ok(RateFit {
        slope,
        intercept,
        r2,
        points: xs.len(),
    })
}

// ---------------------------------------------------------------------------
// Bound checks
// ---------------------------------------------------------------------------

/// Which finite-sample guarantee to check a sweep table against.
///
/// Absolute checks compare cell statistics against bounds whose constants
/// are all measurable (`||phi||`, `|theta0 - theta*|`, `gamma`, `t`, `N`,
/// oracle `rho`). Rate-only checks fit a log-log slope instead, because the
/// remaining constants are existence-only.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundKind {
    Thm1Mse,
    Thm2Bias,
    Lem3Gd,
    Lem6Avg,
    Lem9Vanilla,
}

impl FromStr for BoundKind {
    type Err = OaisError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "thm1-mse" => Ok(Self::Thm1Mse),
            "thm2-bias" => Ok(Self::Thm2Bias),
            "lem3-gd" => Ok(Self::Lem3Gd),
            "lem6-avg" => Ok(Self::Lem6Avg),
            "lem9-vanilla" => Ok(Self::Lem9Vanilla),
            other => Err(OaisError::InvalidParameter(format!(
                "unknown bound kind {other:?}; expected thm1-mse | thm2-bias | lem3-gd | lem6-avg | lem9-vanilla"
            ))),
        }
    }
}

impl fmt::Display for BoundKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Thm1Mse => "thm1-mse",
            Self::Thm2Bias => "thm2-bias",
            Self::Lem3Gd => "lem3-gd",
            Self::Lem6Avg => "lem6-avg",
            Self::Lem9Vanilla => "lem9-vanilla",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundCheck {
    pub cell: String,
    /// "absolute" or "rate-only".
    pub mode: &'static str,
    pub observed: f64,
    /// Admissible interval for the observation (upper bound for absolute
    /// checks, slope window for rate checks).
    pub lo: f64,
    pub hi: f64,
    /// Stated CLT slack already folded into the interval.
    pub slack: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundReport {
    pub kind: String,
    pub checks: Vec<BoundCheck>,
    pub all_pass: bool,
}

impl fmt::Display for BoundReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "bound check: {}", self.kind)?;
        for c in &self.checks {
            writeln!(
                f,
                "  [{}] {} | {} | observed {:.6e} in [{:.6e}, {:.6e}] (slack {:.3e})",
                if c.pass { "PASS" } else { "FAIL" },
                c.cell,
                c.mode,
                c.observed,
                c.lo,
                c.hi,
                c.slack
            )?;
        }
        writeln!(
            f,
            "overall: {}",
            if self.all_pass { "PASS" } else { "FAIL" }
        )
    }
}

pub fn check_bounds(table: &SweepTable, kind: BoundKind) -> Result<BoundReport> {
    let cfg = &table.config;
    let target = cfg.build_target()?;
    let prop = cfg.build_proposal()?;
    let bx = cfg.build_box()?;
    let phi = cfg.build_phi()?;
    let sup = phi.sup_bound();
    let mut checks = Vec::new();

    match kind {
        BoundKind::Thm1Mse => {
            for row in &table.rows {
                let bound = 4.0 * sup * sup * row.mean_rho / row.n as f64;
                let slack = 3.0 * row.mse * (2.0 / row.seeds as f64).sqrt();
                checks.push(BoundCheck {
                    cell: format!("N={} t={}", row.n, row.t),
                    mode: "absolute",
                    observed: row.mse,
                    lo: 0.0,
                    hi: bound + slack,
                    slack,
                    pass: row.mse <= bound + slack,
                });
            }
        }
        BoundKind::Thm2Bias => {
            for row in &table.rows {
                let bound = 12.0 * sup * sup * row.mean_rho / row.n as f64;
                let slack = 3.0 * (row.mse / row.seeds as f64).sqrt();
                let obs = row.bias.abs();
                checks.push(BoundCheck {
                    cell: format!("N={} t={}", row.n, row.t),
                    mode: "absolute",
                    observed: obs,
                    lo: 0.0,
                    hi: bound + slack,
                    slack,
                    pass: obs <= bound + slack,
                });
            }
        }
        BoundKind::Lem3Gd => {
            if cfg.method != Method::ExactGd {
                return Err(OaisError::InvalidParameter(
                    "lem3-gd applies to exact-gd sweeps".into(),
                ));
            }
            let gamma = match cfg.schedule {
                Schedule::Constant { gamma } => gamma,
                _ => unreachable!("validated"),
            };
            let (theta_star, rho_star) = locate_rho_min(&prop, &target, &bx, 65)?;
            let theta0 = cfg.resolve_theta0(&prop, &target, &bx)?;
            let d2: f64 = theta0
                .iter()
                .zip(&theta_star)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            for row in &table.rows {
                if row.t == 0 {
                    continue;
                }
                let bound = d2 / (2.0 * gamma * row.t as f64);
                let obs = row.mean_rho - rho_star;
                checks.push(BoundCheck {
                    cell: format!("N={} t={}", row.n, row.t),
                    mode: "absolute",
                    observed: obs,
                    lo: f64::NEG_INFINITY,
                    hi: bound + 1e-9,
                    slack: 0.0,
                    pass: obs <= bound + 1e-9,
                });
            }
        }
        BoundKind::Lem6Avg | BoundKind::Lem9Vanilla => {
            let (_, rho_star) = locate_rho_min(&prop, &target, &bx, 65)?;
            let (window, correct_log): ((f64, f64), bool) = match kind {
                BoundKind::Lem6Avg => ((-0.65, -0.35), false),
                _ => ((-0.7, -0.3), true),
            };
            let mut ns: Vec<usize> = table.rows.iter().map(|r| r.n).collect();
            ns.sort_unstable();
            ns.dedup();
            for n in ns {
                let mut pts: Vec<(f64, f64)> = table
                    .rows
                    .iter()
                    .filter(|r| r.n == n && r.t > 0)
                    .map(|r| {
                        let gap = r.mean_rho - rho_star;
                        let y = if correct_log {
                            gap / (2.0 + (r.t as f64).ln())
                        } else {
                            gap
                        };
                        (r.t as f64, y)
                    })
                    .collect();
                pts.sort_by(|a, b| a.0.total_cmp(&b.0));
                let xs: Vec<f64> = pts.iter().map(|p| p.0).collect();
                let ys: Vec<f64> = pts.iter().map(|p| p.1).collect();
                let fit = fit_rate(&xs, &ys)?;
                checks.push(BoundCheck {
                    cell: format!("N={n} over t grid"),
                    mode: "rate-only",
                    observed: fit.slope,
                    lo: window.0,
                    hi: window.1,
                    slack: 0.0,
                    pass: fit.slope >= window.0 && fit.slope <= window.1,
                });
            }
        }
    }
    let all_pass = checks.iter().all(|c| c.pass);
    Ok(BoundReport {
        kind: kind.to_string(),
        checks,
        all_pass,
    })
}

// ---------------------------------------------------------------------------
// Serialisation
// ---------------------------------------------------------------------------

/// 17 significant digits: enough for bit-exact f64 round-trips.
pub fn fmt_float(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn table_to_csv(table: &SweepTable) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in &table.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            r.method,
            r.target,
            r.path,
            r.n,
            r.t,
            r.seeds,
            fmt_float(r.mse),
            fmt_float(r.bias),
            fmt_float(r.mean_rho),
            fmt_float(r.mean_ess),
            fmt_float(r.theta_bar_norm),
        ));
    }
    out
}

pub fn parse_csv(s: &str) -> Result<Vec<SweepRow>> {
    let mut lines = s.lines();
    let header = lines
        .next()
        .ok_or_else(|| OaisError::MalformedTable("empty file".into()))?;
    if header.trim() != CSV_HEADER {
        return Err(OaisError::MalformedTable(format!(
            "unexpected header {header:?}"
        )));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 11 {
            return Err(OaisError::MalformedTable(format!(
                "row {} has {} columns, expected 11",
                i + 2,
                cols.len()
            )));
        }
        let pf = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|e| OaisError::MalformedTable(format!("row {}: {e}", i + 2)))
        };
        let pu = |s: &str| -> Result<usize> {
            s.parse::<usize>()
                .map_err(|e| OaisError::MalformedTable(format!("row {}: {e}", i + 2)))
        };
        rows.push(SweepRow {
            method: cols[0].to_string(),
            target: cols[1].to_string(),
            path: cols[2].to_string(),
            n: pu(cols[3])?,
            t: pu(cols[4])?,
            seeds: pu(cols[5])? as u32,
            mse: pf(cols[6])?,
            bias: pf(cols[7])?,
            mean_rho: pf(cols[8])?,
            mean_ess: pf(cols[9])?,
            theta_bar_norm: pf(cols[10])?,
        });
    }
    Ok(rows)
}

/// Hash over the blob-framed content (`"blob {len}\0"` prefix, SHA-256).
pub fn git_style_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    let d = h.finalize();
    d.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub config: ExperimentConfig,
    pub ground_truth: f64,
    pub rows: usize,
    pub csv_hash: String,
}

/// Writes `<path>` (CSV) and `<path>.json` (config echo plus content hash).
pub fn write_outputs(table: &SweepTable, csv_path: &Path) -> Result<()> {
    let csv = table_to_csv(table);
    std::fs::write(csv_path, &csv)?;
    let sidecar = Sidecar {
        config: table.config.clone(),
        ground_truth: table.ground_truth,
        rows: table.rows.len(),
        csv_hash: git_style_hash(csv.as_bytes()),
    };
    let sidecar_path = sidecar_path_for(csv_path);
    std::fs::write(&sidecar_path, serde_json::to_string_pretty(&sidecar)?)?;
    Ok(())
}

pub fn sidecar_path_for(csv_path: &Path) -> std::path::PathBuf {
    let mut s = csv_path.as_os_str().to_os_string();
    s.push(".json");
    std::path::PathBuf::from(s)
}

/// Loads a table written by [`write_outputs`]; the sidecar supplies the
/// config (and ground truth) that bound checks need.
pub fn load_table(csv_path: &Path, sidecar: Option<&Path>) -> Result<SweepTable> {
    let rows = parse_csv(&std::fs::read_to_string(csv_path)?)?;
    let sc_path = sidecar
        .map(|p| p.to_path_buf())
        .unwrap_or_else(|| sidecar_path_for(csv_path));
    let sc: Sidecar = serde_json::from_str(&std::fs::read_to_string(&sc_path)?)?;
    Ok(SweepTable {
        config: sc.config,
        ground_truth: sc.ground_truth,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_config() -> ExperimentConfig {
        ExperimentConfig {
            target: TargetSpec::Gaussian {
                mean: vec![0.0],
                variance: 1.0,
                normalized: true,
                log_z_offset: None,
            },
            proposal: ProposalSpec {
                family: FamilyKind::GaussianMean,
                variance: 1.0,
                box_lower: vec![-2.0],
                box_upper: vec![2.0],
                theta0: Some(vec![1.0]),
            },
            method: Method::SgdAveraged,
            path: WeightPath::Normalized,
            schedule: Schedule::InverseSqrt { coeff: 0.5 },
            n_grid: vec![100],
            t_grid: vec![5],
            seeds: 1,
            master_seed: 7,
            phi: PhiSpec::CoordMeanClamp { lo: -10.0, hi: 10.0 },
            output: None,
            grad_flag_cap: None,
        }
    }

    #[test]
    fn one_cell_one_seed_gives_one_row() {
        let table = run_sweep(&tiny_config()).unwrap();
        assert_eq!(table.rows.len(), 1);
        assert_eq!(table.rows[0].n, 100);
        assert_eq!(table.rows[0].t, 5);
    }

    #[test]
    fn grid_permutation_leaves_cells_unchanged() {
        let mut a = tiny_config();
        a.n_grid = vec![50, 100];
        a.t_grid = vec![2, 6];
        a.seeds = 3;
        let mut b = a.clone();
        b.n_grid = vec![100, 50];
        b.t_grid = vec![6, 2];
        let ta = run_sweep(&a).unwrap();
        let tb = run_sweep(&b).unwrap();
        for row in &ta.rows {
            let twin = tb
                .rows
                .iter()
                .find(|r| r.n == row.n && r.t == row.t)
                .expect("cell present");
            assert_eq!(row, twin);
        }
    }

    #[test]
    fn sweep_output_bytes_are_reproducible() {
        let mut cfg = tiny_config();
        cfg.seeds = 4;
        cfg.t_grid = vec![0, 3];
        let a = table_to_csv(&run_sweep(&cfg).unwrap());
        let b = table_to_csv(&run_sweep(&cfg).unwrap());
        assert_eq!(a, b);
        assert_eq!(git_style_hash(a.as_bytes()), git_style_hash(b.as_bytes()));
    }

    #[test]
    fn csv_floats_round_trip_bit_exactly() {
        let mut cfg = tiny_config();
        cfg.seeds = 2;
        let table = run_sweep(&cfg).unwrap();
        let rows = parse_csv(&table_to_csv(&table)).unwrap();
        assert_eq!(rows, table.rows);
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let mut v: serde_json::Value =
            serde_json::to_value(tiny_config()).unwrap();
        v["surprise"] = serde_json::json!(1);
        let s = serde_json::to_string(&v).unwrap();
        assert!(ExperimentConfig::from_json(&s).is_err());
    }

    #[test]
    fn config_rejects_bad_grids_and_schedules() {
        let mut c = tiny_config();
        c.n_grid.clear();
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.seeds = 0;
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.method = Method::ExactGd;
        assert!(c.validate().is_err(), "exact-gd with inverse-sqrt schedule");
        let mut c = tiny_config();
        c.schedule = Schedule::Constant { gamma: 0.1 };
        assert!(c.validate().is_err(), "sgd with constant schedule");
    }

    #[test]
    fn fit_recovers_exact_power_laws() {
        let xs = [10.0, 100.0, 1000.0, 10_000.0];
        let inv: Vec<f64> = xs.iter().map(|x| 3.7 / x).collect();
        let f = fit_rate(&xs, &inv).unwrap();
        assert_abs_diff_eq!(f.slope, -1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(f.r2, 1.0, epsilon = 1e-12);
        let half: Vec<f64> = xs.iter().map(|x| 2.0 / x.sqrt()).collect();
        let f = fit_rate(&xs, &half).unwrap();
        assert_abs_diff_eq!(f.slope, -0.5, epsilon = 1e-9);
    }

    #[test]
    fn fit_handles_noisy_power_law() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let xs: Vec<f64> = (0..6).map(|i| 10.0_f64 * 2f64.powi(i)).collect();
        let ys: Vec<f64> = xs
            .iter()
            .map(|x| 5.0 / x * (1.0 + 0.1 * (rng.gen::<f64>() * 2.0 - 1.0)))
            .collect();
        let f = fit_rate(&xs, &ys).unwrap();
        assert!((f.slope + 1.0).abs() < 0.1, "slope = {}", f.slope);
    }

    #[test]
    fn fit_rejects_degenerate_input() {
        assert!(matches!(
            fit_rate(&[1.0, 2.0], &[1.0, 2.0]),
            Err(OaisError::TooFewPoints(_))
        ));
        assert!(fit_rate(&[1.0, 2.0, 2.0], &[1.0, 1.0, 1.0]).is_err());
        assert!(matches!(
            fit_rate(&[1.0, 2.0, 3.0], &[1.0, -1.0, 1.0]),
            Err(OaisError::NonPositiveFitData(_))
        ));
    }

    #[test]
    fn thm1_bound_holds_for_fixed_proposal() {
        let mut cfg = tiny_config();
        cfg.t_grid = vec![0];
        cfg.n_grid = vec![100, 1000];
        cfg.seeds = 200;
        let table = run_sweep(&cfg).unwrap();
        let report = check_bounds(&table, BoundKind::Thm1Mse).unwrap();
        assert!(report.all_pass, "{report}");
        let report = check_bounds(&table, BoundKind::Thm2Bias).unwrap();
        assert!(report.all_pass, "{report}");
    }

    #[test]
    fn seed_derivation_ignores_order_and_separates_cells() {
        let a = derive_seed(1, 100, 5, 0);
        assert_eq!(a, derive_seed(1, 100, 5, 0));
        assert_ne!(a, derive_seed(1, 100, 5, 1));
        assert_ne!(a, derive_seed(1, 200, 5, 0));
        assert_ne!(a, derive_seed(2, 100, 5, 0));
    }
}
