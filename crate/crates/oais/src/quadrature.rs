//! Deterministic quadrature oracles for low-dimensional targets: ground-truth
//! integrals, the chi-square objective `rho(theta)` and its gradient, the
//! minimiser over the parameter box, and a grid estimate of the gradient's
//! Lipschitz constant.
//!
//! These routes are independent of the Monte Carlo estimators they validate:
//! everything here is composite Simpson on a region derived from the target
//! and proposal support hints.

use crate::error::{OaisError, Result};
use crate::proposal::{ExpFamilyProposal, GaussianMeanFamily, ParameterBox};
use crate::target::{PhiKind, TargetDensity, TargetKind, TestFunction};

/// Simpson intervals per axis in one dimension.
pub const INTERVALS_1D: usize = 24_000;
/// Simpson intervals per axis in two dimensions.
pub const INTERVALS_2D: usize = 600;

/// Composite Simpson rule on `[lo, hi]`; `intervals` is rounded up to even.
pub fn simpson(f: impl Fn(f64) -> f64, lo: f64, hi: f64, intervals: usize) -> f64 {
    let n = intervals.max(2) + intervals % 2;
    let h = (hi - lo) / n as f64;
    let mut sum = f(lo) + f(hi);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        sum += w * f(lo + i as f64 * h);
    }
    sum * h / 3.0
}

/// Integrates `f` over an axis-aligned region in one or two dimensions.
pub fn integrate_region(
    f: &dyn Fn(&[f64]) -> f64,
    lo: &[f64],
    hi: &[f64],
    intervals: usize,
) -> Result<f64> {
    match lo.len() {
        1 => Ok(simpson(|x| f(&[x]), lo[0], hi[0], intervals)),
        2 => {
            let inner = |y: f64| simpson(|x| f(&[x, y]), lo[0], hi[0], intervals);
            Ok(simpson(inner, lo[1], hi[1], intervals))
        }
        d => Err(OaisError::OracleUnavailable(format!(
            "quadrature supports dim <= 2, got {d}"
        ))),
    }
}

fn default_intervals(dim: usize) -> usize {
    if dim == 1 {
        INTERVALS_1D
    } else {
        INTERVALS_2D
    }
}

/// Integration region covering the target mass alone.
fn target_region(target: &TargetDensity) -> (Vec<f64>, Vec<f64>) {
    let (center, radius) = target.support_hint();
    let lo: Vec<f64> = center.iter().map(|c| c - radius).collect();
    let hi: Vec<f64> = center.iter().map(|c| c + radius).collect();
    widen(lo, hi)
}

/// Integration region covering both the target and the proposal at `theta`.
fn joint_region<P: ExpFamilyProposal + ?Sized>(
    prop: &P,
    theta: &[f64],
    target: &TargetDensity,
) -> (Vec<f64>, Vec<f64>) {
    let (tc, tr) = target.support_hint();
    let (pc, pr) = prop.sample_region_hint(theta);
    let lo: Vec<f64> = tc
        .iter()
        .zip(&pc)
        .map(|(a, b)| (a - tr).min(b - pr))
        .collect();
    let hi: Vec<f64> = tc
        .iter()
        .zip(&pc)
        .map(|(a, b)| (a + tr).max(b + pr))
        .collect();
    widen(lo, hi)
}

fn widen(mut lo: Vec<f64>, mut hi: Vec<f64>) -> (Vec<f64>, Vec<f64>) {
    for (l, h) in lo.iter_mut().zip(hi.iter_mut()) {
        let pad = 0.1 * (*h - *l);
        *l -= pad;
        *h += pad;
    }
    (lo, hi)
}

/// `log Z = log integral of exp(log Pi)` by quadrature.
pub fn log_z_quadrature(target: &TargetDensity) -> Result<f64> {
    let (lo, hi) = target_region(target);
    let f = |x: &[f64]| target.log_unnorm(x).map(f64::exp).unwrap_or(f64::NAN);
    let z = integrate_region(&f, &lo, &hi, default_intervals(target.dim()))?;
    if !(z.is_finite() && z > 0.0) {
        return Err(OaisError::OracleUnavailable(format!(
            "normalising integral evaluated to {z}"
        )));
    }
    Ok(z.ln())
}

fn resolve_log_z(target: &TargetDensity) -> Result<f64> {
    match target.log_z() {
        Some(z) => Ok(z),
        None => log_z_quadrature(target),
    }
}

/// Integral of the normalised density; equals one for a well-formed target.
pub fn normalization_quadrature(target: &TargetDensity) -> Result<f64> {
    let log_z = target
        .log_z()
        .ok_or(OaisError::MissingLogZ("normalization check needs log Z"))?;
    let (lo, hi) = target_region(target);
    let f = |x: &[f64]| {
        target
            .log_unnorm(x)
            .map(|l| (l - log_z).exp())
            .unwrap_or(f64::NAN)
    };
    integrate_region(&f, &lo, &hi, default_intervals(target.dim()))
}

/// Ground truth `(phi, pi)`. Low dimensions go through region quadrature;
/// Gaussian targets with mean-statistic test functions reduce to a
/// one-dimensional integral over the coordinate-mean marginal in any
/// dimension.
pub fn integral_quadrature(target: &TargetDensity, phi: &TestFunction) -> Result<f64> {
    if target.dim() == 1 {
        // An indicator cuts the integrand; integrate the smooth density up
        // to the cut instead of pushing Simpson across a discontinuity.
        if let PhiKind::IndicatorBelow { c } = phi.kind() {
            let log_z = resolve_log_z(target)?;
            let (lo, hi) = target_region(target);
            if *c <= lo[0] {
                return Ok(0.0);
            }
            let f = |x: &[f64]| {
                target
                    .log_unnorm(x)
                    .map(|l| (l - log_z).exp())
                    .unwrap_or(f64::NAN)
            };
            return integrate_region(&f, &lo, &[c.min(hi[0])], INTERVALS_1D);
        }
    }
    if target.dim() <= 2 {
        let log_z = resolve_log_z(target)?;
        let (lo, hi) = target_region(target);
        let f = |x: &[f64]| {
            target
                .log_unnorm(x)
                .map(|l| (l - log_z).exp() * phi.eval(x))
                .unwrap_or(f64::NAN)
        };
        return integrate_region(&f, &lo, &hi, default_intervals(target.dim()));
    }
    // High-dimensional route: coordinate mean of N(m, v I) is
    // N(mean(m), v/d), and the built-in phi are functions of that mean.
    if let TargetKind::Gaussian { mean, variance } = target.kind() {
        let d = mean.len() as f64;
        let mu = mean.iter().sum::<f64>() / d;
        let var = variance / d;
        let sd = var.sqrt();
        let pdf = move |y: f64| {
            (-(y - mu) * (y - mu) / (2.0 * var)).exp()
                / (2.0 * std::f64::consts::PI * var).sqrt()
        };
        return match phi.kind() {
            PhiKind::CoordMeanClamp { lo, hi } => {
                let (lo, hi) = (*lo, *hi);
                Ok(simpson(
                    |y| y.clamp(lo, hi) * pdf(y),
                    mu - 12.0 * sd,
                    mu + 12.0 * sd,
                    INTERVALS_1D,
                ))
            }
            PhiKind::IndicatorBelow { c } => {
                if *c <= mu - 12.0 * sd {
                    Ok(0.0)
                } else {
                    Ok(simpson(
                        pdf,
                        mu - 12.0 * sd,
                        c.min(mu + 12.0 * sd),
                        INTERVALS_1D,
                    ))
                }
            }
            PhiKind::Custom => Err(OaisError::OracleUnavailable(
                "dim > 2 ground truth needs a mean-statistic test function".into(),
            )),
        };
    }
    Err(OaisError::OracleUnavailable(
        "dim > 2 ground truth is only available for Gaussian targets".into(),
    ))
}

/// `rho(theta) = integral of pi^2 / q_theta` by quadrature.
pub fn rho_quadrature<P: ExpFamilyProposal + ?Sized>(
    prop: &P,
    target: &TargetDensity,
    theta: &[f64],
) -> Result<f64> {
    let log_z = resolve_log_z(target)?;
    let (lo, hi) = joint_region(prop, theta, target);
    let f = |x: &[f64]| {
        let lp = match target.log_unnorm(x) {
            Ok(v) => v - log_z,
            Err(_) => return f64::NAN,
        };
        (2.0 * lp - prop.log_density(theta, x)).exp()
    };
    integrate_region(&f, &lo, &hi, default_intervals(target.dim()))
}

/// `R(theta) = Z^2 rho(theta)` by quadrature.
pub fn r_quadrature<P: ExpFamilyProposal + ?Sized>(
    prop: &P,
    target: &TargetDensity,
    theta: &[f64],
) -> Result<f64> {
    let (lo, hi) = joint_region(prop, theta, target);
    let f = |x: &[f64]| {
        let lp = match target.log_unnorm(x) {
            Ok(v) => v,
            Err(_) => return f64::NAN,
        };
        (2.0 * lp - prop.log_density(theta, x)).exp()
    };
    integrate_region(&f, &lo, &hi, default_intervals(target.dim()))
}

/// `grad rho(theta) = integral of (grad A(theta) - T(x)) pi^2 / q_theta`,
/// one quadrature per coordinate.
pub fn grad_rho_quadrature<P: ExpFamilyProposal + ?Sized>(
    prop: &P,
    target: &TargetDensity,
    theta: &[f64],
) -> Result<Vec<f64>> {
    let log_z = resolve_log_z(target)?;
    let (lo, hi) = joint_region(prop, theta, target);
    let grad_a = prop.grad_log_partition(theta);
    let mut out = Vec::with_capacity(theta.len());
    for j in 0..theta.len() {
        let ga = grad_a[j];
        let f = |x: &[f64]| {
            let lp = match target.log_unnorm(x) {
                Ok(v) => v - log_z,
                Err(_) => return f64::NAN,
            };
            (ga - prop.suff_stat(x)[j]) * (2.0 * lp - prop.log_density(theta, x)).exp()
        };
        out.push(integrate_region(
            &f,
            &lo,
            &hi,
            default_intervals(target.dim()),
        )?);
    }
    Ok(out)
}

/// Closed-form `rho` for the in-family Gaussian fixture:
/// `rho(theta) = exp(|sigma^2 theta - mu*|^2 / sigma^2)`.
pub fn rho_gaussian_closed_form(
    fam: &GaussianMeanFamily,
    target_mean: &[f64],
    theta: &[f64],
) -> f64 {
    let s2 = fam.variance();
    let sq: f64 = theta
        .iter()
        .zip(target_mean)
        .map(|(t, m)| {
            let u = s2 * t - m;
            u * u
        })
        .sum();
    (sq / s2).exp()
}

/// Dense grid plus coordinatewise ternary refinement of `rho` over the box.
/// Returns `(theta*, rho*)`.
pub fn locate_rho_min<P: ExpFamilyProposal + ?Sized>(
    prop: &P,
    target: &TargetDensity,
    bx: &ParameterBox,
    per_axis: usize,
) -> Result<(Vec<f64>, f64)> {
    let mut best_theta = Vec::new();
    let mut best = f64::INFINITY;
    for pt in bx.grid(per_axis.max(3)) {
        let r = rho_quadrature(prop, target, &pt)?;
        if r < best {
            best = r;
            best_theta = pt;
        }
    }
    // Local refinement: ternary search per axis within one grid cell.
    for _ in 0..3 {
        for j in 0..bx.dim() {
            let cell = (bx.upper()[j] - bx.lower()[j]) / (per_axis.max(3) - 1) as f64;
            let mut lo = (best_theta[j] - cell).max(bx.lower()[j]);
            let mut hi = (best_theta[j] + cell).min(bx.upper()[j]);
            for _ in 0..48 {
                let m1 = lo + (hi - lo) / 3.0;
                let m2 = hi - (hi - lo) / 3.0;
                let mut t1 = best_theta.clone();
                t1[j] = m1;
                let mut t2 = best_theta.clone();
                t2[j] = m2;
                if rho_quadrature(prop, target, &t1)? <= rho_quadrature(prop, target, &t2)? {
                    hi = m2;
                } else {
                    lo = m1;
                }
            }
            best_theta[j] = 0.5 * (lo + hi);
        }
    }
    best = rho_quadrature(prop, target, &best_theta)?;
    Ok((best_theta, best))
}

/// Max spectral norm of the Hessian of `rho` over a grid on the box,
/// estimated by central differences of the quadrature gradient. Upper-bounds
/// (up to grid resolution) the gradient's Lipschitz constant on the box.
pub fn estimate_grad_lipschitz<P: ExpFamilyProposal + ?Sized>(
    prop: &P,
    target: &TargetDensity,
    bx: &ParameterBox,
    per_axis: usize,
) -> Result<f64> {
    let d = bx.dim();
    let h = 1e-4;
    let mut worst = 0.0_f64;
    for pt in bx.grid(per_axis.max(3)) {
        let mut hess = vec![vec![0.0; d]; d];
        for j in 0..d {
            let mut plus = pt.clone();
            plus[j] += h;
            let mut minus = pt.clone();
            minus[j] -= h;
            let gp = grad_rho_quadrature(prop, target, &plus)?;
            let gm = grad_rho_quadrature(prop, target, &minus)?;
            for i in 0..d {
                hess[i][j] = (gp[i] - gm[i]) / (2.0 * h);
            }
        }
        worst = worst.max(spectral_norm_sym(&hess));
    }
    if !(worst.is_finite() && worst > 0.0) {
        return Err(OaisError::OracleUnavailable(format!(
            "Lipschitz grid estimate evaluated to {worst}"
        )));
    }
    Ok(worst)
}

fn spectral_norm_sym(m: &[Vec<f64>]) -> f64 {
    match m.len() {
        1 => m[0][0].abs(),
        2 => {
            let (a, b, c) = (m[0][0], 0.5 * (m[0][1] + m[1][0]), m[1][1]);
            let half = 0.5 * (a + c);
            let disc = (0.25 * (a - c) * (a - c) + b * b).sqrt();
            (half + disc).abs().max((half - disc).abs())
        }
        // Frobenius norm dominates the spectral norm.
        _ => m
            .iter()
            .flat_map(|row| row.iter().map(|x| x * x))
            .sum::<f64>()
            .sqrt(),
    }
}
