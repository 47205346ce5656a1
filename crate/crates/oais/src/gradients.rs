//! Monte Carlo estimators of `grad rho` and `grad R`, the closed-form
//! Gaussian oracle, and a central-finite-difference gradient checker.
//!
//! Both estimators average `(grad A(theta) - T(x)) * ratio^2(x)` over draws
//! from `q_theta`, with `ratio = pi/q` for the normalised gradient and
//! `Pi/q` for the unnormalised one; the two differ exactly by `Z^2`. Draws
//! may be fresh, or reuse a particle set already drawn at the same theta
//! (reuse at a different theta would bias the estimator and is a hard error).

use rand::RngCore;

use crate::error::{OaisError, Result};
use crate::estimators::{draw_particles, ParticleSet};
use crate::proposal::{ExpFamilyProposal, ParameterBox};
use crate::target::TargetDensity;

/// Which objective the gradient estimate targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradKind {
    /// `grad rho`; needs the target's normalising constant.
    Normalized,
    /// `grad R = Z^2 grad rho`; estimable from the unnormalised density.
    Unnormalized,
}

/// Sample source for a gradient estimate.
pub enum GradSource<'a> {
    /// Draw this many fresh particles at theta.
    Fresh(usize),
    /// Reuse an existing particle set drawn at the same theta.
    Reuse(&'a ParticleSet),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientEstimate {
    pub vector: Vec<f64>,
    pub n_used: usize,
    pub kind: GradKind,
    pub reused_particles: bool,
    /// Largest log weight entering the squared ratio; a variance-explosion
    /// diagnostic surfaced in run traces.
    pub max_log_ratio: f64,
}

impl GradientEstimate {
    pub fn is_finite(&self) -> bool {
        self.vector.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        crate::numeric::norm2(&self.vector)
    }
}

/// Unbiased Monte Carlo estimate of `grad rho(theta)`.
pub fn grad_rho_mc<P: ExpFamilyProposal + ?Sized>(
    prop: &P,
    theta: &[f64],
    target: &TargetDensity,
    source: GradSource<'_>,
    rng: &mut dyn RngCore,
) -> Result<GradientEstimate> {
    let log_z = target.log_z().ok_or(OaisError::MissingLogZ(
        "grad_rho_mc needs the target's log Z; use grad_r_mc otherwise",
    ))?;
    grad_mc(prop, theta, target, source, rng, log_z, GradKind::Normalized)
}

/// Unbiased Monte Carlo estimate of `grad R(theta)`; same code path with the
/// unnormalised density.
pub fn grad_r_mc<P: ExpFamilyProposal + ?Sized>(
    prop: &P,
    theta: &[f64],
    target: &TargetDensity,
    source: GradSource<'_>,
    rng: &mut dyn RngCore,
) -> Result<GradientEstimate> {
    grad_mc(prop, theta, target, source, rng, 0.0, GradKind::Unnormalized)
}

fn grad_mc<P: ExpFamilyProposal + ?Sized>(
    prop: &P,
    theta: &[f64],
    target: &TargetDensity,
    source: GradSource<'_>,
    rng: &mut dyn RngCore,
    log_shift: f64,
    kind: GradKind,
) -> Result<GradientEstimate> {
    let owned;
    let (ps, reused) = match source {
        GradSource::Fresh(n) => {
            owned = draw_particles(prop, theta, target, n, rng)?;
            (&owned, false)
        }
        GradSource::Reuse(ps) => {
            if ps.theta_used() != theta {
                return Err(OaisError::ReuseMismatch {
                    drawn_at: ps.theta_used().to_vec(),
                    requested: theta.to_vec(),
                });
            }
            (ps, true)
        }
    };
    let n = ps.len();
    let d = prop.dim_theta();
    let grad_a = prop.grad_log_partition(theta);
    let mut acc = vec![0.0; d];
    let mut comp = vec![0.0; d];
    let mut max_lr = f64::NEG_INFINITY;
    for i in 0..n {
        let lr = ps.log_unnorm_weights()[i] - log_shift;
        max_lr = max_lr.max(lr);
        let w2 = (2.0 * lr).exp();
        let t_x = prop.suff_stat(ps.point(i));
        for j in 0..d {
            // Neumaier-compensated accumulation per coordinate
            let term = (grad_a[j] - t_x[j]) * w2;
            let s = acc[j] + term;
            if acc[j].abs() >= term.abs() {
                comp[j] += (acc[j] - s) + term;
            } else {
                comp[j] += (term - s) + acc[j];
            }
            acc[j] = s;
        }
    }
    let vector: Vec<f64> = acc
        .iter()
        .zip(&comp)
        .map(|(a, c)| (a + c) / n as f64)
        .collect();
    Ok(GradientEstimate {
        vector,
        n_used: n,
        kind,
        reused_particles: reused,
        max_log_ratio: max_lr,
    })
}

/// Exact `grad rho` in natural coordinates for the in-family Gaussian
/// fixture: `rho(mu) = exp(|mu - mu*|^2 / sigma^2)` with `mu = sigma^2
/// theta`, so `grad_theta rho = 2 (mu - mu*) rho`.
pub fn grad_oracle_gaussian(theta: &[f64], target_mean: &[f64], sigma2: f64) -> Vec<f64> {
    let sq: f64 = theta
        .iter()
        .zip(target_mean)
        .map(|(t, m)| {
            let u = sigma2 * t - m;
            u * u
        })
        .sum();
    let rho = (sq / sigma2).exp();
    theta
        .iter()
        .zip(target_mean)
        .map(|(t, m)| 2.0 * (sigma2 * t - m) * rho)
        .collect()
}

/// Central-difference check of `grad_f` against `f` at `theta`. Returns the
/// max over coordinates of `|fd_j - grad_j| / max(|fd_j|, 1e-9)`, where `fd`
/// is the central difference. Theta must sit at least `step` inside the box.
pub fn finite_diff_check(
    f: &dyn Fn(&[f64]) -> f64,
    grad_f: &dyn Fn(&[f64]) -> Vec<f64>,
    bx: &ParameterBox,
    theta: &[f64],
    step: f64,
) -> Result<f64> {
    if !(step > 0.0) {
        return Err(OaisError::InvalidParameter("step must be positive".into()));
    }
    if theta.len() != bx.dim() {
        return Err(OaisError::DimensionMismatch {
            expected: bx.dim(),
            got: theta.len(),
        });
    }
    for ((t, l), u) in theta.iter().zip(bx.lower()).zip(bx.upper()) {
        if t - step < *l || t + step > *u {
            return Err(OaisError::TooCloseToBoundary);
        }
    }
    let g = grad_f(theta);
    let mut worst = 0.0_f64;
    for j in 0..theta.len() {
        let mut plus = theta.to_vec();
        plus[j] += step;
        let mut minus = theta.to_vec();
        minus[j] -= step;
        let fd = (f(&plus) - f(&minus)) / (2.0 * step);
        let rel = (fd - g[j]).abs() / fd.abs().max(1e-9);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{mean, norm2, std_error};
    use crate::proposal::gaussian_mean_family;
    use crate::quadrature::{grad_rho_quadrature, rho_quadrature};
    use crate::target::make_gaussian_target;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const TWO_E: f64 = 2.0 * std::f64::consts::E;

    #[test]
    fn gradient_vanishes_at_the_minimiser() {
        let fam = gaussian_mean_family(1.0, 1).unwrap();
        let target = make_gaussian_target(&[0.0], 1.0, true).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let g = grad_rho_mc(
            &fam,
            &[0.0],
            &target,
            GradSource::Fresh(1_000_000),
            &mut rng,
        )
        .unwrap();
        assert!(g.norm() <= 0.01, "norm = {}", g.norm());
        assert_eq!(grad_oracle_gaussian(&[0.0], &[0.0], 1.0), vec![0.0]);
    }

    #[test]
    fn mc_gradient_matches_closed_form_at_unit_offset() {
        let fam = gaussian_mean_family(1.0, 1).unwrap();
        let target = make_gaussian_target(&[0.0], 1.0, true).unwrap();
        let oracle = grad_oracle_gaussian(&[1.0], &[0.0], 1.0);
        assert_abs_diff_eq!(oracle[0], TWO_E, epsilon = 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let g = grad_rho_mc(
            &fam,
            &[1.0],
            &target,
            GradSource::Fresh(1_000_000),
            &mut rng,
        )
        .unwrap();
        assert!(
            (g.vector[0] - TWO_E).abs() / TWO_E < 0.03,
            "estimate = {}",
            g.vector[0]
        );
    }

    // Batch-mean unbiasedness: 1000 small-sample estimates average to the
    // oracle within 3 empirical standard errors.
    #[test]
    fn small_sample_batches_are_unbiased() {
        let fam = gaussian_mean_family(1.0, 1).unwrap();
        let target = make_gaussian_target(&[0.0], 1.0, true).unwrap();
        let theta = [0.5];
        let oracle = grad_oracle_gaussian(&theta, &[0.0], 1.0)[0];
        let mut vals = Vec::new();
        for rep in 0..1000u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(3000 + rep);
            let g = grad_rho_mc(&fam, &theta, &target, GradSource::Fresh(100), &mut rng).unwrap();
            vals.push(g.vector[0]);
        }
        let m = mean(&vals);
        let se = std_error(&vals);
        assert!(
            (m - oracle).abs() <= 3.0 * se,
            "mean {m} vs oracle {oracle} (se {se})"
        );
    }

    #[test]
    fn reuse_requires_matching_theta() {
        let fam = gaussian_mean_family(1.0, 1).unwrap();
        let target = make_gaussian_target(&[0.0], 1.0, true).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let ps = draw_particles(&fam, &[0.5], &target, 64, &mut rng).unwrap();
        let ok = grad_rho_mc(&fam, &[0.5], &target, GradSource::Reuse(&ps), &mut rng);
        assert!(ok.is_ok() && ok.unwrap().reused_particles);
        let bad = grad_rho_mc(&fam, &[0.6], &target, GradSource::Reuse(&ps), &mut rng);
        assert!(matches!(bad, Err(OaisError::ReuseMismatch { .. })));
    }

    // grad R = Z^2 grad rho holds exactly on shared draws and within MC
    // bands on independent draws.
    #[test]
    fn unnormalized_gradient_scales_by_z_squared() {
        let fam = gaussian_mean_family(1.0, 1).unwrap();
        let target = make_gaussian_target(&[0.0], 1.0, false).unwrap();
        let z2 = 100.0;
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let ps = draw_particles(&fam, &[0.5], &target, 10_000, &mut rng).unwrap();
        let g_rho = grad_rho_mc(&fam, &[0.5], &target, GradSource::Reuse(&ps), &mut rng).unwrap();
        let g_r = grad_r_mc(&fam, &[0.5], &target, GradSource::Reuse(&ps), &mut rng).unwrap();
        assert_abs_diff_eq!(
            g_r.vector[0] / g_rho.vector[0],
            z2,
            epsilon = 1e-9 * z2
        );

        let mut means = (0.0, 0.0);
        let reps = 400;
        for rep in 0..reps {
            let mut r1 = ChaCha8Rng::seed_from_u64(40_000 + rep);
            let mut r2 = ChaCha8Rng::seed_from_u64(80_000 + rep);
            means.0 += grad_rho_mc(&fam, &[0.5], &target, GradSource::Fresh(500), &mut r1)
                .unwrap()
                .vector[0];
            means.1 += grad_r_mc(&fam, &[0.5], &target, GradSource::Fresh(500), &mut r2)
                .unwrap()
                .vector[0];
        }
        let ratio = means.1 / means.0;
        assert!((ratio - z2).abs() / z2 < 0.05, "ratio = {ratio}");
    }

    #[test]
    fn zero_vector_at_minimiser_for_unnormalized_too() {
        let fam = gaussian_mean_family(1.0, 1).unwrap();
        let target = make_gaussian_target(&[0.0], 1.0, false).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let g = grad_r_mc(&fam, &[0.0], &target, GradSource::Fresh(200_000), &mut rng).unwrap();
        // Z^2 = 100 scales the noise band accordingly
        assert!(g.norm() < 100.0 * 3.0 * (1.0f64 / 200_000.0).sqrt() * 3.0);
    }

    // Lemma-style 1/n decay of the gradient MSE.
    #[test]
    fn gradient_mse_decays_linearly_in_n() {
        let fam = gaussian_mean_family(1.0, 1).unwrap();
        let target = make_gaussian_target(&[0.0], 1.0, true).unwrap();
        let theta = [0.5];
        let oracle = grad_oracle_gaussian(&theta, &[0.0], 1.0);
        let mut mses = Vec::new();
        for (k, n) in [100usize, 1000, 10_000].into_iter().enumerate() {
            let mut errs = Vec::new();
            for rep in 0..600u64 {
                let mut rng = ChaCha8Rng::seed_from_u64(7000 + k as u64 * 1000 + rep);
                let g =
                    grad_rho_mc(&fam, &theta, &target, GradSource::Fresh(n), &mut rng).unwrap();
                let d = norm2(&crate::numeric::sub(&g.vector, &oracle));
                errs.push(d * d);
            }
            mses.push(mean(&errs));
        }
        let fit = crate::harness::fit_rate(&[100.0, 1000.0, 10_000.0], &mses).unwrap();
        assert!((fit.slope + 1.0).abs() <= 0.2, "slope = {:.3}", fit.slope);
    }

    #[test]
    fn oracle_matches_finite_differences_of_quadrature_rho() {
        let fam = gaussian_mean_family(1.0, 1).unwrap();
        let target = make_gaussian_target(&[0.0], 1.0, true).unwrap();
        let bx = ParameterBox::new(vec![-2.0], vec![2.0]).unwrap();
        let f = |t: &[f64]| rho_quadrature(&fam, &target, t).unwrap();
        let g = |t: &[f64]| grad_oracle_gaussian(t, &[0.0], 1.0);
        let err = finite_diff_check(&f, &g, &bx, &[0.8], 1e-4).unwrap();
        assert!(err <= 1e-5, "relative error = {err:.2e}");
    }

    #[test]
    fn oracle_is_odd_around_the_minimiser() {
        for delta in [0.25, 0.75, 1.5] {
            let plus = grad_oracle_gaussian(&[delta], &[0.0], 1.0);
            let minus = grad_oracle_gaussian(&[-delta], &[0.0], 1.0);
            assert_abs_diff_eq!(plus[0], -minus[0], epsilon = 1e-12);
        }
    }

    #[test]
    fn quadrature_gradient_agrees_with_oracle() {
        let fam = gaussian_mean_family(1.0, 1).unwrap();
        let target = make_gaussian_target(&[0.0], 1.0, true).unwrap();
        let q = grad_rho_quadrature(&fam, &target, &[0.8]).unwrap();
        let o = grad_oracle_gaussian(&[0.8], &[0.0], 1.0);
        assert!((q[0] - o[0]).abs() / o[0].abs() < 1e-6);
    }

    #[test]
    fn checker_is_exact_on_quadratics() {
        let bx = ParameterBox::new(vec![-5.0, -5.0], vec![5.0, 5.0]).unwrap();
        let f = |t: &[f64]| 3.0 * t[0] * t[0] + 0.5 * t[1] * t[1] - t[0] * t[1];
        let g = |t: &[f64]| vec![6.0 * t[0] - t[1], t[1] - t[0]];
        let err = finite_diff_check(&f, &g, &bx, &[1.0, -2.0], 1e-3).unwrap();
        assert!(err <= 1e-9, "err = {err:.2e}");
    }

    #[test]
    fn checker_flags_a_doubled_gradient() {
        let bx = ParameterBox::new(vec![-5.0], vec![5.0]).unwrap();
        let f = |t: &[f64]| t[0] * t[0];
        let g = |t: &[f64]| vec![4.0 * t[0]]; // wrong by a factor of two
        let err = finite_diff_check(&f, &g, &bx, &[1.0], 1e-4).unwrap();
        assert!((err - 1.0).abs() < 0.05, "err = {err}");
    }

    #[test]
    fn checker_rejects_boundary_theta() {
        let bx = ParameterBox::new(vec![0.0], vec![1.0]).unwrap();
        let f = |t: &[f64]| t[0];
        let g = |_: &[f64]| vec![1.0];
        assert!(matches!(
            finite_diff_check(&f, &g, &bx, &[1e-6], 1e-4),
            Err(OaisError::TooCloseToBoundary)
        ));
    }
}
