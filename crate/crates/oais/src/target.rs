//! Target distributions known up to a normalising constant, plus bounded test
//! functions whose expectations the samplers estimate.
//!
//! A target carries `log Π(x)`, the unnormalised log-density. When the
//! normalising constant is known the target also carries `log Z`, so the
//! normalised log-density `log π = log Π - log Z` is available. Built-in
//! analytically tractable targets (isotropic Gaussian, Gaussian mixture)
//! double as test fixtures: the Gaussian is reachable by the Gaussian-mean
//! proposal family (the best attainable chi-square divergence is zero), the
//! mixture is not.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use crate::error::{OaisError, Result};
use crate::numeric::log_sum_exp;

/// Synthetic normalising constant used by the unnormalised Gaussian fixture,
/// so that `Z != 1` genuinely exercises the self-normalised code paths.
pub const DEFAULT_LOG_Z_OFFSET: f64 = std::f64::consts::LN_10;

type LogDensityFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Shape descriptor for built-in targets; lets oracles pick closed forms.
#[derive(Debug, Clone, PartialEq)]
pub enum TargetKind {
    Gaussian { mean: Vec<f64>, variance: f64 },
    Mixture { components: Vec<MixtureComponent> },
    Custom,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub variance: f64,
}

/// A target distribution pi known up to the constant `Z`, immutable after
/// construction and safe to evaluate concurrently.
#[derive(Clone)]
pub struct TargetDensity {
    log_unnorm: LogDensityFn,
    dim: usize,
    log_z: Option<f64>,
    kind: TargetKind,
    support_center: Vec<f64>,
    support_radius: f64,
}

impl fmt::Debug for TargetDensity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TargetDensity")
            .field("dim", &self.dim)
            .field("log_z", &self.log_z)
            .field("kind", &self.kind)
            .finish()
    }
}

impl TargetDensity {
    /// Wraps a user-supplied unnormalised log-density. `support_center` and
    /// `support_radius` hint where the mass lives; quadrature oracles
    /// integrate over this region.
    pub fn new(
        log_unnorm: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        dim: usize,
        log_z: Option<f64>,
        support_center: Vec<f64>,
        support_radius: f64,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(OaisError::InvalidParameter("dim must be positive".into()));
        }
        if support_center.len() != dim {
            return Err(OaisError::DimensionMismatch {
                expected: dim,
                got: support_center.len(),
            });
        }
        Ok(Self {
            log_unnorm: Arc::new(log_unnorm),
            dim,
            log_z,
            kind: TargetKind::Custom,
            support_center,
            support_radius,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Declared `log Z`, if any. Estimator paths that need the normalised
    /// density are enabled only when this is present.
    pub fn log_z(&self) -> Option<f64> {
        self.log_z
    }

    pub fn kind(&self) -> &TargetKind {
        &self.kind
    }

    /// Region hint `(center, radius)` covering essentially all target mass.
    pub fn support_hint(&self) -> (&[f64], f64) {
        (&self.support_center, self.support_radius)
    }

    /// `log Π(x)`. A non-finite value is a domain error, never silently
    /// mapped to -inf.
    pub fn log_unnorm(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim {
            return Err(OaisError::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        let v = (self.log_unnorm)(x);
        if v.is_nan() || v == f64::INFINITY {
            return Err(OaisError::TargetDomain {
                x: x.to_vec(),
                value: v,
            });
        }
        Ok(v)
    }

    /// `log π(x) = log Π(x) - log Z`; requires the constant to be declared.
    pub fn log_norm(&self, x: &[f64]) -> Result<f64> {
        let log_z = self
            .log_z
            .ok_or(OaisError::MissingLogZ("log_norm needs a declared log Z"))?;
        Ok(self.log_unnorm(x)? - log_z)
    }

    /// Copy of this target with the normalising constant withheld, for
    /// exercising the strictly self-normalised paths.
    pub fn forget_log_z(&self) -> Self {
        let mut t = self.clone();
        t.log_z = None;
        t
    }
}

fn gaussian_log_pdf(x: &[f64], mean: &[f64], variance: f64) -> f64 {
    let d = x.len() as f64;
    let sq: f64 = x.iter().zip(mean).map(|(a, b)| (a - b) * (a - b)).sum();
    -0.5 * d * (2.0 * PI * variance).ln() - sq / (2.0 * variance)
}

/// Isotropic Gaussian target `N(mean, variance * I)`.
///
/// With `normalized` set, `log Π = log π` and `log Z = 0`. Otherwise the
/// unnormalised density is offset by [`DEFAULT_LOG_Z_OFFSET`]; the synthetic
/// constant is still recorded in `log_z` so oracles can recover π, while the
/// self-normalised path is exercised by never dividing it out.
pub fn make_gaussian_target(mean: &[f64], variance: f64, normalized: bool) -> Result<TargetDensity> {
    let offset = if normalized { 0.0 } else { DEFAULT_LOG_Z_OFFSET };
    make_gaussian_target_with_offset(mean, variance, offset)
}

/// As [`make_gaussian_target`], with an explicit synthetic `log Z` offset.
pub fn make_gaussian_target_with_offset(
    mean: &[f64],
    variance: f64,
    log_z_offset: f64,
) -> Result<TargetDensity> {
    if !(variance > 0.0) {
        return Err(OaisError::InvalidParameter(format!(
            "variance must be positive, got {variance}"
        )));
    }
    if mean.is_empty() {
        return Err(OaisError::InvalidParameter("mean must be non-empty".into()));
    }
    if !log_z_offset.is_finite() {
        return Err(OaisError::InvalidParameter(
            "log_z_offset must be finite".into(),
        ));
    }
    let mean_v = mean.to_vec();
    let m = mean_v.clone();
    let dim = mean.len();
    Ok(TargetDensity {
        log_unnorm: Arc::new(move |x: &[f64]| gaussian_log_pdf(x, &m, variance) + log_z_offset),
        dim,
        log_z: Some(log_z_offset),
        kind: TargetKind::Gaussian {
            mean: mean_v.clone(),
            variance,
        },
        support_center: mean_v,
        support_radius: 12.0 * variance.sqrt(),
    })
}

/// Gaussian mixture target, normalised by construction (`log Z = 0`).
/// Components are `(weight, mean, variance)`; weights must sum to one.
pub fn make_mixture_target(components: &[(f64, Vec<f64>, f64)]) -> Result<TargetDensity> {
    if components.is_empty() {
        return Err(OaisError::InvalidParameter(
            "mixture needs at least one component".into(),
        ));
    }
    let dim = components[0].1.len();
    if dim == 0 {
        return Err(OaisError::InvalidParameter("mean must be non-empty".into()));
    }
    let mut weight_sum = 0.0;
    for (w, m, v) in components {
        if !(*w > 0.0) {
            return Err(OaisError::InvalidParameter(format!(
                "component weight must be positive, got {w}"
            )));
        }
        if !(*v > 0.0) {
            return Err(OaisError::InvalidParameter(format!(
                "component variance must be positive, got {v}"
            )));
        }
        if m.len() != dim {
            return Err(OaisError::DimensionMismatch {
                expected: dim,
                got: m.len(),
            });
        }
        weight_sum += w;
    }
    if (weight_sum - 1.0).abs() > 1e-12 {
        return Err(OaisError::InvalidParameter(format!(
            "mixture weights must sum to 1 within 1e-12, got {weight_sum}"
        )));
    }

    let comps: Vec<MixtureComponent> = components
        .iter()
        .map(|(w, m, v)| MixtureComponent {
            weight: *w,
            mean: m.clone(),
            variance: *v,
        })
        .collect();

    // Support hint: centroid of extreme means, radius covering every
    // component mean plus 12 sigma of the widest component.
    let mut center = vec![0.0; dim];
    for j in 0..dim {
        let lo = comps.iter().map(|c| c.mean[j]).fold(f64::INFINITY, f64::min);
        let hi = comps
            .iter()
            .map(|c| c.mean[j])
            .fold(f64::NEG_INFINITY, f64::max);
        center[j] = 0.5 * (lo + hi);
    }
    let max_sigma = comps
        .iter()
        .map(|c| c.variance.sqrt())
        .fold(0.0_f64, f64::max);
    let spread = comps
        .iter()
        .map(|c| {
            c.mean
                .iter()
                .zip(&center)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .fold(0.0_f64, f64::max);

    let eval_comps = comps.clone();
    Ok(TargetDensity {
        log_unnorm: Arc::new(move |x: &[f64]| {
            let logs: Vec<f64> = eval_comps
                .iter()
                .map(|c| c.weight.ln() + gaussian_log_pdf(x, &c.mean, c.variance))
                .collect();
            log_sum_exp(&logs)
        }),
        dim,
        log_z: Some(0.0),
        kind: TargetKind::Mixture { components: comps },
        support_center: center,
        support_radius: spread + 12.0 * max_sigma,
    })
}

type EvalFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Shape descriptor for built-in test functions; oracles use it to reduce
/// expectations under product Gaussians to a one-dimensional integral.
#[derive(Debug, Clone, PartialEq)]
pub enum PhiKind {
    CoordMeanClamp { lo: f64, hi: f64 },
    IndicatorBelow { c: f64 },
    Custom,
}

/// A bounded test function phi with a declared sup-norm bound; the bound
/// enters the error-constant arithmetic (`4 ||phi||^2`, `12 ||phi||^2`).
#[derive(Clone)]
pub struct TestFunction {
    eval: EvalFn,
    sup_bound: f64,
    label: String,
    kind: PhiKind,
}

impl fmt::Debug for TestFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TestFunction({}, sup={})", self.label, self.sup_bound)
    }
}

impl TestFunction {
    pub fn new(
        eval: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        sup_bound: f64,
        label: impl Into<String>,
    ) -> Result<Self> {
        if !(sup_bound.is_finite() && sup_bound > 0.0) {
            return Err(OaisError::InvalidParameter(
                "sup_bound must be positive and finite".into(),
            ));
        }
        Ok(Self {
            eval: Arc::new(eval),
            sup_bound,
            label: label.into(),
            kind: PhiKind::Custom,
        })
    }

    /// `phi(x) = clamp(mean(x), lo, hi)`; in one dimension this is the
    /// clamped coordinate itself.
    pub fn coord_mean_clamp(lo: f64, hi: f64) -> Result<Self> {
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(OaisError::InvalidParameter(format!(
                "need finite lo < hi, got [{lo}, {hi}]"
            )));
        }
        let mut phi = Self::new(
            move |x: &[f64]| {
                let m = x.iter().sum::<f64>() / x.len() as f64;
                m.clamp(lo, hi)
            },
            lo.abs().max(hi.abs()),
            format!("clamp(mean(x), {lo}, {hi})"),
        )?;
        phi.kind = PhiKind::CoordMeanClamp { lo, hi };
        Ok(phi)
    }

    /// Indicator `phi(x) = 1 if mean(x) <= c else 0`.
    pub fn indicator_below(c: f64) -> Result<Self> {
        if !c.is_finite() {
            return Err(OaisError::InvalidParameter("c must be finite".into()));
        }
        let mut phi = Self::new(
            move |x: &[f64]| {
                let m = x.iter().sum::<f64>() / x.len() as f64;
                if m <= c {
                    1.0
                } else {
                    0.0
                }
            },
            1.0,
            format!("1[mean(x) <= {c}]"),
        )?;
        phi.kind = PhiKind::IndicatorBelow { c };
        Ok(phi)
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        (self.eval)(x)
    }

    pub fn sup_bound(&self) -> f64 {
        self.sup_bound
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn kind(&self) -> &PhiKind {
        &self.kind
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn standard_normal_mode_density() {
        let t = make_gaussian_target(&[0.0], 1.0, true).unwrap();
        assert_abs_diff_eq!(
            t.log_unnorm(&[0.0]).unwrap(),
            -0.5 * (2.0 * PI).ln(),
            epsilon = 1e-12
        );
        assert_eq!(t.log_z(), Some(0.0));
    }

    #[test]
    fn quadratic_exponent_increment() {
        let t = make_gaussian_target(&[0.0], 1.0, true).unwrap();
        let d = t.log_norm(&[1.0]).unwrap() - t.log_norm(&[0.0]).unwrap();
        assert_abs_diff_eq!(d, -0.5, epsilon = 1e-12);
    }

    #[test]
    fn unnormalized_offset_is_constant_in_x() {
        let t = make_gaussian_target(&[3.0], 4.0, false).unwrap();
        for x in [-5.0, 0.0, 3.0, 10.0] {
            let diff = t.log_unnorm(&[x]).unwrap() - t.log_norm(&[x]).unwrap();
            assert_abs_diff_eq!(diff, DEFAULT_LOG_Z_OFFSET, epsilon = 1e-12);
        }
    }

    // Trapezoid quadrature of the normalised density on [-20, 26] with 1e5
    // nodes; independent of the Simpson oracle used elsewhere.
    #[test]
    fn gaussian_normalises_under_trapezoid_quadrature() {
        let t = make_gaussian_target(&[3.0], 4.0, false).unwrap();
        let (lo, hi, n) = (-20.0, 26.0, 100_000usize);
        let h = (hi - lo) / n as f64;
        let mut sum = 0.0;
        for i in 0..=n {
            let x = lo + i as f64 * h;
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            sum += w * t.log_norm(&[x]).unwrap().exp();
        }
        assert_abs_diff_eq!(sum * h, 1.0, epsilon = 1e-8);
    }

    #[test]
    fn rejects_bad_variance() {
        assert!(make_gaussian_target(&[0.0], 0.0, true).is_err());
        assert!(make_gaussian_target(&[0.0], -1.0, true).is_err());
    }

    #[test]
    fn degenerate_mixture_matches_gaussian() {
        let m = make_mixture_target(&[(1.0, vec![0.0], 1.0)]).unwrap();
        let g = make_gaussian_target(&[0.0], 1.0, true).unwrap();
        for x in [-2.0, 0.0, 2.0] {
            assert_abs_diff_eq!(
                m.log_unnorm(&[x]).unwrap(),
                g.log_unnorm(&[x]).unwrap(),
                epsilon = 1e-14
            );
        }
    }

    // Hand value: pi(0) = exp(-2)/sqrt(2 pi), so log pi(0) = -2 - ln(2 pi)/2.
    #[test]
    fn symmetric_mixture_center_value() {
        let m = make_mixture_target(&[(0.5, vec![-2.0], 1.0), (0.5, vec![2.0], 1.0)]).unwrap();
        assert_abs_diff_eq!(
            m.log_unnorm(&[0.0]).unwrap(),
            -2.0 - 0.5 * (2.0 * PI).ln(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn symmetric_mixture_is_even() {
        let m = make_mixture_target(&[(0.5, vec![-2.0], 1.0), (0.5, vec![2.0], 1.0)]).unwrap();
        for x in [0.5, 1.0, 3.0] {
            assert_abs_diff_eq!(
                m.log_unnorm(&[x]).unwrap(),
                m.log_unnorm(&[-x]).unwrap(),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn mixture_rejects_bad_inputs() {
        assert!(make_mixture_target(&[]).is_err());
        assert!(make_mixture_target(&[(0.5, vec![0.0], 1.0), (0.4999, vec![1.0], 1.0)]).is_err());
        assert!(make_mixture_target(&[(0.5, vec![0.0], 1.0), (0.5, vec![1.0], -1.0)]).is_err());
    }

    #[test]
    fn domain_error_is_signaled() {
        let t = TargetDensity::new(
            |x: &[f64]| if x[0] < 0.0 { f64::NAN } else { -x[0] },
            1,
            None,
            vec![0.0],
            10.0,
        )
        .unwrap();
        assert!(t.log_unnorm(&[1.0]).is_ok());
        assert!(matches!(
            t.log_unnorm(&[-1.0]),
            Err(OaisError::TargetDomain { .. })
        ));
    }

    #[test]
    fn missing_log_z_reported() {
        let t = make_gaussian_target(&[0.0], 1.0, true).unwrap().forget_log_z();
        assert!(matches!(
            t.log_norm(&[0.0]),
            Err(OaisError::MissingLogZ(_))
        ));
    }

    proptest! {
        #[test]
        fn clamp_phi_respects_sup_bound(x in proptest::collection::vec(-1e6..1e6f64, 1..4)) {
            let phi = TestFunction::coord_mean_clamp(-10.0, 10.0).unwrap();
            prop_assert!(phi.eval(&x).abs() <= phi.sup_bound());
        }

        #[test]
        fn indicator_phi_respects_sup_bound(x in proptest::collection::vec(-1e6..1e6f64, 1..4)) {
            let phi = TestFunction::indicator_below(0.5).unwrap();
            prop_assert!(phi.eval(&x).abs() <= phi.sup_bound());
        }
    }
}
