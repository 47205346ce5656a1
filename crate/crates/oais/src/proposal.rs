//! Exponential-family proposals `q_theta(x) = exp(theta' T(x) - A(theta)) h(x)`
//! and the compact parameter box the adaptation is projected onto.

use std::f64::consts::PI;

use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{OaisError, Result};
use crate::numeric::dot;

/// An exponential family in natural parameterisation. The adaptation code
/// only touches the family through this interface, so other families drop in
/// without changes; the shipped concrete instance is [`GaussianMeanFamily`].
pub trait ExpFamilyProposal: Send + Sync {
    fn dim_x(&self) -> usize;
    fn dim_theta(&self) -> usize;

    /// Sufficient statistic `T(x)`.
    fn suff_stat(&self, x: &[f64]) -> Vec<f64>;

    /// Log-partition `A(theta)`, the log of the normalising integral.
    fn log_partition(&self, theta: &[f64]) -> f64;

    /// `grad A(theta)`, which equals the mean of `T(X)` under `q_theta`.
    fn grad_log_partition(&self, theta: &[f64]) -> Vec<f64>;

    /// `log h(x)`, the base measure.
    fn base_log(&self, x: &[f64]) -> f64;

    /// Draws `n` iid samples, written flat (row-major, `n * dim_x`) into a
    /// fresh buffer. Deterministic given the RNG state.
    fn sample(&self, theta: &[f64], n: usize, rng: &mut dyn RngCore) -> Vec<f64>;

    /// Region `(center, radius)` holding essentially all mass of `q_theta`;
    /// quadrature oracles integrate over it.
    fn sample_region_hint(&self, theta: &[f64]) -> (Vec<f64>, f64);

    /// `log q_theta(x) = theta' T(x) - A(theta) + log h(x)`.
    fn log_density(&self, theta: &[f64], x: &[f64]) -> f64 {
        dot(theta, &self.suff_stat(x)) - self.log_partition(theta) + self.base_log(x)
    }
}

/// Isotropic Gaussian with fixed variance and learnable mean:
/// `theta = mu / sigma^2`, `T(x) = x`, `A(theta) = sigma^2 |theta|^2 / 2 +
/// (d/2) log(2 pi sigma^2)`, `log h(x) = -|x|^2 / (2 sigma^2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMeanFamily {
    variance: f64,
    dim: usize,
}

/// Builds the fixed-covariance Gaussian mean family.
pub fn gaussian_mean_family(variance: f64, dim: usize) -> Result<GaussianMeanFamily> {
    if !(variance > 0.0) {
        return Err(OaisError::InvalidParameter(format!(
            "variance must be positive, got {variance}"
        )));
    }
    if dim == 0 {
        return Err(OaisError::InvalidParameter("dim must be positive".into()));
    }
    Ok(GaussianMeanFamily { variance, dim })
}

impl GaussianMeanFamily {
    pub fn variance(&self) -> f64 {
        self.variance
    }

    /// Mean coordinates `mu = sigma^2 theta`.
    pub fn mean_of(&self, theta: &[f64]) -> Vec<f64> {
        theta.iter().map(|t| t * self.variance).collect()
    }

    /// Natural coordinates `theta = mu / sigma^2`.
    pub fn natural_from_mean(&self, mean: &[f64]) -> Vec<f64> {
        mean.iter().map(|m| m / self.variance).collect()
    }
}

impl ExpFamilyProposal for GaussianMeanFamily {
    fn dim_x(&self) -> usize {
        self.dim
    }

    fn dim_theta(&self) -> usize {
        self.dim
    }

    fn suff_stat(&self, x: &[f64]) -> Vec<f64> {
        x.to_vec()
    }

    fn log_partition(&self, theta: &[f64]) -> f64 {
        let d = self.dim as f64;
        0.5 * self.variance * dot(theta, theta) + 0.5 * d * (2.0 * PI * self.variance).ln()
    }

    fn grad_log_partition(&self, theta: &[f64]) -> Vec<f64> {
        theta.iter().map(|t| t * self.variance).collect()
    }

    fn base_log(&self, x: &[f64]) -> f64 {
        -dot(x, x) / (2.0 * self.variance)
    }

    fn sample(&self, theta: &[f64], n: usize, rng: &mut dyn RngCore) -> Vec<f64> {
        let sigma = self.variance.sqrt();
        let mu = self.mean_of(theta);
        let mut out = Vec::with_capacity(n * self.dim);
        for _ in 0..n {
            for m in &mu {
                let z: f64 = StandardNormal.sample(rng);
                out.push(m + sigma * z);
            }
        }
        out
    }

    fn sample_region_hint(&self, theta: &[f64]) -> (Vec<f64>, f64) {
        (self.mean_of(theta), 12.0 * self.variance.sqrt())
    }
}

/// Compact parameter space: an axis-aligned box with its Euclidean
/// projection (componentwise clamp).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterBox {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl ParameterBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(OaisError::DimensionMismatch {
                expected: lower.len(),
                got: upper.len(),
            });
        }
        if lower.is_empty() {
            return Err(OaisError::InvalidParameter("box must be non-empty".into()));
        }
        for (l, u) in lower.iter().zip(&upper) {
            if !(l.is_finite() && u.is_finite() && l < u) {
                return Err(OaisError::InvalidParameter(format!(
                    "box requires finite lower < upper componentwise, got [{l}, {u}]"
                )));
            }
        }
        Ok(Self { lower, upper })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn contains(&self, v: &[f64]) -> bool {
        v.len() == self.dim()
            && v.iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(x, (l, u))| *x >= *l && *x <= *u)
    }

    /// Diameter `sup |theta - theta'|` over the box.
    pub fn diameter(&self) -> f64 {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| (u - l) * (u - l))
            .sum::<f64>()
            .sqrt()
    }

    /// The box corner farthest (Euclidean) from `v`.
    pub fn corner_farthest_from(&self, v: &[f64]) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .zip(v)
            .map(|((l, u), x)| if (x - l).abs() >= (x - u).abs() { *l } else { *u })
            .collect()
    }

    /// Regular grid with `per_axis` points per axis, endpoints included.
    pub fn grid(&self, per_axis: usize) -> Vec<Vec<f64>> {
        assert!(per_axis >= 2, "grid needs at least 2 points per axis");
        let axis: Vec<Vec<f64>> = self
            .lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| {
                (0..per_axis)
                    .map(|i| l + (u - l) * i as f64 / (per_axis - 1) as f64)
                    .collect()
            })
            .collect();
        let mut pts = vec![Vec::new()];
        for coords in &axis {
            let mut next = Vec::with_capacity(pts.len() * coords.len());
            for p in &pts {
                for c in coords {
                    let mut q = p.clone();
                    q.push(*c);
                    next.push(q);
                }
            }
            pts = next;
        }
        pts
    }

    pub fn project(&self, v: &[f64]) -> Result<Vec<f64>> {
        project(self, v)
    }
}

/// Euclidean projection onto the box: componentwise clamp.
pub fn project(bx: &ParameterBox, v: &[f64]) -> Result<Vec<f64>> {
    if v.len() != bx.dim() {
        return Err(OaisError::DimensionMismatch {
            expected: bx.dim(),
            got: v.len(),
        });
    }
    Ok(v.iter()
        .zip(bx.lower.iter().zip(&bx.upper))
        .map(|(x, (l, u))| x.clamp(*l, *u))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::norm2;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn standard_normal_log_density_at_origin() {
        let fam = gaussian_mean_family(1.0, 1).unwrap();
        assert_abs_diff_eq!(
            fam.log_density(&[0.0], &[0.0]),
            -0.5 * (2.0 * PI).ln(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn log_density_matches_direct_gaussian_pdf() {
        let fam = gaussian_mean_family(1.0, 1).unwrap();
        // N(1,1) log-pdf at 1 is -ln(2 pi)/2.
        assert_abs_diff_eq!(
            fam.log_density(&[1.0], &[1.0]),
            -0.5 * (2.0 * PI).ln(),
            epsilon = 1e-12
        );
        // and at another point, against the explicit formula
        let direct = -0.5 * (2.0 * PI).ln() - 0.5 * (2.5f64 - 1.0).powi(2);
        assert_abs_diff_eq!(fam.log_density(&[1.0], &[2.5]), direct, epsilon = 1e-12);
    }

    #[test]
    fn sample_mean_obeys_law_of_large_numbers() {
        let fam = gaussian_mean_family(1.0, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let xs = fam.sample(&[2.0], 1_000_000, &mut rng);
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        // 3 sigma band is 0.003; the stated tolerance is 0.005
        assert!((mean - 2.0).abs() < 0.005, "mean = {mean}");
    }

    #[test]
    fn grad_log_partition_is_mean_statistic() {
        let fam = gaussian_mean_family(1.0, 1).unwrap();
        assert_abs_diff_eq!(fam.grad_log_partition(&[2.0])[0], 2.0, epsilon = 1e-15);
    }

    // log q + A - theta'T = log h must hold identically.
    #[test]
    fn three_piece_decomposition_is_exact() {
        let fam = gaussian_mean_family(2.5, 2).unwrap();
        let theta = [0.3, -0.7];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let xs = fam.sample(&theta, 32, &mut rng);
        for x in xs.chunks(2) {
            let lhs = fam.log_density(&theta, x) + fam.log_partition(&theta)
                - dot(&theta, &fam.suff_stat(x));
            assert_abs_diff_eq!(lhs, fam.base_log(x), epsilon = 1e-12);
        }
    }

    #[test]
    fn sampler_matches_density_moments() {
        let fam = gaussian_mean_family(4.0, 1).unwrap();
        let theta = [0.75];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 100_000;
        let xs = fam.sample(&theta, n, &mut rng);
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        let want_mean = fam.grad_log_partition(&theta)[0];
        // mean: 3 sigma MC band; variance of T under q_theta equals the
        // finite-difference Jacobian diagonal of grad A, here sigma^2 = 4.
        let h = 1e-4;
        let fd_var = (fam.grad_log_partition(&[theta[0] + h])[0]
            - fam.grad_log_partition(&[theta[0] - h])[0])
            / (2.0 * h);
        assert!((mean - want_mean).abs() < 3.0 * (4.0f64 / n as f64).sqrt());
        assert!((var - fd_var).abs() < 3.0 * fd_var * (2.0 / n as f64).sqrt());
    }

    #[test]
    fn rejects_nonpositive_variance() {
        assert!(gaussian_mean_family(0.0, 1).is_err());
        assert!(gaussian_mean_family(-2.0, 1).is_err());
    }

    #[test]
    fn project_fixes_interior_and_clamps_corners() {
        let bx = ParameterBox::new(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap();
        assert_eq!(project(&bx, &[0.5, -0.2]).unwrap(), vec![0.5, -0.2]);
        assert_eq!(project(&bx, &[3.0, -7.0]).unwrap(), vec![1.0, -1.0]);
    }

    // Grid-search oracle: the clamp must agree with the per-axis minimiser
    // of |v - u|^2 over the box.
    #[test]
    fn project_matches_grid_search() {
        let bx = ParameterBox::new(vec![0.0, -1.0], vec![2.0, 1.0]).unwrap();
        let v = [-0.5, 0.3];
        let p = project(&bx, &v).unwrap();
        assert_eq!(p, vec![0.0, 0.3]);
        let mut best = (f64::INFINITY, vec![0.0, 0.0]);
        for u in bx.grid(201) {
            let d2: f64 = v.iter().zip(&u).map(|(a, b)| (a - b) * (a - b)).sum();
            if d2 < best.0 {
                best = (d2, u);
            }
        }
        for (a, b) in p.iter().zip(&best.1) {
            assert!((a - b).abs() <= 0.011, "clamp {p:?} vs grid {:?}", best.1);
        }
    }

    #[test]
    fn project_rejects_dimension_mismatch() {
        let bx = ParameterBox::new(vec![0.0], vec![1.0]).unwrap();
        assert!(project(&bx, &[0.1, 0.2]).is_err());
    }

    #[test]
    fn box_rejects_inverted_bounds() {
        assert!(ParameterBox::new(vec![1.0], vec![1.0]).is_err());
        assert!(ParameterBox::new(vec![2.0], vec![1.0]).is_err());
        assert!(ParameterBox::new(vec![f64::NEG_INFINITY], vec![1.0]).is_err());
    }

    #[test]
    fn farthest_corner() {
        let bx = ParameterBox::new(vec![-2.0], vec![2.0]).unwrap();
        assert_eq!(bx.corner_farthest_from(&[1.0]), vec![-2.0]);
    }

    proptest! {
        #[test]
        fn projection_is_idempotent(
            v in proptest::collection::vec(-50.0..50.0f64, 2),
        ) {
            let bx = ParameterBox::new(vec![-1.0, 0.5], vec![1.0, 3.0]).unwrap();
            let p1 = project(&bx, &v).unwrap();
            let p2 = project(&bx, &p1).unwrap();
            prop_assert_eq!(p1, p2);
        }

        #[test]
        fn projection_is_nonexpansive(
            u in proptest::collection::vec(-50.0..50.0f64, 2),
            v in proptest::collection::vec(-50.0..50.0f64, 2),
        ) {
            let bx = ParameterBox::new(vec![-1.0, 0.5], vec![1.0, 3.0]).unwrap();
            let pu = project(&bx, &u).unwrap();
            let pv = project(&bx, &v).unwrap();
            let dp = norm2(&crate::numeric::sub(&pu, &pv));
            let d = norm2(&crate::numeric::sub(&u, &v));
            prop_assert!(dp <= d + 1e-12);
        }

        // A(theta) is convex along random segments.
        #[test]
        fn log_partition_is_convex(
            a in -3.0..3.0f64, b in -3.0..3.0f64,
            c in -3.0..3.0f64, d in -3.0..3.0f64,
            lambda in 0.0..1.0f64,
        ) {
            let fam = gaussian_mean_family(1.7, 2).unwrap();
            let t1 = [a, b];
            let t2 = [c, d];
            let mid: Vec<f64> = t1.iter().zip(&t2)
                .map(|(x, y)| lambda * x + (1.0 - lambda) * y)
                .collect();
            let lhs = fam.log_partition(&mid);
            let rhs = lambda * fam.log_partition(&t1) + (1.0 - lambda) * fam.log_partition(&t2);
            prop_assert!(lhs <= rhs + 1e-9);
        }
    }
}
