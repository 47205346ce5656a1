//! Small numeric helpers: compensated summation, log-sum-exp, vector ops.

/// Neumaier-compensated sum. Weight normalisation promises |sum - 1| <= 1e-12
/// even for large particle counts, which naive summation cannot deliver.
pub(crate) fn kahan_sum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut c = 0.0;
    for x in xs {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            c += (sum - t) + x;
        } else {
            c += (x - t) + sum;
        }
        sum = t;
    }
    sum + c
}

/// log(sum(exp(xs))) with max-subtraction. Returns -inf on an empty slice or
/// when every entry is -inf.
pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return f64::NEG_INFINITY;
    }
    m + kahan_sum(xs.iter().map(|&x| (x - m).exp())).ln()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm2(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

#[cfg(test)]
pub(crate) fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

#[cfg(test)]
pub(crate) fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    kahan_sum(xs.iter().copied()) / xs.len() as f64
}

#[cfg(test)]
pub(crate) fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    kahan_sum(xs.iter().map(|&x| (x - m) * (x - m))) / xs.len() as f64
}

/// Standard error of the mean of `xs`.
#[cfg(test)]
pub(crate) fn std_error(xs: &[f64]) -> f64 {
    (variance(xs) / xs.len() as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kahan_beats_naive_on_cancellation() {
        let xs = vec![1.0, 1e100, 1.0, -1e100];
        assert_eq!(kahan_sum(xs), 2.0);
    }

    #[test]
    fn log_sum_exp_matches_direct() {
        let xs = [0.2_f64.ln(), 0.3_f64.ln()];
        assert!((log_sum_exp(&xs).exp() - 0.5).abs() < 1e-14);
    }

    #[test]
    fn log_sum_exp_handles_all_neg_inf() {
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY; 3]), f64::NEG_INFINITY);
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
    }

    #[test]
    fn log_sum_exp_large_offsets() {
        let xs = [1000.0, 1000.0 + 3f64.ln()];
        assert!((log_sum_exp(&xs) - (1000.0 + 4f64.ln())).abs() < 1e-10);
    }
}
