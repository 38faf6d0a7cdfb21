//! Empirical distribution functions with interpolated inverses.

use serde::{Deserialize, Serialize};

/// Empirical CDF over a sample of size `n`, with a piecewise-linear inverse.
///
/// The inverse satisfies `quantile(k/n) = k`-th order statistic (1-based `k`),
/// interpolates linearly between adjacent order statistics, and is constant
/// beyond the extremes. `cdf` is the exact inverse of `quantile` on the data
/// range, so `quantile(cdf(x)) == x` for `x` within the sample range.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmpiricalCdf {
    sorted: Vec<f64>,
}

impl EmpiricalCdf {
    /// Builds from a sample; values are sorted internally. NaN is rejected.
    pub fn new(mut values: Vec<f64>) -> Self {
        assert!(!values.is_empty(), "empirical CDF needs at least one value");
        assert!(values.iter().all(|v| v.is_finite()), "non-finite sample");
        values.sort_by(|a, b| a.partial_cmp(b).unwrap());
        EmpiricalCdf { sorted: values }
    }

    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }

    /// Sorted sample values backing the CDF.
    pub fn values(&self) -> &[f64] {
        &self.sorted
    }

    /// Interpolated inverse CDF. `u` outside `[1/n, 1]` clamps to the extremes.
    pub fn quantile(&self, u: f64) -> f64 {
        let n = self.sorted.len() as f64;
        let t = u * n; // position on the 1-based order-statistic axis
        if t <= 1.0 {
            return self.sorted[0];
        }
        if t >= n {
            return *self.sorted.last().unwrap();
        }
        let k = t.floor();
        let frac = t - k;
        let i = k as usize - 1;
        self.sorted[i] + frac * (self.sorted[i + 1] - self.sorted[i])
    }

    /// Piecewise-linear CDF, the inverse of [`Self::quantile`].
    ///
    /// Returns values in `[1/n, 1]`; `x` below the smallest sample maps to
    /// `1/n` and `x` above the largest maps to 1. Over flat runs (tied
    /// samples) the largest consistent value is returned.
    pub fn cdf(&self, x: f64) -> f64 {
        let n = self.sorted.len() as f64;
        if x <= self.sorted[0] {
            return 1.0 / n;
        }
        if x >= *self.sorted.last().unwrap() {
            return 1.0;
        }
        // partition_point: index of first element > x
        let hi = self.sorted.partition_point(|&v| v <= x);
        // sorted[hi-1] <= x < sorted[hi]
        let lo = hi - 1;
        let (a, b) = (self.sorted[lo], self.sorted[hi]);
        let frac = if b > a { (x - a) / (b - a) } else { 0.0 };
        ((lo + 1) as f64 + frac) / n
    }
}

/// Ranks of `values` (0-based, ascending); ties broken by original index so
/// the result is a permutation.
pub fn ranks(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        values[a]
            .partial_cmp(&values[b])
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut rank = vec![0usize; values.len()];
    for (r, &idx) in order.iter().enumerate() {
        rank[idx] = r;
    }
    rank
}

/// Pseudo-observations `rank/(n+1)` used as copula inputs.
pub fn pseudo_observations(values: &[f64]) -> Vec<f64> {
    let n = values.len() as f64;
    ranks(values)
        .into_iter()
        .map(|r| (r as f64 + 1.0) / (n + 1.0))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn quantile_hits_order_statistics() {
        let e = EmpiricalCdf::new(vec![3.0, 1.0, 2.0, 5.0]);
        let n = 4.0;
        for (k, want) in [(1, 1.0), (2, 2.0), (3, 3.0), (4, 5.0)] {
            assert_eq!(e.quantile(k as f64 / n), want);
        }
        // midway between 2nd and 3rd order statistic
        assert_relative_eq!(e.quantile(2.5 / n), 2.5);
        // constant beyond extremes
        assert_eq!(e.quantile(0.0), 1.0);
        assert_eq!(e.quantile(1.0), 5.0);
    }

    #[test]
    fn cdf_inverts_quantile() {
        let e = EmpiricalCdf::new(vec![0.4, -1.0, 2.2, 7.5, 3.3]);
        for i in 0..=100 {
            let u = 0.2 + 0.8 * i as f64 / 100.0;
            assert_relative_eq!(e.cdf(e.quantile(u)), u, epsilon = 1e-12);
        }
        for &x in e.values() {
            assert_relative_eq!(e.quantile(e.cdf(x)), x, epsilon = 1e-12);
        }
    }

    #[test]
    fn ranks_are_a_permutation_with_ties() {
        let r = ranks(&[2.0, 1.0, 2.0, 0.5]);
        assert_eq!(r, vec![2, 1, 3, 0]);
    }
}
