//! Small statistical toolkit: reductions, goodness-of-fit tests and an
//! equal-area partition of the sphere.

use std::f64::consts::{PI, TAU};

use statrs::distribution::{ChiSquared, ContinuousCDF};
use thiserror::Error;

use crate::geom3::UnitVec3;

/// Sum in a fixed binary-tree order, independent of how the slice was built.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    match xs.len() {
        0 => 0.0,
        n if n <= 16 => xs.iter().sum(),
        n => {
            let (l, r) = xs.split_at(n / 2);
            pairwise_sum(l) + pairwise_sum(r)
        }
    }
}

/// Sample mean and standard error of the mean.
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = pairwise_sum(xs) / n;
    if xs.len() < 2 {
        return (mean, f64::NAN);
    }
    let dev: Vec<f64> = xs.iter().map(|x| (x - mean).powi(2)).collect();
    (mean, (pairwise_sum(&dev) / (n - 1.0) / n).sqrt())
}

/// Kolmogorov–Smirnov statistic of the sample against a continuous CDF.
pub fn ks_statistic<F: Fn(f64) -> f64>(mut xs: Vec<f64>, cdf: F) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter().enumerate().fold(0.0, |d, (i, &x)| {
        let f = cdf(x);
        d.max(f - i as f64 / n).max((i + 1) as f64 / n - f)
    })
}

/// Asymptotic Kolmogorov p-value with the usual finite-n correction.
pub fn ks_pvalue(d: f64, n: usize) -> f64 {
    let sn = (n as f64).sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let term = (-2.0 * (k * k) as f64 * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-18 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Large-sample critical value of the KS statistic at level 1%.
pub fn ks_critical_1pct(n: usize) -> f64 {
    1.628 / (n as f64).sqrt()
}

/// χ² p-value of bin counts against the uniform law over the bins.
pub fn chi_square_uniform_pvalue(counts: &[u64]) -> f64 {
    let k = counts.len();
    let n: u64 = counts.iter().sum();
    if k < 2 || n == 0 {
        return f64::NAN;
    }
    let expected = n as f64 / k as f64;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let dist = ChiSquared::new((k - 1) as f64).expect("positive dof");
    dist.sf(stat)
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-x / std::f64::consts::SQRT_2)
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("bin count {0} is not of the form 3k² (e.g. 48, 192, 768)")]
pub struct BadBinCount(pub usize);

/// Equal-area partition of S²: `k` bands of equal height in `z`, each split
/// into `3k` equal azimuthal sectors.
#[derive(Debug, Clone, Copy)]
pub struct EqualAreaBins {
    n_z: usize,
    n_phi: usize,
}

impl EqualAreaBins {
    pub fn new(bins: usize) -> Result<Self, BadBinCount> {
        let k = ((bins / 3) as f64).sqrt().round() as usize;
        if k == 0 || 3 * k * k != bins {
            return Err(BadBinCount(bins));
        }
        Ok(EqualAreaBins { n_z: k, n_phi: 3 * k })
    }

    pub fn len(&self) -> usize {
        self.n_z * self.n_phi
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn index(&self, w: &UnitVec3) -> usize {
        let iz = (((w.z() + 1.0) * 0.5 * self.n_z as f64) as usize).min(self.n_z - 1);
        let phi = w.y().atan2(w.x()) + PI;
        let ip = ((phi / TAU * self.n_phi as f64) as usize).min(self.n_phi - 1);
        iz * self.n_phi + ip
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom3::UnitVec3;

    #[test]
    fn pairwise_sum_matches_naive() {
        let xs: Vec<f64> = (1..=1000).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&xs), 500_500.0);
        assert_eq!(pairwise_sum(&[]), 0.0);
    }

    #[test]
    fn ks_pvalue_reference_points() {
        // Kolmogorov distribution: P(K > 1.3581) = 0.05, P(K > 1.6276) = 0.01.
        let n = 1_000_000;
        let scale = (n as f64).sqrt() + 0.12 + 0.11 / (n as f64).sqrt();
        assert!((ks_pvalue(1.3581 / scale, n) - 0.05).abs() < 1e-4);
        assert!((ks_pvalue(1.6276 / scale, n) - 0.01).abs() < 1e-4);
    }

    #[test]
    fn ks_statistic_of_grid() {
        let xs: Vec<f64> = (0..100).map(|i| (i as f64 + 0.5) / 100.0).collect();
        assert!((ks_statistic(xs, |x| x) - 0.005).abs() < 1e-12);
    }

    #[test]
    fn chi_square_extremes() {
        assert!(chi_square_uniform_pvalue(&[100, 100, 100, 100]) > 0.99);
        assert!(chi_square_uniform_pvalue(&[400, 0, 0, 0]) < 1e-10);
    }

    #[test]
    fn bins_are_equal_area() {
        let bins = EqualAreaBins::new(192).unwrap();
        assert_eq!(bins.len(), 192);
        assert!(EqualAreaBins::new(100).is_err());
        // Each band has area 4π/k, each sector an equal share; check the
        // boundaries by mapping bin centers back to their own index.
        let (k, m) = (8, 24);
        for iz in 0..k {
            for ip in 0..m {
                let z = -1.0 + 2.0 * (iz as f64 + 0.5) / k as f64;
                let phi = -PI + TAU * (ip as f64 + 0.5) / m as f64;
                let s = (1.0 - z * z).sqrt();
                let w = UnitVec3::from_xyz(s * phi.cos(), s * phi.sin(), z).unwrap();
                assert_eq!(bins.index(&w), iz * m + ip);
            }
        }
    }
}
