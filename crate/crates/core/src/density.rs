//! Cell-conditional Gaussian kernel density estimates on an embedded manifold.
//!
//! For the responses `Y_1..Y_n` of one covariate cell,
//!
//! ```text
//! p̂(v) = c_K / (n h^ℓ) · Σ_i exp(−‖Y_i − v‖² / 2h²)
//! ```
//!
//! with ambient Euclidean distances and the intrinsic dimension ℓ in the
//! normalization. Ranks and thresholds are computed on the raw kernel sums
//! `Σ_i exp(·)`, which differ from `p̂` by the positive constant
//! `c_K / (n h^ℓ)`; this keeps every comparison independent of `c_K`.

use std::f64::consts::TAU;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{squared_distance, ManifoldPoint};

/// `(2π)^{−ℓ/2}`, the constant that makes the flat-space Gaussian kernel a
/// probability density in dimension ℓ.
pub fn gaussian_kernel_scale(intrinsic_dim: usize) -> f64 {
    TAU.powf(-(intrinsic_dim as f64) / 2.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "h", rename_all = "snake_case")]
pub enum BandwidthRule {
    Fixed(f64),
    /// `h = n_k^{−1/(ℓ+4)}`.
    RuleOfThumb,
}

impl BandwidthRule {
    pub fn bandwidth(&self, n_k: usize, intrinsic_dim: usize) -> Result<f64> {
        match *self {
            BandwidthRule::Fixed(h) if h > 0.0 && h.is_finite() => Ok(h),
            BandwidthRule::Fixed(h) => Err(Error::InvalidParameter(format!(
                "bandwidth must be positive, got {h}"
            ))),
            BandwidthRule::RuleOfThumb => {
                if n_k == 0 {
                    Ok(1.0)
                } else {
                    Ok((n_k as f64).powf(-1.0 / (intrinsic_dim as f64 + 4.0)))
                }
            }
        }
    }
}

/// Correction subtracted from the rank-`j` score in the fast set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum ThresholdCorrection {
    /// `K(0) / (n_x h^ℓ)`: the weight one response contributes to its own
    /// score. With this correction the fast set always contains the exact set.
    SelfContribution,
    /// `K(0)² / (n_x h^{d+1})` for a covariate dimension `d`, the form used
    /// with a joint (x, y) product kernel.
    JointKernel {
        covariate_dim: usize,
    },
    None,
}

#[derive(Clone, Debug)]
pub struct CellDensity {
    responses: Vec<ManifoldPoint>,
    bandwidth: f64,
    intrinsic_dim: usize,
    kernel_scale: f64,
    in_sample: OnceLock<Vec<f64>>,
}

impl CellDensity {
    pub fn new(
        responses: Vec<ManifoldPoint>,
        bandwidth: f64,
        intrinsic_dim: usize,
    ) -> Result<Self> {
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "bandwidth must be positive, got {bandwidth}"
            )));
        }
        if intrinsic_dim == 0 {
            return Err(Error::InvalidParameter(
                "intrinsic dimension must be ≥ 1".into(),
            ));
        }
        if let Some(first) = responses.first() {
            if let Some(bad) = responses.iter().find(|p| p.dim() != first.dim()) {
                return Err(Error::DimensionMismatch {
                    expected: first.dim(),
                    got: bad.dim(),
                });
            }
        }
        Ok(Self {
            responses,
            bandwidth,
            intrinsic_dim,
            kernel_scale: gaussian_kernel_scale(intrinsic_dim),
            in_sample: OnceLock::new(),
        })
    }

    pub fn with_kernel_scale(mut self, kernel_scale: f64) -> Result<Self> {
        if !(kernel_scale > 0.0 && kernel_scale.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "kernel scale must be positive, got {kernel_scale}"
            )));
        }
        self.kernel_scale = kernel_scale;
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.responses.len()
    }

    pub fn responses(&self) -> &[ManifoldPoint] {
        &self.responses
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn intrinsic_dim(&self) -> usize {
        self.intrinsic_dim
    }

    pub fn kernel_scale(&self) -> f64 {
        self.kernel_scale
    }

    /// `K(0)`, i.e. `c_K`.
    pub fn kernel_at_zero(&self) -> f64 {
        self.kernel_scale
    }

    fn h_pow_ell(&self) -> f64 {
        self.bandwidth.powi(self.intrinsic_dim as i32)
    }

    /// Unnormalized kernel `exp(−‖a − b‖² / 2h²)`.
    #[inline]
    fn raw_kernel(&self, a: &[f64], b: &[f64]) -> f64 {
        let inv = 0.5 / (self.bandwidth * self.bandwidth);
        (-squared_distance(a, b) * inv).exp()
    }

    /// `Σ_i exp(−‖Y_i − v‖² / 2h²)`, summed in response order.
    pub fn kernel_sum(&self, v: &[f64]) -> f64 {
        self.responses
            .iter()
            .map(|y| self.raw_kernel(y.coords(), v))
            .sum()
    }

    /// Factor converting a raw kernel sum over `count` points into a density.
    fn normalizer(&self, count: usize) -> f64 {
        self.kernel_scale / (count as f64 * self.h_pow_ell())
    }

    pub fn eval(&self, v: &ManifoldPoint) -> Result<f64> {
        if self.responses.is_empty() {
            return Err(Error::EmptyCell);
        }
        Ok(self.kernel_sum(v.coords()) * self.normalizer(self.n()))
    }

    /// Estimate after adding `y_new` to the cell:
    /// `n/(n+1) · p̂(v) + c_K K(‖y_new − v‖/h) / ((n+1) h^ℓ)`.
    pub fn augmented_eval(&self, y_new: &ManifoldPoint, v: &ManifoldPoint) -> f64 {
        let raw = self.kernel_sum(v.coords()) + self.raw_kernel(y_new.coords(), v.coords());
        raw * self.normalizer(self.n() + 1)
    }

    /// Raw kernel sums at each response (each includes its own `K(0)` term).
    pub fn in_sample_sums(&self) -> &[f64] {
        self.in_sample.get_or_init(|| {
            self.responses
                .iter()
                .map(|v| self.kernel_sum(v.coords()))
                .collect()
        })
    }

    /// `p̂(Y_i)` for every response in the cell.
    pub fn in_sample_scores(&self) -> Vec<f64> {
        let norm = self.normalizer(self.n().max(1));
        self.in_sample_sums().iter().map(|s| s * norm).collect()
    }

    /// Local conformity rank of a candidate response `y`: the fraction of
    /// the `n + 1` augmented points whose augmented density does not exceed
    /// that of `y`. Ties count in favour of `y`.
    pub fn conformity_rank(&self, y: &[f64]) -> f64 {
        let n = self.n();
        if n == 0 {
            return 1.0;
        }
        let sums = self.in_sample_sums();
        let to_y: Vec<f64> = self
            .responses
            .iter()
            .map(|r| self.raw_kernel(r.coords(), y))
            .collect();
        let own: f64 = to_y.iter().sum::<f64>() + 1.0;
        let below = sums
            .iter()
            .zip(&to_y)
            .filter(|(s, k)| **s + **k <= own)
            .count();
        (below + 1) as f64 / (n + 1) as f64
    }

    pub fn correction(&self, rule: ThresholdCorrection) -> f64 {
        let n = self.n().max(1) as f64;
        match rule {
            ThresholdCorrection::SelfContribution => self.kernel_at_zero() / (n * self.h_pow_ell()),
            ThresholdCorrection::JointKernel { covariate_dim } => {
                self.kernel_at_zero().powi(2) / (n * self.bandwidth.powi(covariate_dim as i32 + 1))
            }
            ThresholdCorrection::None => 0.0,
        }
    }

    /// Rank index `j = ⌊n α⌋` used by the fast set.
    pub fn threshold_rank(&self, alpha: f64) -> Result<usize> {
        let j = (self.n() as f64 * alpha).floor() as usize;
        if j == 0 {
            return Err(Error::TooFewPoints { n: self.n(), alpha });
        }
        Ok(j.min(self.n()))
    }

    /// Threshold `p̂(Y_(j)) − correction` with the in-cell scores sorted
    /// increasingly and `j = ⌊n α⌋`.
    pub fn joint_score_threshold(
        &self,
        alpha: f64,
        correction: ThresholdCorrection,
    ) -> Result<f64> {
        let j = self.threshold_rank(alpha)?;
        let mut scores = self.in_sample_scores();
        scores.sort_by(f64::total_cmp);
        Ok(scores[j - 1] - self.correction(correction))
    }

    /// Membership test for the fast set, evaluated on raw sums so it
    /// agrees with [`CellDensity::conformity_rank`] bit for bit.
    pub(crate) fn fast_rule(
        &self,
        alpha: f64,
        correction: ThresholdCorrection,
    ) -> Result<FastRule> {
        let j = self.threshold_rank(alpha)?;
        let mut sums = self.in_sample_sums().to_vec();
        sums.sort_by(f64::total_cmp);
        let raw_correction = match correction {
            ThresholdCorrection::SelfContribution => 1.0,
            other => self.correction(other) / self.normalizer(self.n()),
        };
        Ok(FastRule {
            rank_sum: sums[j - 1],
            raw_correction,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct FastRule {
    rank_sum: f64,
    raw_correction: f64,
}

impl FastRule {
    pub(crate) fn admits(&self, cell: &CellDensity, y: &[f64]) -> bool {
        cell.kernel_sum(y) + self.raw_correction >= self.rank_sum
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{EmbeddedManifold, VonMisesFisher};
    use crate::rng::substream;
    use approx::assert_relative_eq;
    use rand::distr::Distribution;
    use rand::Rng;

    fn p(c: [f64; 3]) -> ManifoldPoint {
        ManifoldPoint::from(c)
    }

    #[test]
    fn single_response_at_query() {
        let v = p([0.0, 0.0, 1.0]);
        let cd = CellDensity::new(vec![v.clone()], 1.0, 2).unwrap();
        assert_relative_eq!(
            cd.eval(&v).unwrap(),
            0.159_154_943_091_895_35,
            epsilon = 1e-15
        );
    }

    #[test]
    fn two_responses_at_distance_two() {
        let v = p([1.0, 0.0, 0.0]);
        let far = p([-1.0, 0.0, 0.0]);
        let cd = CellDensity::new(vec![far.clone(), far], 1.0, 2).unwrap();
        let c_k = 1.0 / TAU;
        assert_relative_eq!(cd.eval(&v).unwrap(), c_k * (-2.0f64).exp(), epsilon = 1e-15);
    }

    #[test]
    fn empty_cell_is_an_error() {
        let cd = CellDensity::new(vec![], 0.5, 2).unwrap();
        assert!(matches!(
            cd.eval(&p([1.0, 0.0, 0.0])),
            Err(Error::EmptyCell)
        ));
        assert_eq!(cd.conformity_rank(&[1.0, 0.0, 0.0]), 1.0);
    }

    #[test]
    fn invalid_construction() {
        assert!(CellDensity::new(vec![], 0.0, 2).is_err());
        assert!(CellDensity::new(vec![], f64::NAN, 2).is_err());
        assert!(CellDensity::new(
            vec![p([1.0, 0.0, 0.0]), ManifoldPoint::new(vec![1.0])],
            1.0,
            2
        )
        .is_err());
        assert!(CellDensity::new(vec![], 1.0, 2)
            .unwrap()
            .with_kernel_scale(0.0)
            .is_err());
    }

    #[test]
    fn augmented_examples() {
        let v = p([0.0, 1.0, 0.0]);
        let c_k = 1.0 / TAU;
        let empty = CellDensity::new(vec![], 1.0, 2).unwrap();
        assert_relative_eq!(empty.augmented_eval(&v, &v), c_k, epsilon = 1e-15);

        let one = CellDensity::new(vec![v.clone()], 1.0, 2).unwrap();
        assert_relative_eq!(one.augmented_eval(&v, &v), c_k, epsilon = 1e-15);

        let far = ManifoldPoint::new(vec![100.0, 1.0, 0.0]);
        assert!(one.augmented_eval(&v, &far) < 1e-100);
        assert!(one.augmented_eval(&v, &far) >= 0.0);
    }

    #[test]
    fn bandwidth_rules() {
        assert_eq!(BandwidthRule::Fixed(0.4).bandwidth(10, 2).unwrap(), 0.4);
        assert!(BandwidthRule::Fixed(-1.0).bandwidth(10, 2).is_err());
        let h = BandwidthRule::RuleOfThumb.bandwidth(64, 2).unwrap();
        assert_relative_eq!(h, 64f64.powf(-1.0 / 6.0));
        assert!(BandwidthRule::RuleOfThumb.bandwidth(0, 3).unwrap() > 0.0);
    }

    #[test]
    fn threshold_rank_and_correction() {
        let mut rng = substream(2, "cells");
        let pts = EmbeddedManifold::sphere().uniform_sample(10, &mut rng);
        let cd = CellDensity::new(pts, 0.7, 2).unwrap();
        assert_eq!(cd.threshold_rank(0.1).unwrap(), 1);
        assert!(matches!(
            cd.threshold_rank(0.05),
            Err(Error::TooFewPoints { .. })
        ));
        let min_score = cd
            .in_sample_scores()
            .into_iter()
            .fold(f64::INFINITY, f64::min);
        let t = cd
            .joint_score_threshold(0.1, ThresholdCorrection::None)
            .unwrap();
        assert_eq!(t, min_score);

        let pts = EmbeddedManifold::sphere().uniform_sample(100, &mut rng);
        let cd = CellDensity::new(pts, 0.5, 2).unwrap();
        let corr = cd.correction(ThresholdCorrection::JointKernel { covariate_dim: 1 });
        // (2π)^{-2} / (100 · 0.25)
        assert_relative_eq!(corr, 1.013_211_836_4e-3, max_relative = 1e-9);
        assert_relative_eq!(
            cd.correction(ThresholdCorrection::SelfContribution),
            (1.0 / TAU) / (100.0 * 0.25)
        );
    }

    #[test]
    fn bounded_by_kernel_peak() {
        let vmf = VonMisesFisher::new([0.0, 1.0, 0.0], 5.0).unwrap();
        let mut rng = substream(8, "bound");
        let cd = CellDensity::new(vmf.sample_n(300, &mut rng), 0.3, 2).unwrap();
        let bound = cd.kernel_scale() / 0.3f64.powi(2);
        let grid = EmbeddedManifold::sphere().uniform_sample(10_000, &mut rng);
        for v in grid.iter().chain(cd.responses()) {
            let val = cd.eval(v).unwrap();
            assert!(val >= 0.0 && val <= bound);
        }
    }

    #[test]
    fn integrates_to_about_one_on_the_sphere() {
        let s = EmbeddedManifold::sphere();
        let vmf = VonMisesFisher::new([0.0, 0.0, 1.0], 5.0).unwrap();
        let mut rng = substream(9, "int");
        let cd = CellDensity::new(vmf.sample_n(200, &mut rng), 0.3, 2).unwrap();
        let n_mc = 200_000;
        let total: f64 = (0..n_mc)
            .map(|_| cd.eval(&s.uniform_point(&mut rng)).unwrap())
            .sum::<f64>()
            * s.total_volume()
            / n_mc as f64;
        assert!((total - 1.0).abs() < 0.05, "{total}");
    }

    #[test]
    fn augmented_converges_to_base() {
        let s = EmbeddedManifold::sphere();
        let mut rng = substream(10, "aug");
        let y = s.uniform_point(&mut rng);
        let v = s.uniform_point(&mut rng);
        for n in [10, 100, 1000] {
            let cd = CellDensity::new(s.uniform_sample(n, &mut rng), 1.0, 2).unwrap();
            let diff = (cd.augmented_eval(&y, &v) - cd.eval(&v).unwrap()).abs();
            assert!(diff <= cd.kernel_scale() * 2.0 / (n as f64 + 1.0));
        }
    }

    #[test]
    fn sup_error_shrinks_with_sample_size() {
        let s = EmbeddedManifold::sphere();
        let vmf = VonMisesFisher::new([0.0, 0.0, 1.0], 5.0).unwrap();
        let sup_error = |n: usize, seed: u64| {
            let mut rng = substream(seed, "sup");
            let nf = n as f64;
            let h = 0.2 * (nf.ln() / nf).powf(1.0 / 6.0);
            let cd = CellDensity::new(vmf.sample_n(n, &mut rng), h, 2).unwrap();
            let mut test_rng = substream(7, "test-points");
            (0..500)
                .map(|_| {
                    let v = if test_rng.random_bool(0.5) {
                        vmf.sample(&mut test_rng)
                    } else {
                        s.uniform_point(&mut test_rng)
                    };
                    (cd.eval(&v).unwrap() - vmf.density(v.coords())).abs()
                })
                .fold(0.0, f64::max)
        };
        let median = |n: usize| {
            let mut e: Vec<f64> = (0..10).map(|seed| sup_error(n, seed)).collect();
            e.sort_by(f64::total_cmp);
            (e[4] + e[5]) / 2.0
        };
        let (big, small) = (median(2000), median(200));
        assert!(big < small, "{big} vs {small}");
    }

    #[test]
    fn scale_multiplies_outputs() {
        let s = EmbeddedManifold::sphere();
        let mut rng = substream(12, "scale");
        let pts = s.uniform_sample(30, &mut rng);
        let base = CellDensity::new(pts.clone(), 0.6, 2).unwrap();
        let scaled = CellDensity::new(pts, 0.6, 2)
            .unwrap()
            .with_kernel_scale(base.kernel_scale() * 10.0)
            .unwrap();
        let v = s.uniform_point(&mut rng);
        let y = s.uniform_point(&mut rng);
        assert_relative_eq!(
            scaled.eval(&v).unwrap(),
            10.0 * base.eval(&v).unwrap(),
            max_relative = 1e-14
        );
        assert_relative_eq!(
            scaled.augmented_eval(&y, &v),
            10.0 * base.augmented_eval(&y, &v),
            max_relative = 1e-14
        );
    }
}
