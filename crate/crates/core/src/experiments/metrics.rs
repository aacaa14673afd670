//! Coverage reports and set-discrepancy measures.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conformal::{ConformalModel, Observation};
use crate::error::{Error, Result};
use crate::geometry::{EmbeddedManifold, ManifoldPoint};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellCoverage {
    pub cell: usize,
    pub n_test: usize,
    pub hits: usize,
    /// `None` when the cell received no test points.
    pub coverage: Option<f64>,
}

/// Held-out hit rates of a fitted model, overall and per cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub alpha: f64,
    pub n_test: usize,
    pub hits: usize,
    pub overall: Option<f64>,
    pub per_cell: Vec<CellCoverage>,
    /// Mean over test points of the in-set fraction of the candidate grid.
    pub mean_set_fraction: Option<f64>,
    #[serde(skip)]
    set_fraction_sum: f64,
    #[serde(skip)]
    set_fraction_count: usize,
}

fn rate(hits: usize, n: usize) -> Option<f64> {
    (n > 0).then(|| hits as f64 / n as f64)
}

impl CoverageReport {
    fn from_counts(
        alpha: f64,
        cells: &[(usize, usize)],
        fraction_sum: f64,
        fraction_count: usize,
    ) -> Self {
        let per_cell: Vec<CellCoverage> = cells
            .iter()
            .enumerate()
            .map(|(cell, &(n_test, hits))| CellCoverage {
                cell,
                n_test,
                hits,
                coverage: rate(hits, n_test),
            })
            .collect();
        let n_test = per_cell.iter().map(|c| c.n_test).sum();
        let hits = per_cell.iter().map(|c| c.hits).sum();
        Self {
            alpha,
            n_test,
            hits,
            overall: rate(hits, n_test),
            per_cell,
            mean_set_fraction: (fraction_count > 0).then(|| fraction_sum / fraction_count as f64),
            set_fraction_sum: fraction_sum,
            set_fraction_count: fraction_count,
        }
    }

    /// Pools the counts of two reports over the same partition.
    pub fn merge(&self, other: &CoverageReport) -> Result<CoverageReport> {
        if self.per_cell.len() != other.per_cell.len() {
            return Err(Error::LengthMismatch {
                left: self.per_cell.len(),
                right: other.per_cell.len(),
            });
        }
        if self.alpha != other.alpha {
            return Err(Error::InvalidParameter(format!(
                "cannot merge coverage at alpha {} and {}",
                self.alpha, other.alpha
            )));
        }
        let cells: Vec<(usize, usize)> = self
            .per_cell
            .iter()
            .zip(&other.per_cell)
            .map(|(a, b)| (a.n_test + b.n_test, a.hits + b.hits))
            .collect();
        Ok(Self::from_counts(
            self.alpha,
            &cells,
            self.set_fraction_sum + other.set_fraction_sum,
            self.set_fraction_count + other.set_fraction_count,
        ))
    }

    /// Smallest per-cell coverage among cells with at least `min_n` test points.
    pub fn min_cell_coverage(&self, min_n: usize) -> Option<f64> {
        self.per_cell
            .iter()
            .filter(|c| c.n_test >= min_n)
            .filter_map(|c| c.coverage)
            .min_by(f64::total_cmp)
    }
}

/// Hit rates of `contains(x, y, α)` on held-out pairs. With `candidates`,
/// also averages the in-set fraction of that grid; since the set depends on
/// `x` only through its cell, it is computed once per visited cell.
pub fn empirical_coverage(
    model: &ConformalModel,
    test: &[Observation],
    alpha: f64,
    candidates: Option<&[ManifoldPoint]>,
) -> Result<CoverageReport> {
    let k = model.partition().n_cells();
    let located: Vec<(usize, bool)> = test
        .par_iter()
        .map(|obs| {
            let cell = model.locate(&obs.x)?;
            Ok((cell.0, model.contains(&obs.x, &obs.y, alpha)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut cells = vec![(0usize, 0usize); k];
    for &(c, hit) in &located {
        cells[c].0 += 1;
        cells[c].1 += usize::from(hit);
    }
    let (mut fraction_sum, mut fraction_count) = (0.0, 0);
    if let Some(cands) = candidates.filter(|c| !c.is_empty()) {
        for (c, &(n_c, _)) in cells.iter().enumerate() {
            if n_c == 0 {
                continue;
            }
            let cell = model.cell(crate::partition::CellId(c));
            let inside = cands
                .par_iter()
                .filter(|y| cell.conformity_rank(y.coords()) >= alpha)
                .count();
            fraction_sum += n_c as f64 * inside as f64 / cands.len() as f64;
            fraction_count += n_c;
        }
    }
    Ok(CoverageReport::from_counts(
        alpha,
        &cells,
        fraction_sum,
        fraction_count,
    ))
}

/// ν(A △ B) estimated as ν(M) times the disagreement rate on `n_mc`
/// uniform points.
pub fn sym_diff_measure<A, B, R>(
    a: A,
    b: B,
    m: &EmbeddedManifold,
    n_mc: usize,
    rng: &mut R,
) -> Result<f64>
where
    A: Fn(&ManifoldPoint) -> bool + Sync,
    B: Fn(&ManifoldPoint) -> bool + Sync,
    R: Rng + ?Sized,
{
    if n_mc == 0 {
        return Err(Error::InvalidParameter("n_mc must be ≥ 1".into()));
    }
    let points = m.uniform_sample(n_mc, rng);
    let fa: Vec<bool> = points.par_iter().map(&a).collect();
    let fb: Vec<bool> = points.par_iter().map(&b).collect();
    sym_diff_from_flags(&fa, &fb, m.total_volume())
}

/// ν(A △ B) from membership flags on a shared uniform sample.
pub fn sym_diff_from_flags(a: &[bool], b: &[bool], volume: f64) -> Result<f64> {
    check_flags(a, b)?;
    let differ = a.iter().zip(b).filter(|(x, y)| x != y).count();
    Ok(volume * differ as f64 / a.len() as f64)
}

/// |A ∩ B| / |A ∪ B| on a shared uniform sample; `None` if both are empty.
pub fn jaccard_from_flags(a: &[bool], b: &[bool]) -> Result<Option<f64>> {
    check_flags(a, b)?;
    let both = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let either = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    Ok((either > 0).then(|| both as f64 / either as f64))
}

fn check_flags(a: &[bool], b: &[bool]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    if a.is_empty() {
        return Err(Error::InvalidParameter("empty membership sample".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::BandwidthRule;
    use crate::experiments::models::SphereRegressionModel;
    use crate::partition::Partition;
    use crate::rng::substream;
    use std::f64::consts::PI;

    fn sphere_model(seed: u64) -> ConformalModel {
        let data = SphereRegressionModel::default()
            .generate(200, &mut substream(seed, "train"))
            .unwrap();
        ConformalModel::fit(
            &data,
            Partition::intervals(-1.0, 1.0, 4).unwrap(),
            BandwidthRule::Fixed(0.5),
            EmbeddedManifold::sphere(),
        )
        .unwrap()
    }

    #[test]
    fn sym_diff_examples() {
        let s = EmbeddedManifold::sphere();
        let mut rng = substream(1, "mc");
        assert_eq!(
            sym_diff_measure(|_| true, |_| true, &s, 1000, &mut rng).unwrap(),
            0.0
        );
        assert_eq!(
            sym_diff_measure(|_| true, |_| false, &s, 1000, &mut rng).unwrap(),
            4.0 * PI
        );
        let half =
            sym_diff_measure(|p| p.coords()[2] >= 0.0, |_| true, &s, 100_000, &mut rng).unwrap();
        assert!((half - 2.0 * PI).abs() < 0.06, "{half}");
    }

    #[test]
    fn jaccard_edges() {
        assert_eq!(
            jaccard_from_flags(&[false, false], &[false, false]).unwrap(),
            None
        );
        assert_eq!(
            jaccard_from_flags(&[true, false, true], &[true, true, false]).unwrap(),
            Some(1.0 / 3.0)
        );
        assert!(jaccard_from_flags(&[true], &[true, false]).is_err());
    }

    #[test]
    fn coverage_counts_add_up() {
        let model = sphere_model(1);
        let test = SphereRegressionModel::default()
            .generate(300, &mut substream(1, "test"))
            .unwrap();
        let r = empirical_coverage(&model, &test, 0.1, None).unwrap();
        assert_eq!(r.n_test, 300);
        assert_eq!(r.per_cell.iter().map(|c| c.n_test).sum::<usize>(), 300);
        assert!(r.overall.unwrap() > 0.8);
        assert!(r.mean_set_fraction.is_none());
        for c in &r.per_cell {
            assert!(c.coverage.is_none_or(|v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn alpha_zero_covers_everything() {
        let model = sphere_model(2);
        let test = SphereRegressionModel::default()
            .generate(50, &mut substream(2, "test"))
            .unwrap();
        let grid = EmbeddedManifold::sphere().uniform_sample(200, &mut substream(2, "grid"));
        let r = empirical_coverage(&model, &test, 0.0, Some(&grid)).unwrap();
        assert_eq!(r.overall, Some(1.0));
        assert_eq!(r.mean_set_fraction, Some(1.0));
    }

    #[test]
    fn empty_test_set() {
        let model = sphere_model(3);
        let r = empirical_coverage(&model, &[], 0.1, None).unwrap();
        assert_eq!(r.n_test, 0);
        assert_eq!(r.overall, None);
        assert!(r.per_cell.iter().all(|c| c.coverage.is_none()));
    }

    #[test]
    fn merge_pools_counts() {
        let model = sphere_model(4);
        let gen = SphereRegressionModel::default();
        let a = empirical_coverage(
            &model,
            &gen.generate(40, &mut substream(4, "a")).unwrap(),
            0.1,
            None,
        )
        .unwrap();
        let b = empirical_coverage(
            &model,
            &gen.generate(60, &mut substream(4, "b")).unwrap(),
            0.1,
            None,
        )
        .unwrap();
        let m = a.merge(&b).unwrap();
        assert_eq!(m.n_test, 100);
        assert_eq!(m.hits, a.hits + b.hits);
        let other_alpha = empirical_coverage(&model, &[], 0.2, None).unwrap();
        assert!(a.merge(&other_alpha).is_err());
    }
}
