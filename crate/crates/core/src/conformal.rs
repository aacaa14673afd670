//! Fitted local conformal models, prediction sets and oracle sets.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::density::{BandwidthRule, CellDensity, ThresholdCorrection};
use crate::error::{Error, Result};
use crate::geometry::{EmbeddedManifold, ManifoldPoint};
use crate::partition::{check_alpha, CellId, LevelProfile, Partition};

/// One `(x, y)` pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub x: Vec<f64>,
    pub y: ManifoldPoint,
}

impl Observation {
    pub fn new(x: Vec<f64>, y: ManifoldPoint) -> Self {
        Self { x, y }
    }
}

#[derive(Clone, Debug)]
pub struct ConformalModel {
    partition: Partition,
    cells: Vec<CellDensity>,
    covariates: Vec<Vec<Vec<f64>>>,
    bandwidth_rule: BandwidthRule,
    manifold: EmbeddedManifold,
}

impl ConformalModel {
    /// Splits the data by cell and fits one kernel density per cell, with
    /// the bandwidth chosen from each cell's own count.
    pub fn fit(
        data: &[Observation],
        partition: Partition,
        bandwidth_rule: BandwidthRule,
        manifold: EmbeddedManifold,
    ) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::NoData);
        }
        let k = partition.n_cells();
        let mut responses: Vec<Vec<ManifoldPoint>> = vec![Vec::new(); k];
        let mut covariates: Vec<Vec<Vec<f64>>> = vec![Vec::new(); k];
        for obs in data {
            if !manifold.contains(obs.y.coords()) {
                return Err(Error::OffManifold(obs.y.coords().to_vec()));
            }
            let cell = partition.locate(&obs.x)?;
            responses[cell.0].push(obs.y.clone());
            covariates[cell.0].push(obs.x.clone());
        }
        let ell = manifold.intrinsic_dim();
        let cells = responses
            .into_iter()
            .map(|r| {
                let h = bandwidth_rule.bandwidth(r.len(), ell)?;
                CellDensity::new(r, h, ell)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            partition,
            cells,
            covariates,
            bandwidth_rule,
            manifold,
        })
    }

    /// Same model with every cell's kernel constant `c_K` replaced.
    pub fn with_kernel_scale(self, kernel_scale: f64) -> Result<Self> {
        let cells = self
            .cells
            .into_iter()
            .map(|c| c.with_kernel_scale(kernel_scale))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { cells, ..self })
    }

    pub fn partition(&self) -> &Partition {
        &self.partition
    }

    pub fn manifold(&self) -> &EmbeddedManifold {
        &self.manifold
    }

    pub fn bandwidth_rule(&self) -> BandwidthRule {
        self.bandwidth_rule
    }

    pub fn cells(&self) -> &[CellDensity] {
        &self.cells
    }

    pub fn cell(&self, id: CellId) -> &CellDensity {
        &self.cells[id.0]
    }

    pub fn cell_covariates(&self, id: CellId) -> &[Vec<f64>] {
        &self.covariates[id.0]
    }

    pub fn cell_counts(&self) -> Vec<usize> {
        self.cells.iter().map(CellDensity::n).collect()
    }

    pub fn n(&self) -> usize {
        self.cells.iter().map(CellDensity::n).sum()
    }

    pub fn locate(&self, x: &[f64]) -> Result<CellId> {
        self.partition.locate(x)
    }

    /// π_{n,k}(x, y) ∈ {1/(n_k+1), …, 1}; 1 for an empty cell.
    pub fn conformity_rank(&self, x: &[f64], y: &ManifoldPoint) -> Result<f64> {
        let cell = self.locate(x)?;
        self.check_point(y)?;
        Ok(self.cells[cell.0].conformity_rank(y.coords()))
    }

    pub fn contains(&self, x: &[f64], y: &ManifoldPoint, alpha: f64) -> Result<bool> {
        Ok(self.conformity_rank(x, y)? >= alpha)
    }

    fn check_point(&self, y: &ManifoldPoint) -> Result<()> {
        let d = self.manifold.ambient_dim();
        if y.dim() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: y.dim(),
            });
        }
        Ok(())
    }

    /// Flags every candidate by `π_{n,k}(x, y) ≥ α`.
    pub fn predict_set(
        &self,
        x: &[f64],
        alpha: f64,
        candidates: &[ManifoldPoint],
    ) -> Result<PredictionSet> {
        let cell = self.locate(x)?;
        candidates.iter().try_for_each(|c| self.check_point(c))?;
        let density = &self.cells[cell.0];
        density.in_sample_sums();
        let flags: Vec<bool> = candidates
            .par_iter()
            .map(|c| density.conformity_rank(c.coords()) >= alpha)
            .collect();
        Ok(PredictionSet::from_flags(
            x.to_vec(),
            alpha,
            cell,
            candidates,
            flags,
        ))
    }

    /// Threshold set `{y : p̂(y|A_x) ≥ p̂(Y_(j)|A_x) − correction}` with
    /// `j = ⌊n_x α⌋`.
    pub fn predict_set_fast(
        &self,
        x: &[f64],
        alpha: f64,
        candidates: &[ManifoldPoint],
        correction: ThresholdCorrection,
    ) -> Result<PredictionSet> {
        let cell = self.locate(x)?;
        candidates.iter().try_for_each(|c| self.check_point(c))?;
        let density = &self.cells[cell.0];
        let rule = density.fast_rule(alpha, correction)?;
        let flags: Vec<bool> = candidates
            .par_iter()
            .map(|c| rule.admits(density, c.coords()))
            .collect();
        Ok(PredictionSet::from_flags(
            x.to_vec(),
            alpha,
            cell,
            candidates,
            flags,
        ))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetMember {
    pub point: ManifoldPoint,
    pub in_set: bool,
}

/// A prediction set materialized on a candidate sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub query_x: Vec<f64>,
    pub alpha: f64,
    pub cell: CellId,
    pub members: Vec<SetMember>,
}

impl PredictionSet {
    fn from_flags(
        query_x: Vec<f64>,
        alpha: f64,
        cell: CellId,
        candidates: &[ManifoldPoint],
        flags: Vec<bool>,
    ) -> Self {
        let members = candidates
            .iter()
            .zip(flags)
            .map(|(p, in_set)| SetMember {
                point: p.clone(),
                in_set,
            })
            .collect();
        Self {
            query_x,
            alpha,
            cell,
            members,
        }
    }

    pub fn flags(&self) -> Vec<bool> {
        self.members.iter().map(|m| m.in_set).collect()
    }

    pub fn in_set_points(&self) -> impl Iterator<Item = &ManifoldPoint> {
        self.members.iter().filter(|m| m.in_set).map(|m| &m.point)
    }

    pub fn count_in(&self) -> usize {
        self.members.iter().filter(|m| m.in_set).count()
    }

    /// Fraction of candidates flagged in; `None` without candidates.
    pub fn fraction_in(&self) -> Option<f64> {
        if self.members.is_empty() {
            None
        } else {
            Some(self.count_in() as f64 / self.members.len() as f64)
        }
    }
}

/// Population level set `{y : p(y|x) ≥ t}`.
#[derive(Clone, Debug)]
pub struct OracleSet<F> {
    pub level: f64,
    pub alpha: f64,
    density: F,
    manifold: EmbeddedManifold,
}

impl<F: Fn(&ManifoldPoint) -> f64> OracleSet<F> {
    pub fn contains(&self, y: &ManifoldPoint) -> bool {
        (self.density)(y) >= self.level
    }

    pub fn manifold(&self) -> &EmbeddedManifold {
        &self.manifold
    }

    pub fn density(&self, y: &ManifoldPoint) -> f64 {
        (self.density)(y)
    }
}

/// Largest level `t` on the sorted Monte Carlo density values whose upper
/// level set has estimated mass at least `1 − α`.
pub fn oracle_level<F, R>(
    density: &F,
    alpha: f64,
    m: &EmbeddedManifold,
    n_mc: usize,
    rng: &mut R,
) -> Result<f64>
where
    F: Fn(&ManifoldPoint) -> f64,
    R: Rng + ?Sized,
{
    check_alpha(alpha)?;
    Ok(LevelProfile::from_density(density, m, n_mc, rng)?.upper_level(alpha))
}

pub fn oracle_set<F, R>(
    density: F,
    alpha: f64,
    m: &EmbeddedManifold,
    n_mc: usize,
    rng: &mut R,
) -> Result<OracleSet<F>>
where
    F: Fn(&ManifoldPoint) -> f64,
    R: Rng + ?Sized,
{
    let level = oracle_level(&density, alpha, m, n_mc, rng)?;
    Ok(OracleSet {
        level,
        alpha,
        density,
        manifold: *m,
    })
}

/// Oracle set with a known level.
pub fn oracle_set_with_level<F>(
    density: F,
    level: f64,
    alpha: f64,
    m: &EmbeddedManifold,
) -> OracleSet<F>
where
    F: Fn(&ManifoldPoint) -> f64,
{
    OracleSet {
        level,
        alpha,
        density,
        manifold: *m,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::VonMisesFisher;
    use crate::rng::substream;
    use approx::assert_relative_eq;

    fn sphere_obs(xs: &[f64], mu: [f64; 3], kappa: f64, seed: u64) -> Vec<Observation> {
        let vmf = VonMisesFisher::new(mu, kappa).unwrap();
        let mut rng = substream(seed, "obs");
        xs.iter()
            .map(|&x| Observation::new(vec![x], vmf.sample_n(1, &mut rng).remove(0)))
            .collect()
    }

    #[test]
    fn fit_splits_by_cell() {
        let mut rng = substream(1, "x");
        let xs: Vec<f64> = (0..400).map(|_| rng.random_range(-1.0..1.0)).collect();
        let data = sphere_obs(&xs, [1.0, 0.0, 0.0], 200.0, 1);
        let model = ConformalModel::fit(
            &data,
            Partition::intervals(-1.0, 1.0, 4).unwrap(),
            BandwidthRule::Fixed(0.5),
            EmbeddedManifold::sphere(),
        )
        .unwrap();
        assert_eq!(model.cells().len(), 4);
        assert_eq!(model.n(), 400);
        assert!(model.cell_counts().iter().all(|&c| c > 50));
    }

    #[test]
    fn fit_errors() {
        let m = EmbeddedManifold::sphere();
        let p = Partition::intervals(0.0, 1.0, 2).unwrap();
        assert!(matches!(
            ConformalModel::fit(&[], p.clone(), BandwidthRule::RuleOfThumb, m),
            Err(Error::NoData)
        ));
        let off = vec![Observation::new(
            vec![0.5],
            ManifoldPoint::from([2.0, 0.0, 0.0]),
        )];
        assert!(matches!(
            ConformalModel::fit(&off, p, BandwidthRule::RuleOfThumb, m),
            Err(Error::OffManifold(_))
        ));
    }

    #[test]
    fn tiny_cells() {
        let data = sphere_obs(&[0.2, 0.3], [0.0, 1.0, 0.0], 50.0, 2);
        let model = ConformalModel::fit(
            &data,
            Partition::intervals(0.0, 1.0, 2).unwrap(),
            BandwidthRule::Fixed(0.5),
            EmbeddedManifold::sphere(),
        )
        .unwrap();
        assert_eq!(model.cell_counts(), vec![2, 0]);
        // empty cell: only the augmented point
        assert_eq!(model.conformity_rank(&[0.9], &data[0].y).unwrap(), 1.0);
        let far = ManifoldPoint::from([0.0, -1.0, 0.0]);
        assert_eq!(model.conformity_rank(&[0.2], &far).unwrap(), 1.0 / 3.0);
        assert!(!model.contains(&[0.2], &far, 0.5).unwrap());
        assert!(model.contains(&[0.2], &far, 0.3).unwrap());
        assert!(model.conformity_rank(&[0.2], &data[0].y).unwrap() > 0.5);

        // a single response is symmetric with any candidate
        let one = ConformalModel::fit(
            &data[..1],
            Partition::intervals(0.0, 1.0, 2).unwrap(),
            BandwidthRule::RuleOfThumb,
            EmbeddedManifold::sphere(),
        )
        .unwrap();
        assert_eq!(one.conformity_rank(&[0.2], &far).unwrap(), 1.0);
    }

    #[test]
    fn permutation_invariance() {
        let mut rng = substream(3, "x");
        let xs: Vec<f64> = (0..60).map(|_| rng.random::<f64>()).collect();
        let data = sphere_obs(&xs, [0.0, 0.0, 1.0], 20.0, 3);
        let mut reversed = data.clone();
        reversed.reverse();
        let fit = |d: &[Observation]| {
            ConformalModel::fit(
                d,
                Partition::intervals(0.0, 1.0, 3).unwrap(),
                BandwidthRule::Fixed(0.4),
                EmbeddedManifold::sphere(),
            )
            .unwrap()
        };
        let (a, b) = (fit(&data), fit(&reversed));
        let probes = EmbeddedManifold::sphere().uniform_sample(50, &mut rng);
        for (ca, cb) in a.cells().iter().zip(b.cells()) {
            for v in &probes {
                assert_relative_eq!(
                    ca.eval(v).unwrap(),
                    cb.eval(v).unwrap(),
                    max_relative = 1e-12
                );
            }
        }
    }

    #[test]
    fn training_responses_are_in_at_minimal_alpha() {
        let mut rng = substream(4, "x");
        let xs: Vec<f64> = (0..80).map(|_| rng.random::<f64>()).collect();
        let data = sphere_obs(&xs, [0.0, 0.0, 1.0], 20.0, 4);
        let model = ConformalModel::fit(
            &data,
            Partition::intervals(0.0, 1.0, 1).unwrap(),
            BandwidthRule::Fixed(0.4),
            EmbeddedManifold::sphere(),
        )
        .unwrap();
        let cell = model.cell(CellId(0));
        let alpha = 1.0 / (cell.n() as f64 + 1.0);
        let set = model.predict_set(&[0.5], alpha, cell.responses()).unwrap();
        assert_eq!(set.count_in(), cell.n());

        let empty = model.predict_set(&[0.5], 0.1, &[]).unwrap();
        assert!(empty.members.is_empty());
        assert_eq!(empty.fraction_in(), None);
    }

    #[test]
    fn fast_set_with_rank_one_threshold() {
        let mut rng = substream(5, "x");
        let xs: Vec<f64> = (0..10).map(|_| rng.random::<f64>()).collect();
        let data = sphere_obs(&xs, [0.0, 0.0, 1.0], 20.0, 5);
        let model = ConformalModel::fit(
            &data,
            Partition::intervals(0.0, 1.0, 1).unwrap(),
            BandwidthRule::Fixed(0.4),
            EmbeddedManifold::sphere(),
        )
        .unwrap();
        let responses = model.cell(CellId(0)).responses().to_vec();
        let fast = model
            .predict_set_fast(
                &[0.5],
                0.1,
                &responses,
                ThresholdCorrection::SelfContribution,
            )
            .unwrap();
        assert_eq!(fast.count_in(), 10);
        assert!(matches!(
            model.predict_set_fast(
                &[0.5],
                0.05,
                &responses,
                ThresholdCorrection::SelfContribution
            ),
            Err(Error::TooFewPoints { .. })
        ));

        // no correction and the smallest admissible α: threshold at the
        // minimum score, so most of the sphere near the data is admitted
        let grid = EmbeddedManifold::sphere().uniform_sample(2000, &mut rng);
        let loose = model
            .predict_set_fast(&[0.5], 0.1, &grid, ThresholdCorrection::None)
            .unwrap();
        let exact = model.predict_set(&[0.5], 0.1, &grid).unwrap();
        assert!(loose.count_in() >= exact.count_in() / 2);
    }

    #[test]
    fn oracle_level_uniform_density() {
        let m = EmbeddedManifold::sphere();
        let u = 1.0 / m.total_volume();
        let set = oracle_set(
            move |_: &ManifoldPoint| u,
            0.3,
            &m,
            1000,
            &mut substream(1, "o"),
        )
        .unwrap();
        assert_eq!(set.level, u);
        let pts = m.uniform_sample(100, &mut substream(2, "o"));
        assert!(pts.iter().all(|p| set.contains(p)));
    }

    #[test]
    fn oracle_level_vmf() {
        let m = EmbeddedManifold::sphere();
        let vmf = VonMisesFisher::new([1.0, 0.0, 0.0], 200.0).unwrap();
        let c = vmf.cap_threshold(0.9);
        assert_relative_eq!(c, 0.988_487, epsilon = 1e-6);
        let analytic = vmf.density(&[c, (1.0 - c * c).sqrt(), 0.0]);
        let density = |v: &ManifoldPoint| vmf.density(v.coords());
        let t = oracle_level(&density, 0.1, &m, 1_000_000, &mut substream(3, "o")).unwrap();
        assert!(
            (t / analytic - 1.0).abs() < 0.02,
            "t = {t}, analytic = {analytic}"
        );

        let small = oracle_level(&density, 1e-6, &m, 100_000, &mut substream(4, "o")).unwrap();
        assert!(small < 1e-3 * analytic);
    }

    #[test]
    fn vmf_oracle_set_is_a_cap() {
        let m = EmbeddedManifold::sphere();
        let vmf = VonMisesFisher::new([1.0, 0.0, 0.0], 200.0).unwrap();
        let c = vmf.cap_threshold(0.9);
        let set = oracle_set(
            |v: &ManifoldPoint| vmf.density(v.coords()),
            0.1,
            &m,
            1_000_000,
            &mut substream(5, "o"),
        )
        .unwrap();
        let pts = m.uniform_sample(100_000, &mut substream(6, "o"));
        let agree = pts
            .iter()
            .filter(|p| set.contains(p) == (p.coords()[0] >= c))
            .count();
        assert!(agree as f64 / pts.len() as f64 >= 0.999);
    }
}
