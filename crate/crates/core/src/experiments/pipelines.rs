//! End-to-end runs: simulated sphere and Stiefel regressions, the wind
//! cylinder pipeline and the simplex class-probability pipeline.
//!
//! Every run takes a single seed; each stage draws from its own named
//! substream.

use std::collections::BTreeSet;
use std::f64::consts::FRAC_PI_4;

use rand::seq::SliceRandom;
use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conformal::{ConformalModel, Observation, PredictionSet};
use crate::density::{BandwidthRule, CellDensity};
use crate::error::{Error, Result};
use crate::experiments::correlation::{angular_correlation, xi_correlation};
use crate::experiments::metrics::{
    empirical_coverage, jaccard_from_flags, sym_diff_from_flags, CoverageReport,
};
use crate::experiments::models::{
    CylinderRegressionModel, SimplexClassModel, SphereRegressionModel, StiefelRegressionModel,
};
use crate::experiments::simplex::{simplex_class_band, ClassBand};
use crate::geometry::{
    cylinder_point, dot, wrap_angle, EmbeddedManifold, HaarStiefel, ManifoldPoint,
    DEFAULT_CYLINDER_RMAX,
};
use crate::io::{SimplexRecord, WindRecord};
use crate::partition::{cd_split_partition, cube_side, Partition};
use crate::rng::{indexed_substream, substream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpherePartition {
    /// Four intervals of length 1/2 on [−1, 1].
    FixedIntervals,
    /// Intervals of side w_n with the query at the centre of its cell.
    CenteredCubes,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SphereExperiment {
    pub model: SphereRegressionModel,
    pub n: usize,
    pub alpha: f64,
    pub h: f64,
    pub partition: SpherePartition,
    pub query_x: f64,
    pub n_grid: usize,
    pub n_mc: usize,
    pub n_test: usize,
}

impl Default for SphereExperiment {
    fn default() -> Self {
        Self {
            model: SphereRegressionModel::default(),
            n: 400,
            alpha: 0.1,
            h: 0.5,
            partition: SpherePartition::FixedIntervals,
            query_x: 0.0,
            n_grid: 10_000,
            n_mc: 100_000,
            n_test: 400,
        }
    }
}

/// Scalar summary of a sphere run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SphereReport {
    pub experiment: SphereExperiment,
    pub seed: u64,
    pub n_cells: usize,
    pub query_cell: usize,
    pub query_cell_count: usize,
    pub oracle_cosine: f64,
    pub oracle_level: f64,
    pub sym_diff: f64,
    pub jaccard: Option<f64>,
    pub set_fraction: Option<f64>,
    pub oracle_fraction: Option<f64>,
    pub mode_in_set: bool,
    pub coverage: CoverageReport,
}

#[derive(Clone, Debug)]
pub struct SphereRun {
    pub report: SphereReport,
    pub set: PredictionSet,
    /// Oracle cap membership of the same candidates.
    pub oracle: PredictionSet,
}

impl SphereExperiment {
    fn validate(&self) -> Result<()> {
        if !(-1.0..=1.0).contains(&self.query_x) {
            return Err(Error::InvalidParameter(format!(
                "query x must lie in [-1, 1], got {}",
                self.query_x
            )));
        }
        if self.n == 0 || self.n_mc == 0 {
            return Err(Error::InvalidParameter("n and n_mc must be ≥ 1".into()));
        }
        Ok(())
    }

    pub fn partition(&self) -> Result<Partition> {
        match self.partition {
            SpherePartition::FixedIntervals => Partition::intervals(-1.0, 1.0, 4),
            SpherePartition::CenteredCubes => {
                let side = cube_side(self.n.max(3) as f64, 1);
                Partition::centered_cubes(side, &[self.query_x], &[-1.0], &[1.0])
            }
        }
    }

    pub fn fit(&self, seed: u64) -> Result<ConformalModel> {
        self.validate()?;
        let train = self
            .model
            .generate(self.n, &mut substream(seed, "sphere/train"))?;
        ConformalModel::fit(
            &train,
            self.partition()?,
            BandwidthRule::Fixed(self.h),
            EmbeddedManifold::sphere(),
        )
    }

    /// Cap `{μᵀy ≥ c}` of the true conditional at the query, and its level.
    pub fn oracle_cap(&self) -> Result<([f64; 3], f64, f64)> {
        let vmf = self.model.conditional(self.query_x)?;
        let c = vmf.cap_threshold(1.0 - self.alpha);
        Ok((vmf.mean_direction(), c, vmf.density_at_cosine(c)))
    }

    /// ν(Ĉ_n(x) △ C_P(x)) and the Jaccard index on `n_mc` uniform points.
    pub fn discrepancy(&self, model: &ConformalModel, seed: u64) -> Result<(f64, Option<f64>)> {
        let s = EmbeddedManifold::sphere();
        let points = s.uniform_sample(self.n_mc, &mut substream(seed, "sphere/mc"));
        let cell = model.cell(model.locate(&[self.query_x])?);
        let (mu, c, _) = self.oracle_cap()?;
        let est: Vec<bool> = points
            .par_iter()
            .map(|y| cell.conformity_rank(y.coords()) >= self.alpha)
            .collect();
        let oracle: Vec<bool> = points.iter().map(|y| dot(&mu, y.coords()) >= c).collect();
        Ok((
            sym_diff_from_flags(&est, &oracle, s.total_volume())?,
            jaccard_from_flags(&est, &oracle)?,
        ))
    }

    /// Held-out coverage on `n_test` fresh pairs.
    pub fn coverage(
        &self,
        model: &ConformalModel,
        seed: u64,
        candidates: Option<&[ManifoldPoint]>,
    ) -> Result<CoverageReport> {
        let test = self
            .model
            .generate(self.n_test, &mut substream(seed, "sphere/test"))?;
        empirical_coverage(model, &test, self.alpha, candidates)
    }

    pub fn run(&self, seed: u64) -> Result<SphereRun> {
        let model = self.fit(seed)?;
        let s = EmbeddedManifold::sphere();
        let candidates = s.uniform_sample(self.n_grid, &mut substream(seed, "sphere/grid"));
        let x = [self.query_x];
        let set = model.predict_set(&x, self.alpha, &candidates)?;
        let (mu, c, level) = self.oracle_cap()?;
        let oracle_members = candidates
            .iter()
            .map(|y| crate::conformal::SetMember {
                point: y.clone(),
                in_set: dot(&mu, y.coords()) >= c,
            })
            .collect();
        let oracle = PredictionSet {
            query_x: x.to_vec(),
            alpha: self.alpha,
            cell: set.cell,
            members: oracle_members,
        };
        let (sym_diff, jaccard) = self.discrepancy(&model, seed)?;
        let coverage = self.coverage(&model, seed, Some(&candidates))?;
        let report = SphereReport {
            experiment: self.clone(),
            seed,
            n_cells: model.partition().n_cells(),
            query_cell: set.cell.0,
            query_cell_count: model.cell(set.cell).n(),
            oracle_cosine: c,
            oracle_level: level,
            sym_diff,
            jaccard,
            set_fraction: set.fraction_in(),
            oracle_fraction: oracle.fraction_in(),
            mode_in_set: model.contains(&x, &ManifoldPoint::from(mu), self.alpha)?,
            coverage,
        };
        Ok(SphereRun {
            report,
            set,
            oracle,
        })
    }
}

/// Pools held-out coverage over `reps` independent train/test draws.
pub fn repeated_sphere_coverage(
    exp: &SphereExperiment,
    reps: usize,
    seed: u64,
) -> Result<RepeatedCoverage> {
    if reps == 0 {
        return Err(Error::InvalidParameter("reps must be ≥ 1".into()));
    }
    let reports = (0..reps as u64)
        .into_par_iter()
        .map(|r| {
            let rep_seed = indexed_substream(seed, "sphere/reps", r).next_u64();
            let model = exp.fit(rep_seed)?;
            exp.coverage(&model, rep_seed, None)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut pooled = reports[0].clone();
    for r in &reports[1..] {
        pooled = pooled.merge(r)?;
    }
    Ok(RepeatedCoverage {
        experiment: exp.clone(),
        reps,
        seed,
        per_rep_overall: reports.iter().map(|r| r.overall).collect(),
        pooled,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepeatedCoverage {
    pub experiment: SphereExperiment,
    pub reps: usize,
    pub seed: u64,
    pub per_rep_overall: Vec<Option<f64>>,
    pub pooled: CoverageReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StiefelExperiment {
    pub model: StiefelRegressionModel,
    pub n: usize,
    pub alpha: f64,
    pub h: f64,
    pub cells: usize,
    pub query_x: f64,
    pub n_grid: usize,
    pub n_test: usize,
}

impl Default for StiefelExperiment {
    fn default() -> Self {
        Self {
            model: StiefelRegressionModel::default(),
            n: 500,
            alpha: 0.05,
            h: 1.0,
            cells: 5,
            query_x: 0.1,
            n_grid: 10_000,
            n_test: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StiefelReport {
    pub experiment: StiefelExperiment,
    pub seed: u64,
    pub query_cell: usize,
    pub query_cell_count: usize,
    pub set_fraction: Option<f64>,
    pub population_frame: ManifoldPoint,
    pub population_frame_in_set: bool,
    pub coverage: CoverageReport,
}

#[derive(Clone, Debug)]
pub struct StiefelRun {
    pub report: StiefelReport,
    pub set: PredictionSet,
}

impl StiefelExperiment {
    pub fn run(&self, seed: u64) -> Result<StiefelRun> {
        if self.n == 0 || self.cells == 0 {
            return Err(Error::InvalidParameter("n and cells must be ≥ 1".into()));
        }
        let m = EmbeddedManifold::stiefel();
        let train = self
            .model
            .generate(self.n, &mut substream(seed, "stiefel/train"))?;
        let model = ConformalModel::fit(
            &train,
            Partition::intervals(0.0, 1.0, self.cells)?,
            BandwidthRule::Fixed(self.h),
            m,
        )?;
        let mut grid_rng = substream(seed, "stiefel/grid");
        let candidates: Vec<ManifoldPoint> = (0..self.n_grid)
            .map(|_| rand::distr::Distribution::sample(&HaarStiefel, &mut grid_rng))
            .collect();
        let x = [self.query_x];
        let set = model.predict_set(&x, self.alpha, &candidates)?;
        let test = self
            .model
            .generate(self.n_test, &mut substream(seed, "stiefel/test"))?;
        let coverage = empirical_coverage(&model, &test, self.alpha, None)?;
        let population_frame = self.model.population_frame(self.query_x);
        let report = StiefelReport {
            experiment: self.clone(),
            seed,
            query_cell: set.cell.0,
            query_cell_count: model.cell(set.cell).n(),
            set_fraction: set.fraction_in(),
            population_frame_in_set: model.contains(&x, &population_frame, self.alpha)?,
            population_frame,
            coverage,
        };
        Ok(StiefelRun { report, set })
    }
}

/// The grid `[iπ/4, (i+1)π/4] × [4j, 4(j+1)]`, `i < 8`, `j < 5`, on
/// station-1 `(θ, r)`.
pub fn wind_partition() -> Result<Partition> {
    let theta: Vec<f64> = (0..=8).map(|i| i as f64 * FRAC_PI_4).collect();
    let r: Vec<f64> = (0..=5).map(|j| 4.0 * j as f64).collect();
    Partition::grid(vec![theta, r])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindExperiment {
    pub alpha: f64,
    pub h: f64,
    pub n_grid: usize,
    pub query: [f64; 2],
    /// Response to flag against the query set.
    pub truth: Option<[f64; 2]>,
}

impl Default for WindExperiment {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            h: 0.4,
            n_grid: 10_000,
            query: [2.3, 5.1],
            truth: Some([2.4, 6.6]),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindReport {
    pub experiment: WindExperiment,
    pub seed: u64,
    pub n_rows: usize,
    pub n_dropped: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// ξ of station-2 on station-1 speeds.
    pub xi_speed: Option<f64>,
    pub angular_direction: Option<f64>,
    pub coverage: CoverageReport,
    pub query_cell: usize,
    pub query_cell_count: usize,
    pub set_fraction: Option<f64>,
    pub truth_in_set: Option<bool>,
}

#[derive(Clone, Debug)]
pub struct WindRun {
    pub report: WindReport,
    pub set: PredictionSet,
}

fn wind_observation(x: [f64; 2], y: [f64; 2]) -> Observation {
    Observation::new(
        vec![wrap_angle(x[0]), x[1]],
        cylinder_point(wrap_angle(y[0]), y[1]),
    )
}

/// Drops rows faster than 20 m/s at either station, splits the rest in two
/// halves, fits on the first and reports coverage on the second.
pub fn run_wind(records: &[WindRecord], exp: &WindExperiment, seed: u64) -> Result<WindRun> {
    let r_max = DEFAULT_CYLINDER_RMAX;
    let kept: Vec<&WindRecord> = records
        .iter()
        .filter(|r| r.r1 <= r_max && r.r2 <= r_max)
        .collect();
    if kept.len() < 2 {
        return Err(Error::EmptyInput(
            "fewer than two wind rows within 20 m/s".into(),
        ));
    }
    let r1: Vec<f64> = kept.iter().map(|r| r.r1).collect();
    let r2: Vec<f64> = kept.iter().map(|r| r.r2).collect();
    let t1: Vec<f64> = kept.iter().map(|r| r.theta1).collect();
    let t2: Vec<f64> = kept.iter().map(|r| r.theta2).collect();
    let xi_speed = optional(xi_correlation(&r1, &r2))?;
    let angular_direction = optional(angular_correlation(&t1, &t2))?;

    let mut obs: Vec<Observation> = kept
        .iter()
        .map(|r| wind_observation([r.theta1, r.r1], [r.theta2, r.r2]))
        .collect();
    obs.shuffle(&mut substream(seed, "wind/split"));
    let n_train = obs.len().div_ceil(2);
    let (train, test) = obs.split_at(n_train);

    let m = EmbeddedManifold::cylinder(r_max)?;
    let model = ConformalModel::fit(train, wind_partition()?, BandwidthRule::Fixed(exp.h), m)?;
    let candidates = m.uniform_sample(exp.n_grid, &mut substream(seed, "wind/grid"));
    let coverage = empirical_coverage(&model, test, exp.alpha, Some(&candidates))?;
    let q = [wrap_angle(exp.query[0]), exp.query[1]];
    let set = model.predict_set(&q, exp.alpha, &candidates)?;
    let truth_in_set = exp
        .truth
        .map(|t| model.contains(&q, &cylinder_point(wrap_angle(t[0]), t[1]), exp.alpha))
        .transpose()?;
    let report = WindReport {
        experiment: exp.clone(),
        seed,
        n_rows: records.len(),
        n_dropped: records.len() - kept.len(),
        n_train,
        n_test: test.len(),
        xi_speed,
        angular_direction,
        coverage,
        query_cell: set.cell.0,
        query_cell_count: model.cell(set.cell).n(),
        set_fraction: set.fraction_in(),
        truth_in_set,
    };
    Ok(WindRun { report, set })
}

/// Degenerate statistics become `None`; other errors propagate.
fn optional(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::ZeroVariance) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Wind-schema rows drawn from the synthetic cylinder model.
pub fn synthetic_wind(
    model: &CylinderRegressionModel,
    n: usize,
    seed: u64,
) -> Result<Vec<WindRecord>> {
    let data = model.generate(n, &mut substream(seed, "wind/synthetic"))?;
    Ok(data
        .into_iter()
        .enumerate()
        .map(|(i, o)| {
            let c = o.y.coords();
            WindRecord {
                timestamp: format!("t{i:06}"),
                theta1: o.x[0],
                r1: o.x[1],
                theta2: wrap_angle(c[1].atan2(c[0])),
                r2: c[2],
            }
        })
        .collect())
}

/// Held-out coverage of the cylinder model on the wind grid, training on
/// `n_train` draws and testing on `n_test` fresh ones.
pub fn cylinder_coverage(
    model: &CylinderRegressionModel,
    n_train: usize,
    n_test: usize,
    alpha: f64,
    h: f64,
    seed: u64,
) -> Result<CoverageReport> {
    let m = EmbeddedManifold::cylinder(model.r_max)?;
    let train = model.generate(n_train, &mut substream(seed, "cylinder/train"))?;
    let test = model.generate(n_test, &mut substream(seed, "cylinder/test"))?;
    let fitted = ConformalModel::fit(&train, wind_partition()?, BandwidthRule::Fixed(h), m)?;
    empirical_coverage(&fitted, &test, alpha, None)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimplexExperiment {
    pub alphas: Vec<f64>,
    /// Level of the q̂_α used to group covariates.
    pub cd_alpha: f64,
    pub h: f64,
    pub n_bins: usize,
    pub n_grid: usize,
    pub n_mc: usize,
    pub query_x: Vec<f64>,
    pub query_y: Option<[f64; 3]>,
}

impl Default for SimplexExperiment {
    fn default() -> Self {
        Self {
            alphas: vec![0.1, 0.05],
            cd_alpha: 0.1,
            h: 0.1,
            n_bins: 3,
            n_grid: 10_000,
            n_mc: 20_000,
            query_x: vec![84.0, 45.0, 66.0, 150.0, 65.0],
            query_y: Some([0.845, 0.01, 0.145]),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimplexLevel {
    pub alpha: f64,
    pub set_fraction: Option<f64>,
    /// `None` when no candidate is in the set.
    pub band: Option<ClassBand>,
    pub class_set_names: Vec<String>,
    pub query_y_in_set: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimplexReport {
    pub experiment: SimplexExperiment,
    pub seed: u64,
    pub n_rows: usize,
    pub n_pilot: usize,
    pub n_calibration: usize,
    pub class_names: Vec<String>,
    pub n_cells: usize,
    pub query_cell: usize,
    pub query_cell_count: usize,
    pub levels: Vec<SimplexLevel>,
}

#[derive(Clone, Debug)]
pub struct SimplexRun {
    pub report: SimplexReport,
    /// One set per entry of `alphas`, on a shared candidate sample.
    pub sets: Vec<PredictionSet>,
}

/// Names for the three probability columns: the sorted distinct labels when
/// there are exactly three, generic names otherwise.
pub fn class_names(records: &[SimplexRecord]) -> Vec<String> {
    let labels: BTreeSet<&str> = records.iter().map(|r| r.label.as_str()).collect();
    if labels.len() == 3 {
        labels.into_iter().map(String::from).collect()
    } else {
        (1..=3).map(|k| format!("class{k}")).collect()
    }
}

/// Pilot half: cube partition of the normalized covariates with one kernel
/// density per cube. Calibration half: CD-split partition from the pilot's
/// q̂_α, then the local conformal model.
pub fn run_simplex(
    records: &[SimplexRecord],
    exp: &SimplexExperiment,
    seed: u64,
) -> Result<SimplexRun> {
    if records.len() < 4 {
        return Err(Error::EmptyInput(
            "simplex pipeline needs at least four rows".into(),
        ));
    }
    let d = records[0].features.len();
    if let Some(r) = records.iter().find(|r| r.features.len() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: r.features.len(),
        });
    }
    if exp.query_x.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: exp.query_x.len(),
        });
    }
    let m = EmbeddedManifold::simplex();
    let mut obs: Vec<Observation> = records
        .iter()
        .map(|r| {
            Observation::new(
                r.features.clone(),
                ManifoldPoint::new(r.probabilities.to_vec()),
            )
        })
        .collect();
    obs.shuffle(&mut substream(seed, "simplex/split"));
    let (pilot, calibration) = obs.split_at(obs.len() / 2);

    let pilot_x: Vec<Vec<f64>> = pilot.iter().map(|o| o.x.clone()).collect();
    let pilot_partition = Partition::cubes(&pilot_x, d)?;
    let mut grouped: Vec<Vec<ManifoldPoint>> = vec![Vec::new(); pilot_partition.n_cells()];
    for o in pilot {
        grouped[pilot_partition.locate(&o.x)?.0].push(o.y.clone());
    }
    let pilot_cells = grouped
        .into_iter()
        .map(|r| CellDensity::new(r, exp.h, 2))
        .collect::<Result<Vec<_>>>()?;
    let fallback = CellDensity::new(pilot.iter().map(|o| o.y.clone()).collect(), exp.h, 2)?;
    let calib_x: Vec<Vec<f64>> = calibration.iter().map(|o| o.x.clone()).collect();
    let partition = cd_split_partition(
        &calib_x,
        exp.cd_alpha,
        exp.n_bins,
        &pilot_partition,
        &pilot_cells,
        &fallback,
        &m,
        exp.n_mc,
        &mut substream(seed, "simplex/mc"),
    )?;
    let model = ConformalModel::fit(calibration, partition, BandwidthRule::Fixed(exp.h), m)?;

    let names = class_names(records);
    let candidates = m.uniform_sample(exp.n_grid, &mut substream(seed, "simplex/grid"));
    let query_y = exp.query_y.map(|y| ManifoldPoint::new(y.to_vec()));
    let mut sets = Vec::with_capacity(exp.alphas.len());
    let mut levels = Vec::with_capacity(exp.alphas.len());
    for &alpha in &exp.alphas {
        let set = model.predict_set(&exp.query_x, alpha, &candidates)?;
        let band = match simplex_class_band(&set) {
            Ok(b) => Some(b),
            Err(Error::EmptySet) => None,
            Err(e) => return Err(e),
        };
        let class_set_names = band
            .as_ref()
            .map(|b| b.class_set.iter().map(|&k| names[k].clone()).collect())
            .unwrap_or_default();
        let query_y_in_set = query_y
            .as_ref()
            .map(|y| model.contains(&exp.query_x, y, alpha))
            .transpose()?;
        levels.push(SimplexLevel {
            alpha,
            set_fraction: set.fraction_in(),
            band,
            class_set_names,
            query_y_in_set,
        });
        sets.push(set);
    }
    let query_cell = model.locate(&exp.query_x)?;
    let report = SimplexReport {
        experiment: exp.clone(),
        seed,
        n_rows: records.len(),
        n_pilot: pilot.len(),
        n_calibration: calibration.len(),
        class_names: names,
        n_cells: model.partition().n_cells(),
        query_cell: query_cell.0,
        query_cell_count: model.cell(query_cell).n(),
        levels,
    };
    Ok(SimplexRun { report, sets })
}

/// Simplex-schema rows drawn from the synthetic class model, labelled
/// `bus`, `opel`, `van` by dominant class.
pub fn synthetic_simplex(
    model: &SimplexClassModel,
    n: usize,
    seed: u64,
) -> Result<Vec<SimplexRecord>> {
    const NAMES: [&str; 3] = ["bus", "opel", "van"];
    let rows = model.generate(n, &mut substream(seed, "simplex/synthetic"))?;
    Ok(rows
        .into_iter()
        .map(|r| SimplexRecord {
            probabilities: r.probabilities,
            label: NAMES[r.label].to_string(),
            features: r.features,
        })
        .collect())
}
