//! Covariate partitions and the Monte Carlo level profile.
//!
//! Cells are products of half-open intervals `[a, b)`, with the last
//! interval along every axis closed.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::density::CellDensity;
use crate::error::{Error, Result};
use crate::geometry::{EmbeddedManifold, ManifoldPoint};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CellId(pub usize);

impl CellId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Cube side `w_n = (log n / n)^{1/(d+2)}`.
pub fn cube_side(n: f64, d: usize) -> f64 {
    (n.ln() / n).powf(1.0 / (d as f64 + 2.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PartitionKind {
    /// Cubes of side `side` in coordinates `(x − origin) / scale`.
    /// Points beyond the tiled box are clamped to the nearest cell.
    Cubes {
        side: f64,
        origin: Vec<f64>,
        scale: Vec<f64>,
        counts: Vec<usize>,
    },
    /// Product of per-axis breakpoint lists.
    Grid { breaks: Vec<Vec<f64>> },
    /// Cells are bins of the estimated conditional α-quantile q̂_α(x), with
    /// q̂_α constant over each cell of a pilot partition.
    CdSplit {
        alpha: f64,
        edges: Vec<f64>,
        pilot: Box<Partition>,
        pilot_q: Vec<f64>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    kind: PartitionKind,
}

impl Partition {
    /// Cubes of side `w_n` over the empirical bounding box of `x_train`,
    /// after rescaling every axis of the box to unit length.
    pub fn cubes(x_train: &[Vec<f64>], d: usize) -> Result<Self> {
        if x_train.len() < 2 {
            return Err(Error::InvalidParameter(
                "cube partition needs at least two covariates".into(),
            ));
        }
        check_dims(x_train, d)?;
        let mut lo = vec![f64::INFINITY; d];
        let mut hi = vec![f64::NEG_INFINITY; d];
        for x in x_train {
            for a in 0..d {
                lo[a] = lo[a].min(x[a]);
                hi[a] = hi[a].max(x[a]);
            }
        }
        let scale: Vec<f64> = lo
            .iter()
            .zip(&hi)
            .map(|(l, h)| if h > l { h - l } else { 1.0 })
            .collect();
        let side = cube_side(x_train.len() as f64, d);
        let per_axis = ((1.0 / side).ceil() as usize).max(1);
        Ok(Self {
            kind: PartitionKind::Cubes {
                side,
                origin: lo,
                scale,
                counts: vec![per_axis; d],
            },
        })
    }

    /// Cubes of a given side with an explicit origin and cell counts.
    pub fn cubes_with_side(side: f64, origin: Vec<f64>, counts: Vec<usize>) -> Result<Self> {
        if !(side > 0.0 && side.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "cube side must be positive, got {side}"
            )));
        }
        if origin.len() != counts.len() || counts.contains(&0) {
            return Err(Error::InvalidParameter("cube origin/count mismatch".into()));
        }
        let d = origin.len();
        Ok(Self {
            kind: PartitionKind::Cubes {
                side,
                origin,
                scale: vec![1.0; d],
                counts,
            },
        })
    }

    /// Cubes of a given side covering the box `[lo, hi]`, aligned so that
    /// `centre` sits at the middle of its cell.
    pub fn centered_cubes(side: f64, centre: &[f64], lo: &[f64], hi: &[f64]) -> Result<Self> {
        if centre.len() != lo.len() || lo.len() != hi.len() {
            return Err(Error::InvalidParameter(
                "centre and box dimensions differ".into(),
            ));
        }
        if !(side > 0.0 && side.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "cube side must be positive, got {side}"
            )));
        }
        let mut origin = Vec::with_capacity(lo.len());
        let mut counts = Vec::with_capacity(lo.len());
        for a in 0..lo.len() {
            let (cell_lo, cell_hi) = (centre[a] - side / 2.0, centre[a] + side / 2.0);
            let below = ((cell_lo - lo[a]) / side).ceil().max(0.0) as usize;
            let above = ((hi[a] - cell_hi) / side).ceil().max(0.0) as usize;
            origin.push(cell_lo - side * below as f64);
            counts.push(below + 1 + above);
        }
        Self::cubes_with_side(side, origin, counts)
    }

    pub fn grid(breaks: Vec<Vec<f64>>) -> Result<Self> {
        if breaks.is_empty() {
            return Err(Error::InvalidParameter(
                "grid needs at least one axis".into(),
            ));
        }
        for (axis, b) in breaks.iter().enumerate() {
            if b.len() < 2
                || b.windows(2)
                    .any(|w| w[0].partial_cmp(&w[1]) != Some(std::cmp::Ordering::Less))
            {
                return Err(Error::NonMonotoneBreaks { axis });
            }
        }
        Ok(Self {
            kind: PartitionKind::Grid { breaks },
        })
    }

    /// `k` equal intervals on `[lo, hi]`.
    pub fn intervals(lo: f64, hi: f64, k: usize) -> Result<Self> {
        let breaks = (0..=k)
            .map(|i| lo + (hi - lo) * i as f64 / k as f64)
            .collect();
        Self::grid(vec![breaks])
    }

    pub fn kind(&self) -> &PartitionKind {
        &self.kind
    }

    pub fn n_cells(&self) -> usize {
        match &self.kind {
            PartitionKind::Cubes { counts, .. } => counts.iter().product(),
            PartitionKind::Grid { breaks } => breaks.iter().map(|b| b.len() - 1).product(),
            PartitionKind::CdSplit { edges, .. } => edges.len() + 1,
        }
    }

    pub fn covariate_dim(&self) -> usize {
        match &self.kind {
            PartitionKind::Cubes { origin, .. } => origin.len(),
            PartitionKind::Grid { breaks } => breaks.len(),
            PartitionKind::CdSplit { pilot, .. } => pilot.covariate_dim(),
        }
    }

    pub fn locate(&self, x: &[f64]) -> Result<CellId> {
        let d = self.covariate_dim();
        if x.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::OutsidePartition(x.to_vec()));
        }
        match &self.kind {
            PartitionKind::Cubes {
                side,
                origin,
                scale,
                counts,
            } => {
                let mut flat = 0;
                for a in 0..d {
                    let u = (x[a] - origin[a]) / scale[a] / side;
                    let i = if u <= 0.0 {
                        0
                    } else {
                        (u.floor() as usize).min(counts[a] - 1)
                    };
                    flat = flat * counts[a] + i;
                }
                Ok(CellId(flat))
            }
            PartitionKind::Grid { breaks } => {
                let mut flat = 0;
                for (a, b) in breaks.iter().enumerate() {
                    let cells = b.len() - 1;
                    if x[a] < b[0] || x[a] > b[cells] {
                        return Err(Error::OutsidePartition(x.to_vec()));
                    }
                    let i = (b.partition_point(|&t| t <= x[a]) - 1).min(cells - 1);
                    flat = flat * cells + i;
                }
                Ok(CellId(flat))
            }
            PartitionKind::CdSplit {
                edges,
                pilot,
                pilot_q,
                ..
            } => {
                let q = pilot_q[pilot.locate(x)?.0];
                Ok(CellId(edges.partition_point(|&e| e <= q)))
            }
        }
    }

    /// Axis-aligned bounds of a cell, for cube and grid partitions.
    pub fn cell_bounds(&self, id: CellId) -> Option<Vec<(f64, f64)>> {
        match &self.kind {
            PartitionKind::Cubes {
                side,
                origin,
                scale,
                counts,
            } => {
                let idx = unflatten(id.0, counts)?;
                Some(
                    idx.iter()
                        .enumerate()
                        .map(|(a, &i)| {
                            let lo = origin[a] + scale[a] * side * i as f64;
                            (lo, lo + scale[a] * side)
                        })
                        .collect(),
                )
            }
            PartitionKind::Grid { breaks } => {
                let counts: Vec<usize> = breaks.iter().map(|b| b.len() - 1).collect();
                let idx = unflatten(id.0, &counts)?;
                Some(
                    idx.iter()
                        .enumerate()
                        .map(|(a, &i)| (breaks[a][i], breaks[a][i + 1]))
                        .collect(),
                )
            }
            PartitionKind::CdSplit { .. } => None,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

fn check_dims(xs: &[Vec<f64>], d: usize) -> Result<()> {
    match xs.iter().find(|x| x.len() != d) {
        Some(bad) => Err(Error::DimensionMismatch {
            expected: d,
            got: bad.len(),
        }),
        None => Ok(()),
    }
}

fn unflatten(mut flat: usize, counts: &[usize]) -> Option<Vec<usize>> {
    if flat >= counts.iter().product() {
        return None;
    }
    let mut idx = vec![0; counts.len()];
    for a in (0..counts.len()).rev() {
        idx[a] = flat % counts[a];
        flat /= counts[a];
    }
    Some(idx)
}

/// Sorted density values at a uniform Monte Carlo sample of the manifold,
/// with prefix sums. Answers Ĥ(z), its inverse and oracle levels from one
/// shared sample, so all of them are exactly monotone.
#[derive(Clone, Debug)]
pub struct LevelProfile {
    sorted: Vec<f64>,
    prefix: Vec<f64>,
    volume: f64,
}

impl LevelProfile {
    pub fn new(mut values: Vec<f64>, volume: f64) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidParameter(
                "level profile needs samples".into(),
            ));
        }
        if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidParameter(
                "density values must be finite and ≥ 0".into(),
            ));
        }
        values.sort_by(f64::total_cmp);
        let mut prefix = Vec::with_capacity(values.len() + 1);
        prefix.push(0.0);
        let mut acc = 0.0;
        for v in &values {
            acc += v;
            prefix.push(acc);
        }
        Ok(Self {
            sorted: values,
            prefix,
            volume,
        })
    }

    pub fn from_points<F>(density: F, points: &[ManifoldPoint], volume: f64) -> Result<Self>
    where
        F: Fn(&ManifoldPoint) -> f64,
    {
        Self::new(points.iter().map(density).collect(), volume)
    }

    pub fn from_density<F, R>(
        density: F,
        m: &EmbeddedManifold,
        n_mc: usize,
        rng: &mut R,
    ) -> Result<Self>
    where
        F: Fn(&ManifoldPoint) -> f64,
        R: Rng + ?Sized,
    {
        let pts = m.uniform_sample(n_mc, rng);
        Self::from_points(density, &pts, m.total_volume())
    }

    fn weight(&self) -> f64 {
        self.volume / self.sorted.len() as f64
    }

    pub fn total_mass(&self) -> f64 {
        self.weight() * self.prefix[self.sorted.len()]
    }

    /// Ĥ(z) = ∫_{p ≤ z} p dν.
    pub fn h(&self, z: f64) -> f64 {
        let k = self.sorted.partition_point(|&v| v <= z);
        (self.weight() * self.prefix[k]).clamp(0.0, 1.0)
    }

    /// Smallest sampled value `z` with Ĥ(z) ≥ α; the largest value when no
    /// sampled level reaches α.
    pub fn quantile(&self, alpha: f64) -> f64 {
        let w = self.weight();
        // prefix[k] is nondecreasing; need the first k ≥ 1 with w·prefix[k] ≥ α
        // taken over whole tie blocks, which Ĥ(sorted[k−1]) accounts for.
        let n = self.sorted.len();
        let k = self.prefix[1..].partition_point(|&s| (w * s).min(1.0) < alpha);
        if k >= n {
            return self.sorted[n - 1];
        }
        self.sorted[k]
    }

    /// Mass ∫_{p ≥ t} p dν.
    pub fn upper_mass(&self, t: f64) -> f64 {
        let k = self.sorted.partition_point(|&v| v < t);
        self.weight() * (self.prefix[self.sorted.len()] - self.prefix[k])
    }

    /// Largest sampled level `t` whose upper level set carries estimated
    /// mass at least `1 − α`.
    pub fn upper_level(&self, alpha: f64) -> f64 {
        let target = 1.0 - alpha;
        let w = self.weight();
        let total = self.prefix[self.sorted.len()];
        // mass of {p ≥ sorted[k]} ≥ w·(total − prefix[k]); decreasing in k
        let k = self
            .prefix
            .partition_point(|&s| w * (total - s) >= target)
            .saturating_sub(1);
        let t = self.sorted[k.min(self.sorted.len() - 1)];
        // step back over ties so {p ≥ t} really has the mass
        if self.upper_mass(t) >= target {
            t
        } else {
            self.sorted[0]
        }
    }

    pub fn max(&self) -> f64 {
        self.sorted[self.sorted.len() - 1]
    }
}

/// Monte Carlo Ĥ(z | x) for a density on `m`.
pub fn h_hat<F, R>(
    density: F,
    z: f64,
    m: &EmbeddedManifold,
    n_mc: usize,
    rng: &mut R,
) -> Result<f64>
where
    F: Fn(&ManifoldPoint) -> f64,
    R: Rng + ?Sized,
{
    Ok(LevelProfile::from_density(density, m, n_mc, rng)?.h(z))
}

/// Monte Carlo q̂_α = Ĥ^{−1}(α).
pub fn q_alpha_hat<F, R>(
    density: F,
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
    Ok(LevelProfile::from_density(density, m, n_mc, rng)?.quantile(alpha))
}

pub(crate) fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "alpha must lie in (0, 1), got {alpha}"
        )))
    }
}

/// q̂_α of a fitted cell density, using a shared set of uniform points.
pub fn cell_quantile(
    cell: &CellDensity,
    alpha: f64,
    points: &[ManifoldPoint],
    volume: f64,
) -> Result<f64> {
    let profile = LevelProfile::from_points(|v| cell.eval(v).unwrap_or(0.0), points, volume)?;
    Ok(profile.quantile(alpha))
}

/// Builds the CD-split partition.
///
/// `pilot_cells` holds the pilot densities fitted on a split disjoint from
/// `x_train`, one per cell of `pilot_partition`; empty pilot cells fall back
/// to `fallback`. Training covariates are grouped by equal-frequency bins of
/// their q̂_α values.
#[allow(clippy::too_many_arguments)]
pub fn cd_split_partition<R: Rng + ?Sized>(
    x_train: &[Vec<f64>],
    alpha: f64,
    n_bins: usize,
    pilot_partition: &Partition,
    pilot_cells: &[CellDensity],
    fallback: &CellDensity,
    m: &EmbeddedManifold,
    n_mc: usize,
    rng: &mut R,
) -> Result<Partition> {
    check_alpha(alpha)?;
    if n_bins == 0 {
        return Err(Error::InvalidParameter("n_bins must be ≥ 1".into()));
    }
    if pilot_cells.len() != pilot_partition.n_cells() {
        return Err(Error::LengthMismatch {
            left: pilot_cells.len(),
            right: pilot_partition.n_cells(),
        });
    }
    if fallback.n() == 0 {
        return Err(Error::EmptyCell);
    }
    let points = m.uniform_sample(n_mc, rng);
    let volume = m.total_volume();
    let fallback_q = cell_quantile(fallback, alpha, &points, volume)?;
    let pilot_q = pilot_cells
        .iter()
        .map(|c| {
            if c.n() == 0 {
                Ok(fallback_q)
            } else {
                cell_quantile(c, alpha, &points, volume)
            }
        })
        .collect::<Result<Vec<f64>>>()?;

    let mut train_q = x_train
        .iter()
        .map(|x| Ok(pilot_q[pilot_partition.locate(x)?.0]))
        .collect::<Result<Vec<f64>>>()?;
    train_q.sort_by(f64::total_cmp);
    let edges = equal_frequency_edges(&train_q, n_bins);

    Ok(Partition {
        kind: PartitionKind::CdSplit {
            alpha,
            edges,
            pilot: Box::new(pilot_partition.clone()),
            pilot_q,
        },
    })
}

/// Interior cut points splitting sorted values into `n_bins` groups of
/// roughly equal size; duplicate cuts collapse.
fn equal_frequency_edges(sorted: &[f64], n_bins: usize) -> Vec<f64> {
    let n = sorted.len();
    let mut edges: Vec<f64> = Vec::new();
    if n == 0 {
        return edges;
    }
    for b in 1..n_bins {
        let cut = sorted[(b * n / n_bins).min(n - 1)];
        if cut > sorted[0] && edges.last().is_none_or(|&e| cut > e) {
            edges.push(cut);
        }
    }
    edges
}
