//! Local conformal prediction sets for regression problems whose covariate
//! lives in `R^d` and whose response lives on an embedded manifold.
//!
//! The crate is organised bottom-up:
//!
//! - [`geometry`]: the four supported embedded manifolds, ambient distances and
//!   samplers (uniform, von Mises–Fisher, Haar frames).
//! - [`density`]: per-cell Gaussian kernel density estimates of `p(y | A_k)`
//!   and their augmented (one extra point) variants.
//! - [`partition`]: covariate partitions (cubes, grids, CD-split) and the
//!   Monte Carlo level profile used for quantile and oracle levels.
//! - [`conformal`]: fitted models, the local conformity rank, exact and fast
//!   prediction sets, oracle sets.
//! - [`experiments`]: synthetic models, coverage and set-distance metrics,
//!   correlation statistics and the end-to-end pipelines.
//! - [`io`] and [`cli`]: CSV schemas and the `mconf` command line.

pub mod cli;
pub mod conformal;
pub mod density;
pub mod error;
pub mod experiments;
pub mod geometry;
pub mod io;
pub mod partition;
pub mod rng;

pub use conformal::{ConformalModel, Observation, OracleSet, PredictionSet};
pub use density::{BandwidthRule, CellDensity, ThresholdCorrection};
pub use error::{Error, Result};
pub use geometry::{EmbeddedManifold, ManifoldKind, ManifoldPoint, VonMisesFisher};
pub use partition::{CellId, LevelProfile, Partition};
