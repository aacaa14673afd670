//! The `mconf` command line.
//!
//! Settings resolve in three layers: command flags, then a flat
//! `key = value` config file (`--config`), then per-command defaults.
//! Exit codes: 0 on success, 2 on invalid arguments or configuration,
//! 3 when reading inputs or writing outputs fails.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::Error;
use crate::experiments::models::{CylinderRegressionModel, SimplexClassModel};
use crate::experiments::pipelines::{
    repeated_sphere_coverage, run_simplex, run_wind, synthetic_simplex, synthetic_wind,
    SimplexExperiment, SphereExperiment, SpherePartition, StiefelExperiment, WindExperiment,
};
use crate::io::{read_simplex_file, read_wind_file, write_file_with, write_json, write_set};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_IO: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "mconf",
    version,
    about = "Local conformal prediction sets with manifold-valued responses"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// vMF regression on the sphere: estimated set, oracle cap, coverage.
    SimulateSphere(SphereArgs),
    /// PCA-frame regression on the Stiefel manifold.
    SimulateStiefel(CommonArgs),
    /// Cylinder-to-cylinder regression on wind records.
    Wind(DataArgs),
    /// Class-probability regression on the simplex with CD-split cells.
    Simplex(SimplexArgs),
    /// Pooled held-out coverage of the sphere pipeline over repetitions.
    Coverage(CoverageArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Kernel bandwidth.
    #[arg(long)]
    pub h: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Monte Carlo sample size for measures and quantiles.
    #[arg(long = "n-mc")]
    pub n_mc: Option<usize>,
    /// Number of candidate points in emitted sets.
    #[arg(long = "n-grid")]
    pub n_grid: Option<usize>,
    /// Held-out test pairs.
    #[arg(long = "n-test")]
    pub n_test: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Flat `key = value` file; flags take precedence over it.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PartitionChoice {
    /// Four intervals of length 1/2.
    Fixed,
    /// Intervals of side (log n / n)^{1/3} centred on the query.
    Centered,
}

#[derive(Debug, Clone, Args)]
pub struct SphereArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, value_enum)]
    pub partition: Option<PartitionChoice>,
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Input CSV.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Use `--n` rows from the built-in synthetic model instead of a file.
    #[arg(long, conflicts_with = "input")]
    pub synthetic: bool,
}

#[derive(Debug, Clone, Args)]
pub struct SimplexArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Number of CD-split bins.
    #[arg(long = "n-bins")]
    pub n_bins: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct CoverageArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long, value_enum)]
    pub partition: Option<PartitionChoice>,
}

/// Failure classes mapped to exit codes.
#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::Io(_) => EXIT_IO,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "invalid configuration: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Io(_) | Error::Parse { .. } | Error::EmptyInput(_) | Error::Json(_) => {
                CliError::Io(e.to_string())
            }
            other => CliError::Validation(other.to_string()),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn at_path(path: &Path, e: Error) -> CliError {
    match CliError::from(e) {
        CliError::Validation(m) => CliError::Validation(format!("{}: {m}", path.display())),
        CliError::Io(m) => CliError::Io(format!("{}: {m}", path.display())),
    }
}

const CONFIG_KEYS: &[&str] = &[
    "n",
    "alpha",
    "h",
    "seed",
    "n_mc",
    "n_grid",
    "n_test",
    "out",
    "input",
    "synthetic",
    "reps",
    "n_bins",
    "partition",
];

/// Parses a flat config file: one `key = value` per line, `#` comments,
/// blank lines ignored. Dashes in keys are read as underscores.
pub fn parse_config(text: &str) -> CliResult<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            CliError::Validation(format!("config line {}: expected key = value", i + 1))
        })?;
        let key = k.trim().replace('-', "_");
        if !CONFIG_KEYS.contains(&key.as_str()) {
            return Err(CliError::Validation(format!(
                "config line {}: unknown key `{key}`",
                i + 1
            )));
        }
        map.insert(key, v.trim().to_string());
    }
    Ok(map)
}

/// Flag values layered over config-file values.
struct Layers {
    file: BTreeMap<String, String>,
}

impl Layers {
    fn load(path: Option<&Path>) -> CliResult<Self> {
        let file = match path {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
                parse_config(&text)?
            }
            None => BTreeMap::new(),
        };
        Ok(Self { file })
    }

    fn get<T: std::str::FromStr>(&self, flag: Option<T>, key: &str, default: T) -> CliResult<T> {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.file.get(key) {
            Some(raw) => raw.parse().map_err(|_| {
                CliError::Validation(format!("config key `{key}`: cannot parse {raw:?}"))
            }),
            None => Ok(default),
        }
    }

    fn get_opt<T: std::str::FromStr>(&self, flag: Option<T>, key: &str) -> CliResult<Option<T>> {
        if flag.is_some() {
            return Ok(flag);
        }
        self.file
            .get(key)
            .map(|raw| {
                raw.parse().map_err(|_| {
                    CliError::Validation(format!("config key `{key}`: cannot parse {raw:?}"))
                })
            })
            .transpose()
    }

    fn partition(&self, flag: Option<PartitionChoice>) -> CliResult<PartitionChoice> {
        if let Some(p) = flag {
            return Ok(p);
        }
        match self.file.get("partition").map(String::as_str) {
            None | Some("fixed") => Ok(PartitionChoice::Fixed),
            Some("centered") => Ok(PartitionChoice::Centered),
            Some(other) => Err(CliError::Validation(format!("unknown partition `{other}`"))),
        }
    }
}

/// Settings shared by every command, after layering.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub n: usize,
    pub alpha: f64,
    pub h: f64,
    pub seed: u64,
    pub n_mc: usize,
    pub n_grid: usize,
    pub n_test: usize,
    pub out: PathBuf,
}

/// Per-command defaults.
#[derive(Debug, Clone, Copy)]
struct Defaults {
    n: usize,
    alpha: f64,
    h: f64,
    n_mc: usize,
    n_grid: usize,
    n_test: usize,
}

fn resolve(common: &CommonArgs, layers: &Layers, d: Defaults) -> CliResult<RunConfig> {
    let cfg = RunConfig {
        n: layers.get(common.n, "n", d.n)?,
        alpha: layers.get(common.alpha, "alpha", d.alpha)?,
        h: layers.get(common.h, "h", d.h)?,
        seed: layers.get(common.seed, "seed", 1)?,
        n_mc: layers.get(common.n_mc, "n_mc", d.n_mc)?,
        n_grid: layers.get(common.n_grid, "n_grid", d.n_grid)?,
        n_test: layers.get(common.n_test, "n_test", d.n_test)?,
        out: layers.get(common.out.clone(), "out", PathBuf::from("out"))?,
    };
    validate(&cfg)?;
    Ok(cfg)
}

pub fn validate(cfg: &RunConfig) -> CliResult<()> {
    if !(cfg.alpha > 0.0 && cfg.alpha < 1.0) {
        return Err(CliError::Validation(format!(
            "alpha must lie in (0, 1), got {}",
            cfg.alpha
        )));
    }
    if !(cfg.h > 0.0 && cfg.h.is_finite()) {
        return Err(CliError::Validation(format!(
            "h must be positive, got {}",
            cfg.h
        )));
    }
    if cfg.n_mc == 0 || cfg.n_grid == 0 {
        return Err(CliError::Validation("n_mc and n_grid must be ≥ 1".into()));
    }
    if cfg.n < 2 {
        return Err(CliError::Validation(format!(
            "n must be ≥ 2, got {}",
            cfg.n
        )));
    }
    Ok(())
}

fn prepare_out(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))
}

fn write_set_file(path: &Path, set: &crate::conformal::PredictionSet) -> CliResult<()> {
    write_file_with(path, |w| write_set(w, set))
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn write_report<T: serde::Serialize>(path: &Path, value: &T) -> CliResult<()> {
    write_json(path, value).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn sphere_partition(p: PartitionChoice) -> SpherePartition {
    match p {
        PartitionChoice::Fixed => SpherePartition::FixedIntervals,
        PartitionChoice::Centered => SpherePartition::CenteredCubes,
    }
}

fn cmd_simulate_sphere(args: &SphereArgs) -> CliResult<Vec<PathBuf>> {
    let layers = Layers::load(args.common.config.as_deref())?;
    let cfg = resolve(
        &args.common,
        &layers,
        Defaults {
            n: 400,
            alpha: 0.1,
            h: 0.5,
            n_mc: 100_000,
            n_grid: 10_000,
            n_test: 400,
        },
    )?;
    let exp = SphereExperiment {
        n: cfg.n,
        alpha: cfg.alpha,
        h: cfg.h,
        partition: sphere_partition(layers.partition(args.partition)?),
        n_grid: cfg.n_grid,
        n_mc: cfg.n_mc,
        n_test: cfg.n_test,
        ..Default::default()
    };
    let run = exp.run(cfg.seed)?;
    prepare_out(&cfg.out)?;
    let files = [
        cfg.out.join("set.csv"),
        cfg.out.join("oracle.csv"),
        cfg.out.join("report.json"),
    ];
    write_set_file(&files[0], &run.set)?;
    write_set_file(&files[1], &run.oracle)?;
    write_report(&files[2], &run.report)?;
    Ok(files.to_vec())
}

fn cmd_simulate_stiefel(common: &CommonArgs) -> CliResult<Vec<PathBuf>> {
    let layers = Layers::load(common.config.as_deref())?;
    let cfg = resolve(
        common,
        &layers,
        Defaults {
            n: 500,
            alpha: 0.05,
            h: 1.0,
            n_mc: 100_000,
            n_grid: 10_000,
            n_test: 500,
        },
    )?;
    let exp = StiefelExperiment {
        n: cfg.n,
        alpha: cfg.alpha,
        h: cfg.h,
        n_grid: cfg.n_grid,
        n_test: cfg.n_test,
        ..Default::default()
    };
    let run = exp.run(cfg.seed)?;
    prepare_out(&cfg.out)?;
    let files = [cfg.out.join("set.csv"), cfg.out.join("report.json")];
    write_set_file(&files[0], &run.set)?;
    write_report(&files[1], &run.report)?;
    Ok(files.to_vec())
}

/// Input path, or `None` for synthetic data. Flags win over the file.
fn data_source(args: &DataArgs, layers: &Layers) -> CliResult<Option<PathBuf>> {
    if args.synthetic {
        return Ok(None);
    }
    if let Some(p) = &args.input {
        return Ok(Some(p.clone()));
    }
    let input: Option<PathBuf> = layers.get_opt(None, "input")?;
    let synthetic: bool = layers.get(None, "synthetic", false)?;
    match (input, synthetic) {
        (Some(_), true) => Err(CliError::Validation(
            "config sets both `input` and `synthetic`".into(),
        )),
        (Some(p), false) => Ok(Some(p)),
        (None, true) => Ok(None),
        (None, false) => Err(CliError::Validation(
            "give --input FILE or --synthetic".into(),
        )),
    }
}

fn cmd_wind(args: &DataArgs) -> CliResult<Vec<PathBuf>> {
    let layers = Layers::load(args.common.config.as_deref())?;
    let cfg = resolve(
        &args.common,
        &layers,
        Defaults {
            n: 4000,
            alpha: 0.2,
            h: 0.4,
            n_mc: 100_000,
            n_grid: 10_000,
            n_test: 0,
        },
    )?;
    let records = match data_source(args, &layers)? {
        Some(path) => read_wind_file(&path).map_err(|e| at_path(&path, e))?,
        None => synthetic_wind(&CylinderRegressionModel::default(), cfg.n, cfg.seed)?,
    };
    let exp = WindExperiment {
        alpha: cfg.alpha,
        h: cfg.h,
        n_grid: cfg.n_grid,
        ..Default::default()
    };
    let run = run_wind(&records, &exp, cfg.seed)?;
    prepare_out(&cfg.out)?;
    let files = [cfg.out.join("set.csv"), cfg.out.join("report.json")];
    write_set_file(&files[0], &run.set)?;
    write_report(&files[1], &run.report)?;
    Ok(files.to_vec())
}

fn cmd_simplex(args: &SimplexArgs) -> CliResult<Vec<PathBuf>> {
    let data = &args.data;
    let layers = Layers::load(data.common.config.as_deref())?;
    let cfg = resolve(
        &data.common,
        &layers,
        Defaults {
            n: 628,
            alpha: 0.1,
            h: 0.1,
            n_mc: 20_000,
            n_grid: 10_000,
            n_test: 0,
        },
    )?;
    let alpha_given = data.common.alpha.is_some() || layers.file.contains_key("alpha");
    let defaults = SimplexExperiment::default();
    let n_bins = layers.get(args.n_bins, "n_bins", defaults.n_bins)?;
    if n_bins == 0 {
        return Err(CliError::Validation("n_bins must be ≥ 1".into()));
    }
    let (records, query_x) = match data_source(data, &layers)? {
        Some(path) => (
            read_simplex_file(&path).map_err(|e| at_path(&path, e))?,
            defaults.query_x.clone(),
        ),
        None => {
            let rows = synthetic_simplex(&SimplexClassModel::default(), cfg.n, cfg.seed)?;
            // a bus-like covariate of the synthetic model
            let d = SimplexClassModel::default();
            let q = (0..d.n_features)
                .map(|f| if f % 3 == 0 { d.separation } else { 0.0 })
                .collect();
            (rows, q)
        }
    };
    let exp = SimplexExperiment {
        alphas: if alpha_given {
            vec![cfg.alpha]
        } else {
            defaults.alphas.clone()
        },
        h: cfg.h,
        n_bins,
        n_grid: cfg.n_grid,
        n_mc: cfg.n_mc,
        query_x,
        ..defaults
    };
    let run = run_simplex(&records, &exp, cfg.seed)?;
    prepare_out(&cfg.out)?;
    let mut files = Vec::new();
    for set in &run.sets {
        let path = cfg.out.join(format!("set_alpha_{}.csv", set.alpha));
        write_set_file(&path, set)?;
        files.push(path);
    }
    let report = cfg.out.join("report.json");
    write_report(&report, &run.report)?;
    files.push(report);
    Ok(files)
}

fn cmd_coverage(args: &CoverageArgs) -> CliResult<Vec<PathBuf>> {
    let layers = Layers::load(args.common.config.as_deref())?;
    let cfg = resolve(
        &args.common,
        &layers,
        Defaults {
            n: 400,
            alpha: 0.1,
            h: 0.5,
            n_mc: 1,
            n_grid: 1,
            n_test: 100,
        },
    )?;
    let reps = layers.get(args.reps, "reps", 500)?;
    if reps == 0 {
        return Err(CliError::Validation("reps must be ≥ 1".into()));
    }
    let exp = SphereExperiment {
        n: cfg.n,
        alpha: cfg.alpha,
        h: cfg.h,
        partition: sphere_partition(layers.partition(args.partition)?),
        n_test: cfg.n_test,
        ..Default::default()
    };
    let result = repeated_sphere_coverage(&exp, reps, cfg.seed)?;
    prepare_out(&cfg.out)?;
    let path = cfg.out.join("report.json");
    write_report(&path, &result)?;
    Ok(vec![path])
}

/// Runs a parsed command and returns the files it wrote.
pub fn execute(cli: &Cli) -> CliResult<Vec<PathBuf>> {
    match &cli.command {
        Command::SimulateSphere(a) => cmd_simulate_sphere(a),
        Command::SimulateStiefel(a) => cmd_simulate_stiefel(a),
        Command::Wind(a) => cmd_wind(a),
        Command::Simplex(a) => cmd_simplex(a),
        Command::Coverage(a) => cmd_coverage(a),
    }
}

/// Parses `args` (including the program name), runs, reports on
/// stdout/stderr and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                EXIT_VALIDATION
            } else {
                EXIT_OK
            };
        }
    };
    match execute(&cli) {
        Ok(files) => {
            for f in files {
                println!("wrote {}", f.display());
            }
            EXIT_OK
        }
        Err(e) => {
            eprintln!("mconf: {e}");
            e.exit_code()
        }
    }
}
