//! Command-line front end: `tilt`, `couple`, `estimate` and `simulate`.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
//! degeneracy, 1 for output I/O failures.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::estimation::{
    one_step_curve_from, positivity_diagnostic, EstimationError, DEFAULT_POSITIVITY_THRESHOLD,
};
use crate::exec::Exec;
use crate::inference::{build_bands, multiplier_critical_values, EifProcess, InferenceError, DEFAULT_ALPHA, DEFAULT_BOOTSTRAP};
use crate::nuisance::{
    assign_folds, fit_propensity, CrossFit, Dataset, NuisanceError, NuisanceSpec, Observation, PropensityOptions,
    DEFAULT_FLOOR, DEFAULT_FOLDS,
};
use crate::simulation::{
    derive_seed, generate, run_benchmark, table_setups, BenchmarkSpec, Setup, SimulationError, DEFAULT_TRUTH_DRAWS,
};
use crate::tilt::{ActionSpace, CostSpec, PolicyTilt, Simplex, TiltConfig, TiltError};

pub const DEFAULT_SEED: u64 = 1;
const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("cannot write {path}: {source}")]
    Output {
        path: String,
        #[source]
        source: io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
            CliError::Output { .. } => 1,
        }
    }
}

fn tilt_error(e: TiltError) -> CliError {
    match e {
        TiltError::DegenerateKernel(_) => CliError::Numerical(e.to_string()),
        _ => CliError::Config(e.to_string()),
    }
}

impl From<NuisanceError> for CliError {
    fn from(e: NuisanceError) -> Self {
        match e {
            NuisanceError::Tilt(t) => tilt_error(t),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<EstimationError> for CliError {
    fn from(e: EstimationError) -> Self {
        match e {
            EstimationError::Tilt(t) => tilt_error(t),
            EstimationError::Nuisance(n) => n.into(),
            EstimationError::TargetNeedsDestinationCosts => {
                CliError::Config("cost: estimation needs destination costs (a cost array)".into())
            }
            other => CliError::Numerical(other.to_string()),
        }
    }
}

impl From<InferenceError> for CliError {
    fn from(e: InferenceError) -> Self {
        match e {
            InferenceError::TooFewDraws(_) | InferenceError::Alpha(_) => CliError::Config(e.to_string()),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<SimulationError> for CliError {
    fn from(e: SimulationError) -> Self {
        match e {
            SimulationError::Tilt(t) => tilt_error(t),
            SimulationError::Estimation(e) => e.into(),
            SimulationError::Replicate { rep, source } => match CliError::from(source) {
                CliError::Data(m) => CliError::Data(format!("replicate {rep}: {m}")),
                CliError::Numerical(m) => CliError::Numerical(format!("replicate {rep}: {m}")),
                other => other,
            },
            other => CliError::Config(other.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "cpip", version, about = "Cost-penalized I-projection policies and their estimation")]
pub struct Cli {
    /// Worker threads (defaults to available parallelism).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Tilted source, target and pushforward policies over a grid.
    Tilt(TiltArgs),
    /// The coupling matrix at a single tilt value.
    Couple(CoupleArgs),
    /// Cross-fitted one-step estimates with pointwise and uniform bands.
    Estimate(EstimateArgs),
    /// Benchmark study on synthetic data, or a single synthetic dataset.
    Simulate(SimulateArgs),
}

#[derive(Debug, Clone, Args, Default)]
pub struct GridArgs {
    #[arg(long, allow_hyphen_values = true)]
    pub delta_min: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub delta_max: Option<f64>,
    #[arg(long)]
    pub delta_points: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TiltArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Propensity vector, comma separated.
    #[arg(long, conflicts_with = "data", allow_hyphen_values = true)]
    pub pi: Option<String>,
    /// Dataset whose fitted propensities are tilted and averaged.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[command(flatten)]
    pub grid: GridArgs,
    #[arg(long)]
    pub prop_floor: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output CSV (stdout when absent).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CoupleArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, allow_hyphen_values = true)]
    pub pi: String,
    /// Tilt value (defaults to the config's single delta).
    #[arg(long, allow_hyphen_values = true)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for `curve.csv` and `estimate.json`.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub grid: GridArgs,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub bootstrap: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub prop_floor: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Preset setup: 1, 2, 3 or all.
    #[arg(long, conflicts_with = "config")]
    pub setup: Option<String>,
    /// Custom cost and target law instead of a preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long, default_value_t = 50)]
    pub reps: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub prop_floor: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_TRUTH_DRAWS)]
    pub truth_draws: usize,
    #[command(flatten)]
    pub grid: GridArgs,
    /// Write one synthetic dataset of `--n` rows to this CSV and exit.
    #[arg(long)]
    pub emit_data: Option<PathBuf>,
    /// Output directory for `report.csv` and `report.json`.
    #[arg(long, required_unless_present = "emit_data")]
    pub out: Option<PathBuf>,
}

/// Cost given either per destination or as a full matrix.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CostInput {
    Destination(Vec<f64>),
    Matrix(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DeltaInput {
    Scalar(f64),
    Grid(Vec<f64>),
    Range { min: f64, max: f64, points: usize },
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigOptions {
    pub k_folds: Option<usize>,
    #[serde(alias = "B")]
    pub bootstrap: Option<usize>,
    pub alpha: Option<f64>,
    pub seed: Option<u64>,
    pub prop_floor: Option<f64>,
}

/// Column roles in a data CSV. Unlisted columns other than the action and
/// outcome are covariates.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataColumns {
    #[serde(default = "default_action_column")]
    pub action: String,
    #[serde(default = "default_outcome_column")]
    pub outcome: String,
    pub covariates: Option<Vec<String>>,
    /// Covariates used by the outcome model (all when absent).
    pub adjust: Option<Vec<String>>,
}

fn default_action_column() -> String {
    "A".into()
}

fn default_outcome_column() -> String {
    "Y".into()
}

impl Default for DataColumns {
    fn default() -> Self {
        Self {
            action: default_action_column(),
            outcome: default_outcome_column(),
            covariates: None,
            adjust: None,
        }
    }
}

/// JSON policy configuration file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfigFile {
    pub actions: Option<Vec<String>>,
    pub nu: Vec<f64>,
    pub cost: CostInput,
    pub delta: Option<DeltaInput>,
    #[serde(default)]
    pub options: ConfigOptions,
    #[serde(default)]
    pub data: DataColumns,
}

/// A parsed, validated configuration.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub file: PolicyConfigFile,
    pub actions: ActionSpace,
    pub nu: Simplex,
    pub cost: CostSpec,
    pub sha256: String,
}

fn field_error(field: &str, e: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{field}: {e}"))
}

impl PolicyConfigFile {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(format!("invalid config JSON: {e}")))
    }
}

impl LoadedConfig {
    pub fn parse_text(text: &str) -> Result<Self, CliError> {
        let file = PolicyConfigFile::parse(text)?;
        let k = file.nu.len();
        let actions = match &file.actions {
            Some(l) => ActionSpace::new(l.clone()).map_err(|e| field_error("actions", e))?,
            None => ActionSpace::indexed(k).map_err(|e| field_error("nu", e))?,
        };
        if actions.len() != k {
            return Err(CliError::Config(format!(
                "nu: has {k} entries but {} actions are declared",
                actions.len()
            )));
        }
        let nu = Simplex::new(file.nu.clone()).map_err(|e| field_error("nu", e))?;
        let cost = match &file.cost {
            CostInput::Destination(c) => CostSpec::Destination(c.clone()),
            CostInput::Matrix(m) => CostSpec::Matrix(m.clone()),
        };
        cost.validate(k).map_err(|e| field_error("cost", e))?;
        if let Some(a) = file.options.alpha {
            if !(a > 0.0 && a < 1.0) {
                return Err(field_error("options.alpha", format!("{a} outside (0, 1)")));
            }
        }
        if let Some(f) = file.options.prop_floor {
            check_floor(f).map_err(|e| field_error("options.prop_floor", e))?;
        }
        Ok(Self {
            sha256: hex::encode(Sha256::digest(text.as_bytes())),
            file,
            actions,
            nu,
            cost,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse_text(&text)
    }

    /// Grid from flags when any is given, else from the file.
    pub fn grid(&self, flags: &GridArgs, fallback: Option<Vec<f64>>) -> Result<Vec<f64>, CliError> {
        let file_range = match &self.file.delta {
            Some(DeltaInput::Range { min, max, points }) => Some((*min, *max, *points)),
            _ => None,
        };
        if flags.delta_min.is_some() || flags.delta_max.is_some() || flags.delta_points.is_some() {
            let (m0, m1, p0) = file_range.unwrap_or((-2.0, 2.0, 100));
            return range_grid(
                flags.delta_min.unwrap_or(m0),
                flags.delta_max.unwrap_or(m1),
                flags.delta_points.unwrap_or(p0),
            );
        }
        match &self.file.delta {
            Some(DeltaInput::Scalar(d)) => Ok(vec![*d]),
            Some(DeltaInput::Grid(g)) => Ok(g.clone()),
            Some(DeltaInput::Range { min, max, points }) => range_grid(*min, *max, *points),
            None => fallback.ok_or_else(|| CliError::Config("delta: no grid given in the config or flags".into())),
        }
    }

    pub fn tilt_config(&self, grid: Vec<f64>) -> Result<TiltConfig, CliError> {
        TiltConfig::new(self.nu.clone(), self.cost.clone(), grid).map_err(|e| field_error("delta", e))
    }
}

fn check_floor(f: f64) -> Result<(), String> {
    if f.is_finite() && (0.0..0.5).contains(&f) {
        Ok(())
    } else {
        Err(format!("{f} outside [0, 0.5)"))
    }
}

fn range_grid(min: f64, max: f64, points: usize) -> Result<Vec<f64>, CliError> {
    if points == 0 || !min.is_finite() || !max.is_finite() || (points > 1 && max <= min) {
        return Err(CliError::Config(format!(
            "delta: invalid range min={min}, max={max}, points={points}"
        )));
    }
    Ok(TiltConfig::linspace(min, max, points))
}

fn parse_simplex(text: &str, k: usize) -> Result<Simplex, CliError> {
    let v = text
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| field_error("pi", e))?;
    if v.len() != k {
        return Err(CliError::Config(format!("pi: expected {k} entries, got {}", v.len())));
    }
    Simplex::new(v).map_err(|e| field_error("pi", e))
}

/// Reads a data CSV. Lines starting with `#` are skipped.
pub fn read_dataset(path: &Path, columns: &DataColumns, actions: &ActionSpace) -> Result<Dataset, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    parse_dataset(&bytes, columns, actions)
}

pub fn parse_dataset(bytes: &[u8], columns: &DataColumns, actions: &ActionSpace) -> Result<Dataset, CliError> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(bytes);
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| CliError::Data(format!("cannot read header: {e}")))?
        .iter()
        .map(str::to_string)
        .collect();
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::Data(format!("column {name:?} not found in header")))
    };
    let a_col = find(&columns.action)?;
    let y_col = find(&columns.outcome)?;
    let covariates: Vec<String> = match &columns.covariates {
        Some(c) => c.clone(),
        None => header
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != a_col && *i != y_col)
            .map(|(_, h)| h.clone())
            .collect(),
    };
    if covariates.is_empty() {
        return Err(CliError::Data("no covariate columns".into()));
    }
    let w_cols = covariates.iter().map(|c| find(c)).collect::<Result<Vec<_>, _>>()?;
    let adjust = match &columns.adjust {
        Some(names) => Some(
            names
                .iter()
                .map(|n| {
                    covariates
                        .iter()
                        .position(|c| c == n)
                        .ok_or_else(|| CliError::Config(format!("data.adjust: {n:?} is not a covariate")))
                })
                .collect::<Result<Vec<_>, _>>()?,
        ),
        None => None,
    };
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| CliError::Data(format!("record {}: {e}", i + 1)))?;
        let line = rec.position().map_or(i + 2, |p| p.line() as usize);
        let num = |j: usize| -> Result<f64, CliError> {
            let s = rec.get(j).unwrap_or("");
            s.parse::<f64>()
                .map_err(|_| CliError::Data(format!("line {line}, column {:?}: {s:?} is not a number", header[j])))
        };
        let raw_a = rec.get(a_col).unwrap_or("");
        let a = match actions.index_of(raw_a) {
            Some(a) => a,
            None => match raw_a.parse::<usize>() {
                Ok(a) if a < actions.len() => a,
                _ => {
                    return Err(CliError::Data(format!(
                        "line {line}: action {raw_a:?} is neither a label nor an index in 0..{}",
                        actions.len()
                    )))
                }
            },
        };
        rows.push(Observation {
            w: w_cols.iter().map(|&j| num(j)).collect::<Result<_, _>>()?,
            a,
            y: num(y_col)?,
        });
    }
    Dataset::new(rows, actions.clone(), adjust).map_err(CliError::from)
}

/// Run metadata stamped on every output.
#[derive(Debug, Clone, Serialize)]
pub struct Meta {
    pub version: &'static str,
    pub command: &'static str,
    pub seed: u64,
    pub config_sha256: String,
}

impl Meta {
    fn new(command: &'static str, seed: u64, hashed: &[&[u8]]) -> Self {
        let mut h = Sha256::new();
        for part in hashed {
            h.update((part.len() as u64).to_le_bytes());
            h.update(part);
        }
        Self {
            version: VERSION,
            command,
            seed,
            config_sha256: hex::encode(h.finalize()),
        }
    }

    fn header(&self) -> String {
        format!(
            "# cpip {}\n# command: {}\n# seed: {}\n# config_sha256: {}\n",
            self.version, self.command, self.seed, self.config_sha256
        )
    }
}

/// Serializes the resolved settings so that flag overrides change the hash.
fn settings_bytes<T: Serialize>(s: &T) -> Vec<u8> {
    serde_json::to_vec(s).expect("settings serialize")
}

fn write_output(path: Option<&Path>, bytes: &[u8]) -> Result<(), CliError> {
    match path {
        Some(p) => fs::write(p, bytes).map_err(|source| CliError::Output {
            path: p.display().to_string(),
            source,
        }),
        None => io::stdout().write_all(bytes).map_err(|source| CliError::Output {
            path: "stdout".into(),
            source,
        }),
    }
}

fn csv_bytes(meta: &Meta, fill: impl FnOnce(&mut Vec<u8>) -> csv::Result<()>) -> Result<Vec<u8>, CliError> {
    let mut out = meta.header().into_bytes();
    fill(&mut out).map_err(|e| CliError::Output {
        path: "csv buffer".into(),
        source: io::Error::other(e),
    })?;
    Ok(out)
}

fn warn(msg: &str) {
    eprintln!("warning: {msg}");
}

pub fn cmd_tilt(args: &TiltArgs, exec: Exec) -> Result<Vec<u8>, CliError> {
    let cfg = LoadedConfig::load(&args.config)?;
    let grid = cfg.grid(&args.grid, None)?;
    let tc = cfg.tilt_config(grid)?;
    let k = tc.k();
    let floor = args.prop_floor.or(cfg.file.options.prop_floor).unwrap_or(DEFAULT_FLOOR);
    check_floor(floor).map_err(|e| field_error("prop_floor", e))?;
    let seed = args.seed.or(cfg.file.options.seed).unwrap_or(DEFAULT_SEED);
    let (pis, data_bytes) = match (&args.pi, &args.data) {
        (Some(p), None) => (vec![parse_simplex(p, k)?], Vec::new()),
        (None, Some(path)) => {
            let bytes = fs::read(path).map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
            let data = parse_dataset(&bytes, &cfg.file.data, &cfg.actions)?;
            let opts = PropensityOptions {
                floor,
                ..Default::default()
            };
            let model = fit_propensity(&data, &opts)?;
            if !model.converged {
                warn("propensity fit did not converge");
            }
            let pis = data
                .rows()
                .iter()
                .map(|r| model.predict(&r.w))
                .collect::<Result<Vec<_>, _>>()?;
            (pis, bytes)
        }
        _ => return Err(CliError::Config("tilt needs exactly one of --pi or --data".into())),
    };
    #[derive(Serialize)]
    struct Settings<'a> {
        grid: &'a [f64],
        pi: &'a Option<String>,
        floor: f64,
    }
    let settings = settings_bytes(&Settings {
        grid: &tc.delta_grid,
        pi: &args.pi,
        floor,
    });
    let meta = Meta::new("tilt", seed, &[cfg.sha256.as_bytes(), &settings, &data_bytes]);
    let n = pis.len() as f64;
    let mean_pi: Vec<f64> = (0..k).map(|a| pis.iter().map(|p| p[a]).sum::<f64>() / n).collect();
    let rows = exec.try_map(tc.delta_grid.len(), |g| {
        let tilt = PolicyTilt::new(&tc.nu, &tc.cost, tc.delta_grid[g])?;
        let mut acc = vec![[0.0f64; 3]; k];
        for pi in &pis {
            let (s, t) = tilt.marginals(pi)?;
            let f = tilt.pushforward(pi)?;
            for a in 0..k {
                acc[a][0] += s[a];
                acc[a][1] += t[a];
                acc[a][2] += f[a];
            }
        }
        Ok::<_, TiltError>(acc)
    })
    .map_err(tilt_error)?;
    csv_bytes(&meta, |out| {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["delta", "action", "pi", "source", "target", "pushforward"])?;
        for (g, acc) in rows.iter().enumerate() {
            for a in 0..k {
                w.write_record([
                    tc.delta_grid[g].to_string(),
                    cfg.actions.labels()[a].clone(),
                    mean_pi[a].to_string(),
                    (acc[a][0] / n).to_string(),
                    (acc[a][1] / n).to_string(),
                    (acc[a][2] / n).to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    })
}

pub fn cmd_couple(args: &CoupleArgs) -> Result<Vec<u8>, CliError> {
    let cfg = LoadedConfig::load(&args.config)?;
    let delta = match (args.delta, &cfg.file.delta) {
        (Some(d), _) => d,
        (None, Some(DeltaInput::Scalar(d))) => *d,
        (None, Some(DeltaInput::Grid(g))) if g.len() == 1 => g[0],
        _ => return Err(CliError::Config("delta: couple needs a single value (--delta)".into())),
    };
    let pi = parse_simplex(&args.pi, cfg.nu.len())?;
    let seed = args.seed.or(cfg.file.options.seed).unwrap_or(DEFAULT_SEED);
    let tilt = PolicyTilt::new(&cfg.nu, &cfg.cost, delta).map_err(|e| field_error("delta", e))?;
    let coupling = tilt.coupling(&pi).map_err(tilt_error)?;
    let settings = settings_bytes(&(delta, &args.pi));
    let meta = Meta::new("couple", seed, &[cfg.sha256.as_bytes(), &settings]);
    let labels = cfg.actions.labels();
    let k = coupling.k();
    let cols = coupling.col_sums();
    let rows = coupling.row_sums();
    csv_bytes(&meta, |out| {
        let mut w = csv::Writer::from_writer(out);
        let mut head = vec!["from".to_string()];
        head.extend(labels.iter().cloned());
        head.push("row_sum".into());
        w.write_record(&head)?;
        for i in 0..k {
            let mut rec = vec![labels[i].clone()];
            rec.extend(coupling.row(i).iter().map(f64::to_string));
            rec.push(rows[i].to_string());
            w.write_record(&rec)?;
        }
        let mut rec = vec!["col_sum".to_string()];
        rec.extend(cols.iter().map(f64::to_string));
        rec.push(cols.iter().sum::<f64>().to_string());
        w.write_record(&rec)?;
        w.flush()?;
        Ok(())
    })
}

#[derive(Debug, Serialize)]
struct EstimateSettings {
    grid: Vec<f64>,
    folds: usize,
    bootstrap: usize,
    alpha: f64,
    prop_floor: f64,
}

#[derive(Debug, Serialize)]
struct EstimateJson<'a> {
    meta: &'a Meta,
    n: usize,
    actions: &'a [String],
    settings: &'a EstimateSettings,
    propensity_converged: bool,
    source: &'a crate::inference::BandResult,
    target: &'a crate::inference::BandResult,
    plugin_source: Vec<f64>,
    plugin_target: Vec<f64>,
    positivity: &'a crate::estimation::PositivityReport,
}

/// Writes `curve.csv` and `estimate.json` into `args.out`.
pub fn cmd_estimate(args: &EstimateArgs, exec: Exec) -> Result<(), CliError> {
    let cfg = LoadedConfig::load(&args.config)?;
    let o = &cfg.file.options;
    let settings = EstimateSettings {
        grid: cfg.grid(&args.grid, Some(TiltConfig::linspace(-2.0, 2.0, 100)))?,
        folds: args.folds.or(o.k_folds).unwrap_or(DEFAULT_FOLDS),
        bootstrap: args.bootstrap.or(o.bootstrap).unwrap_or(DEFAULT_BOOTSTRAP),
        alpha: args.alpha.or(o.alpha).unwrap_or(DEFAULT_ALPHA),
        prop_floor: args.prop_floor.or(o.prop_floor).unwrap_or(DEFAULT_FLOOR),
    };
    let seed = args.seed.or(o.seed).unwrap_or(DEFAULT_SEED);
    if !(settings.alpha > 0.0 && settings.alpha < 1.0) {
        return Err(field_error("alpha", format!("{} outside (0, 1)", settings.alpha)));
    }
    check_floor(settings.prop_floor).map_err(|e| field_error("prop_floor", e))?;
    if settings.folds < 2 {
        return Err(field_error("folds", "at least two folds are required"));
    }
    let tc = cfg.tilt_config(settings.grid.clone())?;
    if tc.cost.destination().is_none() {
        return Err(EstimationError::TargetNeedsDestinationCosts.into());
    }
    let bytes = fs::read(&args.data)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", args.data.display())))?;
    let data = parse_dataset(&bytes, &cfg.file.data, &cfg.actions)?;
    if data.len() < settings.folds {
        return Err(CliError::Data(format!(
            "{} rows cannot be split into {} folds",
            data.len(),
            settings.folds
        )));
    }
    let meta = Meta::new("estimate", seed, &[cfg.sha256.as_bytes(), &settings_bytes(&settings), &bytes]);

    let folds = assign_folds(data.len(), settings.folds, derive_seed(seed, 0))?;
    let spec = NuisanceSpec {
        propensity: PropensityOptions {
            floor: settings.prop_floor,
            ..Default::default()
        },
        ..Default::default()
    };
    let cross = CrossFit::fit(&data, folds, &spec, exec)?;
    if !cross.all_converged() {
        warn("propensity fit did not converge in every fold");
    }
    let nuis = cross.predictions(&data)?;
    let curve = one_step_curve_from(&data, &nuis, &tc, exec)?;
    let positivity = positivity_diagnostic(&nuis, &tc, &tc.delta_grid, DEFAULT_POSITIVITY_THRESHOLD)?;
    if positivity.any_flagged() {
        let flagged = positivity.flagged.iter().filter(|f| **f).count();
        let (g, worst) = positivity
            .max_ratio
            .iter()
            .enumerate()
            .fold((0, 0.0f64), |acc, (g, r)| if *r > acc.1 { (g, *r) } else { acc });
        warn(&format!(
            "positivity: target/propensity ratio exceeds {} at {flagged} of {} grid points (max {worst:.1} at delta = {})",
            positivity.threshold,
            positivity.deltas.len(),
            positivity.deltas[g]
        ));
    }
    let mu_s: Vec<f64> = curve.points.iter().map(|p| p.mu_s_onestep).collect();
    let mu_t: Vec<f64> = curve.points.iter().map(|p| p.mu_t_onestep).collect();
    let sd_s: Vec<f64> = curve.points.iter().map(|p| p.sigma_s).collect();
    let sd_t: Vec<f64> = curve.points.iter().map(|p| p.sigma_t).collect();
    let processes = [
        EifProcess {
            columns: &curve.eif_source,
            mu: &mu_s,
            sigma: &sd_s,
        },
        EifProcess {
            columns: &curve.eif_target,
            mu: &mu_t,
            sigma: &sd_t,
        },
    ];
    let xi = multiplier_critical_values(&processes, settings.bootstrap, settings.alpha, derive_seed(seed, 1), exec)?;
    let (band_s, band_t) = build_bands(&curve.points, xi[0], xi[1], data.len(), settings.alpha, settings.bootstrap);

    let csv = csv_bytes(&meta, |out| {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "delta",
            "policy",
            "plugin",
            "estimate",
            "sigma",
            "lower_pointwise",
            "upper_pointwise",
            "lower_uniform",
            "upper_uniform",
        ])?;
        for (g, p) in curve.points.iter().enumerate() {
            for (name, band, plug) in [("source", &band_s, p.mu_s_plugin), ("target", &band_t, p.mu_t_plugin)] {
                w.write_record([
                    p.delta.to_string(),
                    name.to_string(),
                    plug.to_string(),
                    band.estimates[g].to_string(),
                    band.sigma[g].to_string(),
                    band.lower_pointwise[g].to_string(),
                    band.upper_pointwise[g].to_string(),
                    band.lower_uniform[g].to_string(),
                    band.upper_uniform[g].to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    })?;
    let json = EstimateJson {
        meta: &meta,
        n: data.len(),
        actions: cfg.actions.labels(),
        settings: &settings,
        propensity_converged: cross.all_converged(),
        source: &band_s,
        target: &band_t,
        plugin_source: curve.points.iter().map(|p| p.mu_s_plugin).collect(),
        plugin_target: curve.points.iter().map(|p| p.mu_t_plugin).collect(),
        positivity: &positivity,
    };
    create_dir(&args.out)?;
    write_output(Some(&args.out.join("curve.csv")), &csv)?;
    write_output(Some(&args.out.join("estimate.json")), &pretty(&json))
}

fn pretty<T: Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_vec_pretty(v).expect("report serializes");
    s.push(b'\n');
    s
}

fn create_dir(p: &Path) -> Result<(), CliError> {
    fs::create_dir_all(p).map_err(|source| CliError::Output {
        path: p.display().to_string(),
        source,
    })
}

/// Synthetic dataset as CSV with columns `W1..W4, A, Y`.
pub fn dataset_csv(data: &Dataset, meta: &Meta) -> Result<Vec<u8>, CliError> {
    csv_bytes(meta, |out| {
        let mut w = csv::Writer::from_writer(out);
        let mut head: Vec<String> = (1..=data.p()).map(|j| format!("W{j}")).collect();
        head.push("A".into());
        head.push("Y".into());
        w.write_record(&head)?;
        for r in data.rows() {
            let mut rec: Vec<String> = r.w.iter().map(f64::to_string).collect();
            rec.push(r.a.to_string());
            rec.push(r.y.to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    })
}

#[derive(Debug, Serialize)]
struct SimulateSettings<'a> {
    setups: &'a [Setup],
    n: usize,
    reps: usize,
    folds: usize,
    prop_floor: f64,
    truth_draws: usize,
}

/// Writes either the emitted dataset or `report.csv` and `report.json`.
pub fn cmd_simulate(args: &SimulateArgs, exec: Exec) -> Result<(), CliError> {
    let seed = args.seed.unwrap_or(DEFAULT_SEED);
    if let Some(path) = &args.emit_data {
        if args.n == 0 {
            return Err(field_error("n", "must be positive"));
        }
        let meta = Meta::new("simulate", seed, &[&settings_bytes(&("emit-data", args.n))]);
        let data = generate(args.n, seed).dataset;
        return write_output(Some(path), &dataset_csv(&data, &meta)?);
    }
    let default_grid = TiltConfig::linspace(-2.0, 2.0, 100);
    let (setups, config_hash) = match (&args.config, &args.setup) {
        (Some(path), _) => {
            let cfg = LoadedConfig::load(path)?;
            if cfg.nu.len() != 3 {
                return Err(field_error("nu", "the synthetic study has three actions"));
            }
            let tc = cfg.tilt_config(cfg.grid(&args.grid, Some(default_grid))?)?;
            (
                vec![Setup {
                    name: "custom".into(),
                    config: tc,
                }],
                cfg.sha256,
            )
        }
        (None, which) => {
            let grid = if args.grid.delta_min.is_some() || args.grid.delta_max.is_some() || args.grid.delta_points.is_some() {
                range_grid(
                    args.grid.delta_min.unwrap_or(-2.0),
                    args.grid.delta_max.unwrap_or(2.0),
                    args.grid.delta_points.unwrap_or(100),
                )?
            } else {
                default_grid
            };
            let all = table_setups(&grid);
            let chosen = match which.as_deref().unwrap_or("all") {
                "all" => all,
                id => {
                    let s = all.into_iter().find(|s| s.name == id).ok_or_else(|| {
                        CliError::Config(format!("setup: unknown preset {id:?} (expected 1, 2, 3 or all)"))
                    })?;
                    vec![s]
                }
            };
            (chosen, String::new())
        }
    };
    let mut spec = BenchmarkSpec::new(setups, args.n, args.reps, seed);
    spec.folds = args.folds.unwrap_or(DEFAULT_FOLDS);
    spec.floor = args.prop_floor.unwrap_or(DEFAULT_FLOOR);
    spec.truth_draws = args.truth_draws;
    check_floor(spec.floor).map_err(|e| field_error("prop_floor", e))?;
    let settings = settings_bytes(&SimulateSettings {
        setups: &spec.setups,
        n: spec.n,
        reps: spec.reps,
        folds: spec.folds,
        prop_floor: spec.floor,
        truth_draws: spec.truth_draws,
    });
    let meta = Meta::new("simulate", seed, &[config_hash.as_bytes(), &settings]);
    let report = run_benchmark(&spec, exec)?;
    let csv = csv_bytes(&meta, |out| report.write_csv(out))?;
    #[derive(Serialize)]
    struct ReportJson<'a> {
        meta: &'a Meta,
        #[serde(flatten)]
        report: &'a crate::simulation::BenchmarkReport,
    }
    let out = args.out.as_ref().expect("clap enforces --out");
    create_dir(out)?;
    write_output(Some(&out.join("report.csv")), &csv)?;
    write_output(
        Some(&out.join("report.json")),
        &pretty(&ReportJson {
            meta: &meta,
            report: &report,
        }),
    )
}

fn configure_threads(threads: Option<usize>) -> Result<Exec, CliError> {
    if threads == Some(0) {
        return Err(field_error("threads", "must be positive"));
    }
    #[cfg(feature = "parallel")]
    if let Some(t) = threads {
        // Fails only if a pool already exists, which is harmless.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    Ok(if threads == Some(1) { Exec::Sequential } else { Exec::Parallel })
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let exec = configure_threads(cli.threads)?;
    match &cli.command {
        Command::Tilt(a) => {
            let bytes = cmd_tilt(a, exec)?;
            write_output(a.out.as_deref(), &bytes)
        }
        Command::Couple(a) => {
            let bytes = cmd_couple(a)?;
            write_output(a.out.as_deref(), &bytes)
        }
        Command::Estimate(a) => cmd_estimate(a, exec),
        Command::Simulate(a) => cmd_simulate(a, exec),
    }
}
