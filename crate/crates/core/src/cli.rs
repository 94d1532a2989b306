//! Batch front-end: `fit`, `predict`, `cv`, `ensemble` and `inspect` runs
//! driven by a JSON config over CSV data.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
//! failure. Failures print one JSON object on standard error.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::basis::BasisError;
use crate::compute_graph::{GraphError, LayerSpec, NetworkSpec};
use crate::data::{DataError, DataFrame};
use crate::families::{FamilyError, FamilyKind, FittedDistribution, MixtureDistribution};
use crate::model_api::{
    self, build, coef, ensemble, get_ensemble_distribution, load_bundle, partial_effects, predict_distribution,
    save_bundle, CoefType, Model, ModelError, ModelSpec, PenaltyKind, PenaltyOptions, GRID_1D,
};
use crate::orthogonalization::{OrthoError, OzOptions};
use crate::trainer::{cross_validate, evaluate, fit, validation_rows, Folds, TrainConfig, TrainError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

/// A failed run: exit code plus message.
#[derive(Debug, Clone, PartialEq)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn config(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }

    fn data(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_DATA,
            message: message.into(),
        }
    }

    fn kind(&self) -> &'static str {
        match self.code {
            EXIT_CONFIG => "config",
            EXIT_DATA => "data",
            _ => "numeric",
        }
    }

    /// One-line JSON for standard error.
    pub fn to_json(&self) -> String {
        json!({"error": {"kind": self.kind(), "code": self.code, "message": self.message}}).to_string()
    }
}

fn code_of_model(e: &ModelError) -> i32 {
    match e {
        ModelError::Formula(_)
        | ModelError::UnknownNetwork(_)
        | ModelError::DuplicateNetwork(_)
        | ModelError::EmptyPredictor(_)
        | ModelError::InvalidOption(_)
        | ModelError::ParamIndex { .. }
        | ModelError::NotSupported(_) => EXIT_CONFIG,
        ModelError::Basis(b) => match b {
            BasisError::NonFinite { .. } | BasisError::ConstantInput(_) | BasisError::TooFewObservations { .. } => {
                EXIT_DATA
            }
            BasisError::Singular => EXIT_NUMERIC,
            _ => EXIT_CONFIG,
        },
        ModelError::Graph(g) => match g {
            GraphError::NonFinite { .. } => EXIT_NUMERIC,
            GraphError::Shape(_) => EXIT_DATA,
            _ => EXIT_CONFIG,
        },
        ModelError::Family(f) => match f {
            FamilyError::OutOfSupport { .. } | FamilyError::Dimension(_) => EXIT_DATA,
            _ => EXIT_CONFIG,
        },
        ModelError::Data(_) | ModelError::NonFinite { .. } | ModelError::ResponseLength { .. } | ModelError::Bundle(_) => {
            EXIT_DATA
        }
        ModelError::Ortho(o) => match o {
            OrthoError::NonFinite { .. } => EXIT_NUMERIC,
            _ => EXIT_DATA,
        },
        ModelError::NonFiniteLoss(_) => EXIT_NUMERIC,
    }
}

fn code_of_train(e: &TrainError) -> i32 {
    match e {
        TrainError::Model(m) => code_of_model(m),
        TrainError::NonFinite { .. } => EXIT_NUMERIC,
        TrainError::Config(_) | TrainError::Folds(_) => EXIT_CONFIG,
        TrainError::EmptyTrainingSplit => EXIT_DATA,
        TrainError::Member { source, .. } => code_of_train(source),
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        Self {
            code: code_of_model(&e),
            message: e.to_string(),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        Self {
            code: code_of_train(&e),
            message: e.to_string(),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::data(e.to_string())
    }
}

impl From<FamilyError> for CliError {
    fn from(e: FamilyError) -> Self {
        ModelError::from(e).into()
    }
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::data(format!("cannot write '{}': {e}", path.display()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResponseTransform {
    #[default]
    None,
    Log,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub csv_path: PathBuf,
    pub response: String,
    #[serde(default)]
    pub response_transform: ResponseTransform,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PenaltyConfig {
    #[serde(default)]
    pub df_default: Option<f64>,
    #[serde(default)]
    pub hat1: bool,
    #[serde(default)]
    pub sp_scale: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Statistic {
    Mean,
    Stddev,
    Quantile,
    DensityGrid,
}

fn default_statistics() -> Vec<Statistic> {
    vec![Statistic::Mean]
}
fn default_probs() -> Vec<f64> {
    vec![0.05, 0.95]
}
fn default_grid_points() -> usize {
    201
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictConfig {
    /// Bundle to load; defaults to `<output_dir>/model.json`.
    #[serde(default)]
    pub model: Option<PathBuf>,
    /// Defaults to the training CSV.
    #[serde(default)]
    pub newdata: Option<PathBuf>,
    #[serde(default = "default_statistics")]
    pub statistics: Vec<Statistic>,
    #[serde(default = "default_probs")]
    pub probs: Vec<f64>,
    #[serde(default = "default_grid_points")]
    pub grid_points: usize,
}

impl Default for PredictConfig {
    fn default() -> Self {
        Self {
            model: None,
            newdata: None,
            statistics: default_statistics(),
            probs: default_probs(),
            grid_points: default_grid_points(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CvFolds {
    K(usize),
    /// `[train rows, test rows]` per fold, 0-based.
    Explicit(Vec<(Vec<usize>, Vec<usize>)>),
}

fn default_folds() -> CvFolds {
    CvFolds::K(5)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CvConfig {
    #[serde(default = "default_folds")]
    pub folds: CvFolds,
}

fn default_members() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    #[serde(default = "default_members")]
    pub n_ensemble: usize,
    /// Writes mixture predictions for these rows when set.
    #[serde(default)]
    pub predict_newdata: Option<PathBuf>,
    #[serde(default = "default_probs")]
    pub probs: Vec<f64>,
}

/// One run configuration. Relative paths resolve against the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub family: String,
    /// Formula per name, in parameter order unless `mapping` is given.
    pub formulas: IndexMap<String, String>,
    #[serde(default)]
    pub networks: IndexMap<String, Vec<LayerSpec>>,
    /// 1-based parameter indices per formula.
    #[serde(default)]
    pub mapping: Option<Vec<Vec<usize>>>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub penalty: PenaltyConfig,
    #[serde(default)]
    pub orthog: OzOptions,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub predict: Option<PredictConfig>,
    #[serde(default)]
    pub cv: Option<CvConfig>,
    #[serde(default)]
    pub ensemble: Option<EnsembleConfig>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read config '{}': {e}", path.display())))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| CliError::config(format!("invalid config: {e}")))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.data.csv_path);
        if let Some(o) = cfg.output_dir.as_mut() {
            resolve(o);
        }
        if let Some(p) = cfg.predict.as_mut() {
            p.model.as_mut().map(resolve);
            p.newdata.as_mut().map(resolve);
        }
        if let Some(e) = cfg.ensemble.as_mut() {
            e.predict_newdata.as_mut().map(resolve);
        }
        Ok(cfg)
    }

    /// Model specification with the effective seed applied.
    pub fn model_spec(&self, seed: u64) -> Result<ModelSpec, CliError> {
        let formulas: Vec<(&str, &str)> = self.formulas.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect();
        let mut spec = ModelSpec::new(&self.family, &formulas)?;
        if let Some(m) = &self.mapping {
            spec = spec.mapping(m)?;
        } else if spec.formulas.mapping.is_empty() {
            return Err(CliError::config(format!(
                "{} formulas for the {} parameters of the {} family; give a mapping",
                formulas.len(),
                spec.family.n_params(),
                spec.family.name()
            )));
        }
        for (name, layers) in &self.networks {
            spec = spec.network(NetworkSpec {
                name: name.clone(),
                layers: layers.clone(),
            })?;
        }
        spec.penalty = PenaltyOptions {
            df_default: self.penalty.df_default.unwrap_or(PenaltyOptions::default().df_default),
            hat1: self.penalty.hat1,
        };
        spec.orthog = self.orthog;
        Ok(spec.seed(seed))
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let mut t = self.train.clone();
        t.seed = seed;
        if self.penalty.sp_scale.is_some() {
            t.sp_scale = self.penalty.sp_scale;
        }
        t
    }
}

#[derive(Debug, Parser)]
#[command(name = "sddr", version, about = "Semi-structured deep distributional regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit a model and write its artifacts.
    Fit(Common),
    /// Predict from a saved model.
    Predict {
        #[command(flatten)]
        common: Common,
        /// Model bundle (overrides the config).
        #[arg(long)]
        model: Option<PathBuf>,
        /// CSV with new rows (overrides the config).
        #[arg(long)]
        newdata: Option<PathBuf>,
        /// Comma-separated statistics: mean, stddev, quantile, density_grid.
        #[arg(long, value_delimiter = ',')]
        statistic: Option<Vec<String>>,
        /// Comma-separated quantile levels.
        #[arg(long, value_delimiter = ',')]
        probs: Option<Vec<f64>>,
    },
    /// Cross-validate the configured model.
    Cv(Common),
    /// Train a deep ensemble.
    Ensemble(Common),
    /// Describe the compiled model without fitting.
    Inspect(Common),
}

/// Parses `args` (program name first), runs the command and returns the
/// exit code. Errors are reported on standard error.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Fit(c) => run_fit(&c.config, c.out.as_deref(), c.seed),
        Command::Predict {
            common,
            model,
            newdata,
            statistic,
            probs,
        } => run_predict(&common, model, newdata, statistic, probs),
        Command::Cv(c) => run_cv(&c.config, c.out.as_deref(), c.seed),
        Command::Ensemble(c) => run_ensemble(&c.config, c.out.as_deref(), c.seed),
        Command::Inspect(c) => run_inspect(&c.config, c.seed),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("{}", e.to_json());
            e.code
        }
    }
}

/// Writes through a temporary file in the same directory, then renames.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    let dir = path.parent().unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    std::fs::write(&tmp, contents).map_err(|e| io_error(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| io_error(path, e))
}

fn write_json(path: &Path, value: &Value) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("json values serialize");
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

/// CSV text with shortest round-trip float formatting.
struct CsvText {
    out: String,
}

impl CsvText {
    fn new(header: &[&str]) -> Self {
        let mut w = CsvText { out: String::new() };
        w.row(header.iter().map(|h| csv_field(h)));
        w
    }

    fn row<S: AsRef<str>>(&mut self, fields: impl IntoIterator<Item = S>) {
        let mut first = true;
        for f in fields {
            if !first {
                self.out.push(',');
            }
            first = false;
            self.out.push_str(f.as_ref());
        }
        self.out.push('\n');
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn num(v: f64) -> String {
    format!("{v}")
}

fn output_dir(cfg: &RunConfig, out: Option<&Path>) -> Result<PathBuf, CliError> {
    let dir = out
        .map(Path::to_path_buf)
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| CliError::config("no output directory: set output_dir or pass --out"))?;
    std::fs::create_dir_all(&dir).map_err(|e| CliError::config(format!("cannot create '{}': {e}", dir.display())))?;
    Ok(dir)
}

fn effective_seed(cfg: &RunConfig, cli_seed: Option<u64>) -> u64 {
    cli_seed.or(cfg.seed).unwrap_or(cfg.train.seed)
}

/// Training rows and responses, after dropping rows with missing values in
/// used columns and applying the response transform.
fn load_training(cfg: &RunConfig, spec: &ModelSpec) -> Result<(DataFrame, Vec<f64>, usize), CliError> {
    let mut used = spec.variables();
    if !used.contains(&cfg.data.response) {
        used.push(cfg.data.response.clone());
    }
    let (df, dropped) = DataFrame::read_csv(&cfg.data.csv_path, Some(&used))?;
    if dropped > 0 {
        log::warn!("dropped {dropped} rows with missing values");
    }
    let y = response(&df, &cfg.data)?;
    Ok((df, y, dropped))
}

fn response(df: &DataFrame, data: &DataConfig) -> Result<Vec<f64>, CliError> {
    let raw = df.numeric(&data.response)?;
    match data.response_transform {
        ResponseTransform::None => Ok(raw.to_vec()),
        ResponseTransform::Log => raw
            .iter()
            .enumerate()
            .map(|(row, &v)| {
                if v > 0.0 {
                    Ok(v.ln())
                } else {
                    Err(DataError::BadTransform {
                        column: data.response.clone(),
                        row,
                        value: v,
                    }
                    .into())
                }
            })
            .collect(),
    }
}

fn coefficients_json(model: &Model) -> Result<Value, CliError> {
    let mut out = serde_json::Map::new();
    for (k, name) in model.family().param_names().iter().enumerate() {
        let linear = coef(model, CoefType::Linear, k + 1)?;
        let smooth = coef(model, CoefType::Smooth, k + 1)?;
        let linear: serde_json::Map<String, Value> = linear.into_iter().map(|(n, v)| (n, json!(v[0]))).collect();
        let smooth: serde_json::Map<String, Value> = smooth.into_iter().map(|(n, v)| (n, json!(v))).collect();
        out.insert(name.to_string(), json!({"linear": linear, "smooth": smooth}));
    }
    Ok(Value::Object(out))
}

fn history_csv(h: &crate::trainer::FitHistory) -> String {
    let mut w = CsvText::new(&["epoch", "loss", "val_loss"]);
    for (e, l) in h.loss.iter().enumerate() {
        let v = h.val_loss.as_ref().map(|v| num(v[e])).unwrap_or_default();
        w.row([(e + 1).to_string(), num(*l), v]);
    }
    w.out
}

/// File stem for a term label, e.g. `loc_s_x2` for `s(x2)` of `loc`.
fn term_file_stem(param: &str, label: &str) -> String {
    let mut s = format!("{param}_");
    let mut last_sep = true;
    for c in label.chars() {
        if c.is_ascii_alphanumeric() || c == '.' || c == '-' {
            s.push(c);
            last_sep = false;
        } else if !last_sep {
            s.push('_');
            last_sep = true;
        }
    }
    s.trim_end_matches('_').to_string()
}

fn write_partial_effects(model: &Model, dir: &Path) -> Result<Vec<String>, CliError> {
    let mut written = Vec::new();
    for (k, name) in model.family().param_names().iter().enumerate() {
        for table in partial_effects(model, None, k + 1, GRID_1D)? {
            let mut header: Vec<&str> = table.vars.iter().map(String::as_str).collect();
            header.push("effect");
            let mut w = CsvText::new(&header);
            for (i, e) in table.effect.iter().enumerate() {
                w.row(table.grid.iter().map(|g| num(g[i])).chain([num(*e)]));
            }
            let file = format!("{}.csv", term_file_stem(name, &table.term));
            write_atomic(&dir.join("partial_effects").join(&file), w.out.as_bytes())?;
            written.push(file);
        }
    }
    Ok(written)
}

/// Inference-mode mean NLL and penalty at the final weights on the
/// training rows (validation rows excluded).
fn final_training_loss(model: &Model, df: &DataFrame, y: &[f64], val_rows: usize) -> Result<(f64, f64), CliError> {
    let n = df.nrows() - val_rows;
    let rows: Vec<usize> = (0..n).collect();
    let design = model.design(df)?.select(&rows);
    let parts = model.objective(&design, &y[..n], false, 0, None)?;
    Ok((parts.nll, parts.penalty))
}

pub fn run_fit(config: &Path, out: Option<&Path>, seed: Option<u64>) -> Result<(), CliError> {
    let cfg = RunConfig::load(config)?;
    let seed = effective_seed(&cfg, seed);
    let spec = cfg.model_spec(seed)?;
    let train = cfg.train_config(seed);
    train.validate()?;
    let dir = output_dir(&cfg, out)?;
    let (df, y, dropped) = load_training(&cfg, &spec)?;
    let mut model = build(&y, &df, &spec)?;
    let history = fit(&mut model, &df, &y, &train)?;
    let val_rows = validation_rows(df.nrows(), train.validation_split);
    let (nll, penalty) = final_training_loss(&model, &df, &y, val_rows)?;

    write_atomic(&dir.join("model.json"), save_bundle(&model)?.as_bytes())?;
    write_atomic(&dir.join("history.csv"), history_csv(&history).as_bytes())?;
    write_json(&dir.join("coefficients.json"), &coefficients_json(&model)?)?;
    let effects = write_partial_effects(&model, &dir)?;
    let summary = json!({
        "command": "fit",
        "family": model.family().name(),
        "n": df.nrows(),
        "n_train": df.nrows() - val_rows,
        "n_validation": val_rows,
        "rows_dropped": dropped,
        "K": model.n_params(),
        "seed": seed,
        "epochs_run": history.epochs_run(),
        "best_epoch": history.best_epoch,
        "stopped_early": history.stopped_early,
        "initial_loss": history.initial_loss,
        "final_loss": history.final_loss(),
        "final_val_loss": history.val_loss.as_ref().and_then(|v| v.last().copied()),
        "final_train_nll": nll,
        "final_penalty": penalty,
        "partial_effects": effects,
    });
    write_json(&dir.join("summary.json"), &summary)
}

fn parse_statistics(list: &[String]) -> Result<Vec<Statistic>, CliError> {
    list.iter()
        .map(|s| {
            serde_json::from_value(Value::String(s.trim().to_string()))
                .map_err(|_| CliError::config(format!("unknown statistic '{s}'")))
        })
        .collect()
}

fn check_probs(probs: &[f64]) -> Result<(), CliError> {
    match probs.iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
        Some(p) => Err(CliError::config(format!("quantile level {p} outside (0, 1)"))),
        None => Ok(()),
    }
}

fn prob_label(p: f64) -> String {
    format!("q{p}")
}

/// Statistic columns for a single or mixture distribution.
trait Summaries {
    fn mean(&self) -> Vec<f64>;
    fn stddev(&self) -> Vec<f64>;
    fn quantile(&self, p: f64) -> Result<Vec<f64>, FamilyError>;
}

impl Summaries for FittedDistribution {
    fn mean(&self) -> Vec<f64> {
        FittedDistribution::mean(self)
    }
    fn stddev(&self) -> Vec<f64> {
        FittedDistribution::stddev(self)
    }
    fn quantile(&self, p: f64) -> Result<Vec<f64>, FamilyError> {
        FittedDistribution::quantile(self, p)
    }
}

impl Summaries for MixtureDistribution {
    fn mean(&self) -> Vec<f64> {
        MixtureDistribution::mean(self)
    }
    fn stddev(&self) -> Vec<f64> {
        MixtureDistribution::stddev(self)
    }
    fn quantile(&self, p: f64) -> Result<Vec<f64>, FamilyError> {
        MixtureDistribution::quantile(self, p)
    }
}

fn predictions_csv(dist: &dyn Summaries, n: usize, stats: &[Statistic], probs: &[f64]) -> Result<String, CliError> {
    let mut names = vec!["row".to_string()];
    let mut cols: Vec<Vec<f64>> = Vec::new();
    for s in stats {
        match s {
            Statistic::Mean => {
                names.push("mean".into());
                cols.push(dist.mean());
            }
            Statistic::Stddev => {
                names.push("stddev".into());
                cols.push(dist.stddev());
            }
            Statistic::Quantile => {
                for &p in probs {
                    names.push(prob_label(p));
                    cols.push(dist.quantile(p)?);
                }
            }
            Statistic::DensityGrid => {}
        }
    }
    let header: Vec<&str> = names.iter().map(String::as_str).collect();
    let mut w = CsvText::new(&header);
    for i in 0..n {
        w.row(std::iter::once((i + 1).to_string()).chain(cols.iter().map(|c| num(c[i]))));
    }
    Ok(w.out)
}

/// Tail mass left out of the continuous density grid on each side.
const GRID_TAIL: f64 = 1e-6;

/// Per-row `(value, density)` pairs: an equispaced grid between extreme
/// quantiles for continuous families, the support points carrying all but
/// `GRID_TAIL` of the mass for discrete ones.
pub fn density_grid(dist: &FittedDistribution, points: usize) -> Result<Vec<Vec<(f64, f64)>>, CliError> {
    if points < 2 {
        return Err(CliError::config("grid_points must be >= 2"));
    }
    let kind = dist.kind();
    let mut out = Vec::with_capacity(dist.len());
    for i in 0..dist.len() {
        let theta = dist.theta(i);
        let lo = kind.quantile(&theta, GRID_TAIL);
        let hi = kind.quantile(&theta, 1.0 - GRID_TAIL);
        let grid: Vec<(f64, f64)> = if kind.is_discrete() {
            let (lo, hi) = match kind {
                FamilyKind::Bernoulli => (0.0, 1.0),
                _ => (lo, hi),
            };
            let mut v = Vec::new();
            let mut x = lo;
            while x <= hi {
                v.push((x, kind.pdf(&theta, x)));
                x += 1.0;
            }
            v
        } else {
            crate::basis::linspace(lo, hi, points)
                .into_iter()
                .map(|x| (x, kind.pdf(&theta, x)))
                .collect()
        };
        out.push(grid);
    }
    Ok(out)
}

fn density_csv(grids: &[Vec<(f64, f64)>]) -> String {
    let mut w = CsvText::new(&["row", "value", "density"]);
    for (i, g) in grids.iter().enumerate() {
        for (x, d) in g {
            w.row([(i + 1).to_string(), num(*x), num(*d)]);
        }
    }
    w.out
}

/// Reads prediction rows, dropping rows with missing model inputs.
fn read_newdata(path: &Path, model: &Model) -> Result<DataFrame, CliError> {
    let used = model.spec.variables();
    let (df, dropped) = DataFrame::read_csv(path, Some(&used))?;
    if dropped > 0 {
        log::warn!("dropped {dropped} prediction rows with missing values");
    }
    Ok(df)
}

fn run_predict(
    common: &Common,
    model_path: Option<PathBuf>,
    newdata: Option<PathBuf>,
    statistic: Option<Vec<String>>,
    probs: Option<Vec<f64>>,
) -> Result<(), CliError> {
    let cfg = RunConfig::load(&common.config)?;
    let dir = output_dir(&cfg, common.out.as_deref())?;
    let pcfg = cfg.predict.clone().unwrap_or_default();
    let model_path = model_path
        .or(pcfg.model.clone())
        .unwrap_or_else(|| dir.join("model.json"));
    let newdata = newdata.or(pcfg.newdata.clone()).unwrap_or_else(|| cfg.data.csv_path.clone());
    let stats = match statistic {
        Some(s) => parse_statistics(&s)?,
        None => pcfg.statistics.clone(),
    };
    let probs = probs.unwrap_or(pcfg.probs.clone());
    check_probs(&probs)?;
    let text = std::fs::read_to_string(&model_path)
        .map_err(|e| CliError::data(format!("cannot read model '{}': {e}", model_path.display())))?;
    let model = load_bundle(&text)?;
    let df = read_newdata(&newdata, &model)?;
    let dist = predict_distribution(&model, &df)?;
    write_atomic(
        &dir.join("predictions.csv"),
        predictions_csv(&dist, df.nrows(), &stats, &probs)?.as_bytes(),
    )?;
    let with_grid = stats.contains(&Statistic::DensityGrid);
    if with_grid {
        let grids = density_grid(&dist, pcfg.grid_points)?;
        write_atomic(&dir.join("density_grid.csv"), density_csv(&grids).as_bytes())?;
    }
    let summary = json!({
        "command": "predict",
        "model": model_path.display().to_string(),
        "newdata": newdata.display().to_string(),
        "n": df.nrows(),
        "statistics": stats,
        "probs": probs,
        "density_grid": with_grid,
    });
    write_json(&dir.join("summary.json"), &summary)
}

pub fn run_cv(config: &Path, out: Option<&Path>, seed: Option<u64>) -> Result<(), CliError> {
    let cfg = RunConfig::load(config)?;
    let seed = effective_seed(&cfg, seed);
    let spec = cfg.model_spec(seed)?;
    let train = cfg.train_config(seed);
    train.validate()?;
    let folds = match cfg.cv.as_ref().map(|c| c.folds.clone()).unwrap_or_else(default_folds) {
        CvFolds::K(k) if k < 2 => return Err(CliError::config(format!("cv needs at least 2 folds, got {k}"))),
        CvFolds::K(k) => Folds::K(k),
        CvFolds::Explicit(list) => Folds::Explicit(list),
    };
    let dir = output_dir(&cfg, out)?;
    let (df, y, dropped) = load_training(&cfg, &spec)?;
    let result = cross_validate(&spec, &df, &y, &folds, &train)?;
    let mut w = CsvText::new(&["fold", "epoch", "loss", "val_loss"]);
    for (f, h) in result.folds.iter().enumerate() {
        let val = h.val_loss.as_ref().expect("cv folds validate");
        for (e, l) in h.loss.iter().enumerate() {
            w.row([(f + 1).to_string(), (e + 1).to_string(), num(*l), num(val[e])]);
        }
    }
    write_atomic(&dir.join("cv_history.csv"), w.out.as_bytes())?;
    write_json(
        &dir.join("cv_summary.json"),
        &json!({
            "folds": result.folds.len(),
            "test_sizes": result.test_sizes,
            "best_epoch": result.best_epoch,
            "mean_loss": result.mean_loss,
            "mean_val_loss": result.mean_val_loss,
        }),
    )?;
    write_json(
        &dir.join("summary.json"),
        &json!({
            "command": "cv",
            "n": df.nrows(),
            "rows_dropped": dropped,
            "seed": seed,
            "folds": result.folds.len(),
            "best_epoch": result.best_epoch,
            "best_mean_val_loss": result.mean_val_loss.get(result.best_epoch.saturating_sub(1)),
        }),
    )
}

pub fn run_ensemble(config: &Path, out: Option<&Path>, seed: Option<u64>) -> Result<(), CliError> {
    let cfg = RunConfig::load(config)?;
    let seed = effective_seed(&cfg, seed);
    let spec = cfg.model_spec(seed)?;
    let train = cfg.train_config(seed);
    train.validate()?;
    let ecfg = cfg.ensemble.clone().unwrap_or(EnsembleConfig {
        n_ensemble: default_members(),
        predict_newdata: None,
        probs: default_probs(),
    });
    if ecfg.n_ensemble < 2 {
        return Err(CliError::config(format!(
            "an ensemble needs at least 2 members, got {}",
            ecfg.n_ensemble
        )));
    }
    check_probs(&ecfg.probs)?;
    let dir = output_dir(&cfg, out)?;
    let (df, y, dropped) = load_training(&cfg, &spec)?;
    let ens = ensemble(&spec, &df, &y, ecfg.n_ensemble, &train)?;
    let mut files = Vec::new();
    for (i, m) in ens.members.iter().enumerate() {
        let file = format!("member_{}.json", i + 1);
        write_atomic(&dir.join(&file), save_bundle(m)?.as_bytes())?;
        files.push(file);
    }
    let mut predictions = None;
    if let Some(path) = &ecfg.predict_newdata {
        let nd = read_newdata(path, &ens.members[0])?;
        let mix = get_ensemble_distribution(&ens, &nd)?;
        let stats = [Statistic::Mean, Statistic::Stddev, Statistic::Quantile];
        write_atomic(
            &dir.join("ensemble_predictions.csv"),
            predictions_csv(&mix, nd.nrows(), &stats, &ecfg.probs)?.as_bytes(),
        )?;
        predictions = Some("ensemble_predictions.csv");
    }
    let members: Vec<Value> = ens
        .histories
        .iter()
        .zip(&ens.seeds)
        .zip(&files)
        .map(|((h, s), f)| {
            json!({
                "file": f,
                "seed": s,
                "epochs_run": h.epochs_run(),
                "best_epoch": h.best_epoch,
                "final_loss": h.final_loss(),
                "final_val_loss": h.val_loss.as_ref().and_then(|v| v.last().copied()),
            })
        })
        .collect();
    write_json(
        &dir.join("ensemble.json"),
        &json!({"n_ensemble": ens.members.len(), "weights": "uniform", "members": members, "predictions": predictions}),
    )?;
    let train_nll: Vec<f64> = ens
        .members
        .iter()
        .map(|m| evaluate(m, &df, &y))
        .collect::<Result<_, _>>()?;
    write_json(
        &dir.join("summary.json"),
        &json!({
            "command": "ensemble",
            "n": df.nrows(),
            "rows_dropped": dropped,
            "seed": seed,
            "n_ensemble": ens.members.len(),
            "member_objective": train_nll,
        }),
    )
}

fn describe(model: &Model) -> Value {
    let params = model.family().param_names();
    let formulas: Vec<Value> = model
        .formulas
        .iter()
        .map(|cf| {
            let terms: Vec<Value> = cf
                .structured
                .iter()
                .map(|t| {
                    let mut v = json!({"term": t.label, "columns": t.coef_names.len()});
                    match &t.penalty {
                        PenaltyKind::None => {}
                        PenaltyKind::Smooth { lambda, df_target, .. } => {
                            v["lambda"] = json!(lambda);
                            v["df"] = json!(df_target);
                        }
                        PenaltyKind::Ridge { la } => v["ridge"] = json!(la),
                        PenaltyKind::Lasso { la } => v["lasso"] = json!(la),
                    }
                    v
                })
                .collect();
            let nets: Vec<Value> = cf
                .nets
                .iter()
                .map(|n| {
                    json!({
                        "network": n.label,
                        "inputs": n.inputs.ncols(),
                        "outputs": n.network.output_width(),
                        "orthogonalized_against": n.oz.as_ref().map(|o| o.sources.iter().map(|s| s.0.clone()).collect::<Vec<_>>()),
                    })
                })
                .collect();
            json!({
                "name": cf.name,
                "parameters": cf.params.iter().map(|&k| params[k]).collect::<Vec<_>>(),
                "intercept": cf.has_intercept,
                "structured": terms,
                "offsets": cf.offsets,
                "networks": nets,
            })
        })
        .collect();
    json!({
        "family": model.family().name(),
        "parameters": params,
        "n": model.n_train,
        "weights": model.store.len(),
        "formulas": formulas,
    })
}

fn run_inspect(config: &Path, seed: Option<u64>) -> Result<(), CliError> {
    let cfg = RunConfig::load(config)?;
    let seed = effective_seed(&cfg, seed);
    let spec = cfg.model_spec(seed)?;
    let (df, y, _) = load_training(&cfg, &spec)?;
    let model = build(&y, &df, &spec)?;
    let mut text = serde_json::to_string_pretty(&describe(&model)).expect("json values serialize");
    let _ = writeln!(text);
    print!("{text}");
    Ok(())
}

/// Convenience for tests: statistic columns of a fitted model.
pub fn prediction_table(model: &Model, df: &DataFrame, stats: &[Statistic], probs: &[f64]) -> Result<String, CliError> {
    let dist = model_api::predict_distribution(model, df)?;
    predictions_csv(&dist, df.nrows(), stats, probs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn term_file_names() {
        assert_eq!(term_file_stem("loc", "s(x2)"), "loc_s_x2");
        assert_eq!(term_file_stem("scale", "te(x, z)"), "scale_te_x_z");
    }

    #[test]
    fn csv_quotes_when_needed() {
        assert_eq!(csv_field("a,b"), "\"a,b\"");
        assert_eq!(csv_field("plain"), "plain");
        assert_eq!(num(0.1), "0.1");
        assert_eq!(num(1.0), "1");
    }

    #[test]
    fn config_parses_with_defaults() {
        let text = r#"{
            "data": {"csv_path": "d.csv", "response": "y"},
            "family": "normal",
            "formulas": {"loc": "~ 1 + x + dnn(z)", "scale": "~ 1"},
            "networks": {"dnn": [{"type": "dense", "units": 4, "activation": "relu"}, {"type": "dense", "units": 1}]},
            "train": {"epochs": 3, "optimizer": {"name": "sgd", "lr": 0.1}},
            "penalty": {"sp_scale": 1.0},
            "cv": {"folds": 3}
        }"#;
        let cfg: RunConfig = serde_json::from_str(text).unwrap();
        let spec = cfg.model_spec(7).unwrap();
        assert_eq!(spec.seed, 7);
        assert_eq!(spec.networks["dnn"].output_width(), Some(1));
        let t = cfg.train_config(7);
        assert_eq!((t.epochs, t.seed, t.sp_scale), (3, 7, Some(1.0)));
        assert_eq!(cfg.cv.unwrap().folds, CvFolds::K(3));
        assert!(serde_json::from_str::<RunConfig>(r#"{"data": {"csv_path": "d", "response": "y"}, "family": "normal", "formulas": {}, "bogus": 1}"#).is_err());
    }

    #[test]
    fn error_codes() {
        assert_eq!(CliError::from(ModelError::UnknownNetwork("a".into())).code, EXIT_CONFIG);
        assert_eq!(CliError::from(DataError::MissingColumn("a".into())).code, EXIT_DATA);
        let nan = TrainError::NonFinite {
            epoch: 1,
            batch: 2,
            detail: "x".into(),
        };
        assert_eq!(CliError::from(nan).code, EXIT_NUMERIC);
        let line = CliError::data("missing 'x'").to_json();
        let v: Value = serde_json::from_str(&line).unwrap();
        assert_eq!(v["error"]["code"], 3);
        assert!(!line.contains('\n'));
    }
}
