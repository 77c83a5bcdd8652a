//! Command implementations behind the `ldp` binary.
//!
//! Every command parses and validates its whole configuration before it
//! touches the filesystem, so a bad key or value never leaves a partial
//! output directory behind.

use std::fs;
use std::path::{Path, PathBuf};

use ldp_core::cost::{static_cost, LayerCost};
use ldp_core::harness::config::RunConfig;
use ldp_core::harness::data::{DataSpec, Dataset};
use ldp_core::harness::model::Model;
use ldp_core::harness::train::{self, EvalReport, RunArtifacts};
use ldp_core::schedule::read_schedule_csv;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// A config problem located by its dotted path, e.g. `precision.t_frac`.
    #[error("{origin}: {path}: {msg}")]
    Config {
        origin: String,
        path: String,
        msg: String,
    },
    #[error("--param {path}: {msg}")]
    Param { path: String, msg: String },
    #[error("--values: {0}")]
    Values(String),
    #[error("{}: {cause}", path.display())]
    Io {
        path: PathBuf,
        cause: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] ldp_core::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CliError>;

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|cause| CliError::Io {
        path: path.to_path_buf(),
        cause,
    })
}

/// Joins the location serde reports with the key named in an
/// "unknown field" message, so the error points at the misspelled key.
fn located(origin: &str, err: serde_path_to_error::Error<serde_json::Error>) -> CliError {
    let mut path = err.path().to_string();
    let inner = err.into_inner();
    let msg = inner.to_string();
    if let Some(rest) = msg.strip_prefix("unknown field `") {
        if let Some(key) = rest.split('`').next() {
            path = if path == "." {
                key.to_string()
            } else {
                format!("{path}.{key}")
            };
        }
    }
    if path == "." {
        path = "(root)".into();
    }
    CliError::Config {
        origin: origin.to_string(),
        path,
        msg,
    }
}

fn from_value<T: for<'de> Deserialize<'de>>(origin: &str, v: Value) -> Result<T> {
    serde_path_to_error::deserialize(v).map_err(|e| located(origin, e))
}

fn from_str<T: for<'de> Deserialize<'de>>(origin: &str, text: &str) -> Result<T> {
    let mut de = serde_json::Deserializer::from_str(text);
    let v = serde_path_to_error::deserialize(&mut de).map_err(|e| located(origin, e))?;
    de.end().map_err(|e| CliError::Config {
        origin: origin.to_string(),
        path: "(root)".into(),
        msg: e.to_string(),
    })?;
    Ok(v)
}

fn validated(origin: &str, cfg: RunConfig) -> Result<RunConfig> {
    cfg.validate().map_err(|e| match e {
        ldp_core::Error::Config { path, msg } => CliError::Config {
            origin: origin.to_string(),
            path,
            msg,
        },
        other => CliError::Core(other),
    })?;
    Ok(cfg)
}

/// Parses a JSON config strictly and range-checks it. Missing sections and
/// fields take their defaults.
pub fn parse_config(origin: &str, text: &str) -> Result<RunConfig> {
    validated(origin, from_str(origin, text)?)
}

pub fn parse_and_validate(path: &Path) -> Result<RunConfig> {
    parse_config(&path.display().to_string(), &read_text(path)?)
}

/// Returns a copy of `cfg` with the numeric field at `dotted` set to
/// `value`. The path must name an existing numeric (or unset optional)
/// field.
pub fn set_dotted(cfg: &RunConfig, dotted: &str, value: f64) -> Result<RunConfig> {
    let param_err = |msg: String| CliError::Param {
        path: dotted.to_string(),
        msg,
    };
    if !value.is_finite() {
        return Err(param_err(format!("value {value} is not finite")));
    }
    let mut root = serde_json::to_value(cfg)?;
    let mut node = &mut root;
    for key in dotted.split('.') {
        node = node
            .as_object_mut()
            .and_then(|o| o.get_mut(key))
            .ok_or_else(|| param_err("no such config field".into()))?;
    }
    match node {
        Value::Number(_) | Value::Null => {}
        other => {
            return Err(param_err(format!(
                "not a numeric parameter (holds {})",
                kind_of(other)
            )))
        }
    }
    *node = if value.fract() == 0.0 && value.abs() < 9.0e15 {
        if value >= 0.0 {
            Value::from(value as u64)
        } else {
            Value::from(value as i64)
        }
    } else {
        Value::from(value)
    };
    let origin = format!("--param {dotted}={value}");
    validated(&origin, from_value(&origin, root)?)
}

fn kind_of(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "a boolean",
        Value::Number(_) => "a number",
        Value::String(_) => "a string",
        Value::Array(_) => "a list",
        Value::Object(_) => "a section",
    }
}

/// Parses `--values` as a comma-separated list of numbers.
pub fn parse_values(list: &str) -> Result<Vec<f64>> {
    let values = list
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| CliError::Values(format!("`{s}` is not a number")))
        })
        .collect::<Result<Vec<_>>>()?;
    if values.is_empty() {
        return Err(CliError::Values("need at least one value".into()));
    }
    Ok(values)
}

pub fn with_output_dir(mut cfg: RunConfig, out: Option<&Path>) -> RunConfig {
    if let Some(dir) = out {
        cfg.train.output_dir = dir.to_path_buf();
    }
    cfg
}

pub fn run_train(cfg: &RunConfig) -> Result<RunArtifacts> {
    Ok(train::train(cfg)?.artifacts)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub final_acc: f64,
    pub total_train_bitops: f64,
    pub final_inference_bitops: f64,
}

#[derive(Debug)]
pub struct SweepOutcome {
    pub runs: Vec<RunArtifacts>,
    pub rows: Vec<SweepRow>,
    pub summary_path: PathBuf,
}

fn value_label(v: f64) -> String {
    format!("{v}")
}

/// Runs one training per value with `param` overridden, sequentially and
/// with the shared seed. Run `i` writes to `<output_dir>/<param>=<value>`;
/// the combined table goes to `<output_dir>/sweep_summary.csv`.
pub fn run_sweep(cfg: &RunConfig, param: &str, values: &[f64]) -> Result<SweepOutcome> {
    if values.is_empty() {
        return Err(CliError::Values("need at least one value".into()));
    }
    let base = cfg.train.output_dir.clone();
    let configs = values
        .iter()
        .map(|&v| {
            let mut c = set_dotted(cfg, param, v)?;
            c.train.output_dir = base.join(format!("{param}={}", value_label(v)));
            Ok(c)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut runs = Vec::with_capacity(configs.len());
    let mut rows = Vec::with_capacity(configs.len());
    for (c, &v) in configs.iter().zip(values) {
        log::info!("sweep {param}={v}");
        let a = run_train(c)?;
        rows.push(SweepRow {
            value: v,
            final_acc: a.summary.final_accuracy,
            total_train_bitops: a.summary.total_train_bitops,
            final_inference_bitops: a.summary.final_inference_bitops,
        });
        runs.push(a);
    }
    let summary_path = base.join("sweep_summary.csv");
    let mut w = csv::Writer::from_path(&summary_path)?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|cause| CliError::Io {
        path: summary_path.clone(),
        cause,
    })?;
    Ok(SweepOutcome {
        runs,
        rows,
        summary_path,
    })
}

/// Retrains `cfg` with bits forced from a schedule log CSV.
pub fn run_replay(cfg: &RunConfig, schedule: &Path) -> Result<RunArtifacts> {
    if !schedule.is_file() {
        return Err(CliError::Io {
            path: schedule.to_path_buf(),
            cause: std::io::Error::new(std::io::ErrorKind::NotFound, "schedule log not found"),
        });
    }
    let log = read_schedule_csv(schedule)?;
    Ok(train::train_replay(cfg, &log)?.artifacts)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub layers: Vec<LayerCost>,
    pub exempt_layers: Vec<LayerCost>,
    pub total_macs: u64,
    pub total_o_full: u64,
    pub b_static: u32,
    pub t_stat: f64,
    pub t_frac: f64,
    pub t_target: f64,
    pub b_min: u32,
    pub b_max: u32,
    /// Forward cost with every quantized layer at `b_min`.
    pub min_cost: f64,
    /// Forward cost with every quantized layer at `b_max`.
    pub max_cost: f64,
}

/// Static cost analysis of the configured model.
pub fn cost_report(cfg: &RunConfig) -> Result<CostReport> {
    let model = Model::build(&cfg.model, cfg.train.seed, cfg.precision.lr, None)?;
    let layers = model.quantized_costs();
    let p = &cfg.precision;
    let t_stat = static_cost(&layers, p.b_static);
    Ok(CostReport {
        total_macs: layers.iter().map(|c| c.macs).sum(),
        total_o_full: layers.iter().map(|c| c.o_full).sum(),
        exempt_layers: model.exempt_costs(),
        b_static: p.b_static,
        t_stat,
        t_frac: p.t_frac,
        t_target: p.t_frac * t_stat,
        b_min: cfg.model.b_min,
        b_max: cfg.model.b_max,
        min_cost: static_cost(&layers, cfg.model.b_min),
        max_cost: static_cost(&layers, cfg.model.b_max),
        layers,
    })
}

pub fn render_cost_report(r: &CostReport) -> String {
    let mut s = format!("{:<28} {:>12} {:>16}\n", "layer", "macs", "o_full");
    for c in &r.layers {
        s += &format!("{:<28} {:>12} {:>16}\n", c.name, c.macs, c.o_full);
    }
    for c in &r.exempt_layers {
        s += &format!(
            "{:<28} {:>12} {:>16}\n",
            format!("{} (exempt)", c.name),
            c.macs,
            c.o_full
        );
    }
    s += &format!(
        "{:<28} {:>12} {:>16}\n",
        "total (quantized)", r.total_macs, r.total_o_full
    );
    s += &format!("T_stat @ {} bits: {}\n", r.b_static, r.t_stat);
    s += &format!("T @ t_frac {}: {}\n", r.t_frac, r.t_target);
    s += &format!("min C @ {} bits: {}\n", r.b_min, r.min_cost);
    s += &format!("max C @ {} bits: {}\n", r.b_max, r.max_cost);
    s
}

/// Writes the report as `cost_report.json` under `dir` and returns its path.
pub fn run_cost_report(cfg: &RunConfig, dir: &Path) -> Result<(CostReport, PathBuf)> {
    let report = cost_report(cfg)?;
    let io = |cause| CliError::Io {
        path: dir.to_path_buf(),
        cause,
    };
    fs::create_dir_all(dir).map_err(io)?;
    let path = dir.join("cost_report.json");
    fs::write(&path, serde_json::to_string_pretty(&report)?).map_err(|cause| CliError::Io {
        path: path.clone(),
        cause,
    })?;
    Ok((report, path))
}

/// Resolves `--data`: a directory holds MNIST-named IDX files, anything
/// else is a JSON data spec. Either way the test split is returned.
pub fn load_eval_data(path: &Path, seed: u64) -> Result<Dataset> {
    let spec = if path.is_dir() {
        from_value::<DataSpec>(
            &path.display().to_string(),
            serde_json::json!({ "kind": "idx", "dir": path }),
        )?
    } else {
        let origin = path.display().to_string();
        from_str::<DataSpec>(&origin, &read_text(path)?)?
    };
    spec.validate()?;
    Ok(spec.load(seed)?.test)
}

pub fn run_eval(checkpoint: &Path, data: Option<&Path>, bits: Option<u32>) -> Result<EvalReport> {
    let ckpt = ldp_core::harness::checkpoint::load(checkpoint)?;
    let data = data
        .map(|p| load_eval_data(p, ckpt.config.train.seed))
        .transpose()?;
    Ok(train::evaluate(&ckpt, data, bits)?)
}
