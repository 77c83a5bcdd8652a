use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::cost::BalanceConfig;
use crate::error::{Error, Result};
use crate::harness::data::DataSpec;
use crate::harness::model::{Architecture, ModelSpec};
use crate::quantizer::FULL_PRECISION_BITS;
use crate::schedule::{ScheduleKind, MAX_BITS, MIN_BITS};

fn default_epochs() -> usize {
    20
}
fn default_batch_size() -> usize {
    32
}
fn default_lr() -> f32 {
    0.1
}
fn default_momentum() -> f32 {
    0.9
}
fn default_weight_decay() -> f32 {
    1e-4
}
fn default_milestones() -> Vec<f64> {
    vec![0.5, 0.75]
}
fn default_gamma() -> f32 {
    0.1
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Base weight learning rate.
    #[serde(default = "default_lr")]
    pub lr: f32,
    #[serde(default = "default_momentum")]
    pub momentum: f32,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f32,
    /// Fractions of the run at which the weight lr is multiplied by
    /// `lr_gamma`.
    #[serde(default = "default_milestones")]
    pub lr_milestones: Vec<f64>,
    #[serde(default = "default_gamma")]
    pub lr_gamma: f32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Stop updating precision from this epoch on.
    #[serde(default)]
    pub freeze_precision_after_epoch: Option<usize>,
}

impl Default for TrainSettings {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields default")
    }
}

fn default_precision_lr() -> f64 {
    0.1
}
fn default_t_frac() -> f64 {
    0.6
}
fn default_alpha() -> f64 {
    1.0
}
fn default_epsilon() -> f64 {
    1e-12
}
fn default_bw_bits() -> Option<u32> {
    Some(8)
}
fn default_b_static() -> u32 {
    8
}
fn default_scheduler() -> ScheduleKind {
    ScheduleKind::Learned
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrecisionSettings {
    #[serde(default = "default_scheduler")]
    pub scheduler: ScheduleKind,
    /// Learning rate of the precision params.
    #[serde(default = "default_precision_lr")]
    pub lr: f64,
    /// Cost target as a fraction of the static cost at `b_static` bits.
    #[serde(default = "default_t_frac")]
    pub t_frac: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    /// Activation-gradient bits; `null` keeps gradients in full precision.
    #[serde(default = "default_bw_bits")]
    pub bw_bits: Option<u32>,
    #[serde(default = "default_b_static")]
    pub b_static: u32,
    /// Initial `beta` of every precision param; defaults to the highest
    /// precision.
    #[serde(default)]
    pub beta_init: Option<f64>,
}

impl Default for PrecisionSettings {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields default")
    }
}

impl PrecisionSettings {
    pub fn balance(&self) -> BalanceConfig {
        BalanceConfig {
            alpha: self.alpha,
            epsilon: self.epsilon,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub data: DataSpec,
    #[serde(default)]
    pub train: TrainSettings,
    #[serde(default)]
    pub precision: PrecisionSettings,
}

impl RunConfig {
    pub fn new(model: ModelSpec, data: DataSpec) -> Self {
        RunConfig {
            model,
            data,
            train: TrainSettings::default(),
            precision: PrecisionSettings::default(),
        }
    }

    /// Range checks; errors name the dotted path of the offending field.
    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.n == 0 || m.n > FULL_PRECISION_BITS {
            return Err(Error::config(
                "model.n",
                format!("must be in [1, {FULL_PRECISION_BITS}]"),
            ));
        }
        if m.b_max != m.n {
            return Err(Error::config("model.b_max", "must equal model.n"));
        }
        if m.b_min < MIN_BITS || m.b_min > m.b_max {
            return Err(Error::config(
                "model.b_min",
                format!("must be in [{MIN_BITS}, model.b_max]"),
            ));
        }
        if let Architecture::Mlp { widths } = &m.arch {
            if widths.len() < 2 || widths.contains(&0) {
                return Err(Error::config(
                    "model.arch.widths",
                    "need at least two positive widths",
                ));
            }
        }
        self.data.validate()?;

        let t = &self.train;
        if t.epochs == 0 {
            return Err(Error::config("train.epochs", "must be positive"));
        }
        if t.batch_size < 2 {
            return Err(Error::config("train.batch_size", "must be at least 2"));
        }
        for (path, v) in [
            ("train.lr", t.lr),
            ("train.momentum", t.momentum),
            ("train.weight_decay", t.weight_decay),
            ("train.lr_gamma", t.lr_gamma),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(
                    path,
                    format!("must be finite and non-negative, got {v}"),
                ));
            }
        }
        if t.lr_milestones.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::config(
                "train.lr_milestones",
                "fractions must lie in [0, 1]",
            ));
        }

        let p = &self.precision;
        if !(p.t_frac > 0.0 && p.t_frac <= 1.0) {
            return Err(Error::config(
                "precision.t_frac",
                format!("must be in (0, 1], got {}", p.t_frac),
            ));
        }
        for (path, v) in [
            ("precision.lr", p.lr),
            ("precision.alpha", p.alpha),
            ("precision.epsilon", p.epsilon),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(
                    path,
                    format!("must be finite and non-negative, got {v}"),
                ));
            }
        }
        if let Some(bw) = p.bw_bits {
            if !(MIN_BITS..=MAX_BITS).contains(&bw) {
                return Err(Error::config(
                    "precision.bw_bits",
                    format!("must be in [{MIN_BITS}, {MAX_BITS}]"),
                ));
            }
        }
        if !(MIN_BITS..=MAX_BITS).contains(&p.b_static) {
            return Err(Error::config(
                "precision.b_static",
                format!("must be in [{MIN_BITS}, {MAX_BITS}]"),
            ));
        }
        if let Some(beta) = p.beta_init {
            let (lo, hi) = (m.b_min as f64 / m.n as f64, m.b_max as f64 / m.n as f64);
            if !(lo..=hi).contains(&beta) {
                return Err(Error::config(
                    "precision.beta_init",
                    format!("must be in [{lo}, {hi}]"),
                ));
            }
        }
        if matches!(p.scheduler, ScheduleKind::Replay(_)) {
            return Err(Error::config(
                "precision.scheduler",
                "replay schedules come from a log, not a config",
            ));
        }
        p.scheduler
            .validate()
            .map_err(|e| Error::config("precision.scheduler", e.to_string()))
    }
}
