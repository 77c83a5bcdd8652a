//! Per-layer bit-width schedules.
//!
//! A [`Scheduler`] answers "how many bits does layer `l` use at this
//! iteration". Besides the learned schedule, it covers a fixed baseline, the
//! random-precision and staged block-wise protocols, and two simple
//! progressive/cyclic stand-ins. Every schedule can be logged as
//! [`ScheduleRecord`]s and replayed bit-for-bit.

use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantizer::{bits_of, PrecisionParam};
use crate::rng::{stream_rng, Stream};

pub const MIN_BITS: u32 = 2;
pub const MAX_BITS: u32 = 32;

fn default_other_bits() -> u32 {
    8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScheduleKind {
    /// Fixed precision for every layer.
    Static { bits: u32 },
    /// Every `k` iterations draw a precision from `choices` (one value for all
    /// layers unless `per_layer`) and hold it; `fallback_bits` after
    /// `active_epochs`. `k = None` draws once.
    RandomK {
        k: Option<u64>,
        choices: Vec<u32>,
        active_epochs: usize,
        fallback_bits: u32,
        #[serde(default)]
        per_layer: bool,
    },
    /// Stage `s` covers epochs `[boundaries[s-1], boundaries[s])` and assigns
    /// `bits[s][block]` to each block. Layers outside any block (stem,
    /// classifier) use `other_bits`.
    Staged {
        boundaries: Vec<usize>,
        bits: Vec<Vec<u32>>,
        #[serde(default = "default_other_bits")]
        other_bits: u32,
    },
    /// Simplified progressive stand-in: `num_stages` equal epoch spans
    /// stepping linearly from `b_start` to `b_end`.
    Progressive {
        b_start: u32,
        b_end: u32,
        num_stages: usize,
    },
    /// Simplified cyclic stand-in: cosine between `b_min` and `b_max` with a
    /// period of `cycle_len` epochs, starting at `b_min`.
    Cyclic {
        b_min: u32,
        b_max: u32,
        cycle_len: usize,
    },
    /// Bits follow the learnable precision of each layer.
    Learned,
    /// Bits read back from a recorded log.
    #[serde(skip)]
    Replay(ReplayTable),
}

impl ScheduleKind {
    pub fn is_learned(&self) -> bool {
        matches!(self, ScheduleKind::Learned)
    }

    /// Bit widths this schedule may emit (learned schedules are bounded by
    /// their precision params instead).
    fn declared_bits(&self) -> Vec<u32> {
        match self {
            ScheduleKind::Static { bits } => vec![*bits],
            ScheduleKind::RandomK {
                choices,
                fallback_bits,
                ..
            } => choices.iter().copied().chain([*fallback_bits]).collect(),
            ScheduleKind::Staged {
                bits, other_bits, ..
            } => bits
                .iter()
                .flatten()
                .copied()
                .chain([*other_bits])
                .collect(),
            ScheduleKind::Progressive { b_start, b_end, .. } => vec![*b_start, *b_end],
            ScheduleKind::Cyclic { b_min, b_max, .. } => vec![*b_min, *b_max],
            ScheduleKind::Learned => Vec::new(),
            ScheduleKind::Replay(table) => table.bits.iter().flatten().copied().collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(b) = self
            .declared_bits()
            .into_iter()
            .find(|b| !(MIN_BITS..=MAX_BITS).contains(b))
        {
            return Err(Error::Schedule(format!(
                "bit width {b} outside [{MIN_BITS}, {MAX_BITS}]"
            )));
        }
        match self {
            ScheduleKind::RandomK { k, choices, .. } => {
                if choices.is_empty() {
                    return Err(Error::Schedule("random_k needs at least one choice".into()));
                }
                if *k == Some(0) {
                    return Err(Error::Schedule("random_k period must be positive".into()));
                }
            }
            ScheduleKind::Staged {
                boundaries, bits, ..
            } => {
                if bits.len() != boundaries.len() + 1 {
                    return Err(Error::Schedule(format!(
                        "{} boundaries need {} stages, got {}",
                        boundaries.len(),
                        boundaries.len() + 1,
                        bits.len()
                    )));
                }
                if boundaries.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::Schedule("stage boundaries must increase".into()));
                }
            }
            ScheduleKind::Progressive { num_stages, .. } if *num_stages == 0 => {
                return Err(Error::Schedule(
                    "progressive needs at least one stage".into(),
                ));
            }
            ScheduleKind::Cyclic {
                b_min,
                b_max,
                cycle_len,
            } if (*cycle_len == 0 || b_min > b_max) => {
                return Err(Error::Schedule(
                    "cyclic needs cycle_len > 0 and b_min <= b_max".into(),
                ));
            }
            _ => {}
        }
        Ok(())
    }
}

/// Recorded bits indexed by `[iteration][layer]`.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ReplayTable {
    pub bits: Vec<Vec<u32>>,
}

impl ReplayTable {
    /// Checks that the table covers `iterations` iterations of `layers` layers.
    pub fn check_coverage(&self, iterations: u64, layers: usize) -> Result<()> {
        if let Some(width) = self.bits.first().map(Vec::len) {
            if width != layers {
                return Err(Error::Schedule(format!(
                    "log covers {width} layers, model has {layers}"
                )));
            }
        }
        if (self.bits.len() as u64) < iterations {
            return Err(Error::Schedule(format!(
                "log has no entry for iteration {} (run needs {iterations})",
                self.bits.len()
            )));
        }
        Ok(())
    }
}

/// Where the current step sits in the run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StepContext {
    pub iteration: u64,
    pub epoch: usize,
    pub total_epochs: usize,
}

/// A quantized layer as seen by a schedule.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSlot {
    /// Index among the quantized layers.
    pub layer_id: usize,
    /// Residual stage (or MLP layer) the layer belongs to, if any.
    pub block: Option<usize>,
}

pub struct Scheduler {
    kind: ScheduleKind,
    rng: ChaCha8Rng,
    /// Period index and per-layer values of the current random draw.
    held: Option<(u64, Vec<u32>)>,
}

impl Scheduler {
    pub fn new(kind: ScheduleKind, seed: u64) -> Result<Self> {
        kind.validate()?;
        Ok(Scheduler {
            kind,
            rng: stream_rng(seed, Stream::RandomK),
            held: None,
        })
    }

    pub fn kind(&self) -> &ScheduleKind {
        &self.kind
    }

    /// Bits for every layer at one step. Call once per iteration, in order;
    /// random schedules advance their draw state here.
    pub fn bits_for_all(
        &mut self,
        ctx: StepContext,
        layers: &[LayerSlot],
        precisions: &[PrecisionParam],
    ) -> Result<Vec<u32>> {
        if let ScheduleKind::RandomK {
            k,
            choices,
            active_epochs,
            per_layer,
            ..
        } = &self.kind
        {
            if ctx.epoch < *active_epochs {
                let period = k.map_or(0, |k| ctx.iteration / k);
                if self.held.as_ref().map(|(p, _)| *p) != Some(period) {
                    let draws = if *per_layer {
                        layers
                            .iter()
                            .map(|_| *choices.choose(&mut self.rng).expect("validated"))
                            .collect()
                    } else {
                        vec![*choices.choose(&mut self.rng).expect("validated"); layers.len()]
                    };
                    self.held = Some((period, draws));
                }
            }
        }
        layers
            .iter()
            .map(|slot| self.bits_for(ctx, slot, precisions))
            .collect()
    }

    /// Bits of one layer, reading the current random draw without advancing
    /// it.
    pub fn bits_for(
        &self,
        ctx: StepContext,
        slot: &LayerSlot,
        precisions: &[PrecisionParam],
    ) -> Result<u32> {
        let bits = match &self.kind {
            ScheduleKind::Static { bits } => *bits,
            ScheduleKind::RandomK {
                active_epochs,
                fallback_bits,
                ..
            } => {
                if ctx.epoch >= *active_epochs {
                    *fallback_bits
                } else {
                    let (_, draws) = self.held.as_ref().ok_or_else(|| {
                        Error::Schedule("random_k queried before its first draw".into())
                    })?;
                    *draws.get(slot.layer_id).ok_or_else(|| {
                        Error::Schedule(format!("unknown layer {}", slot.layer_id))
                    })?
                }
            }
            ScheduleKind::Staged {
                boundaries,
                bits,
                other_bits,
            } => {
                let stage = boundaries.iter().filter(|&&b| ctx.epoch >= b).count();
                match slot.block {
                    None => *other_bits,
                    Some(block) => *bits[stage].get(block).ok_or_else(|| {
                        Error::Schedule(format!(
                            "layer {} sits in block {block}, stage {stage} only maps {} blocks",
                            slot.layer_id,
                            bits[stage].len()
                        ))
                    })?,
                }
            }
            ScheduleKind::Progressive {
                b_start,
                b_end,
                num_stages,
            } => {
                let total = ctx.total_epochs.max(1);
                let stage = (ctx.epoch * num_stages / total).min(num_stages - 1);
                if *num_stages == 1 {
                    *b_start
                } else {
                    let frac = stage as f64 / (*num_stages - 1) as f64;
                    (*b_start as f64 + (*b_end as f64 - *b_start as f64) * frac).round() as u32
                }
            }
            ScheduleKind::Cyclic {
                b_min,
                b_max,
                cycle_len,
            } => {
                let phase = (ctx.epoch % cycle_len) as f64 / *cycle_len as f64;
                let w = 0.5 * (1.0 - (2.0 * std::f64::consts::PI * phase).cos());
                (*b_min as f64 + (*b_max as f64 - *b_min as f64) * w).round() as u32
            }
            ScheduleKind::Learned => {
                let p = precisions.get(slot.layer_id).ok_or_else(|| {
                    Error::Schedule(format!("no precision param for layer {}", slot.layer_id))
                })?;
                bits_of(p)
            }
            ScheduleKind::Replay(table) => {
                let row = table.bits.get(ctx.iteration as usize).ok_or_else(|| {
                    Error::Schedule(format!("log has no entry for iteration {}", ctx.iteration))
                })?;
                *row.get(slot.layer_id)
                    .ok_or_else(|| Error::Schedule(format!("log has no layer {}", slot.layer_id)))?
            }
        };
        Ok(bits)
    }
}

/// One `(iteration, layer)` row of a schedule log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleRecord {
    pub iteration: u64,
    pub layer_id: usize,
    pub layer_name: String,
    pub beta: f64,
    pub bits: u32,
    pub fwd_bitops: f64,
    pub cum_fwd_bitops: f64,
}

/// Checks that a log is non-empty, sorted by `(iteration, layer_id)`, starts
/// at iteration 0 and has every layer of every iteration. Returns
/// `(iterations, layers)`.
pub fn validate_log(log: &[ScheduleRecord]) -> Result<(usize, usize)> {
    let first = log
        .first()
        .ok_or_else(|| Error::Schedule("empty schedule log".into()))?;
    if first.iteration != 0 {
        return Err(Error::Schedule(format!(
            "log starts at iteration {}, expected 0",
            first.iteration
        )));
    }
    let layers = log.iter().take_while(|r| r.iteration == 0).count();
    if !log.len().is_multiple_of(layers) {
        let iteration = log[log.len() - log.len() % layers].iteration;
        return Err(Error::Schedule(format!(
            "iteration {iteration} is missing layers"
        )));
    }
    for (i, rec) in log.iter().enumerate() {
        let expected_iter = (i / layers) as u64;
        let expected_layer = i % layers;
        if rec.iteration != expected_iter || rec.layer_id != expected_layer {
            return Err(Error::Schedule(format!(
                "row {i}: expected (iteration {expected_iter}, layer {expected_layer}), \
                 found ({}, {}); log must be sorted and gap-free",
                rec.iteration, rec.layer_id
            )));
        }
    }
    Ok((log.len() / layers, layers))
}

/// Rebuilds a replayable schedule from a log.
pub fn replay(log: &[ScheduleRecord]) -> Result<ScheduleKind> {
    let (_, layers) = validate_log(log)?;
    let bits = log
        .chunks(layers)
        .map(|chunk| chunk.iter().map(|r| r.bits).collect())
        .collect();
    let kind = ScheduleKind::Replay(ReplayTable { bits });
    kind.validate()?;
    Ok(kind)
}

pub fn write_schedule_csv(path: &Path, log: &[ScheduleRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if log.is_empty() {
        w.write_record([
            "iteration",
            "layer_id",
            "layer_name",
            "beta",
            "bits",
            "fwd_bitops",
            "cum_fwd_bitops",
        ])?;
    }
    for rec in log {
        w.serialize(rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_schedule_csv(path: &Path) -> Result<Vec<ScheduleRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    let rows = r
        .deserialize()
        .collect::<std::result::Result<Vec<ScheduleRecord>, _>>()?;
    Ok(rows)
}
