//! BitOPs accounting and the hinged cost objective on layer precisions.
//!
//! A multiply-accumulate between an `a`-bit and a `b`-bit operand costs
//! `a * b` BitOPs, so a full-precision MAC costs `32 * 32 = 1024`. The
//! per-iteration forward cost is `C = sum_l O_l * (bits_l / 32)^2`, where
//! `O_l` is layer `l`'s full-precision BitOPs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantizer::{bits_of, PrecisionParam};
use crate::schedule::{validate_log, ScheduleRecord};

pub const FULL_PRECISION_MAC_BITOPS: u64 = 32 * 32;

/// Shape of a layer whose cost is being counted.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerDesc {
    /// `[m×k] · [k×n]`.
    MatMul { m: usize, k: usize, n: usize },
    /// NCHW input against `f` filters of `c×kh×kw`.
    Conv2d {
        n: usize,
        c: usize,
        h: usize,
        w: usize,
        f: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    },
    /// Any other layer; these are not GEMM sites and carry no MAC cost model.
    Other(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub layer_id: usize,
    pub name: String,
    pub macs: u64,
    pub o_full: u64,
}

pub fn layer_full_bitops(layer_id: usize, name: &str, desc: &LayerDesc) -> Result<LayerCost> {
    let macs = match *desc {
        LayerDesc::MatMul { m, k, n } => (m * k * n) as u64,
        LayerDesc::Conv2d {
            n,
            c,
            h,
            w,
            f,
            kh,
            kw,
            stride,
            pad,
        } => {
            let geom = crate::autodiff::ConvGeom::new(&[n, c, h, w], kh, kw, stride, pad)?;
            (n * f * c * kh * kw * geom.oh * geom.ow) as u64
        }
        LayerDesc::Other(ref kind) => return Err(Error::UnsupportedLayer(kind.clone())),
    };
    Ok(LayerCost {
        layer_id,
        name: name.to_string(),
        macs,
        o_full: macs * FULL_PRECISION_MAC_BITOPS,
    })
}

fn check_aligned(precisions: usize, costs: usize) -> Result<()> {
    if precisions != costs {
        return Err(Error::Length(format!(
            "{precisions} precision params for {costs} layer costs"
        )));
    }
    Ok(())
}

fn bitops_at(o_full: u64, bits: f64) -> f64 {
    o_full as f64 * (bits / 32.0) * (bits / 32.0)
}

/// Forward cost at explicit per-layer bit widths.
pub fn forward_cost_bits(bits: &[u32], costs: &[LayerCost]) -> Result<f64> {
    check_aligned(bits.len(), costs.len())?;
    Ok(bits
        .iter()
        .zip(costs)
        .map(|(&b, c)| bitops_at(c.o_full, b as f64))
        .sum())
}

pub fn forward_cost(precisions: &[PrecisionParam], costs: &[LayerCost]) -> Result<f64> {
    check_aligned(precisions.len(), costs.len())?;
    for (p, c) in precisions.iter().zip(costs) {
        if p.layer_id != c.layer_id {
            return Err(Error::Length(format!(
                "precision for layer {} aligned with cost of layer {}",
                p.layer_id, c.layer_id
            )));
        }
    }
    let bits: Vec<u32> = precisions.iter().map(bits_of).collect();
    forward_cost_bits(&bits, costs)
}

/// Hinge: zero below the target, the cost itself at or above it.
pub fn cost_loss(c: f64, t: f64) -> f64 {
    if c < t {
        0.0
    } else {
        c
    }
}

/// Gradient of the cost loss with respect to every layer's `beta`, taken on
/// the continuous surrogate `beta * n` for the bit width.
pub fn cost_grad(
    precisions: &[PrecisionParam],
    costs: &[LayerCost],
    c: f64,
    t: f64,
) -> Result<Vec<f64>> {
    check_aligned(precisions.len(), costs.len())?;
    if c < t {
        return Ok(vec![0.0; costs.len()]);
    }
    Ok(precisions
        .iter()
        .zip(costs)
        .map(|(p, lc)| {
            let n = p.n as f64;
            lc.o_full as f64 * 2.0 * (p.beta * n) / 1024.0 * n
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BalanceConfig {
    pub alpha: f64,
    pub epsilon: f64,
}

impl Default for BalanceConfig {
    fn default() -> Self {
        BalanceConfig {
            alpha: 1.0,
            epsilon: 1e-12,
        }
    }
}

fn mean_abs(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().map(|x| x.abs()).sum::<f64>() / v.len() as f64
    }
}

/// Adds the cost gradient rescaled to the task gradient's network-wide mean
/// magnitude: `G = G_T + alpha * G_C * mean|G_T| / (mean|G_C| + eps)`.
pub fn balance(g_task: &[f64], g_cost: &[f64], cfg: BalanceConfig) -> Result<Vec<f64>> {
    if g_task.len() != g_cost.len() {
        return Err(Error::Length(format!(
            "{} task gradients vs {} cost gradients",
            g_task.len(),
            g_cost.len()
        )));
    }
    let scale = mean_abs(g_task) / (mean_abs(g_cost) + cfg.epsilon);
    Ok(g_task
        .iter()
        .zip(g_cost)
        .map(|(&gt, &gc)| {
            if gc == 0.0 {
                gt
            } else {
                gt + cfg.alpha * gc * scale
            }
        })
        .collect())
}

/// `T = t_frac * T_stat`, where `T_stat` is the forward cost with every layer
/// at `b_static` bits.
pub fn static_target(costs: &[LayerCost], b_static: u32, t_frac: f64) -> f64 {
    t_frac * static_cost(costs, b_static)
}

pub fn static_cost(costs: &[LayerCost], b_static: u32) -> f64 {
    costs
        .iter()
        .map(|c| bitops_at(c.o_full, b_static as f64))
        .sum()
}

/// Controller state for one iteration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostState {
    pub c_current: f64,
    pub t_target: f64,
    pub t_frac: f64,
    pub cumulative_train_bitops: f64,
}

/// Training BitOPs of one layer for one iteration: the forward GEMM at
/// `bits x bits` plus, when `bw_bits` is set, the two backward GEMMs
/// (error propagation and weight gradient) at `bits x bw_bits`.
pub fn layer_train_bitops(macs: u64, bits: u32, bw_bits: Option<u32>) -> f64 {
    let b = bits as f64;
    let fwd = macs as f64 * b * b;
    match bw_bits {
        Some(bw) => fwd + 2.0 * macs as f64 * b * bw as f64,
        None => fwd,
    }
}

pub const TRAIN_BITOPS_FORMULA: &str =
    "train_bitops = sum_l macs_l * (bits_l^2 + 2 * bits_l * bw_bits); inference drops the bw term";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub iteration: u64,
    pub layer_id: usize,
    pub bits: u32,
    pub fwd_bitops: f64,
    pub train_bitops: f64,
    pub cumulative_train_bitops: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationCost {
    pub iteration: u64,
    pub fwd_bitops: f64,
    pub train_bitops: f64,
    pub cumulative_train_bitops: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingCostReport {
    pub rows: Vec<CostRow>,
    pub per_iteration: Vec<IterationCost>,
    pub total_fwd_bitops: f64,
    pub total_train_bitops: f64,
}

/// Per-iteration and cumulative training BitOPs recomputed from a schedule
/// log. `bw_bits = None` counts the forward pass only.
pub fn training_bitops_report(
    log: &[ScheduleRecord],
    costs: &[LayerCost],
    bw_bits: Option<u32>,
) -> Result<TrainingCostReport> {
    let (iterations, layers) = validate_log(log)?;
    if layers != costs.len() {
        return Err(Error::Length(format!(
            "schedule log covers {layers} layers, cost table has {}",
            costs.len()
        )));
    }
    let mut rows = Vec::with_capacity(log.len());
    let mut per_iteration = Vec::with_capacity(iterations);
    let mut cumulative = 0.0;
    let mut total_fwd = 0.0;
    for chunk in log.chunks(layers) {
        let mut fwd = 0.0;
        let mut train = 0.0;
        for rec in chunk {
            let cost = &costs[rec.layer_id];
            let f = layer_train_bitops(cost.macs, rec.bits, None);
            let t = layer_train_bitops(cost.macs, rec.bits, bw_bits);
            fwd += f;
            train += t;
            cumulative += t;
            rows.push(CostRow {
                iteration: rec.iteration,
                layer_id: rec.layer_id,
                bits: rec.bits,
                fwd_bitops: f,
                train_bitops: t,
                cumulative_train_bitops: cumulative,
            });
        }
        total_fwd += fwd;
        per_iteration.push(IterationCost {
            iteration: chunk[0].iteration,
            fwd_bitops: fwd,
            train_bitops: train,
            cumulative_train_bitops: cumulative,
        });
    }
    Ok(TrainingCostReport {
        rows,
        per_iteration,
        total_fwd_bitops: total_fwd,
        total_train_bitops: cumulative,
    })
}
