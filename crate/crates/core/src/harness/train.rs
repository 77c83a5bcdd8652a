//! The training loop and evaluation.

use std::fs;
use std::path::{Path, PathBuf};

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::cost::{
    balance, cost_grad, forward_cost, forward_cost_bits, layer_train_bitops, static_cost,
    training_bitops_report, BalanceConfig, LayerCost, TRAIN_BITOPS_FORMULA,
};
use crate::error::{Error, Result};
use crate::harness::checkpoint::{self, Checkpoint};
use crate::harness::config::RunConfig;
use crate::harness::data::{DataSplit, Dataset};
use crate::harness::model::{Model, QuantPlan};
use crate::optim::{sgd_step, SgdConfig};
use crate::quantizer::{beta_sgd_step, PrecisionParam};
use crate::rng::{stream_rng, Stream};
use crate::schedule::{
    replay, write_schedule_csv, ScheduleKind, ScheduleRecord, Scheduler, StepContext,
};

const EVAL_BATCH: usize = 256;

/// One row of the metrics log. Train rows describe a single iteration;
/// test rows are written at each epoch end and carry the per-sample
/// inference BitOPs at the bits in use.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub iteration: u64,
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
    pub avg_bits: f64,
    pub iter_fwd_bitops: f64,
    pub iter_train_bitops: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub final_accuracy: f64,
    pub final_test_loss: f64,
    pub iterations: u64,
    pub iterations_per_epoch: usize,
    /// Cumulative forward BitOPs of the quantized layers over training.
    pub total_fwd_bitops: f64,
    /// Cumulative training BitOPs (forward plus the two backward GEMMs).
    pub total_train_bitops: f64,
    /// Per-sample forward BitOPs of the quantized layers at `final_bits`.
    pub final_inference_bitops: f64,
    /// Per-sample full-precision forward BitOPs of the exempt layers.
    pub exempt_fwd_bitops: f64,
    pub t_stat: f64,
    pub t_target: f64,
    /// Mean per-iteration forward cost over the last tenth of iterations.
    pub tail_mean_cost: f64,
    pub final_bits: Vec<u32>,
    pub final_betas: Vec<f64>,
    pub train_bitops_formula: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunArtifacts {
    pub output_dir: PathBuf,
    pub metrics_path: PathBuf,
    pub schedule_path: PathBuf,
    pub smoothed_schedule_path: PathBuf,
    pub cost_report_path: PathBuf,
    pub cost_summary_path: PathBuf,
    pub checkpoint_path: PathBuf,
    pub summary_path: PathBuf,
    pub config_path: PathBuf,
    pub summary: RunSummary,
}

impl RunArtifacts {
    pub fn paths(&self) -> Vec<&Path> {
        vec![
            &self.metrics_path,
            &self.schedule_path,
            &self.smoothed_schedule_path,
            &self.cost_report_path,
            &self.cost_summary_path,
            &self.checkpoint_path,
            &self.summary_path,
            &self.config_path,
        ]
    }
}

/// A finished run: artifacts on disk plus the in-memory state behind them.
pub struct Run {
    pub artifacts: RunArtifacts,
    pub model: Model,
    pub schedule_log: Vec<ScheduleRecord>,
    pub metrics: Vec<MetricRow>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrecisionUpdate {
    pub cost: f64,
    pub g_task: Vec<f64>,
    pub g_cost: Vec<f64>,
    pub g_total: Vec<f64>,
}

/// One precision update: cost gradient at the current bits, balanced
/// against the task gradients, then a projected step on every `beta`.
pub fn precision_step(
    precisions: &mut [PrecisionParam],
    costs: &[LayerCost],
    g_task: &[f64],
    t_target: f64,
    cfg: BalanceConfig,
) -> Result<PrecisionUpdate> {
    let cost = forward_cost(precisions, costs)?;
    let g_cost = cost_grad(precisions, costs, cost, t_target)?;
    let g_total = balance(g_task, &g_cost, cfg)?;
    for (p, &g) in precisions.iter_mut().zip(&g_total) {
        beta_sgd_step(p, g);
    }
    Ok(PrecisionUpdate {
        cost,
        g_task: g_task.to_vec(),
        g_cost,
        g_total,
    })
}

/// Weight learning rate after step decay at the configured milestones.
pub fn lr_at(cfg: &RunConfig, epoch: usize) -> f32 {
    let t = &cfg.train;
    let drops = t
        .lr_milestones
        .iter()
        .filter(|&&m| epoch >= (m * t.epochs as f64).round() as usize)
        .count();
    t.lr * t.lr_gamma.powi(drops as i32)
}

pub fn iterations_per_epoch(train_len: usize, batch_size: usize) -> Result<usize> {
    let ipe = train_len / batch_size;
    if ipe == 0 {
        return Err(Error::config(
            "train.batch_size",
            format!("{batch_size} exceeds the {train_len} training samples"),
        ));
    }
    Ok(ipe)
}

/// Loads the configured data and reshapes samples to the model input.
pub fn load_data(cfg: &RunConfig) -> Result<DataSplit> {
    let split = cfg.data.load(cfg.train.seed)?;
    fit_to_model(split, cfg)
}

fn fit_to_model(split: DataSplit, cfg: &RunConfig) -> Result<DataSplit> {
    let shape = cfg.model.input_shape();
    let classes = cfg.model.classes();
    let fit = |d: Dataset| -> Result<Dataset> {
        if d.classes > classes {
            return Err(Error::config(
                "model.arch",
                format!("data has {} classes, model outputs {classes}", d.classes),
            ));
        }
        d.with_sample_shape(shape.clone())
    };
    Ok(DataSplit {
        train: fit(split.train)?,
        test: fit(split.test)?,
    })
}

/// Validates and trains with the configured scheduler.
pub fn train(cfg: &RunConfig) -> Result<Run> {
    cfg.validate()?;
    let data = load_data(cfg)?;
    train_on(cfg, data, cfg.precision.scheduler.clone())
}

/// Trains with bits forced from a recorded schedule log. The log must
/// cover every iteration and quantized layer of the configured run.
pub fn train_replay(cfg: &RunConfig, log: &[ScheduleRecord]) -> Result<Run> {
    cfg.validate()?;
    let data = load_data(cfg)?;
    let kind = replay(log)?;
    let layers = Model::build(&cfg.model, cfg.train.seed, cfg.precision.lr, None)?.num_quantized();
    let ipe = iterations_per_epoch(data.train.len(), cfg.train.batch_size)?;
    if let ScheduleKind::Replay(table) = &kind {
        table.check_coverage((ipe * cfg.train.epochs) as u64, layers)?;
    }
    train_on(cfg, data, kind)
}

fn eval_bits(model: &Model, scheduler: &Scheduler, last: &[u32]) -> Vec<u32> {
    if scheduler.kind().is_learned() {
        model.precisions.iter().map(PrecisionParam::bits).collect()
    } else {
        last.to_vec()
    }
}

/// Mean loss and accuracy on a dataset, batch-norm in inference mode.
/// `bits = None` runs the unquantized engine.
pub fn evaluate_model(
    model: &mut Model,
    data: &Dataset,
    bits: Option<&[u32]>,
) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(EVAL_BATCH) {
        let (x, labels) = data.batch(chunk);
        let mut tape = Tape::new();
        let plan = QuantPlan {
            bits,
            ..QuantPlan::unquantized(false)
        };
        let fp = model.forward(&mut tape, x, &plan)?;
        let loss = tape.softmax_cross_entropy(fp.logits, &labels)?;
        loss_sum += tape.value(loss).data()[0] as f64 * chunk.len() as f64;
        correct += count_correct(tape.value(fp.logits).data(), &labels);
    }
    Ok((
        loss_sum / data.len() as f64,
        correct as f64 / data.len() as f64,
    ))
}

fn count_correct(logits: &[f32], labels: &[usize]) -> usize {
    let classes = logits.len() / labels.len().max(1);
    logits
        .chunks(classes)
        .zip(labels)
        .filter(|(row, &l)| {
            let arg = row
                .iter()
                .enumerate()
                .fold(0, |best, (i, &v)| if v > row[best] { i } else { best });
            arg == l
        })
        .count()
}

fn mean_bits(bits: &[u32]) -> f64 {
    if bits.is_empty() {
        32.0
    } else {
        bits.iter().map(|&b| b as f64).sum::<f64>() / bits.len() as f64
    }
}

/// Trains `cfg`'s model on `data` with an explicit schedule and writes all
/// artifacts to the configured output directory.
pub fn train_on(cfg: &RunConfig, data: DataSplit, schedule: ScheduleKind) -> Result<Run> {
    let data = fit_to_model(data, cfg)?;
    let t = &cfg.train;
    let p = &cfg.precision;
    let seed = t.seed;
    let mut model = Model::build(&cfg.model, seed, p.lr, p.beta_init)?;
    let costs = model.quantized_costs();
    let slots = model.layer_slots();
    let names = model.quantized_names();
    let mut scheduler = Scheduler::new(schedule, seed)?;
    let learned = scheduler.kind().is_learned();
    let n_bits = cfg.model.n as f64;
    let ipe = iterations_per_epoch(data.train.len(), t.batch_size)?;
    let t_stat = static_cost(&costs, p.b_static);
    let t_target = p.t_frac * t_stat;
    fs::create_dir_all(&t.output_dir)?;

    let mut order_rng = stream_rng(seed, Stream::DataOrder);
    let mut grad_rng = stream_rng(seed, Stream::GradRounding);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut log = Vec::with_capacity(t.epochs * ipe * costs.len());
    let mut metrics = Vec::with_capacity(t.epochs * (ipe + 1));
    let mut iteration = 0u64;
    let mut cum_fwd = 0.0;
    let mut total_train = 0.0;
    let mut last_bits = vec![cfg.model.b_max; costs.len()];
    let mut last_test = (f64::NAN, f64::NAN);

    for epoch in 0..t.epochs {
        order.shuffle(&mut order_rng);
        let sgd = SgdConfig {
            lr: lr_at(cfg, epoch),
            momentum: t.momentum,
            weight_decay: t.weight_decay,
        };
        let frozen = t.freeze_precision_after_epoch.is_some_and(|f| epoch >= f);
        for b in 0..ipe {
            let ctx = StepContext {
                iteration,
                epoch,
                total_epochs: t.epochs,
            };
            let bits = scheduler.bits_for_all(ctx, &slots, &model.precisions)?;
            let learn = learned && !frozen;
            let (x, labels) = data
                .train
                .batch(&order[b * t.batch_size..(b + 1) * t.batch_size]);
            let mut tape = Tape::new();
            let plan = QuantPlan {
                training: true,
                bits: Some(&bits),
                learn_precision: learn,
                grad_bits: p.bw_bits,
                grad_seed: grad_rng.next_u64(),
            };
            let fp = model.forward(&mut tape, x, &plan)?;
            let loss_var = tape.softmax_cross_entropy(fp.logits, &labels)?;
            let loss = tape.value(loss_var).data()[0];
            if !loss.is_finite() {
                return Err(Error::Divergence { iteration, loss });
            }
            let accuracy =
                count_correct(tape.value(fp.logits).data(), &labels) as f64 / labels.len() as f64;
            tape.backward(loss_var)?;
            model.collect_grads(&tape, &fp.param_vars)?;
            sgd_step(&mut model.params, sgd)?;

            let betas: Vec<f64> = model.precisions.iter().map(|p| p.beta).collect();
            if learn {
                let g_task: Vec<f64> = fp
                    .beta_vars
                    .iter()
                    .map(|&v| tape.grad(v).map_or(0.0, |g| g.data()[0] as f64))
                    .collect();
                if g_task.iter().any(|g| !g.is_finite()) {
                    return Err(Error::Divergence {
                        iteration,
                        loss: f32::NAN,
                    });
                }
                let upd = precision_step(
                    &mut model.precisions,
                    &costs,
                    &g_task,
                    t_target,
                    p.balance(),
                )?;
                debug!(
                    "iter {iteration}: C={:.4e} T={t_target:.4e} g_task={:?} g={:?}",
                    upd.cost, upd.g_task, upd.g_total
                );
            }

            let mut iter_fwd = 0.0;
            let mut iter_train = 0.0;
            for (l, (&b, c)) in bits.iter().zip(&costs).enumerate() {
                let f = layer_train_bitops(c.macs, b, None);
                iter_fwd += f;
                iter_train += layer_train_bitops(c.macs, b, p.bw_bits);
                cum_fwd += f;
                log.push(ScheduleRecord {
                    iteration,
                    layer_id: l,
                    layer_name: names[l].clone(),
                    beta: if learned { betas[l] } else { b as f64 / n_bits },
                    bits: b,
                    fwd_bitops: f,
                    cum_fwd_bitops: cum_fwd,
                });
            }
            total_train += iter_train;
            metrics.push(MetricRow {
                iteration,
                epoch,
                split: "train".into(),
                loss: loss as f64,
                accuracy,
                avg_bits: mean_bits(&bits),
                iter_fwd_bitops: iter_fwd,
                iter_train_bitops: iter_train,
            });
            last_bits = bits;
            iteration += 1;
        }

        let bits = eval_bits(&model, &scheduler, &last_bits);
        let (loss, acc) = evaluate_model(&mut model, &data.test, Some(&bits))?;
        if !loss.is_finite() {
            return Err(Error::Divergence {
                iteration: iteration - 1,
                loss: loss as f32,
            });
        }
        info!(
            "epoch {epoch}: test loss {loss:.4} acc {:.2}% avg bits {:.2}",
            acc * 100.0,
            mean_bits(&bits)
        );
        metrics.push(MetricRow {
            iteration: iteration - 1,
            epoch,
            split: "test".into(),
            loss,
            accuracy: acc,
            avg_bits: mean_bits(&bits),
            iter_fwd_bitops: forward_cost_bits(&bits, &costs)?,
            iter_train_bitops: 0.0,
        });
        last_test = (loss, acc);
    }

    let final_bits = eval_bits(&model, &scheduler, &last_bits);
    let tail = (iteration as usize / 10).max(1);
    let train_rows: Vec<&MetricRow> = metrics.iter().filter(|m| m.split == "train").collect();
    let tail_mean_cost = train_rows[train_rows.len() - tail..]
        .iter()
        .map(|m| m.iter_fwd_bitops)
        .sum::<f64>()
        / tail as f64;
    let summary = RunSummary {
        final_accuracy: last_test.1,
        final_test_loss: last_test.0,
        iterations: iteration,
        iterations_per_epoch: ipe,
        total_fwd_bitops: cum_fwd,
        total_train_bitops: total_train,
        final_inference_bitops: forward_cost_bits(&final_bits, &costs)?,
        exempt_fwd_bitops: model.exempt_costs().iter().map(|c| c.o_full as f64).sum(),
        t_stat,
        t_target,
        tail_mean_cost,
        final_bits: final_bits.clone(),
        final_betas: model.precisions.iter().map(|p| p.beta).collect(),
        train_bitops_formula: TRAIN_BITOPS_FORMULA.into(),
    };
    let artifacts = write_artifacts(cfg, &model, &costs, &log, &metrics, ipe, summary)?;
    Ok(Run {
        artifacts,
        model,
        schedule_log: log,
        metrics,
    })
}

#[derive(Serialize)]
struct SmoothedRecord<'a> {
    iteration: u64,
    layer_id: usize,
    layer_name: &'a str,
    beta: f64,
    bits: f64,
}

#[derive(Serialize)]
struct CostSummary<'a> {
    layers: &'a [LayerCost],
    exempt_layers: &'a [LayerCost],
    t_stat: f64,
    t_target: f64,
    total_fwd_bitops: f64,
    total_train_bitops: f64,
    formula: &'a str,
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Trailing moving average of `beta` and bits over one epoch of iterations,
/// for plotting only.
fn smoothed(log: &[ScheduleRecord], layers: usize, window: usize) -> Vec<SmoothedRecord<'_>> {
    let mut out = Vec::with_capacity(log.len());
    for (i, rec) in log.iter().enumerate() {
        let it = i / layers;
        let start = it.saturating_sub(window - 1);
        let n = (it - start + 1) as f64;
        let (mut beta, mut bits) = (0.0, 0.0);
        for j in start..=it {
            let r = &log[j * layers + rec.layer_id];
            beta += r.beta;
            bits += r.bits as f64;
        }
        out.push(SmoothedRecord {
            iteration: rec.iteration,
            layer_id: rec.layer_id,
            layer_name: &rec.layer_name,
            beta: beta / n,
            bits: bits / n,
        });
    }
    out
}

fn write_artifacts(
    cfg: &RunConfig,
    model: &Model,
    costs: &[LayerCost],
    log: &[ScheduleRecord],
    metrics: &[MetricRow],
    ipe: usize,
    summary: RunSummary,
) -> Result<RunArtifacts> {
    let dir = &cfg.train.output_dir;
    let a = RunArtifacts {
        output_dir: dir.clone(),
        metrics_path: dir.join("metrics.csv"),
        schedule_path: dir.join("schedule.csv"),
        smoothed_schedule_path: dir.join("schedule_smoothed.csv"),
        cost_report_path: dir.join("cost_report.csv"),
        cost_summary_path: dir.join("cost_summary.json"),
        checkpoint_path: dir.join("checkpoint.ldpc"),
        summary_path: dir.join("summary.json"),
        config_path: dir.join("config.json"),
        summary,
    };
    write_csv(&a.metrics_path, metrics)?;
    write_schedule_csv(&a.schedule_path, log)?;
    if !costs.is_empty() {
        write_csv(&a.smoothed_schedule_path, &smoothed(log, costs.len(), ipe))?;
        let report = training_bitops_report(log, costs, cfg.precision.bw_bits)?;
        write_csv(&a.cost_report_path, &report.rows)?;
    }
    let cost_summary = CostSummary {
        layers: costs,
        exempt_layers: &model.exempt_costs(),
        t_stat: a.summary.t_stat,
        t_target: a.summary.t_target,
        total_fwd_bitops: a.summary.total_fwd_bitops,
        total_train_bitops: a.summary.total_train_bitops,
        formula: TRAIN_BITOPS_FORMULA,
    };
    fs::write(
        &a.cost_summary_path,
        serde_json::to_string_pretty(&cost_summary)?,
    )?;
    fs::write(&a.summary_path, serde_json::to_string_pretty(&a.summary)?)?;
    fs::write(&a.config_path, serde_json::to_string_pretty(cfg)?)?;
    checkpoint::save(
        &a.checkpoint_path,
        &Checkpoint {
            config: cfg.clone(),
            model: model.clone(),
            final_bits: a.summary.final_bits.clone(),
        },
    )?;
    Ok(a)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub loss: f64,
    pub bits: Vec<u32>,
    /// Per-sample forward BitOPs of the quantized layers, `sum macs * b^2`.
    pub inference_bitops: f64,
    pub samples: usize,
}

/// Evaluates a checkpoint at its final bits (or `bits_override` on every
/// quantized layer). Without `data`, the test split of the checkpoint's own
/// data config is used.
pub fn evaluate(
    ckpt: &Checkpoint,
    data: Option<Dataset>,
    bits_override: Option<u32>,
) -> Result<EvalReport> {
    let test = match data {
        Some(d) => d,
        None => load_data(&ckpt.config)?.test,
    };
    let test = test.with_sample_shape(ckpt.config.model.input_shape())?;
    let mut model = ckpt.model.clone();
    let bits = match bits_override {
        Some(b) => {
            if !(crate::schedule::MIN_BITS..=crate::schedule::MAX_BITS).contains(&b) {
                return Err(Error::config("--bits", format!("{b} outside [2, 32]")));
            }
            vec![b; model.num_quantized()]
        }
        None => ckpt.final_bits.clone(),
    };
    let (loss, accuracy) = evaluate_model(&mut model, &test, Some(&bits))?;
    Ok(EvalReport {
        accuracy,
        loss,
        inference_bitops: forward_cost_bits(&bits, &model.quantized_costs())?,
        bits,
        samples: test.len(),
    })
}

pub fn evaluate_path(
    path: &Path,
    data: Option<Dataset>,
    bits_override: Option<u32>,
) -> Result<EvalReport> {
    evaluate(&checkpoint::load(path)?, data, bits_override)
}
