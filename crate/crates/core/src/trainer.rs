//! Epoch loop: forward, backward, clip, schedule, AdamW; validation
//! perplexity and per-epoch metrics.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::TokenDataset;
use crate::graph::Mode;
use crate::model::Model;
use crate::optim::{clip_grad_norm, AdamW, AdamWConfig, Schedule};
use crate::{Error, Result};

/// Optimization hyperparameters. Defaults are the reference values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_peak: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    /// Also decay layer-norm parameters and biases.
    pub decay_all: bool,
    pub warmup_steps: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub clip_norm: f64,
    pub shuffle: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_peak: 3e-4,
            betas: (0.9, 0.95),
            eps: 1e-8,
            weight_decay: 0.1,
            decay_all: false,
            warmup_steps: 100,
            epochs: 5,
            batch_size: 32,
            eval_batch_size: 32,
            clip_norm: 1.0,
            shuffle: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr_peak", self.lr_peak),
            ("clip_norm", self.clip_norm),
            ("eps", self.eps),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("epochs", self.epochs), ("batch_size", self.batch_size)] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(Error::Config(format!(
                "betas must lie in [0, 1), got {:?}",
                self.betas
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.betas.0,
            beta2: self.betas.1,
            eps: self.eps,
            weight_decay: self.weight_decay,
            decay_all: self.decay_all,
        }
    }

    /// Schedule over `epochs * train batches per epoch` steps.
    pub fn schedule(&self, train: &TokenDataset) -> Result<Schedule> {
        let total = self.epochs * train.train_batches(self.batch_size);
        Schedule::new(self.lr_peak, self.warmup_steps, total)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_ppl: f64,
    pub epoch_seconds: f64,
}

pub const METRICS_HEADER: &str = "epoch,train_loss,val_loss,val_ppl,epoch_seconds";

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.epoch, self.train_loss, self.val_loss, self.val_ppl, self.epoch_seconds
        )
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_line());
        s.push('\n');
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    /// 1-based optimizer step.
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

/// Hooks for progress reporting and checkpointing.
pub trait TrainObserver {
    fn on_step(&mut self, _record: &StepRecord) {}

    fn on_epoch(&mut self, _model: &Model<f32>, _row: &MetricsRow) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub metrics: Vec<MetricsRow>,
    pub steps: Vec<StepRecord>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub ppl: f64,
}

/// Mean token cross-entropy over every chunk of `data`, dropout off.
pub fn evaluate(model: &Model<f32>, data: &TokenDataset, batch_size: usize) -> Result<Evaluation> {
    let mut total = 0.0;
    let mut rows = 0;
    for b in data.batches(batch_size, false, 0, 0, false) {
        total += model.eval_loss(&b.ids, b.rows)? * b.rows as f64;
        rows += b.rows;
    }
    let loss = total / rows as f64;
    Ok(Evaluation {
        loss,
        ppl: loss.exp(),
    })
}

fn step_seed(seed: u64, step: usize) -> u64 {
    seed ^ (step as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

pub fn train(
    model: &mut Model<f32>,
    train_data: &TokenDataset,
    val_data: &TokenDataset,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainReport> {
    cfg.validate()?;
    let n = model.config.block_size;
    if train_data.block_size() > n || val_data.block_size() > n {
        return Err(Error::SequenceLength {
            len: train_data.block_size().max(val_data.block_size()),
            max: n,
        });
    }
    let schedule = cfg.schedule(train_data)?;
    let mut opt = AdamW::new(&model.params, cfg.adamw());
    let mut report = TrainReport::default();
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for batch in train_data.batches(cfg.batch_size, cfg.shuffle, cfg.seed, epoch as u64, true) {
            step += 1;
            let lr = schedule.lr_at(step);
            let (loss, mut grads) = {
                let mut g = model.graph(
                    Mode::Train {
                        seed: step_seed(cfg.seed, step),
                    },
                    true,
                );
                let l = model.loss(&mut g, &batch.ids, batch.rows)?;
                let loss = g.value(l).item() as f64;
                if !loss.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite loss {loss} at step {step} (lr {lr})"
                    )));
                }
                (loss, g.backward(l)?.into_param_grads())
            };
            let grad_norm = clip_grad_norm(&mut grads, cfg.clip_norm);
            if !grad_norm.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient norm at step {step} (loss {loss}, lr {lr})"
                )));
            }
            opt.step(&mut model.params, &grads, lr)?;
            let rec = StepRecord {
                step,
                epoch,
                lr,
                loss,
                grad_norm,
            };
            observer.on_step(&rec);
            report.steps.push(rec);
            loss_sum += loss;
            batches += 1;
        }
        let epoch_seconds = start.elapsed().as_secs_f64();
        let ev = evaluate(model, val_data, cfg.eval_batch_size)?;
        let row = MetricsRow {
            epoch,
            train_loss: loss_sum / batches.max(1) as f64,
            val_loss: ev.loss,
            val_ppl: ev.ppl,
            epoch_seconds,
        };
        observer.on_epoch(model, &row)?;
        report.metrics.push(row);
    }
    Ok(report)
}
