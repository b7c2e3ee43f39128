//! Training: cross-entropy plus the mask penalty, AdamW, and epoch loops.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Checkpoint};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::{ForwardOptions, ForwardOutput, LayerGroup, Model, ParamKind};
use crate::optim::AdamW;
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Constant,
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Weight of the mask penalty.
    pub lambda_m: f64,
    /// Layer groups whose masks are penalized.
    pub mask_groups: Vec<LayerGroup>,
    /// Initial active steps of every masked layer; `ceil(t_max / 2)` if unset.
    pub t_init: Option<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub lr: f32,
    pub weight_decay: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub lr_schedule: LrSchedule,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_m: 1e-4,
            mask_groups: vec![LayerGroup::Qkv, LayerGroup::Mlp],
            t_init: None,
            epochs: 50,
            batch_size: 32,
            eval_batch_size: 100,
            lr: 0.004,
            weight_decay: 0.02,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr_schedule: LrSchedule::Constant,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn t_init(&self, t_max: usize) -> usize {
        self.t_init.unwrap_or(t_max.div_ceil(2))
    }

    pub fn validate(&self, t_max: usize) -> Result<()> {
        if !(self.lambda_m >= 0.0 && self.lambda_m.is_finite()) {
            return Err(Error::config("train.lambda_m", "must be finite and >= 0"));
        }
        let ti = self.t_init(t_max);
        if ti == 0 || ti > t_max {
            return Err(Error::config(
                "train.t_init",
                format!("must lie in 1..={t_max} (t_max), got {ti}"),
            ));
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("train.lr", "must be finite and >= 0"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("train.weight_decay", "must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("train.beta1", "betas must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("train.eps", "must be positive"));
        }
        Ok(())
    }

    /// Learning rate for optimizer step `step` out of `total`.
    pub fn lr_at(&self, step: usize, total: usize) -> f32 {
        match self.lr_schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                let f = step as f64 / total.max(1) as f64;
                (self.lr as f64 * 0.5 * (1.0 + (std::f64::consts::PI * f).cos())) as f32
            }
        }
    }
}

/// Fresh optimizer for a model, one moment pair per parameter.
pub fn optimizer_for(model: &Model, cfg: &TrainConfig) -> AdamW {
    let sizes: Vec<usize> = model.params().iter().map(|p| p.value.numel()).collect();
    AdamW::new(&sizes, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
}

/// `lambda_m * sum(TM)` over the masked layers of the selected groups, or
/// `None` when nothing is selected.
pub fn mask_loss(
    g: &mut Graph<f32>,
    model: &Model,
    out: &ForwardOutput,
    groups: &[LayerGroup],
    lambda_m: f64,
) -> Option<Var> {
    let mut acc: Option<Var> = None;
    for (info, mask) in model.layers().iter().zip(&out.masks) {
        let Some(m) = mask else { continue };
        if !groups.contains(&info.group) {
            continue;
        }
        let s = g.sum(*m);
        acc = Some(match acc {
            Some(a) => g.add(a, s).expect("scalar add"),
            None => s,
        });
    }
    acc.map(|a| g.scale(a, lambda_m as f32))
}

/// Cross-entropy plus the mask penalty. Returns `(total, ce, mask)`.
pub fn total_loss(
    g: &mut Graph<f32>,
    model: &Model,
    out: &ForwardOutput,
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<(Var, Var, Option<Var>)> {
    let ce = g.cross_entropy(out.logits, labels)?;
    if cfg.lambda_m == 0.0 {
        return Ok((ce, ce, None));
    }
    let groups_have_masks = model
        .layers()
        .iter()
        .any(|l| l.masked && cfg.mask_groups.contains(&l.group));
    if !groups_have_masks {
        log::warn!("lambda_m > 0 but no masked layer is selected; mask loss is zero");
    }
    match mask_loss(g, model, out, &cfg.mask_groups, cfg.lambda_m) {
        Some(m) => Ok((g.add(ce, m)?, ce, Some(m))),
        None => Ok((ce, ce, None)),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub loss: f64,
    pub ce: f64,
    pub mask_loss: f64,
    pub correct: usize,
    pub total: usize,
}

pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|r| {
            let mut best = 0;
            for (i, &v) in r.iter().enumerate() {
                if v > r[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Forward, loss, backward, AdamW update, projection of the time-step
/// parameters and running-statistics update.
pub fn train_step(
    model: &mut Model,
    opt: &mut AdamW,
    images: &Tensor,
    labels: &[usize],
    cfg: &TrainConfig,
    lr: f32,
) -> Result<StepMetrics> {
    let mut g = Graph::new();
    let out = model.forward(&mut g, images, ForwardOptions::train())?;
    let (loss, ce, mask) = total_loss(&mut g, model, &out, labels, cfg)?;
    let loss_v = g.value(loss).item() as f64;
    if !loss_v.is_finite() {
        let culprit = g.first_non_finite().unwrap_or_else(|| "loss".into());
        return Err(Error::Numeric(format!(
            "non-finite loss; first offending tensor: {culprit}"
        )));
    }
    let grads = g.backward(loss)?;
    let gs: Vec<Tensor> = out
        .param_vars
        .iter()
        .map(|&v| grads.get_or_zeros(v))
        .collect();
    if let Some(i) = gs.iter().position(|t| t.has_nan()) {
        return Err(Error::Numeric(format!(
            "non-finite gradient for parameter `{}`",
            model.params()[i].name
        )));
    }
    let decay: Vec<bool> = model
        .params()
        .iter()
        .map(|p| p.kind == ParamKind::Weight)
        .collect();
    {
        let grads_ref: Vec<&[f32]> = gs.iter().map(|t| t.data()).collect();
        let mut ps: Vec<&mut [f32]> = model
            .params_mut()
            .iter_mut()
            .map(|p| p.value.data_mut())
            .collect();
        opt.step(&mut ps, &grads_ref, &decay, lr);
    }
    model.project_time_params();
    model.update_running_stats(&out.norm_stats);
    let pred = argmax_rows(g.value(out.logits));
    Ok(StepMetrics {
        loss: loss_v,
        ce: g.value(ce).item() as f64,
        mask_loss: mask.map_or(0.0, |m| g.value(m).item() as f64),
        correct: pred.iter().zip(labels).filter(|(p, l)| p == l).count(),
        total: labels.len(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalMetrics {
    pub accuracy: f64,
    pub t_avg: f64,
    /// Percentage of masked LIF outputs (all neurons, all `T_max` steps) that spiked.
    pub sa_percent: f64,
    pub correct: usize,
    pub total: usize,
}

/// Eval-mode pass over a dataset with masks frozen at their current values.
pub fn evaluate(model: &Model, data: &Dataset, batch_size: usize) -> Result<EvalMetrics> {
    let mut correct = 0;
    let mut spikes = 0u64;
    let mut slots = 0u64;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, y) = data.batch(chunk);
        let mut g = Graph::new();
        let opts = ForwardOptions {
            record: true,
            ..ForwardOptions::eval()
        };
        let out = model.forward(&mut g, &x, opts)?;
        let pred = argmax_rows(g.value(out.logits));
        correct += pred.iter().zip(&y).filter(|(p, l)| p == l).count();
        let tr = out.trace.expect("recording was requested");
        for u in &tr.units {
            spikes += u.spikes.iter().sum::<u64>();
            slots += u.neurons * (tr.batch * tr.t_max) as u64;
        }
    }
    let total = data.len();
    Ok(EvalMetrics {
        accuracy: if total == 0 {
            0.0
        } else {
            correct as f64 / total as f64
        },
        t_avg: model.t_avg()?,
        sa_percent: if slots == 0 {
            0.0
        } else {
            100.0 * spikes as f64 / slots as f64
        },
        correct,
        total,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub eval_acc: f64,
    pub t_avg: f64,
    pub sa_percent: f64,
}

pub const METRICS_HEADER: &str = "epoch,train_loss,train_acc,eval_acc,t_avg,sa_percent";

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch, self.train_loss, self.train_acc, self.eval_acc, self.t_avg, self.sa_percent
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub epochs_run: usize,
    pub optimizer: AdamW,
    pub initial: EvalMetrics,
    pub history: Vec<EpochMetrics>,
    pub best_eval_acc: f64,
    pub best_epoch: Option<usize>,
}

impl TrainState {
    pub fn metrics_csv(&self) -> String {
        let mut s = String::from(METRICS_HEADER);
        s.push('\n');
        for e in &self.history {
            let _ = writeln!(s, "{}", e.csv_row());
        }
        s
    }
}

/// Full training run. With `run_dir` set, `metrics.csv` is rewritten after
/// every epoch and `best.ckpt` whenever eval accuracy improves.
pub fn train_loop(
    model: &mut Model,
    train: &Dataset,
    eval: &Dataset,
    cfg: &TrainConfig,
    run_dir: Option<&Path>,
) -> Result<TrainState> {
    cfg.validate(model.config().t_max)?;
    if train.is_empty() {
        return Err(Error::Argument("training set is empty".into()));
    }
    if let Some(d) = run_dir {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let initial = evaluate(model, eval, cfg.eval_batch_size)?;
    let mut state = TrainState {
        epochs_run: 0,
        optimizer: optimizer_for(model, cfg),
        initial,
        history: Vec::new(),
        best_eval_acc: f64::NEG_INFINITY,
        best_epoch: None,
    };
    let per_epoch = train.len().div_ceil(cfg.batch_size);
    let total_steps = per_epoch * cfg.epochs;
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng::stream(cfg.seed, &format!("shuffle-{epoch}")));
        let (mut loss_sum, mut correct) = (0.0, 0);
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = train.batch(chunk);
            let lr = cfg.lr_at(step, total_steps);
            let m = train_step(model, &mut state.optimizer, &x, &y, cfg, lr)?;
            loss_sum += m.loss * m.total as f64;
            correct += m.correct;
            step += 1;
        }
        let ev = evaluate(model, eval, cfg.eval_batch_size)?;
        let row = EpochMetrics {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            train_acc: correct as f64 / train.len() as f64,
            eval_acc: ev.accuracy,
            t_avg: ev.t_avg,
            sa_percent: ev.sa_percent,
        };
        log::info!("{}", row.csv_row());
        state.history.push(row);
        state.epochs_run = epoch;
        let improved = ev.accuracy > state.best_eval_acc;
        if improved {
            state.best_eval_acc = ev.accuracy;
            state.best_epoch = Some(epoch);
        }
        if let Some(d) = run_dir {
            checkpoint::write_atomic(&d.join("metrics.csv"), state.metrics_csv().as_bytes())?;
            if improved {
                Checkpoint::from_model(model, Some(&state.optimizer)).save(&d.join("best.ckpt"))?;
            }
        }
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny() -> ModelConfig {
        ModelConfig {
            embed_dim: 8,
            heads: 2,
            image_size: 8,
            patch_size: 2,
            sps_stages: 1,
            mlp_ratio: 2,
            num_classes: 3,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn zero_lambda_is_plain_cross_entropy() {
        let model = Model::build(&tiny(), 2, 1).unwrap();
        let x = Tensor::full(&[2, 1, 8, 8], 0.7);
        let mut g = Graph::new();
        let out = model.forward(&mut g, &x, ForwardOptions::train()).unwrap();
        let cfg = TrainConfig {
            lambda_m: 0.0,
            ..TrainConfig::default()
        };
        let (total, ce, m) = total_loss(&mut g, &model, &out, &[0, 2], &cfg).unwrap();
        assert!(m.is_none());
        assert_eq!(g.value(total).item(), g.value(ce).item());
    }

    #[test]
    fn mask_loss_counts_active_steps() {
        let model = Model::build(&tiny(), 2, 1).unwrap();
        let masked = model.layers().iter().filter(|l| l.masked).count();
        let x = Tensor::full(&[1, 1, 8, 8], 0.5);
        let mut g = Graph::new();
        let out = model.forward(&mut g, &x, ForwardOptions::train()).unwrap();
        let m = mask_loss(&mut g, &model, &out, &LayerGroup::ALL, 1e-3).unwrap();
        let want = 1e-3 * (2 * masked) as f32;
        assert!((g.value(m).item() - want).abs() < 1e-7);
        assert!(mask_loss(&mut g, &model, &out, &[], 1e-3).is_none());
    }

    #[test]
    fn train_step_keeps_time_params_nonnegative() {
        let mut model = Model::build(&tiny(), 2, 1).unwrap();
        let cfg = TrainConfig {
            lambda_m: 5.0,
            lr: 0.5,
            ..TrainConfig::default()
        };
        let mut opt = optimizer_for(&model, &cfg);
        let x = Tensor::full(&[2, 1, 8, 8], 0.9);
        for _ in 0..5 {
            train_step(&mut model, &mut opt, &x, &[0, 1], &cfg, cfg.lr).unwrap();
        }
        for p in model
            .params()
            .iter()
            .filter(|p| p.kind == ParamKind::TimeSteps)
        {
            assert!(p.value.data().iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn t_init_bounds() {
        let cfg = TrainConfig {
            t_init: Some(5),
            ..TrainConfig::default()
        };
        let err = cfg.validate(4).unwrap_err();
        assert!(err.to_string().contains("t_init"), "{err}");
        assert_eq!(TrainConfig::default().t_init(4), 2);
        assert_eq!(TrainConfig::default().t_init(5), 3);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let cfg = TrainConfig {
            lr_schedule: LrSchedule::Cosine,
            lr: 1.0,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.lr_at(0, 10), 1.0);
        assert!(cfg.lr_at(10, 10).abs() < 1e-7);
    }
}
