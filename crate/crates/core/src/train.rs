//! Losses, Adam, the warm-up cosine schedule and the joint training loop.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::data::{SeriesDataset, Task};
use crate::error::{AmnError, Result};
use crate::layers;
use crate::model::{AmnModel, ModelConfig, Mode, ModelOutput, RnnKind};
use crate::modular::UnitKind;
use crate::params::ParamStore;
use crate::rng::seeded;

/// Training and architecture hyper-parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub warmup_fraction: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub rnn_dropout: f64,
    pub module_dropout: f64,
    pub output_dropout: f64,
    pub rnn_hidden: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub module_hidden: [usize; 2],
    /// Number of selected features; capped at the feature count.
    pub n_features: usize,
    /// One-based epoch after which the selection is frozen; 0 freezes
    /// before training.
    pub selection_epoch: usize,
    pub rnn: RnnKind,
    pub unit: UnitKind,
    pub task: Task,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub layer_norm_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            initial_lr: 0.005,
            warmup_fraction: 0.05,
            batch_size: 64,
            epochs: 100,
            patience: 10,
            seed: 0,
            rnn_dropout: 0.0,
            module_dropout: 0.0,
            output_dropout: 0.0,
            rnn_hidden: 32,
            d_model: 16,
            num_heads: 4,
            module_hidden: [64, 32],
            n_features: 10,
            selection_epoch: 1,
            rnn: RnnKind::Lstm,
            unit: UnitKind::Anb,
            task: Task::Regression,
            grad_clip: Some(5.0),
            layer_norm_eps: 1e-5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(AmnError::Config(m));
        for r in [self.rnn_dropout, self.module_dropout, self.output_dropout] {
            layers::check_rate(r)?;
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return bad(format!("warmup_fraction must be in [0, 1), got {}", self.warmup_fraction));
        }
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return bad(format!("initial_lr must be positive, got {}", self.initial_lr));
        }
        if self.batch_size < 1 || self.epochs < 1 || self.n_features < 1 {
            return bad("batch_size, epochs and n_features must be >= 1".into());
        }
        if let Some(c) = self.grad_clip {
            if c <= 0.0 {
                return bad(format!("grad_clip must be positive, got {c}"));
            }
        }
        Ok(())
    }

    /// Model layout for a dataset with the given window and names.
    pub fn model_config(&self, ds: &SeriesDataset) -> Result<ModelConfig> {
        self.validate()?;
        let c = ModelConfig {
            rnn: self.rnn,
            unit: self.unit,
            task: self.task,
            window: ds.window,
            channels: ds.channels(),
            feature_names: ds.feature_names.clone(),
            rnn_hidden: self.rnn_hidden,
            d_model: self.d_model,
            num_heads: self.num_heads,
            module_hidden: self.module_hidden,
            n_features: self.n_features.min(ds.features()),
            rnn_dropout: self.rnn_dropout,
            module_dropout: self.module_dropout,
            output_dropout: self.output_dropout,
            layer_norm_eps: self.layer_norm_eps,
            seed: self.seed,
        };
        c.validate()?;
        Ok(c)
    }
}

fn check_loss_inputs(y: &[f64], z: &[f64]) -> Result<()> {
    if y.is_empty() || y.len() != z.len() {
        return Err(AmnError::Contract(format!(
            "loss needs equal non-empty inputs, got {} and {}",
            y.len(),
            z.len()
        )));
    }
    Ok(())
}

pub fn mse(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check_loss_inputs(y, yhat)?;
    Ok(y.iter().zip(yhat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64)
}

/// Mean of `softplus(z) − y·z`, the stable form of binary cross-entropy.
pub fn bce_logits(y: &[f64], z: &[f64]) -> Result<f64> {
    check_loss_inputs(y, z)?;
    if y.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(AmnError::Contract("bce targets must be 0 or 1".into()));
    }
    Ok(y.iter()
        .zip(z)
        .map(|(&t, &s)| crate::autodiff::softplus(s) - t * s)
        .sum::<f64>()
        / y.len() as f64)
}

pub fn task_loss(task: Task, y: &[f64], z: &[f64]) -> Result<f64> {
    match task {
        Task::Regression => mse(y, z),
        Task::Classification => bce_logits(y, z),
    }
}

/// Task loss on the tape; `y` is a `[B × 1]` constant.
pub fn task_loss_var(g: &mut Graph, task: Task, y: Var, z: Var) -> Result<Var> {
    match task {
        Task::Regression => {
            let e = g.sub(z, y)?;
            let sq = g.square(e)?;
            g.mean(sq)
        }
        Task::Classification => {
            let sp = g.softplus(z)?;
            let yz = g.mul(y, z)?;
            let l = g.sub(sp, yz)?;
            g.mean(l)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub loss_rnn_afs: f64,
    pub loss_mod: f64,
    pub loss_amn: f64,
}

impl LossReport {
    pub fn from_parts(loss_rnn_afs: f64, loss_mod: f64) -> Self {
        LossReport {
            loss_rnn_afs,
            loss_mod,
            loss_amn: loss_rnn_afs + loss_mod,
        }
    }
}

/// Unweighted sum of the auxiliary-head and ensemble losses.
pub fn joint_loss(
    g: &mut Graph,
    task: Task,
    out: &ModelOutput,
    targets: &[f64],
) -> Result<(Var, LossReport)> {
    let y = g.constant(Tensor::new(vec![targets.len(), 1], targets.to_vec())?);
    let l_aux = task_loss_var(g, task, y, out.aux)?;
    let l_mod = task_loss_var(g, task, y, out.prediction)?;
    let total = g.add(l_aux, l_mod)?;
    let report = LossReport {
        loss_rnn_afs: g.value(l_aux).item()?,
        loss_mod: g.value(l_mod).item()?,
        loss_amn: g.value(total).item()?,
    };
    Ok((total, report))
}

/// Linear warm-up from 0 to `initial_lr` over `round(warmup_fraction ·
/// total)` steps, then cosine decay reaching 0 at `total − 1`.
pub fn cosine_warmup_lr(step: usize, total_steps: usize, initial_lr: f64, warmup_fraction: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(AmnError::Config("total_steps must be >= 1".into()));
    }
    if step >= total_steps {
        return Err(AmnError::Contract(format!(
            "step {step} outside schedule of {total_steps} steps"
        )));
    }
    let warmup = warmup_end(total_steps, warmup_fraction);
    if step < warmup {
        return Ok(initial_lr * step as f64 / warmup as f64);
    }
    let span = total_steps - 1 - warmup;
    if span == 0 {
        return Ok(initial_lr);
    }
    let progress = (step - warmup) as f64 / span as f64;
    Ok(initial_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Step at which the schedule peaks.
pub fn warmup_end(total_steps: usize, warmup_fraction: f64) -> usize {
    ((warmup_fraction * total_steps as f64).round() as usize).min(total_steps.saturating_sub(1))
}

/// Adam with bias correction.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.entries().iter().map(|e| vec![0.0; e.tensor.len()]).collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(AmnError::Contract(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.m.len()
            )));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let p = store.get_mut(id).data_mut();
            if grads[k].len() != p.len() {
                return Err(AmnError::shape("adam", &[grads[k].len()], &[p.len()]));
            }
            for (i, &g) in grads[k].iter().enumerate() {
                let m = &mut self.m[k][i];
                let v = &mut self.v[k][i];
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                p[i] -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Scale all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

/// One line of the training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// One-based.
    pub epoch: usize,
    pub steps: usize,
    pub lr: f64,
    pub train: LossReport,
    pub val: LossReport,
    pub feature_weights: Vec<f64>,
    pub frozen_selection: Option<Vec<usize>>,
    pub best: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub total_steps: usize,
}

impl History {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.epochs {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| AmnError::io(path, e))?;
        f.write_all(self.to_jsonl()?.as_bytes())
            .map_err(|e| AmnError::io(path, e))
    }
}

/// Joint loss of an evaluation-mode pass over a dataset.
pub fn evaluate_loss(model: &AmnModel, ds: &SeriesDataset) -> Result<LossReport> {
    let e = model.evaluate_all(&ds.samples, 512)?;
    Ok(LossReport::from_parts(
        task_loss(model.task(), &ds.targets, &e.aux)?,
        task_loss(model.task(), &ds.targets, &e.prediction)?,
    ))
}

fn check_targets(task: Task, ds: &SeriesDataset) -> Result<()> {
    if task == Task::Classification && ds.targets.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(AmnError::Data(
            "classification targets must be 0 or 1 (is the target normalised?)".into(),
        ));
    }
    Ok(())
}

/// Train `model` in place and restore the parameters of the best
/// validation epoch.
pub fn fit(
    model: &mut AmnModel,
    train: &SeriesDataset,
    val: &SeriesDataset,
    cfg: &TrainConfig,
) -> Result<History> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(AmnError::Data("training and validation sets must be non-empty".into()));
    }
    check_targets(model.task(), train)?;
    check_targets(model.task(), val)?;
    let task = model.task();
    let per = model.features();
    let n = train.len();
    let batches_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * batches_per_epoch;
    // Shuffling and dropout share one stream, separate from initialisation.
    let mut rng = seeded(cfg.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let mut adam = Adam::new(&model.store);

    if cfg.selection_epoch == 0 && model.frozen_selection.is_none() {
        let w = model.mean_weights(train)?;
        model.set_reference_weights(w)?;
        model.freeze_selection()?;
    }

    let mut history = Vec::new();
    let mut best: Option<(f64, ParamStore, Vec<f64>, Option<Vec<usize>>, usize)> = None;
    let mut bad_epochs = 0usize;
    let mut stopped_early = false;
    let mut step = 0usize;
    let mut order: Vec<usize> = (0..n).collect();
    let mut lr = 0.0;
    let mut xb: Vec<f64> = Vec::with_capacity(cfg.batch_size * per);
    let mut yb: Vec<f64> = Vec::with_capacity(cfg.batch_size);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut sum_aux, mut sum_mod, mut seen) = (0.0, 0.0, 0usize);
        let mut weight_sum = vec![0.0; per];
        for chunk in order.chunks(cfg.batch_size) {
            xb.clear();
            yb.clear();
            for &i in chunk {
                xb.extend_from_slice(train.sample(i));
                yb.push(train.targets[i]);
            }
            lr = cosine_warmup_lr(step, total_steps, cfg.initial_lr, cfg.warmup_fraction)?;
            let mut g = Graph::new();
            let p = model.store.bind(&mut g, true);
            let diverged = |e: AmnError| match e {
                AmnError::NonFinite { op } => AmnError::Diverged {
                    step,
                    epoch,
                    detail: format!("non-finite value in {op}"),
                },
                other => other,
            };
            let out = model
                .forward(&mut g, &p, &xb, chunk.len(), Mode::Train(&mut rng))
                .map_err(diverged)?;
            let (loss, report) = joint_loss(&mut g, task, &out, &yb).map_err(diverged)?;
            for row in g.value(out.weights).data().chunks(per) {
                for (acc, w) in weight_sum.iter_mut().zip(row) {
                    *acc += w;
                }
            }
            if !report.loss_amn.is_finite() {
                return Err(AmnError::Diverged {
                    step,
                    epoch,
                    detail: format!("loss is {}", report.loss_amn),
                });
            }
            g.backward(loss).map_err(diverged)?;
            let mut grads = p.grads(&g, &model.store);
            if let Some(c) = cfg.grad_clip {
                clip_global_norm(&mut grads, c);
            }
            adam.step(&mut model.store, &grads, lr)?;
            sum_aux += report.loss_rnn_afs * chunk.len() as f64;
            sum_mod += report.loss_mod * chunk.len() as f64;
            seen += chunk.len();
            step += 1;
        }
        let train_report = LossReport::from_parts(sum_aux / seen as f64, sum_mod / seen as f64);

        // Mean live weights over the epoch's training batches.
        model.set_reference_weights(weight_sum.iter().map(|w| w / seen as f64).collect())?;
        if model.frozen_selection.is_none() && epoch == cfg.selection_epoch {
            let sel = model.freeze_selection()?;
            log::info!("epoch {epoch}: froze selection {sel:?}");
            // Earlier epochs used a different module set.
            best = None;
            bad_epochs = 0;
        }
        let val_report = evaluate_loss(model, val)?;
        if !val_report.loss_amn.is_finite() {
            return Err(AmnError::Diverged {
                step,
                epoch,
                detail: format!("validation loss is {}", val_report.loss_amn),
            });
        }
        let improved = best.as_ref().is_none_or(|b| val_report.loss_amn < b.0);
        if improved {
            best = Some((
                val_report.loss_amn,
                model.store.clone(),
                model.reference_weights.clone(),
                model.frozen_selection.clone(),
                epoch,
            ));
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
        }
        log::debug!(
            "epoch {epoch}: train {:.6} val {:.6} lr {lr:.2e}",
            train_report.loss_amn,
            val_report.loss_amn
        );
        history.push(EpochRecord {
            epoch,
            steps: step,
            lr,
            train: train_report,
            val: val_report,
            feature_weights: model.reference_weights.clone(),
            frozen_selection: model.frozen_selection.clone(),
            best: improved,
        });
        if bad_epochs > cfg.patience {
            stopped_early = true;
            break;
        }
    }

    let (_, store, reference, frozen, best_epoch) = best.expect("at least one epoch ran");
    model.store = store;
    model.reference_weights = reference;
    model.frozen_selection = frozen;
    Ok(History {
        epochs: history,
        best_epoch,
        stopped_early,
        total_steps,
    })
}
