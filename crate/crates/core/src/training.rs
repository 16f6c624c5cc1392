//! SGD training and the continual-learning strategies built on it.
//!
//! * [`train_task`] trains whatever is currently unfrozen on one task; this
//!   covers isolated training and selective augmentation (after
//!   [`MultiTaskModel::add_task`] only the new branch is unfrozen).
//! * [`train_finetune`] adds a branch but leaves the shared trunk trainable,
//!   the forgetting control.
//! * [`train_lwf`] adds only a classifier head on the existing features and
//!   anchors the old heads with a distillation loss.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datasets::Dataset;
use crate::error::{Result, SenaError};
use crate::layers::{cross_entropy_loss, softmax_cross_entropy_grad, softmax_forward};
use crate::model::MultiTaskModel;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub learning_rate: f32,
    pub weight_decay: f32,
    pub momentum: f32,
    pub epochs: usize,
    pub batch_size: usize,
    /// Stop after this many epochs without a validation improvement.
    /// `None` trains for the full budget.
    pub early_stopping_patience: Option<usize>,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            learning_rate: 0.01,
            weight_decay: 1e-6,
            momentum: 0.9,
            epochs: 12,
            batch_size: 32,
            early_stopping_patience: None,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        let rates = [self.learning_rate, self.weight_decay, self.momentum];
        if rates.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(SenaError::InvalidArgument(format!(
                "learning rate, weight decay and momentum must be finite and non-negative: {self:?}"
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(SenaError::InvalidArgument(
                "epochs and batch size must be positive".into(),
            ));
        }
        if self.early_stopping_patience == Some(0) {
            return Err(SenaError::InvalidArgument("patience must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LwfConfig {
    /// Softening temperature for recorded and current old-task outputs.
    pub temperature: f32,
    /// Weight of the distillation term relative to the new-task loss.
    pub distill_weight: f32,
    /// Epochs training only the new head before joint training.
    pub warmup_epochs: usize,
    /// Joint-phase epochs; `None` uses the SGD epoch budget.
    pub joint_epochs: Option<usize>,
}

impl Default for LwfConfig {
    fn default() -> Self {
        LwfConfig {
            temperature: 2.0,
            distill_weight: 1.0,
            warmup_epochs: 2,
            joint_epochs: None,
        }
    }
}

impl LwfConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(SenaError::InvalidArgument(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(self.distill_weight >= 0.0) {
            return Err(SenaError::InvalidArgument(format!(
                "distill weight must be non-negative, got {}",
                self.distill_weight
            )));
        }
        if self.warmup_epochs == 0 {
            return Err(SenaError::InvalidArgument("warmup_epochs must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f32,
    pub train_accuracy: f64,
    pub validation_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub task_id: String,
    pub seed: u64,
    pub epochs: Vec<EpochStats>,
    pub test_accuracy: Option<f64>,
    pub wallclock_s: f64,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f32> {
        self.epochs.last().map(|e| e.train_loss)
    }

    /// Report with the timing zeroed, for reproducibility comparisons.
    pub fn without_timing(&self) -> TrainReport {
        TrainReport {
            wallclock_s: 0.0,
            ..self.clone()
        }
    }
}

/// One momentum-SGD update of a parameter tensor:
/// `v <- momentum * v - lr * (g + weight_decay * p)`, then `p <- p + v`.
pub fn sgd_step(param: &mut Tensor, grad: &Tensor, velocity: &mut Tensor, cfg: &SgdConfig) -> Result<()> {
    param.expect_same_shape(grad)?;
    param.expect_same_shape(velocity)?;
    let (lr, wd, mom) = (cfg.learning_rate, cfg.weight_decay, cfg.momentum);
    for ((p, &g), v) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(velocity.data_mut())
    {
        *v = mom * *v - lr * (g + wd * *p);
        *p += *v;
    }
    Ok(())
}

/// Momentum buffers for every parameter of a model, in layer order.
/// Frozen layers are skipped and their buffers stay untouched.
#[derive(Debug, Default)]
pub struct Sgd {
    cfg: SgdConfig,
    velocity: Vec<Vec<Tensor>>,
}

impl Sgd {
    pub fn new(cfg: SgdConfig) -> Self {
        Sgd {
            cfg,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, model: &mut MultiTaskModel) -> Result<()> {
        for (i, (_, layer)) in model.layers_mut().enumerate() {
            if i >= self.velocity.len() {
                self.velocity.resize_with(i + 1, Vec::new);
            }
            if layer.is_frozen() || !layer.has_params() {
                continue;
            }
            let vel = &mut self.velocity[i];
            if vel.is_empty() {
                *vel = layer.params().iter().map(Tensor::zeros_like).collect();
            }
            for ((p, g), v) in layer.params_and_grads().zip(vel.iter_mut()) {
                sgd_step(p, g, v, &self.cfg)?;
            }
        }
        Ok(())
    }
}

/// Temperature-softened class distribution of each logit row.
pub fn soft_targets(logits: &Tensor, temperature: f32) -> Result<Tensor> {
    softmax_forward(&logits.map(|z| z / temperature))
}

/// Distillation loss `mean_n KL(targets_n || softmax(logits_n / T))` and its
/// gradient with respect to `logits`, `(softmax(logits/T) - targets) / (T N)`.
///
/// The loss is exactly zero when `targets` were produced by [`soft_targets`]
/// from the same logits.
pub fn distillation_loss(logits: &Tensor, targets: &Tensor, temperature: f32) -> Result<(f32, Tensor)> {
    logits.expect_same_shape(targets)?;
    let [n, k] = logits.dims2()?;
    let probs = soft_targets(logits, temperature)?;
    let mut loss = 0.0f32;
    for (q_row, p_row) in targets.data().chunks_exact(k).zip(probs.data().chunks_exact(k)) {
        for (&q, &p) in q_row.iter().zip(p_row) {
            if q > 0.0 {
                loss += q * (q.ln() - p.max(1e-12).ln());
            }
        }
    }
    let scale = 1.0 / (temperature * n as f32);
    let grad_data = probs
        .data()
        .iter()
        .zip(targets.data())
        .map(|(p, q)| (p - q) * scale)
        .collect();
    Ok((loss / n as f32, Tensor::from_vec(logits.shape(), grad_data)?))
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn count_correct(scores: &Tensor, labels: &[usize]) -> usize {
    let k = scores.shape()[1];
    scores
        .data()
        .chunks_exact(k)
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count()
}

/// Evaluation-mode accuracy of `task_id` on `data`.
pub fn evaluate(model: &MultiTaskModel, task_id: &str, data: &Dataset, batch_size: usize) -> Result<f64> {
    Ok(predict(model, task_id, data, batch_size)?
        .iter()
        .zip(data.labels())
        .filter(|(p, l)| p == l)
        .count() as f64
        / data.len().max(1) as f64)
}

/// Evaluation-mode class predictions.
pub fn predict(model: &MultiTaskModel, task_id: &str, data: &Dataset, batch_size: usize) -> Result<Vec<usize>> {
    check_task_data(model, task_id, data)?;
    let indices: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::with_capacity(data.len());
    for chunk in indices.chunks(batch_size.max(1)) {
        let (x, _) = data.gather(chunk)?;
        let z = model.logits(task_id, &x)?;
        let k = z.shape()[1];
        out.extend(z.data().chunks_exact(k).map(argmax));
    }
    Ok(out)
}

/// Evaluation-mode logits for the whole dataset, `[N, n_classes]`.
pub fn collect_logits(model: &MultiTaskModel, task_id: &str, data: &Dataset, batch_size: usize) -> Result<Tensor> {
    let indices: Vec<usize> = (0..data.len()).collect();
    let k = model.n_classes(task_id)?;
    let mut out = Vec::with_capacity(data.len() * k);
    for chunk in indices.chunks(batch_size.max(1)) {
        let (x, _) = data.gather(chunk)?;
        out.extend_from_slice(model.logits(task_id, &x)?.data());
    }
    Tensor::from_vec(&[data.len(), k], out)
}

fn check_task_data(model: &MultiTaskModel, task_id: &str, data: &Dataset) -> Result<()> {
    let n_classes = model.n_classes(task_id)?;
    if let Some(&label) = data.labels().iter().find(|&&l| l >= n_classes) {
        return Err(SenaError::InvalidLabel { label, n_classes });
    }
    if data.is_empty() {
        return Err(SenaError::InvalidArgument(format!("dataset {:?} is empty", data.name())));
    }
    Ok(())
}

/// Digest of every frozen parameter, used to prove that training never
/// touches frozen layers.
pub fn frozen_checksum(model: &MultiTaskModel) -> String {
    let mut h = Sha256::new();
    for (_, layer) in model.layers() {
        if layer.is_frozen() {
            for p in layer.params() {
                for v in p.data() {
                    h.update(v.to_bits().to_le_bytes());
                }
            }
        }
    }
    hex::encode(h.finalize())
}

/// Extra loss terms that ride along with the task being trained.
struct Distill<'a> {
    /// (old task id, soft targets for every training sample)
    targets: &'a [(String, Tensor)],
    temperature: f32,
    weight: f32,
}

struct LoopSpec<'a> {
    task_id: &'a str,
    epochs: usize,
    distill: Option<Distill<'a>>,
}

/// Shared epoch loop: per-epoch shuffle, minibatch SGD, frozen-parameter
/// audit, optional validation and early stopping.
fn run_epochs(
    model: &mut MultiTaskModel,
    spec: LoopSpec<'_>,
    train: &Dataset,
    validation: Option<&Dataset>,
    cfg: &SgdConfig,
    rng: &mut Rng,
    opt: &mut Sgd,
    stats: &mut Vec<EpochStats>,
) -> Result<()> {
    let LoopSpec {
        task_id,
        epochs,
        distill,
    } = spec;
    let frozen_before = frozen_checksum(model);
    let mut heads: Vec<&str> = vec![task_id];
    if let Some(d) = &distill {
        heads.extend(d.targets.iter().map(|(t, _)| t.as_str()));
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best_val = f64::NEG_INFINITY;
    let mut since_best = 0;
    for _ in 0..epochs {
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let (x, labels) = train.gather(batch)?;
            model.zero_grad();
            let pass = model.forward_heads(&heads, &x, Some(rng))?;
            let probs = softmax_forward(&pass.logits()[0])?;
            let mut batch_loss = cross_entropy_loss(&probs, &labels)?;
            correct += count_correct(&probs, &labels);
            let mut grads = vec![softmax_cross_entropy_grad(&probs, &labels)?];
            if let Some(d) = &distill {
                for ((_, all_targets), z) in d.targets.iter().zip(&pass.logits()[1..]) {
                    let k = all_targets.shape()[1];
                    let mut t = Vec::with_capacity(batch.len() * k);
                    for &i in batch {
                        t.extend_from_slice(&all_targets.data()[i * k..(i + 1) * k]);
                    }
                    let t = Tensor::from_vec(&[batch.len(), k], t)?;
                    let (kd, g) = distillation_loss(z, &t, d.temperature)?;
                    batch_loss += d.weight * kd;
                    grads.push(g.map(|v| v * d.weight));
                }
            }
            loss_sum += batch_loss as f64 * batch.len() as f64;
            model.backward_heads(pass, grads)?;
            opt.step(model)?;
        }
        if frozen_checksum(model) != frozen_before {
            return Err(SenaError::State("a frozen parameter changed during training".into()));
        }
        let validation_accuracy = match validation {
            Some(v) => Some(evaluate(model, task_id, v, cfg.batch_size)?),
            None => None,
        };
        stats.push(EpochStats {
            epoch: stats.len() + 1,
            train_loss: (loss_sum / train.len() as f64) as f32,
            train_accuracy: correct as f64 / train.len() as f64,
            validation_accuracy,
        });
        if let (Some(patience), Some(acc)) = (cfg.early_stopping_patience, validation_accuracy) {
            if acc > best_val {
                best_val = acc;
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= patience {
                    break;
                }
            }
        }
    }
    Ok(())
}

/// Trains `task_id` with SGD. Only parameters that are currently unfrozen
/// change; the report has one entry per epoch run.
pub fn train_task(
    model: &mut MultiTaskModel,
    task_id: &str,
    train: &Dataset,
    validation: Option<&Dataset>,
    cfg: &SgdConfig,
    rng: &mut Rng,
) -> Result<TrainReport> {
    cfg.validate()?;
    check_task_data(model, task_id, train)?;
    let start = Instant::now();
    let mut opt = Sgd::new(cfg.clone());
    let mut epochs = Vec::new();
    run_epochs(
        model,
        LoopSpec {
            task_id,
            epochs: cfg.epochs,
            distill: None,
        },
        train,
        validation,
        cfg,
        rng,
        &mut opt,
        &mut epochs,
    )?;
    Ok(TrainReport {
        task_id: task_id.to_string(),
        seed: rng.seed(),
        epochs,
        test_accuracy: None,
        wallclock_s: start.elapsed().as_secs_f64(),
    })
}

/// Selective network augmentation: adds a branch for `task_id` whose body is
/// copied from `source` (most recent branch when `None`) and trains only that
/// branch. With `unfreeze_phase2` the whole network is then trained for a
/// second epoch budget, which gives up the no-forgetting guarantee.
pub fn train_sena(
    model: &mut MultiTaskModel,
    task_id: &str,
    train: &Dataset,
    validation: Option<&Dataset>,
    cfg: &SgdConfig,
    source: Option<&str>,
    unfreeze_phase2: bool,
    rng: &mut Rng,
) -> Result<TrainReport> {
    cfg.validate()?;
    model.add_task(task_id, train.n_classes(), source, rng)?;
    let mut report = train_task(model, task_id, train, validation, cfg, rng)?;
    if unfreeze_phase2 {
        model.unfreeze_all();
        let second = train_task(model, task_id, train, validation, cfg, rng)?;
        let offset = report.epochs.len();
        report.epochs.extend(second.epochs.into_iter().map(|mut e| {
            e.epoch += offset;
            e
        }));
        report.wallclock_s += second.wallclock_s;
        model.freeze_all();
        model.set_task_frozen(task_id, false)?;
    }
    Ok(report)
}

/// Plain fine-tuning: a new classifier head for `task_id` is attached to the
/// first task's body and every weight on that path (trunk, body, heads) is
/// trained on the new task alone. The old head keeps its weights, but the
/// features beneath it move.
pub fn train_finetune(
    model: &mut MultiTaskModel,
    task_id: &str,
    train: &Dataset,
    validation: Option<&Dataset>,
    cfg: &SgdConfig,
    rng: &mut Rng,
) -> Result<TrainReport> {
    cfg.validate()?;
    if model.task_count() == 0 {
        return Err(SenaError::State("fine-tuning needs an existing task".into()));
    }
    let host = model.task_ids()[0].to_string();
    model.add_head(task_id, train.n_classes(), &host, rng)?;
    model.set_trunk_frozen(false);
    model.set_task_frozen(&host, false)?;
    train_task(model, task_id, train, validation, cfg, rng)
}

/// Learning-without-forgetting baseline.
///
/// A classifier head for `task_id` is attached to the body of the first
/// registered task. Old-task soft targets are recorded on the new training
/// data before any update. Phase one trains only the new head; phase two
/// unfreezes every layer on the shared path and minimizes the new-task
/// cross-entropy plus `distill_weight` times the distillation loss of every
/// old head.
pub fn train_lwf(
    model: &mut MultiTaskModel,
    task_id: &str,
    train: &Dataset,
    validation: Option<&Dataset>,
    cfg: &SgdConfig,
    lwf: &LwfConfig,
    rng: &mut Rng,
) -> Result<TrainReport> {
    cfg.validate()?;
    lwf.validate()?;
    let host = model
        .task_ids()
        .first()
        .map(|s| s.to_string())
        .ok_or_else(|| SenaError::State("LwF needs an existing task".into()))?;
    let old_tasks: Vec<String> = model
        .task_ids()
        .into_iter()
        .map(str::to_string)
        .collect();
    let mut targets = Vec::with_capacity(old_tasks.len());
    for t in &old_tasks {
        let logits = collect_logits(model, t, train, cfg.batch_size)?;
        targets.push((t.clone(), soft_targets(&logits, lwf.temperature)?));
    }

    let start = Instant::now();
    model.add_head(task_id, train.n_classes(), &host, rng)?;
    check_task_data(model, task_id, train)?;

    let mut epochs = Vec::new();
    let mut opt = Sgd::new(cfg.clone());
    run_epochs(
        model,
        LoopSpec {
            task_id,
            epochs: lwf.warmup_epochs,
            distill: None,
        },
        train,
        validation,
        cfg,
        rng,
        &mut opt,
        &mut epochs,
    )?;

    let joint = lwf.joint_epochs.unwrap_or(cfg.epochs);
    if joint > 0 {
        model.set_trunk_frozen(false);
        for t in old_tasks.iter().chain(std::iter::once(&task_id.to_string())) {
            let shares_path = t == &host || matches!(model.branch(t)?.body(), crate::model::BranchBody::Shared(o) if o == &host);
            if shares_path {
                model.set_task_frozen(t, false)?;
            }
        }
        let distill_targets: Vec<(String, Tensor)> = targets
            .into_iter()
            .filter(|(t, _)| {
                t == &host
                    || matches!(model.branch(t).map(|b| b.body()), Ok(crate::model::BranchBody::Shared(o)) if o == &host)
            })
            .collect();
        let mut opt = Sgd::new(cfg.clone());
        run_epochs(
            model,
            LoopSpec {
                task_id,
                epochs: joint,
                distill: Some(Distill {
                    targets: &distill_targets,
                    temperature: lwf.temperature,
                    weight: lwf.distill_weight,
                }),
            },
            train,
            validation,
            cfg,
            rng,
            &mut opt,
            &mut epochs,
        )?;
    }
    Ok(TrainReport {
        task_id: task_id.to_string(),
        seed: rng.seed(),
        epochs,
        test_accuracy: None,
        wallclock_s: start.elapsed().as_secs_f64(),
    })
}
