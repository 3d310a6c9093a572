//! Multi-task optimisation: weighted BCE loss, Adam with gradient clipping,
//! early stopping and the what-task fine-tuning protocol.
//!
//! The loss is a sum-reduced binary cross-entropy on logits per task with
//! positive-class weight 2, and the total is the unweighted sum over tasks.
//! The monitored metric is the binary average precision of the iCR labels
//! when the variant predicts iCRs, otherwise of the meta-action class. Every
//! epoch writes `epoch-<k>.ckpt`; the raw-best validation epoch is kept as
//! `best.ckpt`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{GameStateInput, Task};
use crate::encoders::text::TextEmbedder;
use crate::error::{Error, Result};
use crate::evaluation::{self, PredictionDump};
use crate::model::attention::ForwardCtx;
use crate::model::batch::{Batch, Collator};
use crate::model::params::load_checkpoint_file;
use crate::model::{BatchOutput, ModelConfig, PolicyModel};

/// Checkpoint schema identifier.
pub const CKPT_SCHEMA: &str = "icr-ckpt-v1";

/// Training hyperparameters; defaults are the selected values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub gradient_clip: f64,
    pub accumulate_gradient: usize,
    pub weight_decay: f64,
    pub lr_scheduler: bool,
    pub max_epochs: usize,
    pub patience: usize,
    pub min_delta: f64,
    pub pos_weight: f64,
    pub seed: u64,
    pub context_length: usize,
    /// Fixed seeds and seeded dropout streams; on by default.
    pub deterministic: bool,
    /// Keep per-epoch checkpoints next to `best.ckpt`.
    pub keep_epoch_checkpoints: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 32,
            gradient_clip: 1.0,
            accumulate_gradient: 1,
            weight_decay: 0.0,
            lr_scheduler: false,
            max_epochs: 30,
            patience: 8,
            min_delta: 0.001,
            pos_weight: 2.0,
            seed: 12345,
            context_length: 3,
            deterministic: true,
            keep_epoch_checkpoints: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0
            || self.batch_size == 0
            || self.max_epochs == 0
            || self.accumulate_gradient == 0
        {
            return Err(Error::config("train config values must be positive"));
        }
        if self.lr_scheduler {
            return Err(Error::config("no learning-rate schedule is implemented"));
        }
        Ok(())
    }
}

/// Sum-reduced binary cross-entropy on logits with positive-class weight.
///
/// `pw * y * softplus(-z) + (1 - y) * softplus(z)`, summed over elements.
pub fn bce_with_logits_sum(logits: &Tensor, targets: &Tensor, pos_weight: f64) -> Result<Tensor> {
    let softplus = |x: &Tensor| -> candle_core::Result<Tensor> {
        // max(x, 0) + ln(1 + exp(-|x|)), stable for large |x|
        let relu = x.relu()?;
        let exp = x.abs()?.neg()?.exp()?;
        relu + (exp + 1.0)?.log()?
    };
    let pos = (targets * softplus(&logits.neg()?)?)?;
    let ones = Tensor::ones_like(targets)?;
    let neg = ((ones - targets)? * softplus(logits)?)?;
    let loss = ((pos * pos_weight)? + neg)?;
    Ok(loss.sum_all()?)
}

/// Sum of the per-task losses for whatever heads the variant ran.
pub fn compute_loss(
    outputs: &BatchOutput,
    batch: &Batch,
    task: Task,
    pos_weight: f64,
) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    let mut add = |t: Tensor| {
        total = Some(match total.take() {
            Some(acc) => (acc + t).expect("loss accumulation"),
            None => t,
        });
    };
    if let Some(logits) = &outputs.icr_turn {
        debug_assert_eq!(task, Task::When);
        add(bce_with_logits_sum(logits, &batch.labels.turn_icr, pos_weight)?);
    }
    if let Some(logits) = &outputs.icr_clipart {
        let targets = batch.labels.clipart_icr.as_ref().ok_or_else(|| {
            Error::Model("clipart iCR head ran on a batch without clipart labels".into())
        })?;
        add(bce_with_logits_sum(logits, targets, pos_weight)?);
    }
    if let Some(logits) = &outputs.action_logits {
        add(bce_with_logits_sum(logits, &batch.labels.actions, pos_weight)?);
    }
    total.ok_or_else(|| Error::Model("model produced no outputs to compute a loss on".into()))
}

/// Adam with decoupled weight decay (equivalent to Adam at decay 0) and
/// global-norm gradient clipping.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    clip: f64,
    step: usize,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64, weight_decay: f64, clip: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            clip,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Apply one update. Returns the pre-clip global gradient norm.
    pub fn step(&mut self, model: &PolicyModel, grads: &GradStore) -> Result<f64> {
        // global norm over all available gradients
        let mut sq_sum = 0.0f64;
        let vars = model.params().vars();
        for var in vars.values() {
            if let Some(g) = grads.get(var.as_tensor()) {
                let n = g
                    .sqr()?
                    .sum_all()?
                    .to_dtype(DType::F64)?
                    .to_scalar::<f64>()?;
                sq_sum += n;
            }
        }
        let norm = sq_sum.sqrt();
        let scale = if self.clip > 0.0 && norm > self.clip {
            self.clip / (norm + 1e-6)
        } else {
            1.0
        };
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, var) in vars.iter() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = (g * scale)?;
            let m = match self.m.get(name) {
                Some(m) => ((m * self.beta1)? + (&g * (1.0 - self.beta1))?)?,
                None => (&g * (1.0 - self.beta1))?,
            };
            let v = match self.v.get(name) {
                Some(v) => ((v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?,
                None => (g.sqr()? * (1.0 - self.beta2))?,
            };
            let m_hat = (&m / bc1)?;
            let v_hat = (&v / bc2)?;
            let update = (m_hat * self.lr)?.div(&(v_hat.sqrt()? + self.eps)?)?;
            let mut new = (var.as_tensor() - update)?;
            if self.weight_decay > 0.0 {
                new = (new - (var.as_tensor() * (self.lr * self.weight_decay))?)?;
            }
            var.set(&new)?;
            self.m.insert(name.clone(), m);
            self.v.insert(name.clone(), v);
        }
        Ok(norm)
    }
}

/// Early stopping on a maximised metric: improvement means exceeding the
/// best signal by more than `min_delta`; `patience` consecutive
/// non-improvements stop the run. Best-checkpoint selection tracks the raw
/// maximum separately, so the selected epoch is never below the best by
/// more than `min_delta`.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    patience: usize,
    min_delta: f64,
    signal_best: f64,
    wait: usize,
    pub best_metric: f64,
    pub best_epoch: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize, min_delta: f64) -> Self {
        EarlyStopper {
            patience,
            min_delta,
            signal_best: f64::NEG_INFINITY,
            wait: 0,
            best_metric: f64::NEG_INFINITY,
            best_epoch: 0,
        }
    }

    /// Feed the metric of `epoch` (1-based). Returns `(is_new_best, stop)`.
    pub fn update(&mut self, epoch: usize, metric: f64) -> (bool, bool) {
        let is_best = metric > self.best_metric;
        if is_best {
            self.best_metric = metric;
            self.best_epoch = epoch;
        }
        if metric > self.signal_best + self.min_delta {
            self.signal_best = metric;
            self.wait = 0;
        } else {
            self.wait += 1;
        }
        (is_best, self.wait >= self.patience)
    }
}

/// Per-epoch log entry.
#[derive(Debug, Clone, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_metric: f64,
    pub is_best: bool,
}

/// Result of one training run.
pub struct TrainOutcome {
    pub best_checkpoint: PathBuf,
    pub best_epoch: usize,
    pub best_metric: f64,
    pub epochs_run: usize,
    pub log: Vec<EpochLog>,
}

/// Which metric the run monitors.
fn monitored_metric(model: &PolicyModel, dump: &PredictionDump) -> Result<f64> {
    let cfg = model.config();
    if cfg.variant.has_icr_head() {
        match cfg.task {
            Task::When => Ok(evaluation::evaluate_when(dump)?.ap),
            Task::What => Ok(evaluation::evaluate_what(dump)?.ap),
        }
    } else {
        let per = evaluation::per_action_ap(dump)?;
        Ok(per[&crate::action_labeler::ActionKind::ActedUpon].ap)
    }
}

/// Everything a training run needs besides the model.
pub struct TrainEnv<'a> {
    pub text_encoder: Option<&'a dyn TextEmbedder>,
    pub render_resolution: u32,
    pub assets: Option<&'a Path>,
    pub run_dir: &'a Path,
}

fn collator<'a>(
    model: &'a PolicyModel,
    env: &'a TrainEnv<'a>,
    cfg: &TrainConfig,
) -> Collator<'a> {
    Collator {
        cfg: model.config(),
        text_encoder: env.text_encoder,
        context_length: cfg.context_length,
        render_resolution: env.render_resolution,
        assets: env.assets,
        device: model.device(),
        dtype: model.dtype(),
    }
}

/// Metadata block stored in every checkpoint.
fn checkpoint_meta(
    model: &PolicyModel,
    epoch: usize,
    metric: f64,
    extra: &BTreeMap<String, String>,
) -> BTreeMap<String, String> {
    let mut meta = BTreeMap::new();
    meta.insert("schema".into(), CKPT_SCHEMA.into());
    meta.insert(
        "config".into(),
        serde_json::to_string(model.config()).expect("config serializes"),
    );
    meta.insert("epoch".into(), epoch.to_string());
    meta.insert("metric".into(), format!("{metric}"));
    meta.insert(
        "dtype".into(),
        match model.dtype() {
            DType::F64 => "f64".into(),
            _ => "f32".into(),
        },
    );
    if let Some(b) = model.backbone() {
        meta.insert("backbone".into(), b.identifier());
    }
    for (k, v) in extra {
        meta.insert(k.clone(), v.clone());
    }
    meta
}

pub fn save_checkpoint(
    model: &PolicyModel,
    path: impl AsRef<Path>,
    epoch: usize,
    metric: f64,
) -> Result<()> {
    let extra = BTreeMap::new();
    model
        .params()
        .save(path, &checkpoint_meta(model, epoch, metric, &extra))
}

/// Checkpoint metadata returned by [`load_model`].
pub struct CheckpointInfo {
    pub epoch: usize,
    pub metric: f64,
    pub config: ModelConfig,
}

/// Rebuild a model from a checkpoint. The backbone is supplied by the
/// caller (it is frozen and not stored in the file).
pub fn load_model(
    path: impl AsRef<Path>,
    device: &Device,
    dtype: DType,
    backbone: Option<std::sync::Arc<crate::encoders::backbone::Backbone>>,
) -> Result<(PolicyModel, CheckpointInfo)> {
    let path = path.as_ref();
    let (tensors, meta) = load_checkpoint_file(path, device)?;
    if meta.get("schema").map(String::as_str) != Some(CKPT_SCHEMA) {
        return Err(Error::Model(format!(
            "{} is not a {CKPT_SCHEMA} checkpoint",
            path.display()
        )));
    }
    let config: ModelConfig = serde_json::from_str(
        meta.get("config")
            .ok_or_else(|| Error::Model("checkpoint lacks a config block".into()))?,
    )?;
    let mut model = PolicyModel::new(config.clone(), device, dtype, backbone)?;
    let copied = model.params_mut().copy_matching(&tensors)?;
    if copied != model.params().vars().len() {
        return Err(Error::Model(format!(
            "checkpoint restored {copied} of {} parameters",
            model.params().vars().len()
        )));
    }
    let epoch = meta
        .get("epoch")
        .and_then(|s| s.parse().ok())
        .unwrap_or(0);
    let metric = meta
        .get("metric")
        .and_then(|s| s.parse().ok())
        .unwrap_or(f64::NAN);
    Ok((model, CheckpointInfo { epoch, metric, config }))
}

/// Train a model with Adam and early stopping; returns the best checkpoint.
pub fn train(
    model: &mut PolicyModel,
    train_records: &[GameStateInput],
    val_records: &[GameStateInput],
    cfg: &TrainConfig,
    env: &TrainEnv,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_records.is_empty() || val_records.is_empty() {
        return Err(Error::config("training and validation sets must be non-empty"));
    }
    fs::create_dir_all(env.run_dir).map_err(|e| Error::io(env.run_dir, e))?;
    let mut optimizer = Adam::new(cfg.learning_rate, cfg.weight_decay, cfg.gradient_clip);
    let mut stopper = EarlyStopper::new(cfg.patience, cfg.min_delta);
    let mut log: Vec<EpochLog> = Vec::new();
    let mut shuffle_rng = ChaCha20Rng::seed_from_u64(cfg.seed ^ 0x0051_4aff);
    let mut dropout_seed = ChaCha20Rng::seed_from_u64(cfg.seed ^ 0x00d2_0000);
    let best_path = env.run_dir.join("best.ckpt");
    let log_path = env.run_dir.join("metrics.csv");
    let mut log_file = String::from("epoch,train_loss,val_metric,is_best\n");
    let mut epochs_run = 0;

    for epoch in 1..=cfg.max_epochs {
        epochs_run = epoch;
        let mut order: Vec<usize> = (0..train_records.len()).collect();
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut n_elems = 0usize;
        let coll = collator(model, env, cfg);
        let mut pending: Vec<GradStore> = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            let refs: Vec<&GameStateInput> = chunk.iter().map(|&i| &train_records[i]).collect();
            let batch = coll.collate(&refs)?;
            use rand::RngExt;
            let seed = if cfg.deterministic {
                dropout_seed.random::<u64>()
            } else {
                rand::rng().random::<u64>()
            };
            let mut ctx = ForwardCtx::train(model.config().dropout, seed);
            let out = model.forward(&batch, &mut ctx)?;
            let loss = compute_loss(&out, &batch, model.config().task, cfg.pos_weight)?;
            let loss_val = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !loss_val.is_finite() {
                return Err(Error::Model(format!(
                    "non-finite loss {loss_val} at epoch {epoch} (batch of {}); aborting",
                    refs.len()
                )));
            }
            epoch_loss += loss_val;
            n_elems += refs.len();
            let grads = loss.backward()?;
            pending.push(grads);
            if pending.len() >= cfg.accumulate_gradient {
                apply_pending(model, &mut optimizer, &mut pending)?;
            }
        }
        if !pending.is_empty() {
            apply_pending(model, &mut optimizer, &mut pending)?;
        }
        let train_loss = epoch_loss / n_elems.max(1) as f64;

        // validation pass with accumulated logits
        let coll = collator(model, env, cfg);
        let dump = evaluation::predict_records(model, &coll, val_records, cfg.batch_size)?;
        let metric = monitored_metric(model, &dump)?;
        let (is_best, stop) = stopper.update(epoch, metric);
        if cfg.keep_epoch_checkpoints {
            save_checkpoint(model, env.run_dir.join(format!("epoch-{epoch}.ckpt")), epoch, metric)?;
        }
        if is_best {
            save_checkpoint(model, &best_path, epoch, metric)?;
        }
        log_file.push_str(&format!("{epoch},{train_loss},{metric},{is_best}\n"));
        fs::write(&log_path, &log_file).map_err(|e| Error::io(&log_path, e))?;
        log.push(EpochLog {
            epoch,
            train_loss,
            val_metric: metric,
            is_best,
        });
        log::info!("epoch {epoch}: train_loss={train_loss:.4} val_metric={metric:.4} best={is_best}");
        if stop {
            break;
        }
    }
    Ok(TrainOutcome {
        best_checkpoint: best_path,
        best_epoch: stopper.best_epoch,
        best_metric: stopper.best_metric,
        epochs_run,
        log,
    })
}

fn apply_pending(
    model: &PolicyModel,
    optimizer: &mut Adam,
    pending: &mut Vec<GradStore>,
) -> Result<()> {
    // merge accumulated gradient stores by summing per-variable
    if pending.len() == 1 {
        let grads = pending.pop().unwrap();
        optimizer.step(model, &grads)?;
        return Ok(());
    }
    let mut merged = pending.pop().unwrap();
    let vars: Vec<_> = model.params().vars().values().cloned().collect();
    for store in pending.drain(..) {
        for var in &vars {
            if let Some(g) = store.get(var.as_tensor()) {
                let tensor = var.as_tensor();
                let sum = match merged.get(tensor) {
                    Some(acc) => (acc + g)?,
                    None => g.clone(),
                };
                merged.insert(tensor, sum);
            }
        }
    }
    optimizer.step(model, &merged)?;
    Ok(())
}

/// Initialise a what-task model from a pretrained action checkpoint: all
/// matching parameters are copied (embedders, decoder, action heads); the
/// clipart-level iCR head starts fresh. Then train as usual.
#[allow(clippy::too_many_arguments)]
pub fn finetune_what(
    pretrained: impl AsRef<Path>,
    target_cfg: ModelConfig,
    train_records: &[GameStateInput],
    val_records: &[GameStateInput],
    cfg: &TrainConfig,
    env: &TrainEnv,
    device: &Device,
    backbone: Option<std::sync::Arc<crate::encoders::backbone::Backbone>>,
) -> Result<(PolicyModel, TrainOutcome)> {
    let pretrained = pretrained.as_ref();
    let (tensors, meta) = load_checkpoint_file(pretrained, device)?;
    let src_cfg: ModelConfig = serde_json::from_str(
        meta.get("config")
            .ok_or_else(|| Error::Model("checkpoint lacks a config block".into()))?,
    )?;
    if !src_cfg.variant.has_action_heads() {
        return Err(Error::config(
            "fine-tuning requires an action-predicting checkpoint",
        ));
    }
    if target_cfg.task != Task::What {
        return Err(Error::config("fine-tuning targets the what-task"));
    }
    if src_cfg.d_model != target_cfg.d_model
        || src_cfg.n_layers != target_cfg.n_layers
        || src_cfg.n_heads != target_cfg.n_heads
    {
        return Err(Error::config(
            "pretrained checkpoint and target model have incompatible dimensions",
        ));
    }
    let dtype = match meta.get("dtype").map(String::as_str) {
        Some("f64") => DType::F64,
        _ => DType::F32,
    };
    let mut model = PolicyModel::new(target_cfg, device, dtype, backbone)?;
    // fresh iCR head: drop those names from the source before copying
    let filtered: BTreeMap<String, Tensor> = tensors
        .into_iter()
        .filter(|(name, _)| !name.starts_with("head.icr"))
        .collect();
    let copied = model.params_mut().copy_matching(&filtered)?;
    log::info!(
        "fine-tuning: initialised {copied} parameters from {}",
        pretrained.display()
    );
    let outcome = train(&mut model, train_records, val_records, cfg, env)?;
    Ok((model, outcome))
}
