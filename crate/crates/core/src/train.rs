//! Training loops for both stages: contrastive pretraining on doubled
//! batches and CTC fine-tuning, sharing one AdamW optimizer and a
//! cosine learning-rate schedule.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::Tensor;
use crate::data::{self, FscAttribute, Utterance};
use crate::error::{Error, Result};
use crate::features::AugmentPolicy;
use crate::losses::{self, FairLossConfig};
use crate::model::{self, ModelConfig, Params};
use crate::scalar::Scalar;
use crate::seeds::{self, derive_seed};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Pretrain,
    Finetune,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Stage::Pretrain => f.write_str("pretrain"),
            Stage::Finetune => f.write_str("finetune"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub stage: Stage,
    pub model: ModelConfig,
    pub epochs: usize,
    /// Utterances per step; pretraining doubles this with augmented views.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_min: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub seed: u64,
    pub temperature: f64,
    pub fair: FairLossConfig,
    pub fsc_attribute: FscAttribute,
    pub augment: AugmentPolicy,
    pub freeze_encoder: bool,
    /// Per-epoch and best-by-loss checkpoints land here when set.
    pub checkpoint_dir: Option<PathBuf>,
    /// Step and epoch records are appended here as they happen, so the
    /// log survives an abort.
    pub log_path: Option<PathBuf>,
}

impl TrainConfig {
    pub fn defaults_for(stage: Stage) -> Self {
        TrainConfig {
            stage,
            model: ModelConfig::default(),
            epochs: match stage {
                Stage::Pretrain => 40,
                Stage::Finetune => 60,
            },
            batch_size: 16,
            learning_rate: 1e-4,
            lr_min: 1e-6,
            betas: (0.9, 0.999),
            weight_decay: 0.01,
            grad_clip: 5.0,
            seed: 0,
            temperature: 0.2,
            fair: FairLossConfig::default(),
            fsc_attribute: FscAttribute::Composite,
            augment: AugmentPolicy::default(),
            freeze_encoder: false,
            checkpoint_dir: None,
            log_path: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if !(self.lr_min >= 0.0 && self.lr_min <= self.learning_rate) {
            return Err(Error::config(format!(
                "lr_min must lie in [0, learning_rate], got {}",
                self.lr_min
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        for (i, beta) in [self.betas.0, self.betas.1].into_iter().enumerate() {
            if !(0.0..1.0).contains(&beta) {
                return Err(Error::config(format!("beta{} must lie in [0, 1), got {beta}", i + 1)));
            }
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::config(format!(
                "grad_clip must be > 0, got {}",
                self.grad_clip
            )));
        }
        if self.batch_size < 2 && self.stage == Stage::Pretrain {
            return Err(Error::config(
                "pretraining batch_size must be at least 2 (contrastive negatives)",
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::config(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        self.model.validate()?;
        self.fair.validate()?;
        Ok(())
    }
}

// ---- logging -----------------------------------------------------------------

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub info_nce: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fsc: Option<f64>,
    /// Wall-clock time of the step; the one field exempt from the
    /// determinism contract.
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: usize,
    pub mean_loss: f64,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum LogRecord {
    Step(StepRecord),
    Epoch(EpochSummary),
}

/// Line-oriented training log. Records accumulate in memory and, when a
/// path is configured, are appended to disk one JSON line at a time.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

impl TrainLog {
    pub fn steps(&self) -> impl Iterator<Item = &StepRecord> {
        self.records.iter().filter_map(|r| match r {
            LogRecord::Step(s) => Some(s),
            LogRecord::Epoch(_) => None,
        })
    }

    pub fn epochs(&self) -> impl Iterator<Item = &EpochSummary> {
        self.records.iter().filter_map(|r| match r {
            LogRecord::Epoch(e) => Some(e),
            LogRecord::Step(_) => None,
        })
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for record in &self.records {
            out.push_str(&serde_json::to_string(record).expect("log records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }
}

struct LogSink {
    log: TrainLog,
    file: Option<(PathBuf, BufWriter<File>)>,
}

impl LogSink {
    fn open(path: Option<&Path>) -> Result<Self> {
        let file = match path {
            Some(p) => {
                let f = File::create(p).map_err(|e| Error::io(p, e))?;
                Some((p.to_path_buf(), BufWriter::new(f)))
            }
            None => None,
        };
        Ok(LogSink {
            log: TrainLog::default(),
            file,
        })
    }

    fn push(&mut self, record: LogRecord) -> Result<()> {
        if let Some((path, file)) = &mut self.file {
            let line = serde_json::to_string(&record).expect("log records serialize");
            writeln!(file, "{line}")
                .and_then(|_| file.flush())
                .map_err(|e| Error::io(path.clone(), e))?;
        }
        self.log.records.push(record);
        Ok(())
    }
}

// ---- optimizer and schedule ----------------------------------------------------

#[derive(Debug, Clone)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamHyper {
    pub fn from_config(cfg: &TrainConfig, lr: f64) -> Self {
        AdamHyper {
            lr,
            beta1: cfg.betas.0,
            beta2: cfg.betas.1,
            eps: 1e-8,
            weight_decay: cfg.weight_decay,
        }
    }
}

/// First and second moment estimates, keyed like the parameter map.
/// Entries appear the first time a parameter receives a gradient.
#[derive(Debug, Clone, Default)]
pub struct AdamState<S> {
    pub t: u64,
    pub m: BTreeMap<String, Vec<S>>,
    pub v: BTreeMap<String, Vec<S>>,
}

/// One AdamW update over the parameters named in `grads`. Weight decay
/// is decoupled: weights shrink by `lr * weight_decay` directly, and
/// the moment-driven step is added on top. Parameters absent from
/// `grads` are left untouched, decay included.
pub fn adamw_step<S: Scalar>(
    params: &Params<S>,
    grads: &BTreeMap<String, Vec<S>>,
    state: &mut AdamState<S>,
    hyper: &AdamHyper,
) -> Result<()> {
    state.t += 1;
    let bc1 = S::of(1.0 - hyper.beta1.powi(state.t as i32));
    let bc2 = S::of(1.0 - hyper.beta2.powi(state.t as i32));
    let (b1, b2) = (S::of(hyper.beta1), S::of(hyper.beta2));
    let lr = S::of(hyper.lr);
    let eps = S::of(hyper.eps);
    let decay = S::of(1.0 - hyper.lr * hyper.weight_decay);
    for (name, grad) in grads {
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGrad(name.clone()));
        }
        let tensor = params
            .get(name)
            .unwrap_or_else(|| panic!("gradient for unknown parameter `{name}`"));
        assert_eq!(grad.len(), tensor.numel(), "gradient size mismatch for `{name}`");
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| vec![S::zero(); grad.len()]);
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| vec![S::zero(); grad.len()]);
        let mut w = tensor.to_vec();
        for i in 0..w.len() {
            m[i] = b1 * m[i] + (S::one() - b1) * grad[i];
            v[i] = b2 * v[i] + (S::one() - b2) * grad[i] * grad[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            w[i] = w[i] * decay - lr * m_hat / (v_hat.sqrt() + eps);
        }
        tensor.set_values(&w);
    }
    Ok(())
}

/// Cosine annealing from `lr_max` at step 0 to `lr_min` at
/// `total_steps`. Endpoints are returned directly so the identities
/// hold exactly.
pub fn cosine_lr(step: usize, total_steps: usize, lr_max: f64, lr_min: f64) -> f64 {
    assert!(
        step <= total_steps,
        "cosine_lr: step {step} past the schedule end {total_steps}"
    );
    if step == 0 {
        return lr_max;
    }
    if step == total_steps {
        return lr_min;
    }
    let phase = std::f64::consts::PI * step as f64 / total_steps as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + phase.cos())
}

/// Copy out the gradients that backpropagation left on the parameters.
/// Parameters outside the step's graph have no gradient and no entry.
pub fn collect_gradients<S: Scalar>(params: &Params<S>) -> BTreeMap<String, Vec<S>> {
    params
        .iter()
        .filter_map(|(name, p)| p.grad().map(|g| (name.clone(), g)))
        .collect()
}

/// Scale all gradients down to a global L2 norm of `max_norm` when they
/// exceed it. Returns the norm before clipping.
pub fn clip_gradients<S: Scalar>(grads: &mut BTreeMap<String, Vec<S>>, max_norm: f64) -> f64 {
    let mut sq_sum = 0.0;
    for grad in grads.values() {
        for g in grad {
            let g = g.to_f64_value();
            sq_sum += g * g;
        }
    }
    let norm = sq_sum.sqrt();
    if norm > max_norm && norm > 0.0 {
        let factor = S::of(max_norm / norm);
        for grad in grads.values_mut() {
            for g in grad.iter_mut() {
                *g = *g * factor;
            }
        }
    }
    norm
}

// ---- shared loop machinery -----------------------------------------------------

/// Per-epoch visit order, reshuffled from a seed that folds in the
/// epoch number so no two epochs repeat an order by construction.
fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng =
        ChaCha8Rng::seed_from_u64(derive_seed(seed, seeds::salt::EPOCH_SHUFFLE + epoch as u64));
    data::shuffle(&mut order, &mut rng);
    order
}

fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch-{epoch:03}.ckpt"))
}

fn save_epoch_checkpoints<S: Scalar>(
    cfg: &TrainConfig,
    params: &Params<S>,
    epoch: usize,
    mean_loss: f64,
    best_loss: &mut f64,
) -> Result<()> {
    let Some(dir) = &cfg.checkpoint_dir else {
        return Ok(());
    };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let digest = cfg.model.digest();
    model::save_checkpoint(&checkpoint_path(dir, epoch), params, digest)?;
    if mean_loss < *best_loss {
        *best_loss = mean_loss;
        model::save_checkpoint(&dir.join("best.ckpt"), params, digest)?;
    }
    Ok(())
}

struct StepOutcome {
    loss: f64,
    info_nce: Option<f64>,
    fsc: Option<f64>,
}

/// Everything common to both stages: schedule lookup, finiteness
/// guards, clipping, the optimizer step, gradient reset, logging.
#[allow(clippy::too_many_arguments)]
fn complete_step<S: Scalar>(
    cfg: &TrainConfig,
    params: &Params<S>,
    state: &mut AdamState<S>,
    sink: &mut LogSink,
    total: &Tensor<S>,
    outcome: StepOutcome,
    global_step: usize,
    total_steps: usize,
    epoch: usize,
    started: Instant,
) -> Result<()> {
    if !outcome.loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: global_step + 1,
            epoch,
        });
    }
    total.backward();
    let mut grads = collect_gradients(params);
    clip_gradients(&mut grads, cfg.grad_clip);
    let lr = cosine_lr(global_step, total_steps, cfg.learning_rate, cfg.lr_min);
    let result = adamw_step(params, &grads, state, &AdamHyper::from_config(cfg, lr));
    for p in params.values() {
        p.zero_grad();
    }
    result?;
    sink.push(LogRecord::Step(StepRecord {
        step: global_step + 1,
        epoch,
        lr,
        loss: outcome.loss,
        info_nce: outcome.info_nce,
        fsc: outcome.fsc,
        wall_ms: started.elapsed().as_secs_f64() * 1e3,
    }))
}

/// Number of optimizer steps one epoch contributes: full chunks plus a
/// trailing chunk only when it is big enough to train on.
fn steps_per_epoch(n: usize, batch_size: usize, min_batch: usize) -> usize {
    let full = n / batch_size;
    let rest = n % batch_size;
    full + usize::from(rest >= min_batch)
}

// ---- pretraining -----------------------------------------------------------------

/// Contrastive pretraining: per epoch, shuffle, double each chunk into
/// originals plus augmented views, push the batch through the encoder
/// and the combined objective, and step AdamW under the cosine
/// schedule. Trailing chunks of one utterance are skipped; a
/// contrastive batch needs a negative.
pub fn pretrain(corpus: &[Utterance], cfg: &TrainConfig) -> Result<(Params<f64>, TrainLog)> {
    cfg.validate()?;
    if cfg.stage != Stage::Pretrain {
        return Err(Error::config(format!("pretrain called with stage {}", cfg.stage)));
    }
    if corpus.is_empty() {
        return Err(Error::data("pretraining corpus is empty"));
    }
    if corpus.len() < 2 {
        return Err(Error::data(
            "pretraining needs at least 2 utterances to form a contrastive batch",
        ));
    }
    for utt in corpus {
        if utt.spec.bins != cfg.model.n_mels {
            return Err(Error::data(format!(
                "utterance `{}` has {} feature bins but the model expects {}",
                utt.id,
                utt.spec.bins,
                cfg.model.n_mels
            )));
        }
    }

    let params: Params<f64> = model::init_params(&cfg.model, cfg.seed);
    let mut state = AdamState::default();
    let mut sink = LogSink::open(cfg.log_path.as_deref())?;
    let total_steps = cfg.epochs * steps_per_epoch(corpus.len(), cfg.batch_size, 2);
    let mut best_loss = f64::INFINITY;
    let mut global_step = 0;

    for epoch in 1..=cfg.epochs {
        let order = epoch_order(corpus.len(), cfg.seed, epoch - 1);
        let mut epoch_losses = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let started = Instant::now();
            let utterances: Vec<Utterance> = chunk.iter().map(|&i| corpus[i].clone()).collect();
            let batch_seed = derive_seed(cfg.seed, seeds::salt::STEP_BATCH + global_step as u64);
            let batch = data::make_contrastive_batch(
                &utterances,
                &cfg.fsc_attribute,
                &cfg.augment,
                batch_seed,
            )?;
            let encoded = model::encode(&batch.samples, &params, &cfg.model);
            let pooled: Vec<Tensor<f64>> = encoded
                .iter()
                .map(|h| model::mean_pool(h, h.shape()[0]))
                .collect::<Result<_>>()?;
            let pooled = Tensor::concat(0, &pooled);
            let breakdown = losses::fairasr_loss(
                &pooled,
                &batch,
                &params,
                &cfg.model,
                &cfg.fair,
                cfg.temperature,
            )?;
            let outcome = StepOutcome {
                loss: breakdown.total.item(),
                info_nce: Some(breakdown.info_nce),
                fsc: Some(breakdown.fsc),
            };
            epoch_losses.push(outcome.loss);
            complete_step(
                cfg,
                &params,
                &mut state,
                &mut sink,
                &breakdown.total,
                outcome,
                global_step,
                total_steps,
                epoch,
                started,
            )?;
            global_step += 1;
        }
        let mean_loss = epoch_losses.iter().sum::<f64>() / epoch_losses.len().max(1) as f64;
        sink.push(LogRecord::Epoch(EpochSummary {
            epoch,
            steps: epoch_losses.len(),
            mean_loss,
        }))?;
        save_epoch_checkpoints(cfg, &params, epoch, mean_loss, &mut best_loss)?;
    }
    Ok((params, sink.log))
}

/// Mean of a named step-record field over one epoch of a log.
pub fn epoch_mean(log: &TrainLog, epoch: usize, field: impl Fn(&StepRecord) -> f64) -> f64 {
    let values: Vec<f64> = log
        .steps()
        .filter(|s| s.epoch == epoch)
        .map(&field)
        .collect();
    values.iter().sum::<f64>() / values.len().max(1) as f64
}

// ---- fine-tuning -----------------------------------------------------------------

/// Assemble the fine-tuning parameter set: encoder weights carried over
/// from pretraining, a freshly initialized decoder on top. The
/// projection heads are contrastive machinery and are dropped.
fn finetune_params(pretrained: &Params<f64>, cfg: &TrainConfig) -> Result<Params<f64>> {
    let decoder_seed = derive_seed(cfg.seed, seeds::salt::DECODER_INIT);
    let fresh: Params<f64> = model::init_params(&cfg.model, decoder_seed);
    let mut params = Params::new();
    for (name, tensor) in &fresh {
        if name.starts_with("enc.") {
            let source = pretrained.get(name).ok_or_else(|| {
                Error::config(format!("pretrained parameters are missing encoder weight `{name}`"))
            })?;
            if source.shape() != tensor.shape() {
                return Err(Error::config(format!(
                    "encoder weight `{name}` has shape {:?} but the config requires {:?}",
                    source.shape(),
                    tensor.shape()
                )));
            }
            let carried = if cfg.freeze_encoder {
                Tensor::constant(source.shape(), source.to_vec())
            } else {
                Tensor::param(source.shape(), source.to_vec())
            };
            params.insert(name.clone(), carried);
        } else if name.starts_with("dec.") {
            params.insert(name.clone(), tensor.clone());
        }
    }
    Ok(params)
}

/// CTC fine-tuning on a pretrained encoder. No augmentation is applied;
/// every epoch sees the clean features in a fresh shuffled order.
pub fn finetune(
    corpus: &[Utterance],
    pretrained: &Params<f64>,
    cfg: &TrainConfig,
) -> Result<(Params<f64>, TrainLog)> {
    cfg.validate()?;
    if cfg.stage != Stage::Finetune {
        return Err(Error::config(format!("finetune called with stage {}", cfg.stage)));
    }
    if corpus.is_empty() {
        return Err(Error::data("fine-tuning corpus is empty"));
    }
    for utt in corpus {
        if utt.spec.bins != cfg.model.n_mels {
            return Err(Error::data(format!(
                "utterance `{}` has {} feature bins but the model expects {}",
                utt.id,
                utt.spec.bins,
                cfg.model.n_mels
            )));
        }
        if let Some(&t) = utt.transcript.iter().find(|&&t| t == 0 || t >= cfg.model.vocab_size) {
            return Err(Error::config(format!(
                "utterance `{}` uses token id {t} outside the decoder vocabulary [1, {})",
                utt.id, cfg.model.vocab_size
            )));
        }
    }

    let params = finetune_params(pretrained, cfg)?;
    let mut state = AdamState::default();
    let mut sink = LogSink::open(cfg.log_path.as_deref())?;
    let total_steps = cfg.epochs * steps_per_epoch(corpus.len(), cfg.batch_size, 1);
    let mut best_loss = f64::INFINITY;
    let mut global_step = 0;

    for epoch in 1..=cfg.epochs {
        let order = epoch_order(corpus.len(), cfg.seed, epoch - 1);
        let mut epoch_losses = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            let started = Instant::now();
            let mut log_probs = Vec::with_capacity(chunk.len());
            let mut targets = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let h = model::encode_one(&corpus[i].spec, &params, &cfg.model);
                log_probs.push(model::decode_logits(&h, &params));
                targets.push(corpus[i].transcript.as_slice());
            }
            let loss = losses::ctc_batch_loss(&log_probs, &targets)?;
            let outcome = StepOutcome {
                loss: loss.item(),
                info_nce: None,
                fsc: None,
            };
            epoch_losses.push(outcome.loss);
            complete_step(
                cfg,
                &params,
                &mut state,
                &mut sink,
                &loss,
                outcome,
                global_step,
                total_steps,
                epoch,
                started,
            )?;
            global_step += 1;
        }
        let mean_loss = epoch_losses.iter().sum::<f64>() / epoch_losses.len().max(1) as f64;
        sink.push(LogRecord::Epoch(EpochSummary {
            epoch,
            steps: epoch_losses.len(),
            mean_loss,
        }))?;
        save_epoch_checkpoints(cfg, &params, epoch, mean_loss, &mut best_loss)?;
    }
    Ok((params, sink.log))
}
