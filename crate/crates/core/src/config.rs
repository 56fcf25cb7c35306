//! Flat key-value run configuration shared by every pipeline command.
//!
//! A config file holds one `key = value` pair per line, with `#` comments
//! and blank lines skipped. Keys are namespaced by stage (`data.`,
//! `model.`, `pretrain.`, ...) and every key has a default, so an empty
//! file is a valid run. Unknown keys are rejected rather than ignored.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use indexmap::IndexMap;

use crate::data::{FscAttribute, SyntheticCorpusConfig};
use crate::error::{Error, Result};
use crate::features::AugmentPolicy;
use crate::losses::FairLossConfig;
use crate::model::{EncoderConfig, ModelConfig};
use crate::train::{Stage, TrainConfig};

/// Every run-time knob, flattened. The seed here is the only seed in the
/// system; corpus generation, training, and probing all derive from it.
#[derive(Debug, Clone, PartialEq)]
pub struct FullConfig {
    pub seed: u64,
    pub n_utterances: usize,
    pub vocab_size: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub frames_per_token: usize,
    pub n_mels: usize,
    pub sigma_g: f64,
    /// Attribute name to category count, in declaration order.
    pub attributes: IndexMap<String, usize>,
    pub n_time_masks: usize,
    pub max_time_mask_width: usize,
    pub n_freq_masks: usize,
    pub max_freq_mask_width: usize,
    pub mask_value: f64,
    pub n_blocks: usize,
    pub model_dim: usize,
    pub ff_dim: usize,
    pub conv_kernel: usize,
    pub subsample_factor: usize,
    pub use_attention: bool,
    pub proj_dim: usize,
    pub normalize_projections: bool,
    /// One projection head for both branches when true. Also selects
    /// which head the group-reversed branch reads during pretraining.
    pub shared_projection: bool,
    pub pretrain_epochs: usize,
    pub pretrain_batch_size: usize,
    pub pretrain_learning_rate: f64,
    pub pretrain_lr_min: f64,
    pub pretrain_beta1: f64,
    pub pretrain_beta2: f64,
    pub pretrain_weight_decay: f64,
    pub pretrain_grad_clip: f64,
    pub temperature: f64,
    pub lambda: f64,
    pub grl_alpha: f64,
    /// `composite` or the name of a single demographic attribute.
    pub fsc_attribute: String,
    pub finetune_epochs: usize,
    pub finetune_batch_size: usize,
    pub finetune_learning_rate: f64,
    pub finetune_lr_min: f64,
    pub finetune_beta1: f64,
    pub finetune_beta2: f64,
    pub finetune_weight_decay: f64,
    pub finetune_grad_clip: f64,
    pub freeze_encoder: bool,
    /// Attributes to break out in reports; empty means all of them.
    pub eval_attributes: Vec<String>,
}

impl Default for FullConfig {
    fn default() -> Self {
        let pre = TrainConfig::defaults_for(Stage::Pretrain);
        let fine = TrainConfig::defaults_for(Stage::Finetune);
        let fair = FairLossConfig::default();
        let augment = AugmentPolicy::default();
        let encoder = EncoderConfig::default();
        let model = ModelConfig::default();
        let mut attributes = IndexMap::new();
        attributes.insert("gender".to_string(), 2);
        attributes.insert("age".to_string(), 3);
        FullConfig {
            seed: 0,
            n_utterances: 256,
            vocab_size: 16,
            min_tokens: 2,
            max_tokens: 6,
            frames_per_token: 8,
            n_mels: 16,
            sigma_g: 1.0,
            attributes,
            n_time_masks: augment.n_time_masks,
            max_time_mask_width: augment.max_time_mask_width,
            n_freq_masks: augment.n_freq_masks,
            max_freq_mask_width: augment.max_freq_mask_width,
            mask_value: augment.mask_value,
            n_blocks: encoder.n_blocks,
            model_dim: encoder.model_dim,
            ff_dim: encoder.ff_dim,
            conv_kernel: encoder.conv_kernel,
            subsample_factor: encoder.subsample_factor,
            use_attention: encoder.use_attention,
            proj_dim: model.proj_dim,
            normalize_projections: model.normalize_projections,
            shared_projection: model.shared_projection,
            pretrain_epochs: pre.epochs,
            pretrain_batch_size: pre.batch_size,
            pretrain_learning_rate: pre.learning_rate,
            pretrain_lr_min: pre.lr_min,
            pretrain_beta1: pre.betas.0,
            pretrain_beta2: pre.betas.1,
            pretrain_weight_decay: pre.weight_decay,
            pretrain_grad_clip: pre.grad_clip,
            temperature: pre.temperature,
            lambda: fair.lambda,
            grl_alpha: fair.grl_alpha,
            fsc_attribute: "composite".to_string(),
            finetune_epochs: fine.epochs,
            finetune_batch_size: fine.batch_size,
            finetune_learning_rate: fine.learning_rate,
            finetune_lr_min: fine.lr_min,
            finetune_beta1: fine.betas.0,
            finetune_beta2: fine.betas.1,
            finetune_weight_decay: fine.weight_decay,
            finetune_grad_clip: fine.grad_clip,
            freeze_encoder: fine.freeze_encoder,
            eval_attributes: Vec::new(),
        }
    }
}

/// Key names with one-line help, in file order. `FullConfig::get` and
/// `FullConfig::apply` accept exactly these keys.
pub const CONFIG_KEYS: &[(&str, &str)] = &[
    ("seed", "base for every random draw in the pipeline"),
    ("data.n_utterances", "synthetic corpus size"),
    ("data.vocab_size", "token inventory including the blank at id 0"),
    ("data.min_tokens", "shortest transcript length"),
    ("data.max_tokens", "longest transcript length"),
    ("data.frames_per_token", "spectrogram frames emitted per token"),
    ("data.n_mels", "feature bins per frame"),
    ("data.sigma_g", "strength of the per-cohort spectral signature"),
    ("data.attributes", "demographic schema as name:count pairs, comma-separated"),
    ("augment.n_time_masks", "time masks per augmented view"),
    ("augment.max_time_mask_width", "widest time mask, in frames"),
    ("augment.n_freq_masks", "frequency masks per augmented view"),
    ("augment.max_freq_mask_width", "widest frequency mask, in bins"),
    ("augment.mask_value", "fill value for masked cells"),
    ("model.n_blocks", "encoder block count"),
    ("model.model_dim", "encoder width"),
    ("model.ff_dim", "feed-forward hidden width"),
    ("model.conv_kernel", "depthwise convolution kernel size, odd"),
    ("model.subsample_factor", "frames stacked per encoder step"),
    ("model.use_attention", "include the self-attention sublayer"),
    ("model.proj_dim", "contrastive projection width"),
    ("model.normalize_projections", "L2-normalize projections before similarity"),
    ("model.shared_projection", "one projection head for both branches"),
    ("pretrain.epochs", "pretraining epochs"),
    ("pretrain.batch_size", "utterances per pretraining step, doubled by views"),
    ("pretrain.learning_rate", "pretraining peak learning rate"),
    ("pretrain.lr_min", "pretraining floor of the cosine schedule"),
    ("pretrain.beta1", "pretraining first-moment decay"),
    ("pretrain.beta2", "pretraining second-moment decay"),
    ("pretrain.weight_decay", "pretraining decoupled weight decay"),
    ("pretrain.grad_clip", "pretraining global gradient-norm budget"),
    ("pretrain.temperature", "contrastive similarity temperature"),
    ("pretrain.lambda", "weight of the fairness term"),
    ("pretrain.grl_alpha", "gradient-reversal scale"),
    ("pretrain.fsc_attribute", "grouping for the fairness term: composite or an attribute name"),
    ("finetune.epochs", "fine-tuning epochs"),
    ("finetune.batch_size", "utterances per fine-tuning step"),
    ("finetune.learning_rate", "fine-tuning peak learning rate"),
    ("finetune.lr_min", "fine-tuning floor of the cosine schedule"),
    ("finetune.beta1", "fine-tuning first-moment decay"),
    ("finetune.beta2", "fine-tuning second-moment decay"),
    ("finetune.weight_decay", "fine-tuning decoupled weight decay"),
    ("finetune.grad_clip", "fine-tuning global gradient-norm budget"),
    ("finetune.freeze_encoder", "train only the decoder head"),
    ("eval.attributes", "attributes to report on, comma-separated; empty means all"),
];

fn parsed<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value.trim().parse().map_err(|e| {
        Error::config(format!("invalid value `{value}` for config key `{key}`: {e}"))
    })
}

fn parse_attributes(value: &str) -> Result<IndexMap<String, usize>> {
    let mut map = IndexMap::new();
    for part in value.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (name, count) = part.split_once(':').ok_or_else(|| {
            Error::config(format!(
                "invalid value `{part}` for config key `data.attributes`: expected name:count"
            ))
        })?;
        let count = parsed::<usize>("data.attributes", count)?;
        if map.insert(name.trim().to_string(), count).is_some() {
            return Err(Error::config(format!(
                "attribute `{}` repeats in data.attributes",
                name.trim()
            )));
        }
    }
    Ok(map)
}

fn render_attributes(map: &IndexMap<String, usize>) -> String {
    map.iter()
        .map(|(name, count)| format!("{name}:{count}"))
        .collect::<Vec<_>>()
        .join(",")
}

impl FullConfig {
    /// The value of one key, rendered as it would appear in a file.
    /// Returns None for keys outside `CONFIG_KEYS`.
    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "seed" => self.seed.to_string(),
            "data.n_utterances" => self.n_utterances.to_string(),
            "data.vocab_size" => self.vocab_size.to_string(),
            "data.min_tokens" => self.min_tokens.to_string(),
            "data.max_tokens" => self.max_tokens.to_string(),
            "data.frames_per_token" => self.frames_per_token.to_string(),
            "data.n_mels" => self.n_mels.to_string(),
            "data.sigma_g" => self.sigma_g.to_string(),
            "data.attributes" => render_attributes(&self.attributes),
            "augment.n_time_masks" => self.n_time_masks.to_string(),
            "augment.max_time_mask_width" => self.max_time_mask_width.to_string(),
            "augment.n_freq_masks" => self.n_freq_masks.to_string(),
            "augment.max_freq_mask_width" => self.max_freq_mask_width.to_string(),
            "augment.mask_value" => self.mask_value.to_string(),
            "model.n_blocks" => self.n_blocks.to_string(),
            "model.model_dim" => self.model_dim.to_string(),
            "model.ff_dim" => self.ff_dim.to_string(),
            "model.conv_kernel" => self.conv_kernel.to_string(),
            "model.subsample_factor" => self.subsample_factor.to_string(),
            "model.use_attention" => self.use_attention.to_string(),
            "model.proj_dim" => self.proj_dim.to_string(),
            "model.normalize_projections" => self.normalize_projections.to_string(),
            "model.shared_projection" => self.shared_projection.to_string(),
            "pretrain.epochs" => self.pretrain_epochs.to_string(),
            "pretrain.batch_size" => self.pretrain_batch_size.to_string(),
            "pretrain.learning_rate" => self.pretrain_learning_rate.to_string(),
            "pretrain.lr_min" => self.pretrain_lr_min.to_string(),
            "pretrain.beta1" => self.pretrain_beta1.to_string(),
            "pretrain.beta2" => self.pretrain_beta2.to_string(),
            "pretrain.weight_decay" => self.pretrain_weight_decay.to_string(),
            "pretrain.grad_clip" => self.pretrain_grad_clip.to_string(),
            "pretrain.temperature" => self.temperature.to_string(),
            "pretrain.lambda" => self.lambda.to_string(),
            "pretrain.grl_alpha" => self.grl_alpha.to_string(),
            "pretrain.fsc_attribute" => self.fsc_attribute.clone(),
            "finetune.epochs" => self.finetune_epochs.to_string(),
            "finetune.batch_size" => self.finetune_batch_size.to_string(),
            "finetune.learning_rate" => self.finetune_learning_rate.to_string(),
            "finetune.lr_min" => self.finetune_lr_min.to_string(),
            "finetune.beta1" => self.finetune_beta1.to_string(),
            "finetune.beta2" => self.finetune_beta2.to_string(),
            "finetune.weight_decay" => self.finetune_weight_decay.to_string(),
            "finetune.grad_clip" => self.finetune_grad_clip.to_string(),
            "finetune.freeze_encoder" => self.freeze_encoder.to_string(),
            "eval.attributes" => self.eval_attributes.join(","),
            _ => return None,
        })
    }

    /// Sets one key from its text form. Unknown keys and malformed
    /// values are rejected with the key named.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parsed(key, value)?,
            "data.n_utterances" => self.n_utterances = parsed(key, value)?,
            "data.vocab_size" => self.vocab_size = parsed(key, value)?,
            "data.min_tokens" => self.min_tokens = parsed(key, value)?,
            "data.max_tokens" => self.max_tokens = parsed(key, value)?,
            "data.frames_per_token" => self.frames_per_token = parsed(key, value)?,
            "data.n_mels" => self.n_mels = parsed(key, value)?,
            "data.sigma_g" => self.sigma_g = parsed(key, value)?,
            "data.attributes" => self.attributes = parse_attributes(value)?,
            "augment.n_time_masks" => self.n_time_masks = parsed(key, value)?,
            "augment.max_time_mask_width" => self.max_time_mask_width = parsed(key, value)?,
            "augment.n_freq_masks" => self.n_freq_masks = parsed(key, value)?,
            "augment.max_freq_mask_width" => self.max_freq_mask_width = parsed(key, value)?,
            "augment.mask_value" => self.mask_value = parsed(key, value)?,
            "model.n_blocks" => self.n_blocks = parsed(key, value)?,
            "model.model_dim" => self.model_dim = parsed(key, value)?,
            "model.ff_dim" => self.ff_dim = parsed(key, value)?,
            "model.conv_kernel" => self.conv_kernel = parsed(key, value)?,
            "model.subsample_factor" => self.subsample_factor = parsed(key, value)?,
            "model.use_attention" => self.use_attention = parsed(key, value)?,
            "model.proj_dim" => self.proj_dim = parsed(key, value)?,
            "model.normalize_projections" => self.normalize_projections = parsed(key, value)?,
            "model.shared_projection" => self.shared_projection = parsed(key, value)?,
            "pretrain.epochs" => self.pretrain_epochs = parsed(key, value)?,
            "pretrain.batch_size" => self.pretrain_batch_size = parsed(key, value)?,
            "pretrain.learning_rate" => self.pretrain_learning_rate = parsed(key, value)?,
            "pretrain.lr_min" => self.pretrain_lr_min = parsed(key, value)?,
            "pretrain.beta1" => self.pretrain_beta1 = parsed(key, value)?,
            "pretrain.beta2" => self.pretrain_beta2 = parsed(key, value)?,
            "pretrain.weight_decay" => self.pretrain_weight_decay = parsed(key, value)?,
            "pretrain.grad_clip" => self.pretrain_grad_clip = parsed(key, value)?,
            "pretrain.temperature" => self.temperature = parsed(key, value)?,
            "pretrain.lambda" => self.lambda = parsed(key, value)?,
            "pretrain.grl_alpha" => self.grl_alpha = parsed(key, value)?,
            "pretrain.fsc_attribute" => self.fsc_attribute = value.trim().to_string(),
            "finetune.epochs" => self.finetune_epochs = parsed(key, value)?,
            "finetune.batch_size" => self.finetune_batch_size = parsed(key, value)?,
            "finetune.learning_rate" => self.finetune_learning_rate = parsed(key, value)?,
            "finetune.lr_min" => self.finetune_lr_min = parsed(key, value)?,
            "finetune.beta1" => self.finetune_beta1 = parsed(key, value)?,
            "finetune.beta2" => self.finetune_beta2 = parsed(key, value)?,
            "finetune.weight_decay" => self.finetune_weight_decay = parsed(key, value)?,
            "finetune.grad_clip" => self.finetune_grad_clip = parsed(key, value)?,
            "finetune.freeze_encoder" => self.freeze_encoder = parsed(key, value)?,
            "eval.attributes" => {
                self.eval_attributes = value
                    .split(',')
                    .map(str::trim)
                    .filter(|p| !p.is_empty())
                    .map(str::to_string)
                    .collect();
            }
            _ => return Err(Error::config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Parses a whole file. Lines are `key = value`, `#` comments, or
    /// blank; anything else is an error naming the line.
    pub fn parse(text: &str) -> Result<FullConfig> {
        let mut cfg = FullConfig::default();
        let mut seen = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let (key, value) = trimmed.split_once('=').ok_or_else(|| {
                Error::config(format!("config line {line} is not `key = value`: `{trimmed}`"))
            })?;
            let key = key.trim();
            if seen.contains(&key.to_string()) {
                return Err(Error::config(format!(
                    "duplicate config key `{key}` (line {line})"
                )));
            }
            seen.push(key.to_string());
            cfg.apply(key, value.trim()).map_err(|e| match e {
                Error::Config(msg) => Error::config(format!("{msg} (line {line})")),
                other => other,
            })?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<FullConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        FullConfig::parse(&text)
    }

    /// Renders every key in `CONFIG_KEYS` order; parsing the result
    /// reproduces this config exactly.
    pub fn to_flat_string(&self) -> String {
        let mut out = String::new();
        for (key, _) in CONFIG_KEYS {
            let value = self.get(key).expect("every listed key renders");
            out.push_str(key);
            out.push_str(" = ");
            out.push_str(&value);
            out.push('\n');
        }
        out
    }

    pub fn corpus_config(&self) -> SyntheticCorpusConfig {
        SyntheticCorpusConfig {
            n_utterances: self.n_utterances,
            vocab_size: self.vocab_size,
            min_tokens: self.min_tokens,
            max_tokens: self.max_tokens,
            frames_per_token: self.frames_per_token,
            n_mels: self.n_mels,
            sigma_g: self.sigma_g,
            attributes: self.attributes.clone(),
            seed: self.seed,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                n_blocks: self.n_blocks,
                model_dim: self.model_dim,
                ff_dim: self.ff_dim,
                conv_kernel: self.conv_kernel,
                subsample_factor: self.subsample_factor,
                use_attention: self.use_attention,
            },
            n_mels: self.n_mels,
            proj_dim: self.proj_dim,
            vocab_size: self.vocab_size,
            normalize_projections: self.normalize_projections,
            shared_projection: self.shared_projection,
        }
    }

    pub fn augment_policy(&self) -> AugmentPolicy {
        AugmentPolicy {
            n_time_masks: self.n_time_masks,
            max_time_mask_width: self.max_time_mask_width,
            n_freq_masks: self.n_freq_masks,
            max_freq_mask_width: self.max_freq_mask_width,
            mask_value: self.mask_value,
        }
    }

    pub fn train_config(&self, stage: Stage) -> TrainConfig {
        let mut cfg = TrainConfig::defaults_for(stage);
        cfg.model = self.model_config();
        cfg.seed = self.seed;
        match stage {
            Stage::Pretrain => {
                cfg.epochs = self.pretrain_epochs;
                cfg.batch_size = self.pretrain_batch_size;
                cfg.learning_rate = self.pretrain_learning_rate;
                cfg.lr_min = self.pretrain_lr_min;
                cfg.betas = (self.pretrain_beta1, self.pretrain_beta2);
                cfg.weight_decay = self.pretrain_weight_decay;
                cfg.grad_clip = self.pretrain_grad_clip;
                cfg.temperature = self.temperature;
                cfg.fair = FairLossConfig {
                    lambda: self.lambda,
                    grl_alpha: self.grl_alpha,
                    shared_embedding_space: self.shared_projection,
                };
                cfg.fsc_attribute = FscAttribute::parse(&self.fsc_attribute);
                cfg.augment = self.augment_policy();
            }
            Stage::Finetune => {
                cfg.epochs = self.finetune_epochs;
                cfg.batch_size = self.finetune_batch_size;
                cfg.learning_rate = self.finetune_learning_rate;
                cfg.lr_min = self.finetune_lr_min;
                cfg.betas = (self.finetune_beta1, self.finetune_beta2);
                cfg.weight_decay = self.finetune_weight_decay;
                cfg.grad_clip = self.finetune_grad_clip;
                cfg.freeze_encoder = self.freeze_encoder;
            }
        }
        cfg
    }

    /// Attributes for reporting: the configured list, or every attribute
    /// in the data schema when the list is empty.
    pub fn report_attributes(&self) -> Vec<String> {
        if self.eval_attributes.is_empty() {
            self.attributes.keys().cloned().collect()
        } else {
            self.eval_attributes.clone()
        }
    }
}
