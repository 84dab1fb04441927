//! Declarative experiment configuration.
//!
//! One JSON document describes an entire experiment: model dimensions,
//! pretraining schedule, sensitivity measurement, quantization and
//! calibration settings, and evaluation choices. Unknown keys anywhere in
//! the document are rejected — a typo must fail loudly, not silently fall
//! back to a default. Every stage seeds its randomness from the single
//! top-level `seed` through named streams, so the whole pipeline replays
//! from this file alone.
//!
//! Command-line flags override file keys, which override built-in
//! defaults; [`Overrides`] carries the flag layer.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::calib::{CalibrationConfig, LoraPosition, QuantMethod, Variant};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, PretrainConfig};
use crate::quant::GroupSize;

/// Bit widths the pipeline exposes. The container format can carry any
/// width up to 8; these are the supported experiment points.
pub const SUPPORTED_BITS: [u8; 5] = [1, 2, 3, 4, 8];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Master seed. Every stage derives its own named stream from it.
    pub seed: u64,
    /// Corpus text file.
    pub dataset: String,
    /// Directory all artifacts are written into.
    pub out_dir: String,
    pub model: ModelDims,
    pub pretrain: PretrainSettings,
    pub saliency: SaliencySettings,
    pub calibration: CalibrationSettings,
    pub eval: EvalSettings,
}

impl Default for ExperimentConfig {
    fn default() -> ExperimentConfig {
        ExperimentConfig {
            seed: 0,
            dataset: "data/corpus.txt".to_string(),
            out_dir: "runs/default".to_string(),
            model: ModelDims::default(),
            pretrain: PretrainSettings::default(),
            saliency: SaliencySettings::default(),
            calibration: CalibrationSettings::default(),
            eval: EvalSettings::default(),
        }
    }
}

/// Model dimensions. The vocabulary is not configured here — it is always
/// the alphabet of the dataset the experiment runs on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelDims {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub d_mlp: usize,
    pub max_seq: usize,
}

impl Default for ModelDims {
    fn default() -> ModelDims {
        ModelDims { d_model: 64, n_heads: 4, n_blocks: 2, d_mlp: 256, max_seq: 128 }
    }
}

impl ModelDims {
    pub fn to_model_config(&self, vocab: usize) -> ModelConfig {
        ModelConfig {
            vocab,
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_blocks: self.n_blocks,
            d_mlp: self.d_mlp,
            max_seq: self.max_seq,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSettings {
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for PretrainSettings {
    fn default() -> PretrainSettings {
        PretrainSettings { steps: 2000, batch_size: 16, seq_len: 64, lr: 1e-3, weight_decay: 0.01 }
    }
}

impl PretrainSettings {
    pub fn to_config(&self, seed: u64) -> PretrainConfig {
        PretrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            seq_len: self.seq_len,
            lr: self.lr,
            weight_decay: self.weight_decay,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SaliencySettings {
    /// Sequences sampled for the gradient measurement.
    pub samples: usize,
    pub seq_len: usize,
}

impl Default for SaliencySettings {
    fn default() -> SaliencySettings {
        SaliencySettings { samples: 128, seq_len: 128 }
    }
}

/// Quantization and calibration settings. `coef` and `coef_mult` use the
/// same names as their command-line flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationSettings {
    pub quantizer: QuantMethod,
    pub bits: u8,
    pub group_size: GroupSize,
    pub lora_rank: usize,
    pub variant: Variant,
    pub lora_position: LoraPosition,
    /// Regularizer coefficient at block 0.
    pub coef: f64,
    /// Per-block coefficient growth factor.
    pub coef_mult: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_quant: f64,
    pub lr_lora: f64,
    pub weight_decay: f64,
    pub samples: usize,
    pub seq_len: usize,
    pub mos_experts: usize,
}

impl Default for CalibrationSettings {
    fn default() -> CalibrationSettings {
        let c = CalibrationConfig::default();
        CalibrationSettings {
            quantizer: c.quantizer,
            bits: c.bits,
            group_size: c.group,
            lora_rank: c.lora_rank,
            variant: c.variant,
            lora_position: c.lora_position,
            coef: c.lambda0,
            coef_mult: c.multiplier,
            epochs: c.epochs,
            batch_size: c.batch_size,
            lr_quant: c.lr_quant,
            lr_lora: c.lr_lora,
            weight_decay: c.weight_decay,
            samples: c.samples,
            seq_len: c.seq_len,
            mos_experts: c.mos_experts,
        }
    }
}

impl CalibrationSettings {
    pub fn to_config(&self, seed: u64) -> CalibrationConfig {
        CalibrationConfig {
            quantizer: self.quantizer,
            bits: self.bits,
            group: self.group_size,
            lora_rank: self.lora_rank,
            variant: self.variant,
            lora_position: self.lora_position,
            lambda0: self.coef,
            multiplier: self.coef_mult,
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr_quant: self.lr_quant,
            lr_lora: self.lr_lora,
            weight_decay: self.weight_decay,
            samples: self.samples,
            seq_len: self.seq_len,
            seed,
            mos_experts: self.mos_experts,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    /// Which split to score: "train", "valid", or "test".
    pub split: String,
    /// Cap on scored stream length; 0 means the whole split.
    pub max_tokens: usize,
}

impl Default for EvalSettings {
    fn default() -> EvalSettings {
        EvalSettings { split: "test".to_string(), max_tokens: 0 }
    }
}

/// The command-line flag layer: a set value beats the config file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub bits: Option<u8>,
    pub group_size: Option<GroupSize>,
    pub quantizer: Option<QuantMethod>,
    pub variant: Option<Variant>,
    pub lora_position: Option<LoraPosition>,
    pub coef: Option<f64>,
    pub coef_mult: Option<f64>,
    pub out: Option<String>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig = serde_json::from_str(text)
            .map_err(|e| Error::config(format!("bad experiment config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        ExperimentConfig::from_json(&text)
    }

    /// Canonical JSON form — what artifacts embed as their config echo.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Apply the flag layer on top of this file/default layer.
    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = o.bits {
            self.calibration.bits = v;
        }
        if let Some(v) = o.group_size {
            self.calibration.group_size = v;
        }
        if let Some(v) = o.quantizer {
            self.calibration.quantizer = v;
        }
        if let Some(v) = o.variant {
            self.calibration.variant = v;
        }
        if let Some(v) = o.lora_position {
            self.calibration.lora_position = v;
        }
        if let Some(v) = o.coef {
            self.calibration.coef = v;
        }
        if let Some(v) = o.coef_mult {
            self.calibration.coef_mult = v;
        }
        if let Some(v) = &o.out {
            self.out_dir = v.clone();
        }
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.d_model == 0 || m.n_heads == 0 || m.n_blocks == 0 || m.d_mlp == 0 || m.max_seq == 0 {
            return Err(Error::config("model dimensions must all be positive"));
        }
        if m.d_model % m.n_heads != 0 {
            return Err(Error::config(format!(
                "d_model {} is not divisible by n_heads {}",
                m.d_model, m.n_heads
            )));
        }
        if !SUPPORTED_BITS.contains(&self.calibration.bits) {
            return Err(Error::config(format!(
                "unsupported bit width {} (choose one of {:?})",
                self.calibration.bits, SUPPORTED_BITS
            )));
        }
        if self.pretrain.steps == 0 || self.pretrain.batch_size == 0 || self.pretrain.seq_len == 0
        {
            return Err(Error::config("pretraining steps, batch size, and length must be positive"));
        }
        if self.saliency.samples == 0 || self.saliency.seq_len == 0 {
            return Err(Error::config("saliency samples and sequence length must be positive"));
        }
        if !matches!(self.eval.split.as_str(), "train" | "valid" | "test") {
            return Err(Error::config(format!(
                "unknown eval split '{}' (expected train, valid, or test)",
                self.eval.split
            )));
        }
        // Reuse the calibration-level checks (coefficients, epochs, …).
        self.calibration.to_config(self.seed).validate()
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        self.pretrain.to_config(self.seed)
    }

    pub fn calibration_config(&self) -> CalibrationConfig {
        self.calibration.to_config(self.seed)
    }

    pub fn model_config(&self, vocab: usize) -> ModelConfig {
        self.model.to_model_config(vocab)
    }
}
