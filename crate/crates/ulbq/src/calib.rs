//! Block-wise calibration of quantized transformer blocks.
//!
//! Each block is trained in sequence against its own full-precision
//! output: the quantizer's trainable parameters and the low-rank
//! correction jointly minimize the block's output error, optionally with a
//! sensitivity-weighted pull of the reconstructed weights back toward the
//! originals. Activations for block `k` come from the already-calibrated
//! blocks `0..k`, never from the full-precision path, so each block learns
//! to compensate the errors accumulated before it.
//!
//! The original weights are never touched: only clipping gates, binary
//! magnitudes, router/expert tables, and the low-rank factors receive
//! optimizer steps. Everything is driven by named seed streams, so a rerun
//! with the same configuration replays bit for bit.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::TextDataset;
use crate::error::{Error, Result};
use crate::lora::LoraPair;
use crate::model::{causal_mask, Block, ToyTransformer, WeightForm};
use crate::optim::{AdamW, ParamGroup};
use crate::quant::dual::{dual_binarize, DualBinaryParams};
use crate::quant::learnable::LearnableClip;
use crate::quant::mos::MixtureOfScales;
use crate::quant::{sign_weights, GroupLayout, GroupSize, QuantSpec};
use crate::rng::Rng;
use crate::saliency::{saliency_penalty, SaliencyMap};
use crate::tensor::{Scalar, Tensor};

/// A block whose loss exceeds this (or goes non-finite) is rolled back to
/// its freshly initialized state and flagged.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

/// Which regularizer weighting to apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// No weight-preservation term at all.
    None,
    /// Every element weighted 1 — plain squared distance.
    Naive,
    /// Elements weighted by the sensitivity map.
    Saliency,
}

/// Whether the regularizer's target includes the low-rank correction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoraPosition {
    /// Pull the bare quantized weights toward the originals.
    Before,
    /// Pull the corrected weights (quantized + low-rank term) instead.
    After,
}

/// Which quantizer family to attach to each linear layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantMethod {
    /// Plain round-to-nearest; nothing trainable in the quantizer itself.
    Rtn,
    /// Range gates trained through the straight-through estimator.
    LearnableClip,
    /// Two-term binary decomposition with trainable magnitudes.
    DualBinary,
    /// Sign matrix with token-routed scales.
    Mos,
}

// Command-line names for the three enums, kept identical to their
// configuration-file spellings.

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Variant> {
        match s {
            "none" => Ok(Variant::None),
            "naive" => Ok(Variant::Naive),
            "saliency" => Ok(Variant::Saliency),
            _ => Err(Error::config(format!(
                "unknown variant '{s}' (expected none, naive, or saliency)"
            ))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::None => "none",
            Variant::Naive => "naive",
            Variant::Saliency => "saliency",
        })
    }
}

impl std::str::FromStr for LoraPosition {
    type Err = Error;
    fn from_str(s: &str) -> Result<LoraPosition> {
        match s {
            "before" => Ok(LoraPosition::Before),
            "after" => Ok(LoraPosition::After),
            _ => Err(Error::config(format!(
                "unknown position '{s}' (expected before or after)"
            ))),
        }
    }
}

impl std::fmt::Display for LoraPosition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LoraPosition::Before => "before",
            LoraPosition::After => "after",
        })
    }
}

impl std::str::FromStr for QuantMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<QuantMethod> {
        match s {
            "rtn" => Ok(QuantMethod::Rtn),
            "learnable_clip" => Ok(QuantMethod::LearnableClip),
            "dual_binary" => Ok(QuantMethod::DualBinary),
            "mos" => Ok(QuantMethod::Mos),
            _ => Err(Error::config(format!(
                "unknown quantizer '{s}' (expected rtn, learnable_clip, dual_binary, or mos)"
            ))),
        }
    }
}

impl std::fmt::Display for QuantMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            QuantMethod::Rtn => "rtn",
            QuantMethod::LearnableClip => "learnable_clip",
            QuantMethod::DualBinary => "dual_binary",
            QuantMethod::Mos => "mos",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationConfig {
    pub quantizer: QuantMethod,
    pub bits: u8,
    pub group: GroupSize,
    /// 0 disables the low-rank correction.
    pub lora_rank: usize,
    pub variant: Variant,
    pub lora_position: LoraPosition,
    /// Regularizer coefficient at block 0.
    pub lambda0: f64,
    /// Per-block growth: block k trains under `lambda0 * multiplier^k`.
    pub multiplier: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_quant: f64,
    pub lr_lora: f64,
    pub weight_decay: f64,
    /// Number of calibration sequences drawn from the training split.
    pub samples: usize,
    pub seq_len: usize,
    pub seed: u64,
    /// Expert count for the mixture-of-scales quantizer.
    pub mos_experts: usize,
}

impl Default for CalibrationConfig {
    fn default() -> CalibrationConfig {
        CalibrationConfig {
            quantizer: QuantMethod::LearnableClip,
            bits: 2,
            group: GroupSize::Of(64),
            lora_rank: 4,
            variant: Variant::None,
            lora_position: LoraPosition::Before,
            lambda0: 0.0,
            multiplier: 1.0,
            epochs: 20,
            batch_size: 1,
            lr_quant: 5e-3,
            lr_lora: 5e-4,
            weight_decay: 0.1,
            samples: 128,
            seq_len: 128,
            seed: 0,
            mos_experts: 4,
        }
    }
}

impl CalibrationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda0 >= 0.0 && self.lambda0.is_finite()) {
            return Err(Error::config(format!(
                "initial coefficient must be finite and non-negative, got {}",
                self.lambda0
            )));
        }
        if !(self.multiplier > 0.0 && self.multiplier.is_finite()) {
            return Err(Error::config(format!(
                "coefficient multiplier must be finite and positive, got {}",
                self.multiplier
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.samples == 0 || self.seq_len == 0 {
            return Err(Error::config(
                "epochs, batch size, samples, and sequence length must all be positive",
            ));
        }
        if self.quantizer == QuantMethod::Mos && self.mos_experts == 0 {
            return Err(Error::config("the mixture quantizer needs at least one expert"));
        }
        Ok(())
    }
}

/// The regularizer coefficient for block `k`: `lambda0 * multiplier^k`.
pub fn coefficient_schedule(lambda0: f64, multiplier: f64, k: usize) -> f64 {
    lambda0 * multiplier.powi(k as i32)
}

/// One CSV row: per-epoch means of the block's step losses.
/// `reg_loss` is the unscaled penalty sum; multiply by `lambda` for its
/// contribution to the training loss.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow {
    pub block: usize,
    pub epoch: usize,
    pub output_loss: f64,
    pub reg_loss: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockSummary {
    pub block: usize,
    pub lambda: f64,
    pub rolled_back: bool,
    pub epochs_run: usize,
    /// Median per-step output loss over the first / last completed epoch.
    pub first_epoch_median: Option<f64>,
    pub last_epoch_median: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationReport {
    pub rows: Vec<TraceRow>,
    pub blocks: Vec<BlockSummary>,
    /// Wall-clock seconds. Deliberately left out of [`Self::summary_json`]
    /// so reports from identical runs stay byte-comparable.
    pub wall_seconds: f64,
}

impl CalibrationReport {
    /// Per-epoch trace as CSV.
    pub fn csv(&self) -> String {
        let mut out = String::from("block,epoch,output_loss,reg_loss,lambda\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.block, r.epoch, r.output_loss, r.reg_loss, r.lambda
            ));
        }
        out
    }

    /// JSON summary: configuration echo plus per-block outcomes. Excludes
    /// wall time, which lives in a separate timing file.
    pub fn summary_json(&self, cfg: &CalibrationConfig) -> String {
        #[derive(Serialize)]
        struct Summary<'a> {
            config: &'a CalibrationConfig,
            blocks: &'a [BlockSummary],
        }
        serde_json::to_string_pretty(&Summary { config: cfg, blocks: &self.blocks })
            .expect("summary serializes")
    }
}

/// Attach freshly initialized quantizer forms (and low-rank corrections)
/// to every linear of block `k`, replacing whatever was there.
///
/// Fully deterministic in `(weights, cfg, k)`: calling it again restores
/// the exact initial state, which is what divergence rollback relies on.
pub fn attach_block_quantizers<T: Scalar>(
    model: &mut ToyTransformer<T>,
    k: usize,
    cfg: &CalibrationConfig,
) -> Result<()> {
    let mut mos_rng = Rng::stream(cfg.seed, &format!("calib-mos-{k}"));
    let block = &mut model.blocks[k];
    for lin in block.linears_mut() {
        let w = lin.weight.to_vec();
        let shape = lin.weight.shape().to_vec();
        lin.form = match cfg.quantizer {
            QuantMethod::Rtn => {
                let spec = QuantSpec::fit_rtn(&w, &shape, cfg.bits, cfg.group)?;
                let dq = spec.dequantize(&spec.quantize(&w));
                WeightForm::Static { dequantized: Tensor::leaf(&shape, dq, false) }
            }
            QuantMethod::LearnableClip => {
                WeightForm::Learnable(LearnableClip::new(&w, &shape, cfg.bits, cfg.group)?)
            }
            QuantMethod::DualBinary => {
                let layout = GroupLayout::resolve(&shape, cfg.group)?;
                WeightForm::DualBinary(DualBinaryParams::from_fit(&dual_binarize(&w, layout)))
            }
            QuantMethod::Mos => {
                let mos = MixtureOfScales::new(&w, &shape, cfg.mos_experts, &mut mos_rng);
                let signs = Tensor::leaf(&shape, sign_weights(&w), false);
                WeightForm::Mos { mos, signs }
            }
        };
        lin.lora = if cfg.lora_rank > 0 {
            let proxy = static_proxy(&lin.form, &w, &shape);
            let resid: Vec<f64> =
                w.iter().zip(&proxy).map(|(a, b)| a.as_f64() - b.as_f64()).collect();
            Some(LoraPair::from_residual(&resid, shape[0], shape[1], cfg.lora_rank))
        } else {
            None
        };
    }
    Ok(())
}

/// Attach quantizers to every block without training them — the
/// "quantize only" pipeline stage.
pub fn attach_quantizers<T: Scalar>(
    model: &mut ToyTransformer<T>,
    cfg: &CalibrationConfig,
) -> Result<()> {
    for k in 0..model.blocks.len() {
        attach_block_quantizers(model, k, cfg)?;
    }
    Ok(())
}

/// A static stand-in for the quantized weight, used to seed the low-rank
/// correction from the reconstruction residual. For the mixture form
/// (whose scales are token-dependent) this uses the expert average.
fn static_proxy<T: Scalar>(form: &WeightForm<T>, w: &[T], shape: &[usize]) -> Vec<T> {
    match form {
        WeightForm::Dense => w.to_vec(),
        WeightForm::Static { dequantized } => dequantized.to_vec(),
        WeightForm::Learnable(clip) => {
            let (spec, codes) = clip.bake(w);
            spec.dequantize(&codes)
        }
        WeightForm::DualBinary(p) => {
            let fit = p.bake();
            let mut out = Vec::with_capacity(fit.layout.total());
            for g in &fit.groups {
                out.extend(g.reconstruct());
            }
            out
        }
        WeightForm::Mos { mos, signs } => {
            let (k, out_dim) = (mos.experts.shape()[0], mos.experts.shape()[1]);
            let experts = mos.experts.to_vec();
            let inv_k = T::lit(1.0 / k as f64);
            let mean_scale: Vec<T> = (0..out_dim)
                .map(|o| {
                    let mut acc = T::zero();
                    for e in 0..k {
                        acc = acc + experts[e * out_dim + o];
                    }
                    acc * inv_k
                })
                .collect();
            let signs = signs.to_vec();
            let inp = shape[1];
            signs
                .iter()
                .enumerate()
                .map(|(i, &s)| s * mean_scale[i / inp])
                .collect()
        }
    }
}

/// Per-layer regularizer weights for one block, keyed by layer name.
fn build_alphas<T: Scalar>(
    block: &Block<T>,
    cfg: &CalibrationConfig,
    saliency: Option<&SaliencyMap<T>>,
) -> Result<BTreeMap<String, Tensor<T>>> {
    let mut out = BTreeMap::new();
    if cfg.variant == Variant::None {
        return Ok(out);
    }
    for lin in block.linears() {
        let shape = lin.weight.shape();
        let numel = lin.weight.numel();
        let alpha = match cfg.variant {
            Variant::None => unreachable!(),
            Variant::Naive => Tensor::leaf(shape, vec![T::one(); numel], false),
            Variant::Saliency => {
                let map = saliency.expect("checked by calibrate_model");
                let values = map.get(&lin.name).ok_or_else(|| {
                    Error::data(format!(
                        "sensitivity map has no entry for layer '{}' — was it computed for this model?",
                        lin.name
                    ))
                })?;
                if values.len() != numel {
                    return Err(Error::data(format!(
                        "sensitivity entry for '{}' has {} values, the layer has {}",
                        lin.name,
                        values.len(),
                        numel
                    )));
                }
                Tensor::leaf(shape, values.to_vec(), false)
            }
        };
        out.insert(lin.name.clone(), alpha);
    }
    Ok(out)
}

/// Joint training loss for one calibration step of one block.
///
/// Returns the traced loss plus the plain values of its two parts:
/// the per-element mean squared output error between the full-precision
/// reference `target` and the quantized block's output on `xq`, and the
/// unscaled penalty sum (0 when the regularizer is off). The penalty pulls
/// each layer's reconstruction — the bare quantized weights, or the
/// corrected ones under [`LoraPosition::After`] — toward the frozen
/// originals. Layers with no static reconstruction (the mixture form)
/// contribute no penalty.
pub fn block_loss<T: Scalar>(
    block: &Block<T>,
    xq: &Tensor<T>,
    mask: &Tensor<T>,
    target: &Tensor<T>,
    lambda: f64,
    cfg: &CalibrationConfig,
    alphas: &BTreeMap<String, Tensor<T>>,
) -> (Tensor<T>, f64, f64) {
    let y = block.forward(xq, mask);
    let output = y.sub(target).square().mean();
    let output_value = output.item().as_f64();
    // With the regularizer off — by variant or because lambda is zero —
    // the penalty graph is not built at all, so `variant: none` and
    // `lambda0: 0` take literally the same instruction path.
    if cfg.variant == Variant::None || lambda == 0.0 {
        return (output, output_value, 0.0);
    }
    let mut reg: Option<Tensor<T>> = None;
    for lin in block.linears() {
        let Some(mut reconstruction) = lin.quantized_weight() else { continue };
        if cfg.lora_position == LoraPosition::After {
            if let Some(lora) = &lin.lora {
                reconstruction = reconstruction.add(&lora.matrix());
            }
        }
        let alpha = alphas.get(&lin.name).expect("alphas cover every linear");
        let p = saliency_penalty(&reconstruction, &lin.weight, alpha);
        reg = Some(match reg {
            Some(r) => r.add(&p),
            None => p,
        });
    }
    match reg {
        Some(r) => {
            let reg_value = r.item().as_f64();
            let loss = output.add(&r.scale(T::lit(lambda)));
            (loss, output_value, reg_value)
        }
        None => (output, output_value, 0.0),
    }
}

fn median(values: &mut Vec<f64>) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(|a, b| a.total_cmp(b));
    Some(values[values.len() / 2])
}

/// Calibrate every block of `model` in place, lower blocks first.
///
/// The model must carry its pretrained full-precision weights; quantizer
/// forms are attached here. On return each block holds its trained forms
/// (or its rolled-back initialization, flagged in the report).
pub fn calibrate_model<T: Scalar>(
    model: &mut ToyTransformer<T>,
    dataset: &TextDataset,
    saliency: Option<&SaliencyMap<T>>,
    cfg: &CalibrationConfig,
) -> Result<CalibrationReport> {
    cfg.validate()?;
    if cfg.variant == Variant::Saliency && saliency.is_none() {
        return Err(Error::config(
            "variant 'saliency' needs a sensitivity map; compute one first",
        ));
    }
    let started = std::time::Instant::now();
    // Frozen-weight contract: nothing in the original model trains.
    model.set_trainable(false);

    // Draw the calibration set once and embed it into minibatches.
    let mut data_rng = Rng::stream(cfg.seed, "calib-data");
    let batch = dataset.sample_batch_with(cfg.samples, cfg.seq_len, &mut data_rng)?;
    let t = cfg.seq_len;
    let mask = causal_mask::<T>(t);
    let mut minibatches: Vec<Tensor<T>> = Vec::new();
    let mut row = 0;
    while row < cfg.samples {
        let n = cfg.batch_size.min(cfg.samples - row);
        let ids = &batch.inputs[row * t..(row + n) * t];
        minibatches.push(model.embed(ids, n, t).detach());
        row += n;
    }

    // Full-precision inputs to every block (and the final output), cached
    // before any quantizer is attached. fp[k][i] feeds block k; fp[k+1][i]
    // is its training target.
    let nb = model.blocks.len();
    let mut fp: Vec<Vec<Tensor<T>>> = Vec::with_capacity(nb + 1);
    fp.push(minibatches);
    for k in 0..nb {
        let next = fp[k].iter().map(|x| model.blocks[k].forward(x, &mask).detach()).collect();
        fp.push(next);
    }

    // The quantized path starts from the same embeddings (the embedding
    // table is not quantized) and is re-derived after each block trains.
    let mut xq: Vec<Tensor<T>> = fp[0].clone();
    let steps_per_epoch = xq.len();

    let mut rows = Vec::new();
    let mut blocks = Vec::new();
    for k in 0..nb {
        // With no regularizer there is no coefficient: report (and train
        // with) zero, so disabling the term by variant or by coefficient
        // produces bit-identical traces.
        let lambda = match cfg.variant {
            Variant::None => 0.0,
            _ => coefficient_schedule(cfg.lambda0, cfg.multiplier, k),
        };
        attach_block_quantizers(model, k, cfg)?;
        let alphas = build_alphas(&model.blocks[k], cfg, saliency)?;

        let quant_params: Vec<Tensor<T>> =
            model.blocks[k].linears().iter().flat_map(|l| l.quant_params()).collect();
        let lora_params: Vec<Tensor<T>> =
            model.blocks[k].linears().iter().flat_map(|l| l.lora_params()).collect();
        let mut opt = AdamW::new(vec![
            ParamGroup::new("quant", quant_params, T::lit(cfg.lr_quant), T::lit(cfg.weight_decay)),
            ParamGroup::new("lora", lora_params, T::lit(cfg.lr_lora), T::lit(cfg.weight_decay)),
        ]);

        let mut rolled_back = false;
        let mut first_median = None;
        let mut last_median = None;
        let mut epochs_run = 0;
        'epochs: for epoch in 0..cfg.epochs {
            let mut step_losses = Vec::with_capacity(steps_per_epoch);
            let mut reg_sum = 0.0;
            for (i, x) in xq.iter().enumerate() {
                let target = &fp[k + 1][i];
                let (loss, output_value, reg_value) =
                    block_loss(&model.blocks[k], x, &mask, target, lambda, cfg, &alphas);
                let loss_value = loss.item().as_f64();
                if !loss_value.is_finite() || loss_value > DIVERGENCE_LIMIT {
                    // Restore the block to its exact initialization and
                    // stop training it; the pipeline continues with the
                    // uncalibrated (but sane) quantizers.
                    attach_block_quantizers(model, k, cfg)?;
                    rolled_back = true;
                    break 'epochs;
                }
                opt.zero_grads();
                loss.backward();
                opt.step();
                step_losses.push(output_value);
                reg_sum += reg_value;
            }
            let n = step_losses.len() as f64;
            rows.push(TraceRow {
                block: k,
                epoch,
                output_loss: step_losses.iter().sum::<f64>() / n,
                reg_loss: reg_sum / n,
                lambda,
            });
            epochs_run += 1;
            let m = median(&mut step_losses);
            if epoch == 0 {
                first_median = m;
            }
            last_median = m;
        }
        blocks.push(BlockSummary {
            block: k,
            lambda,
            rolled_back,
            epochs_run,
            first_epoch_median: first_median,
            last_epoch_median: last_median,
        });

        // Sequential-error contract: the next block sees activations
        // produced by the block as it will actually run.
        if k + 1 < nb {
            xq = xq.iter().map(|x| model.blocks[k].forward(x, &mask).detach()).collect();
        }
    }

    Ok(CalibrationReport { rows, blocks, wall_seconds: started.elapsed().as_secs_f64() })
}
