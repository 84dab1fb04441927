//! Desk-scale decoder-only transformer for character-level modeling.
//!
//! Pre-norm blocks in the LLaMA style — RMS-normalized causal attention
//! and a SiLU MLP, no biases anywhere — with learned absolute position
//! embeddings and an untied output head. Every per-block linear layer is a
//! [`QuantizedLinear`], which runs dense until a quantizer is attached and
//! can carry a low-rank correction; the embedding, head, and norms stay in
//! full precision throughout.
//!
//! Weight names are stable and flat (`blocks.0.attn_q`, `final_norm`, …):
//! they key saliency maps, checkpoint records, and calibration reports, so
//! they are part of the on-disk contract, not just debug labels.

use crate::data::{Batch, TextDataset};
use crate::error::{Error, Result};
use crate::lora::LoraPair;
use crate::optim::{AdamW, ParamGroup};
use crate::quant::dual::DualBinaryParams;
use crate::quant::learnable::LearnableClip;
use crate::quant::mos::MixtureOfScales;
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

/// RMS-norm stabilizer.
pub const RMS_EPS: f64 = 1e-5;
/// Standard deviation of the Gaussian weight init. Small enough that the
/// untrained model's logits are near-uniform.
pub const INIT_STD: f64 = 0.02;
/// Additive mask for future positions; large and finite rather than -inf
/// so masked scores never poison the softmax with NaNs.
pub const MASK_VALUE: f64 = -1e30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub d_mlp: usize,
    /// Longest sequence the position table covers.
    pub max_seq: usize,
}

impl ModelConfig {
    /// The reference desk-scale configuration used by the seeded pipeline.
    pub fn toy(vocab: usize) -> ModelConfig {
        ModelConfig { vocab, d_model: 64, n_heads: 4, n_blocks: 2, d_mlp: 256, max_seq: 128 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 {
            return Err(Error::config(format!("vocab must be at least 2, got {}", self.vocab)));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.n_blocks == 0 || self.d_mlp == 0 {
            return Err(Error::config("model dimensions must be positive"));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_seq == 0 {
            return Err(Error::config("max_seq must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// How a [`QuantizedLinear`] realizes its weight at forward time.
#[derive(Debug, Clone)]
pub enum WeightForm<T: Scalar> {
    /// Original full-precision weight; the disabled-quantizer path.
    Dense,
    /// A fixed reconstruction (e.g. plain round-to-nearest), no trainables.
    Static { dequantized: Tensor<T> },
    /// Gated-range fake quantization, gammas trainable.
    Learnable(LearnableClip<T>),
    /// Two-term binary decomposition, magnitudes trainable.
    DualBinary(DualBinaryParams<T>),
    /// Sign matrix with token-routed per-channel scales, router and
    /// experts trainable.
    Mos { mos: MixtureOfScales<T>, signs: Tensor<T> },
}

/// A bias-free linear layer whose weight can be swapped for a quantized
/// reconstruction, plus an optional low-rank correction.
#[derive(Debug, Clone)]
pub struct QuantizedLinear<T: Scalar> {
    pub name: String,
    /// Original `[out, in]` weight. Frozen during calibration; the
    /// quantizer forms reconstruct it, they never modify it.
    pub weight: Tensor<T>,
    pub form: WeightForm<T>,
    pub lora: Option<LoraPair<T>>,
}

impl<T: Scalar> QuantizedLinear<T> {
    pub fn dense(name: impl Into<String>, weight: Tensor<T>) -> QuantizedLinear<T> {
        assert_eq!(weight.rank(), 2, "linear weight must be rank 2");
        QuantizedLinear { name: name.into(), weight, form: WeightForm::Dense, lora: None }
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }

    /// `x · Wᵀ` under the current weight form, plus the correction.
    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let base = match &self.form {
            WeightForm::Dense => x.linear(&self.weight),
            WeightForm::Static { dequantized } => x.linear(dequantized),
            WeightForm::Learnable(clip) => x.linear(&clip.fake_quant(&self.weight)),
            WeightForm::DualBinary(p) => x.linear(&p.weight(self.weight.shape())),
            WeightForm::Mos { mos, signs } => x.linear(signs).mul(&mos.scales(x)),
        };
        match &self.lora {
            Some(l) => base.add(&l.apply(x)),
            None => base,
        }
    }

    /// The traced quantized weight Q̂, for penalty targets and reports.
    /// The mixture-of-scales form has no static weight matrix (its scales
    /// are token-dependent), so it yields nothing.
    pub fn quantized_weight(&self) -> Option<Tensor<T>> {
        match &self.form {
            WeightForm::Dense => None,
            WeightForm::Static { dequantized } => Some(dequantized.clone()),
            WeightForm::Learnable(clip) => Some(clip.fake_quant(&self.weight)),
            WeightForm::DualBinary(p) => Some(p.weight(self.weight.shape())),
            WeightForm::Mos { .. } => None,
        }
    }

    /// Trainable quantizer parameters (clipping gates, magnitudes, router
    /// and experts), if the current form has any.
    pub fn quant_params(&self) -> Vec<Tensor<T>> {
        match &self.form {
            WeightForm::Dense | WeightForm::Static { .. } => Vec::new(),
            WeightForm::Learnable(clip) => clip.params(),
            WeightForm::DualBinary(p) => p.params(),
            WeightForm::Mos { mos, .. } => mos.params(),
        }
    }

    pub fn lora_params(&self) -> Vec<Tensor<T>> {
        self.lora.as_ref().map(|l| l.params()).unwrap_or_default()
    }
}

/// One pre-norm transformer block.
#[derive(Debug, Clone)]
pub struct Block<T: Scalar> {
    pub attn_norm: Tensor<T>,
    pub mlp_norm: Tensor<T>,
    pub attn_q: QuantizedLinear<T>,
    pub attn_k: QuantizedLinear<T>,
    pub attn_v: QuantizedLinear<T>,
    pub attn_o: QuantizedLinear<T>,
    pub mlp_up: QuantizedLinear<T>,
    pub mlp_down: QuantizedLinear<T>,
    n_heads: usize,
}

impl<T: Scalar> Block<T> {
    /// `x` is `[batch, seq, d_model]`; `mask` is the `[seq, seq]` causal
    /// mask from [`causal_mask`].
    pub fn forward(&self, x: &Tensor<T>, mask: &Tensor<T>) -> Tensor<T> {
        let h = x.add(&self.attention(&x.rms_norm(&self.attn_norm, T::lit(RMS_EPS)), mask));
        let m = self.mlp(&h.rms_norm(&self.mlp_norm, T::lit(RMS_EPS)));
        h.add(&m)
    }

    fn attention(&self, x: &Tensor<T>, mask: &Tensor<T>) -> Tensor<T> {
        let (b, t, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let heads = self.n_heads;
        let hd = d / heads;
        let split = |y: Tensor<T>| y.reshape(&[b, t, heads, hd]).permute(&[0, 2, 1, 3]);
        let q = split(self.attn_q.forward(x));
        let k = split(self.attn_k.forward(x));
        let v = split(self.attn_v.forward(x));
        let scores = q
            .matmul(&k.permute(&[0, 1, 3, 2]))
            .scale(T::lit(1.0 / (hd as f64).sqrt()))
            .add(mask);
        let ctx = scores.softmax().matmul(&v);
        let merged = ctx.permute(&[0, 2, 1, 3]).reshape(&[b, t, d]);
        self.attn_o.forward(&merged)
    }

    fn mlp(&self, x: &Tensor<T>) -> Tensor<T> {
        self.mlp_down.forward(&self.mlp_up.forward(x).silu())
    }

    pub fn linears(&self) -> [&QuantizedLinear<T>; 6] {
        [&self.attn_q, &self.attn_k, &self.attn_v, &self.attn_o, &self.mlp_up, &self.mlp_down]
    }

    pub fn linears_mut(&mut self) -> [&mut QuantizedLinear<T>; 6] {
        [
            &mut self.attn_q,
            &mut self.attn_k,
            &mut self.attn_v,
            &mut self.attn_o,
            &mut self.mlp_up,
            &mut self.mlp_down,
        ]
    }
}

/// `[t, t]` additive mask: 0 at and below the diagonal, [`MASK_VALUE`]
/// strictly above it.
pub fn causal_mask<T: Scalar>(t: usize) -> Tensor<T> {
    let mut m = vec![T::zero(); t * t];
    for i in 0..t {
        for j in (i + 1)..t {
            m[i * t + j] = T::lit(MASK_VALUE);
        }
    }
    Tensor::leaf(&[t, t], m, false)
}

#[derive(Debug, Clone)]
pub struct ToyTransformer<T: Scalar> {
    pub cfg: ModelConfig,
    /// `[vocab, d_model]` token table.
    pub tok_embed: Tensor<T>,
    /// `[max_seq, d_model]` learned absolute positions.
    pub pos_embed: Tensor<T>,
    pub blocks: Vec<Block<T>>,
    pub final_norm: Tensor<T>,
    /// `[vocab, d_model]` output head (untied from the token table).
    pub head: Tensor<T>,
}

impl<T: Scalar> ToyTransformer<T> {
    /// Fresh model, weights `N(0, INIT_STD²)`, norm gains 1.
    pub fn init(cfg: ModelConfig, rng: &mut Rng) -> Result<ToyTransformer<T>> {
        cfg.validate()?;
        let mut normal = |shape: &[usize]| -> Tensor<T> {
            let n: usize = shape.iter().product();
            let data: Vec<T> = (0..n).map(|_| T::lit(rng.normal() * INIT_STD)).collect();
            Tensor::leaf(shape, data, true)
        };
        let mut linear = |name: String, out: usize, inp: usize| -> QuantizedLinear<T> {
            QuantizedLinear::dense(name, normal(&[out, inp]))
        };
        let d = cfg.d_model;
        let blocks = (0..cfg.n_blocks)
            .map(|i| Block {
                attn_norm: Tensor::leaf(&[d], vec![T::one(); d], true),
                mlp_norm: Tensor::leaf(&[d], vec![T::one(); d], true),
                attn_q: linear(format!("blocks.{i}.attn_q"), d, d),
                attn_k: linear(format!("blocks.{i}.attn_k"), d, d),
                attn_v: linear(format!("blocks.{i}.attn_v"), d, d),
                attn_o: linear(format!("blocks.{i}.attn_o"), d, d),
                mlp_up: linear(format!("blocks.{i}.mlp_up"), cfg.d_mlp, d),
                mlp_down: linear(format!("blocks.{i}.mlp_down"), d, cfg.d_mlp),
                n_heads: cfg.n_heads,
            })
            .collect();
        Ok(ToyTransformer {
            cfg,
            tok_embed: normal(&[cfg.vocab, d]),
            pos_embed: normal(&[cfg.max_seq, d]),
            blocks,
            final_norm: Tensor::leaf(&[d], vec![T::one(); d], true),
            head: normal(&[cfg.vocab, d]),
        })
    }

    /// Rebuild a model from stored tensors. `fetch` receives each stable
    /// parameter name with its expected shape and must return a matching
    /// tensor; shape mismatches are the fetcher's to report.
    pub fn from_named(
        cfg: ModelConfig,
        mut fetch: impl FnMut(&str, &[usize]) -> Result<Tensor<T>>,
    ) -> Result<ToyTransformer<T>> {
        cfg.validate()?;
        let d = cfg.d_model;
        let mut blocks = Vec::with_capacity(cfg.n_blocks);
        for i in 0..cfg.n_blocks {
            let mut lin = |name: String, out: usize, inp: usize| -> Result<QuantizedLinear<T>> {
                Ok(QuantizedLinear::dense(name.clone(), fetch(&name, &[out, inp])?))
            };
            let attn_q = lin(format!("blocks.{i}.attn_q"), d, d)?;
            let attn_k = lin(format!("blocks.{i}.attn_k"), d, d)?;
            let attn_v = lin(format!("blocks.{i}.attn_v"), d, d)?;
            let attn_o = lin(format!("blocks.{i}.attn_o"), d, d)?;
            let mlp_up = lin(format!("blocks.{i}.mlp_up"), cfg.d_mlp, d)?;
            let mlp_down = lin(format!("blocks.{i}.mlp_down"), d, cfg.d_mlp)?;
            blocks.push(Block {
                attn_norm: fetch(&format!("blocks.{i}.attn_norm"), &[d])?,
                mlp_norm: fetch(&format!("blocks.{i}.mlp_norm"), &[d])?,
                attn_q,
                attn_k,
                attn_v,
                attn_o,
                mlp_up,
                mlp_down,
                n_heads: cfg.n_heads,
            });
        }
        Ok(ToyTransformer {
            cfg,
            tok_embed: fetch("tok_embed", &[cfg.vocab, d])?,
            pos_embed: fetch("pos_embed", &[cfg.max_seq, d])?,
            blocks,
            final_norm: fetch("final_norm", &[d])?,
            head: fetch("head", &[cfg.vocab, d])?,
        })
    }

    /// Token + position embeddings for a `[b, t]` id batch — the input to
    /// block 0, exposed so calibration can cache it.
    pub fn embed(&self, ids: &[u32], b: usize, t: usize) -> Tensor<T> {
        assert_eq!(ids.len(), b * t, "embed: {} ids for shape [{b}, {t}]", ids.len());
        assert!(
            t <= self.cfg.max_seq,
            "sequence length {t} exceeds the position table ({})",
            self.cfg.max_seq
        );
        let tok_ids: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let pos_ids: Vec<usize> = (0..t).collect();
        let tok = self.tok_embed.embedding(&tok_ids, &[b, t]);
        let pos = self.pos_embed.embedding(&pos_ids, &[t]);
        tok.add(&pos)
    }

    /// Logits `[b, t, vocab]` for a flat `[b, t]` id batch.
    pub fn forward_ids(&self, ids: &[u32], b: usize, t: usize) -> Tensor<T> {
        let mut x = self.embed(ids, b, t);
        let mask = causal_mask::<T>(t);
        for block in &self.blocks {
            x = block.forward(&x, &mask);
        }
        x.rms_norm(&self.final_norm, T::lit(RMS_EPS)).linear(&self.head)
    }

    /// Mean cross-entropy of next-token prediction over a batch.
    pub fn loss_on(&self, batch: &Batch) -> Tensor<T> {
        let (n, t) = batch.shape();
        let logits = self.forward_ids(&batch.inputs, n, t).reshape(&[n * t, self.cfg.vocab]);
        let targets: Vec<usize> = batch.targets.iter().map(|&v| v as usize).collect();
        logits.cross_entropy(&targets)
    }

    /// Every full-precision leaf, in a fixed order, under its stable name.
    pub fn named_params(&self) -> Vec<(String, Tensor<T>)> {
        let mut out: Vec<(String, Tensor<T>)> = vec![
            ("tok_embed".into(), self.tok_embed.clone()),
            ("pos_embed".into(), self.pos_embed.clone()),
        ];
        for (i, blk) in self.blocks.iter().enumerate() {
            out.push((format!("blocks.{i}.attn_norm"), blk.attn_norm.clone()));
            out.push((format!("blocks.{i}.mlp_norm"), blk.mlp_norm.clone()));
            for lin in blk.linears() {
                out.push((lin.name.clone(), lin.weight.clone()));
            }
        }
        out.push(("final_norm".into(), self.final_norm.clone()));
        out.push(("head".into(), self.head.clone()));
        out
    }

    /// The layers eligible for quantization: the six linears of each block.
    /// Embeddings, norms, and the head stay dense.
    pub fn quantizable_names(&self) -> Vec<String> {
        self.blocks
            .iter()
            .flat_map(|b| b.linears().map(|l| l.name.clone()))
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.numel()).sum()
    }

    /// Flip gradient tracking on every full-precision leaf. Calibration
    /// freezes them; pretraining and saliency extraction need them live.
    pub fn set_trainable(&self, trainable: bool) {
        for (_, p) in self.named_params() {
            p.set_requires_grad(trainable);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 2000,
            batch_size: 16,
            seq_len: 64,
            lr: 1e-3,
            weight_decay: 0.01,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct PretrainReport {
    pub steps_run: usize,
    pub final_train_loss: f64,
    pub valid_nll: f64,
}

/// Train the full-precision model in place.
///
/// All randomness (batch sampling) comes from the `pretrain` stream of the
/// config's seed, so the same seed replays bit-identically. A non-finite
/// training loss aborts with the step index in the error.
pub fn pretrain<T: Scalar>(
    model: &ToyTransformer<T>,
    dataset: &TextDataset,
    cfg: &PretrainConfig,
) -> Result<PretrainReport> {
    assert!(cfg.seq_len <= model.cfg.max_seq, "seq_len exceeds the model's position table");
    let mut rng = Rng::stream(cfg.seed, "pretrain");
    model.set_trainable(true);
    let params: Vec<Tensor<T>> = model.named_params().into_iter().map(|(_, p)| p).collect();
    let mut opt = AdamW::new(vec![ParamGroup::new(
        "all",
        params,
        T::lit(cfg.lr),
        T::lit(cfg.weight_decay),
    )]);

    let mut last_loss = f64::NAN;
    for step in 0..cfg.steps {
        let batch = dataset.sample_batch_with(cfg.batch_size, cfg.seq_len, &mut rng)?;
        let loss = model.loss_on(&batch);
        last_loss = loss.item().as_f64();
        if !last_loss.is_finite() {
            return Err(Error::Diverged {
                detail: format!("pretraining loss became {last_loss} at step {step}"),
            });
        }
        opt.zero_grads();
        loss.backward();
        opt.step();
    }

    let valid_nll = held_out_nll(model, dataset.valid_tokens(), cfg.seq_len);
    Ok(PretrainReport { steps_run: cfg.steps, final_train_loss: last_loss, valid_nll })
}

/// Mean next-token NLL over non-overlapping windows of a token stream —
/// a quick training-time diagnostic (the evaluator owns the full report).
pub fn held_out_nll<T: Scalar>(model: &ToyTransformer<T>, tokens: &[u32], seq_len: usize) -> f64 {
    let mut total = 0.0f64;
    let mut count = 0usize;
    let mut start = 0;
    while start + 1 < tokens.len() {
        let t = seq_len.min(tokens.len() - 1 - start);
        let window = &tokens[start..start + t];
        let targets: Vec<usize> = tokens[start + 1..start + t + 1].iter().map(|&v| v as usize).collect();
        let logits = model.forward_ids(window, 1, t).reshape(&[t, model.cfg.vocab]);
        let mean_nll = logits.cross_entropy(&targets).item().as_f64();
        total += mean_nll * t as f64;
        count += t;
        start += t;
    }
    assert!(count > 0, "held_out_nll: stream too short");
    total / count as f64
}
