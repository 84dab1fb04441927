//! Squared-gradient weight importance and the preservation penalty.
//!
//! A weight's saliency is the mean over calibration samples of its squared
//! loss gradient, taken one sample at a time so large per-sample gradients
//! are not averaged away before squaring. Each map is normalized to mean 1
//! per tensor, which makes the downstream penalty weight λ comparable
//! across matrices of different size and gradient scale — and makes the
//! map invariant to any constant rescaling of the loss.
//!
//! During calibration the map weights a quadratic pull toward a reference
//! tensor: `Σ saliency ⊙ (w - target)²`. High-saliency weights are held
//! near the reference while low-saliency ones stay free to absorb
//! quantization error.

use crate::data::{Batch, TextDataset};
use crate::error::{Error, Result};
use crate::model::ToyTransformer;
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

/// Per-tensor saliency maps in a fixed, insertion-ordered layout.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap<T: Scalar> {
    entries: Vec<(String, Vec<T>)>,
    /// Samples whose loss or gradients were non-finite and were skipped.
    pub dropped_samples: usize,
    /// Samples that contributed to the average.
    pub samples_used: usize,
}

impl<T: Scalar> SaliencyMap<T> {
    pub fn new(entries: Vec<(String, Vec<T>)>, dropped: usize, used: usize) -> SaliencyMap<T> {
        SaliencyMap { entries, dropped_samples: dropped, samples_used: used }
    }

    pub fn get(&self, name: &str) -> Option<&[T]> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_slice())
    }

    pub fn entries(&self) -> &[(String, Vec<T>)] {
        &self.entries
    }

    pub fn into_entries(self) -> Vec<(String, Vec<T>)> {
        self.entries
    }
}

/// Average squared per-sample gradients of `params` and normalize each
/// tensor's map to mean 1.
///
/// `loss_for_sample(i)` must build a scalar loss for sample `i` over the
/// given parameter leaves (all of which must be trainable, or their map
/// would be silently empty). Samples with a non-finite loss or any
/// non-finite gradient are dropped and counted; if every sample drops,
/// that is an error rather than an all-zero map.
pub fn compute_saliency<T: Scalar>(
    params: &[(String, Tensor<T>)],
    num_samples: usize,
    mut loss_for_sample: impl FnMut(usize) -> Tensor<T>,
) -> Result<SaliencyMap<T>> {
    assert!(num_samples > 0, "saliency needs at least one sample");
    for (name, p) in params {
        assert!(p.requires_grad(), "saliency parameter {name:?} is frozen");
    }

    let mut acc: Vec<Vec<f64>> = params.iter().map(|(_, p)| vec![0.0; p.numel()]).collect();
    let mut dropped = 0usize;
    let mut used = 0usize;

    for i in 0..num_samples {
        for (_, p) in params {
            p.zero_grad();
        }
        let loss = loss_for_sample(i);
        if !loss.item().as_f64().is_finite() {
            dropped += 1;
            continue;
        }
        loss.backward();

        let grads: Vec<Option<Vec<T>>> = params.iter().map(|(_, p)| p.grad()).collect();
        let finite = grads
            .iter()
            .flatten()
            .all(|g| g.iter().all(|v| v.as_f64().is_finite()));
        if !finite {
            dropped += 1;
            continue;
        }
        used += 1;
        for (slot, grad) in acc.iter_mut().zip(&grads) {
            // A parameter the sample never touched has no gradient, which
            // counts as zero, not as an error.
            if let Some(g) = grad {
                for (s, v) in slot.iter_mut().zip(g) {
                    let gv = v.as_f64();
                    *s += gv * gv;
                }
            }
        }
    }

    if used == 0 {
        return Err(Error::data(format!(
            "all {num_samples} saliency samples produced non-finite losses or gradients"
        )));
    }

    let entries = params
        .iter()
        .zip(acc)
        .map(|((name, _), mut sums)| {
            for v in &mut sums {
                *v /= used as f64;
            }
            let mean = sums.iter().sum::<f64>() / sums.len() as f64;
            let normalized: Vec<T> = if mean > 0.0 {
                sums.iter().map(|&v| T::lit(v / mean)).collect()
            } else {
                // Nothing moved this tensor; fall back to uniform weights
                // so the penalty degrades to plain squared distance.
                vec![T::one(); sums.len()]
            };
            (name.clone(), normalized)
        })
        .collect();

    Ok(SaliencyMap::new(entries, dropped, used))
}

/// Sensitivity map over every quantizable weight of `model`: averaged
/// squared gradients of the language-modeling loss, one sequence per
/// sample, drawn from the training split under the named stream
/// `"saliency-data"` of `seed`.
///
/// The model's parameters are switched to trainable for the measurement
/// and frozen again before returning.
pub fn model_saliency<T: Scalar>(
    model: &ToyTransformer<T>,
    dataset: &TextDataset,
    samples: usize,
    seq_len: usize,
    seed: u64,
) -> Result<SaliencyMap<T>> {
    let mut rng = Rng::stream(seed, "saliency-data");
    let batch = dataset.sample_batch_with(samples, seq_len, &mut rng)?;
    model.set_trainable(true);
    let quantizable = model.quantizable_names();
    let params: Vec<(String, Tensor<T>)> = model
        .named_params()
        .into_iter()
        .filter(|(name, _)| quantizable.contains(name))
        .collect();
    let result = compute_saliency(&params, samples, |i| {
        let one = Batch {
            inputs: batch.inputs[i * seq_len..(i + 1) * seq_len].to_vec(),
            targets: batch.targets[i * seq_len..(i + 1) * seq_len].to_vec(),
            n: 1,
            seq_len,
        };
        model.loss_on(&one)
    });
    model.set_trainable(false);
    result
}

/// Traced penalty `Σ saliency ⊙ (w - target)²`.
///
/// `target` and `saliency` are constants of the calibration step; only `w`
/// (or whatever traced expression produced it) receives gradients.
pub fn saliency_penalty<T: Scalar>(
    w: &Tensor<T>,
    target: &Tensor<T>,
    saliency: &Tensor<T>,
) -> Tensor<T> {
    assert_eq!(w.shape(), target.shape(), "penalty: target shape mismatch");
    assert_eq!(w.shape(), saliency.shape(), "penalty: saliency shape mismatch");
    w.sub(target).square().mul(saliency).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    /// Loss `⟨w, c⟩` has gradient exactly `c`.
    fn dot_loss(w: &Tensor<f64>, c: &[f64]) -> Tensor<f64> {
        let ct = Tensor::leaf(&[c.len()], c.to_vec(), false);
        w.mul(&ct).sum()
    }

    #[test]
    fn single_sample_map_is_the_normalized_squared_gradient() {
        let w = Tensor::<f64>::leaf(&[3], vec![0.0; 3], true);
        let params = vec![("w".to_string(), w.clone())];
        let map = compute_saliency(&params, 1, |_| dot_loss(&w, &[1.0, -2.0, 3.0])).unwrap();
        // squared grads [1, 4, 9], mean 14/3 → [3/14, 12/14, 27/14]
        let got = map.get("w").unwrap();
        let want = [3.0 / 14.0, 12.0 / 14.0, 27.0 / 14.0];
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() <= 1e-15, "{g} vs {w}");
        }
        assert_eq!(map.samples_used, 1);
        assert_eq!(map.dropped_samples, 0);
    }

    #[test]
    fn samples_average_before_normalization() {
        let w = Tensor::<f64>::leaf(&[2], vec![0.0; 2], true);
        let params = vec![("w".to_string(), w.clone())];
        let cs = [[1.0, 0.0], [0.0, 2.0]];
        let map = compute_saliency(&params, 2, |i| dot_loss(&w, &cs[i])).unwrap();
        // mean squared grads [0.5, 2.0], mean 1.25 → [0.4, 1.6]
        let got = map.get("w").unwrap();
        assert!((got[0] - 0.4).abs() <= 1e-15);
        assert!((got[1] - 1.6).abs() <= 1e-15);
    }

    #[test]
    fn non_finite_samples_are_dropped_and_counted() {
        let w = Tensor::<f64>::leaf(&[2], vec![1.0, 2.0], true);
        let params = vec![("w".to_string(), w.clone())];
        let map = compute_saliency(&params, 3, |i| {
            if i == 1 {
                // 0/0 poisons the loss for this sample only.
                let bad = Tensor::<f64>::scalar(0.0);
                w.sum().mul(&bad.div(&bad))
            } else {
                dot_loss(&w, &[2.0, 2.0])
            }
        })
        .unwrap();
        assert_eq!(map.dropped_samples, 1);
        assert_eq!(map.samples_used, 2);
        // The surviving samples give uniform squared grads → uniform map.
        assert!(map.get("w").unwrap().iter().all(|&v| (v - 1.0).abs() <= 1e-15));
    }

    #[test]
    fn all_samples_dropping_is_an_error() {
        let w = Tensor::<f64>::leaf(&[1], vec![1.0], true);
        let params = vec![("w".to_string(), w.clone())];
        let nan = Tensor::<f64>::scalar(f64::NAN);
        let err = compute_saliency(&params, 2, |_| w.sum().mul(&nan)).unwrap_err();
        assert!(err.to_string().contains("non-finite"), "{err}");
    }

    #[test]
    fn untouched_tensor_falls_back_to_uniform_weights() {
        let w = Tensor::<f64>::leaf(&[2], vec![1.0, 2.0], true);
        let idle = Tensor::<f64>::leaf(&[3], vec![0.0; 3], true);
        let params = vec![("w".to_string(), w.clone()), ("idle".to_string(), idle)];
        let map = compute_saliency(&params, 1, |_| dot_loss(&w, &[1.0, 1.0])).unwrap();
        assert!(map.get("idle").unwrap().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn normalization_cancels_any_loss_rescaling() {
        let w = Tensor::<f64>::leaf(&[4], vec![0.0; 4], true);
        let params = vec![("w".to_string(), w.clone())];
        let c = [0.3, -1.1, 0.7, 2.2];
        let base = compute_saliency(&params, 1, |_| dot_loss(&w, &c)).unwrap();
        let scaled = compute_saliency(&params, 1, |_| dot_loss(&w, &c).scale(3.7)).unwrap();
        for (a, b) in base.get("w").unwrap().iter().zip(scaled.get("w").unwrap()) {
            assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn every_map_has_mean_one() {
        let mut rng = Rng::seeded(61);
        let w = Tensor::<f64>::leaf(&[16], vec![0.0; 16], true);
        let params = vec![("w".to_string(), w.clone())];
        let cs: Vec<Vec<f64>> =
            (0..5).map(|_| (0..16).map(|_| rng.normal()).collect()).collect();
        let map = compute_saliency(&params, 5, |i| dot_loss(&w, &cs[i])).unwrap();
        let vals = map.get("w").unwrap();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        assert!((mean - 1.0).abs() <= 1e-12);
        assert!(vals.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn penalty_matches_a_dense_reference() {
        let mut rng = Rng::seeded(62);
        let n = 64;
        let wv: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let tv: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let sv: Vec<f64> = (0..n).map(|_| rng.uniform_in(0.0, 3.0)).collect();
        let w = Tensor::leaf(&[8, 8], wv.clone(), true);
        let t = Tensor::leaf(&[8, 8], tv.clone(), false);
        let s = Tensor::leaf(&[8, 8], sv.clone(), false);
        let got = saliency_penalty(&w, &t, &s).item();
        let want: f64 = (0..n).map(|i| sv[i] * (wv[i] - tv[i]).powi(2)).sum();
        assert!((got - want).abs() <= 1e-12 * (1.0 + want.abs()), "{got} vs {want}");
    }

    #[test]
    fn uniform_saliency_reduces_to_squared_distance() {
        let mut rng = Rng::seeded(63);
        let n = 36;
        let wv: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let tv: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let w = Tensor::leaf(&[6, 6], wv.clone(), true);
        let t = Tensor::leaf(&[6, 6], tv.clone(), false);
        let ones = Tensor::leaf(&[6, 6], vec![1.0; n], false);
        let got = saliency_penalty(&w, &t, &ones).item();
        let want: f64 = (0..n).map(|i| (wv[i] - tv[i]).powi(2)).sum();
        assert!((got - want).abs() <= 1e-12 * (1.0 + want));
    }

    #[test]
    fn penalty_gradient_reaches_only_the_weights() {
        let w = Tensor::<f64>::leaf(&[2], vec![1.0, -1.0], true);
        let t = Tensor::<f64>::leaf(&[2], vec![0.5, 0.5], false);
        let s = Tensor::<f64>::leaf(&[2], vec![2.0, 0.0], false);
        saliency_penalty(&w, &t, &s).backward();
        // d/dw = 2·s·(w - t) = [2·2·0.5, 0]
        let g = w.grad().unwrap();
        assert!((g[0] - 2.0).abs() <= 1e-15);
        assert_eq!(g[1], 0.0);
        assert!(t.grad().is_none());
        assert!(s.grad().is_none());
    }

    #[test]
    fn model_map_covers_every_quantizable_layer_with_unit_mean() {
        use crate::data::TextDataset;
        use crate::model::{ModelConfig, ToyTransformer};

        let ds = TextDataset::from_text(
            "the quick brown fox jumps over the lazy dog while the cat watches from the warm windowsill",
        )
        .unwrap();
        let cfg = ModelConfig {
            vocab: ds.tokenizer.vocab(),
            d_model: 16,
            n_heads: 2,
            n_blocks: 2,
            d_mlp: 32,
            max_seq: 32,
        };
        let mut rng = Rng::stream(17, "init");
        let model: ToyTransformer<f32> = ToyTransformer::init(cfg, &mut rng).unwrap();
        let map = model_saliency(&model, &ds, 4, 12, 17).unwrap();

        let names = model.quantizable_names();
        assert_eq!(map.entries().len(), names.len());
        for name in &names {
            let values = map.get(name).expect("map covers every quantizable layer");
            let mean = values.iter().map(|v| *v as f64).sum::<f64>() / values.len() as f64;
            assert!((mean - 1.0).abs() <= 1e-4, "layer {name} map mean {mean}");
            assert!(values.iter().all(|v| *v >= 0.0 && v.is_finite()));
        }

        // Weights end up frozen, and a rerun reproduces the map exactly.
        for (name, p) in model.named_params() {
            assert!(!p.requires_grad(), "{name} left trainable");
        }
        let again = model_saliency(&model, &ds, 4, 12, 17).unwrap();
        for (a, b) in map.entries().iter().zip(again.entries()) {
            assert_eq!(a, b);
        }
    }
}
