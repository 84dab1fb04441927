//! Mixture of scaling experts for 1-bit weights.
//!
//! At one bit per weight only the sign survives, so a single static scale
//! per channel wastes the little capacity left. Instead, K candidate
//! per-output-channel scale vectors ("experts") are mixed per token: a
//! linear router scores the incoming hidden state, the scores pass through
//! a softmax, and the convex combination of expert vectors scales that
//! token's output of the sign-matrix product:
//!
//! ```text
//! y = (x · sign(W)ᵀ) ⊙ softmax(x · Rᵀ) · E   (+ any side correction)
//! ```
//!
//! Experts start as K copies of the per-channel mean magnitude of the
//! original weights — the best single static scale under squared error —
//! and the router starts near zero, so training begins from an even
//! mixture of sensible scales rather than noise.

use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

/// Standard deviation of the router's random init. Small, so initial
/// mixtures stay near uniform and experts differentiate gradually.
pub const ROUTER_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone)]
pub struct MixtureOfScales<T: Scalar> {
    /// `[K, out]`: per-expert, per-output-channel scales. Trainable.
    pub experts: Tensor<T>,
    /// `[K, in]`: router weights scoring each expert from the token's
    /// hidden state. Trainable.
    pub router: Tensor<T>,
}

impl<T: Scalar> MixtureOfScales<T> {
    /// Initialize for a weight matrix of shape `[out, in]` with `k` experts.
    pub fn new(w: &[T], shape: &[usize], k: usize, rng: &mut Rng) -> MixtureOfScales<T> {
        assert_eq!(shape.len(), 2, "mixture of scales needs a rank-2 weight, got {shape:?}");
        assert!(k >= 1, "need at least one expert");
        let (out, inp) = (shape[0], shape[1]);
        assert_eq!(w.len(), out * inp);

        let mut channel_scale = Vec::with_capacity(out);
        for row in w.chunks(inp) {
            let mut acc = T::zero();
            for &v in row {
                acc = acc + v.abs();
            }
            channel_scale.push(acc / T::lit(inp as f64));
        }
        let mut experts = Vec::with_capacity(k * out);
        for _ in 0..k {
            experts.extend_from_slice(&channel_scale);
        }
        let router: Vec<T> = (0..k * inp)
            .map(|_| T::lit(rng.normal() * ROUTER_INIT_STD))
            .collect();

        let experts = Tensor::leaf(&[k, out], experts, true);
        let router = Tensor::leaf(&[k, inp], router, true);
        MixtureOfScales { experts, router }
    }

    pub fn num_experts(&self) -> usize {
        self.experts.shape()[0]
    }

    /// Routing weights for each token: `softmax(x · Rᵀ)`, shape `[..., K]`.
    pub fn mixture(&self, x: &Tensor<T>) -> Tensor<T> {
        x.matmul(&self.router.transpose()).softmax()
    }

    /// Per-token output scales: `mixture(x) · E`, shape `[..., out]`.
    pub fn scales(&self, x: &Tensor<T>) -> Tensor<T> {
        self.mixture(x).matmul(&self.experts)
    }

    pub fn params(&self) -> Vec<Tensor<T>> {
        vec![self.experts.clone(), self.router.clone()]
    }
}
