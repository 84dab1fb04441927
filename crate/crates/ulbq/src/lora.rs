//! Low-rank error-compensation factors.
//!
//! A quantized linear layer carries a trainable correction `B·A` (`B` is
//! `out×r`, `A` is `r×in`) added to the quantized weight. The pair starts
//! at the best rank-`r` approximation of the quantization residual
//! `W - Ŵ`, obtained from the residual's SVD with the singular values
//! split evenly across the two factors:
//!
//! ```text
//! B = U_r √Σ_r      A = √Σ_r V_rᵀ
//! ```
//!
//! so neither factor dwarfs the other at the start of calibration. There
//! is no extra `α/r` output scaling — the factors are already in weight
//! units, and calibration retunes them anyway.

use crate::linalg::svd;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone)]
pub struct LoraPair<T: Scalar> {
    /// `[out, rank]` output-side factor. Trainable.
    pub b: Tensor<T>,
    /// `[rank, in]` input-side factor. Trainable.
    pub a: Tensor<T>,
}

impl<T: Scalar> LoraPair<T> {
    /// All-zero pair: the correction starts (and, if never trained, stays)
    /// at exactly zero.
    pub fn zeros(out: usize, inp: usize, rank: usize) -> LoraPair<T> {
        assert!(rank >= 1, "rank must be at least 1");
        LoraPair {
            b: Tensor::zeros(&[out, rank], true),
            a: Tensor::zeros(&[rank, inp], true),
        }
    }

    /// Best rank-`rank` start from a quantization residual (row-major
    /// `out×in`, in f64 regardless of the model precision).
    ///
    /// If `rank` exceeds the residual's rank the surplus columns stay
    /// zero, so the requested shapes are always honored.
    pub fn from_residual(resid: &[f64], out: usize, inp: usize, rank: usize) -> LoraPair<T> {
        assert!(rank >= 1, "rank must be at least 1");
        assert_eq!(resid.len(), out * inp, "residual shape mismatch");
        let f = svd(resid, out, inp);
        let k = f.k().min(rank);
        let mut b = vec![0.0f64; out * rank];
        let mut a = vec![0.0f64; rank * inp];
        for t in 0..k {
            let root = f.s[t].sqrt();
            for i in 0..out {
                b[i * rank + t] = f.u[i * f.k() + t] * root;
            }
            for j in 0..inp {
                a[t * inp + j] = root * f.vt[t * inp + j];
            }
        }
        LoraPair {
            b: Tensor::from_f64(&[out, rank], &b, true),
            a: Tensor::from_f64(&[rank, inp], &a, true),
        }
    }

    pub fn rank(&self) -> usize {
        self.b.shape()[1]
    }

    /// Traced correction matrix `B·A`, shape `[out, in]`.
    pub fn matrix(&self) -> Tensor<T> {
        self.b.matmul(&self.a)
    }

    /// Apply the correction to activations: `x ↦ (x·Aᵀ)·Bᵀ` for `x` of
    /// shape `[..., in]`, without materializing `B·A`.
    pub fn apply(&self, x: &Tensor<T>) -> Tensor<T> {
        x.matmul(&self.a.transpose()).matmul(&self.b.transpose())
    }

    pub fn params(&self) -> Vec<Tensor<T>> {
        vec![self.a.clone(), self.b.clone()]
    }
}
