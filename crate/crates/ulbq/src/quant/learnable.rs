//! Fake quantization with learnable clipping gates.
//!
//! Each group's clipping range is `[w_min * sigmoid(gamma_lo), w_max *
//! sigmoid(gamma_hi)]`, where `w_min`/`w_max` are frozen statistics of the
//! original weights and the two gammas are trained by backprop. Rounding
//! reaches the backward pass through a straight-through estimator, so the
//! whole quantize–dequantize chain stays differentiable in the gammas.
//!
//! The same arithmetic exists twice: [`LearnableClip::fake_quant`] builds
//! the traced graph used during calibration, and [`LearnableClip::bake`]
//! replays it eagerly to produce integer codes for storage. The two paths
//! mirror each other operation for operation — including tie-breaking in
//! min/max and the scale floor — so a reloaded artifact reconstructs
//! exactly the weights calibration optimized, not a near miss.

use super::{qmax, GroupLayout, GroupSize, QuantSpec, EPS_SCALE};
use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

/// Initial gate logit; `sigmoid(4) ≈ 0.982`, so training starts from a
/// nearly open clipping range and tightens it where it pays.
pub const GAMMA_INIT: f64 = 4.0;

/// Group-wise quantizer with trainable clipping gates.
#[derive(Debug, Clone)]
pub struct LearnableClip<T: Scalar> {
    pub bits: u8,
    pub group: GroupSize,
    pub layout: GroupLayout,
    /// Gate logit for the lower clip bound, per group. Trainable leaf.
    pub gamma_lo: Tensor<T>,
    /// Gate logit for the upper clip bound, per group. Trainable leaf.
    pub gamma_hi: Tensor<T>,
    /// Per-group minimum of the original weights (frozen).
    w_min: Tensor<T>,
    /// Per-group maximum of the original weights (frozen).
    w_max: Tensor<T>,
}

impl<T: Scalar> LearnableClip<T> {
    /// Set up gates for a weight tensor, with min/max statistics taken once
    /// from the given values and both gate logits at [`GAMMA_INIT`].
    pub fn new(w: &[T], shape: &[usize], bits: u8, group: GroupSize) -> Result<LearnableClip<T>> {
        qmax(bits); // validate bit width
        let layout = GroupLayout::resolve(shape, group)?;
        assert_eq!(w.len(), layout.total(), "weight count {} for layout {layout:?}", w.len());
        let mut mins = Vec::with_capacity(layout.groups);
        let mut maxs = Vec::with_capacity(layout.groups);
        for g in w.chunks(layout.elems) {
            let mut min = g[0];
            let mut max = g[0];
            for &v in g {
                if v < min {
                    min = v;
                }
                if v > max {
                    max = v;
                }
            }
            mins.push(min);
            maxs.push(max);
        }
        let gamma_lo = Tensor::leaf(&[layout.groups], vec![T::lit(GAMMA_INIT); layout.groups], true);
        let gamma_hi = Tensor::leaf(&[layout.groups], vec![T::lit(GAMMA_INIT); layout.groups], true);
        Ok(LearnableClip {
            bits,
            group,
            layout,
            gamma_lo,
            gamma_hi,
            w_min: Tensor::leaf(&[layout.groups], mins, false),
            w_max: Tensor::leaf(&[layout.groups], maxs, false),
        })
    }

    /// The trainable leaves: `[gamma_lo, gamma_hi]`.
    pub fn params(&self) -> Vec<Tensor<T>> {
        vec![self.gamma_lo.clone(), self.gamma_hi.clone()]
    }

    /// Traced quantize–dequantize of `w` under the current gates.
    ///
    /// Per group: `lo = w_min·σ(γ_lo)`, `hi = w_max·σ(γ_hi)`,
    /// `s = max((hi-lo)/(2^bits-1), ε)`, `z = round(-lo/s)`; weights are
    /// clipped to `[lo, hi]`, scaled, rounded (straight-through), shifted by
    /// `z`, clamped to the code range, and mapped back. Gradients reach the
    /// gammas through the scale, the zero point, and the clip bounds.
    pub fn fake_quant(&self, w: &Tensor<T>) -> Tensor<T> {
        assert_eq!(
            w.numel(),
            self.layout.total(),
            "fake_quant: weight numel {} does not match layout {:?}",
            w.numel(),
            self.layout
        );
        let lo = self.w_min.mul(&self.gamma_lo.sigmoid());
        let hi = self.w_max.mul(&self.gamma_hi.sigmoid());
        let levels = Tensor::scalar(T::lit(qmax(self.bits) as f64));
        let eps = Tensor::scalar(T::lit(EPS_SCALE));
        let s = hi.sub(&lo).div(&levels).maximum(&eps);
        let z = lo.div(&s).neg().ste_round();

        let shape = w.shape().to_vec();
        let expand = |t: &Tensor<T>| t.repeat_each(self.layout.elems).reshape(&shape);
        let (se, ze, loe, hie) = (expand(&s), expand(&z), expand(&lo), expand(&hi));

        let clipped = w.maximum(&loe).minimum(&hie);
        let codes = clipped
            .div(&se)
            .ste_round()
            .add(&ze)
            .clamp_const(T::zero(), T::lit(qmax(self.bits) as f64));
        codes.sub(&ze).mul(&se)
    }

    /// Number of groups whose gated range has collapsed (scale floored at
    /// ε). A handful is survivable; a large count means the gates have been
    /// driven somewhere unhelpful.
    pub fn fallback_groups(&self) -> usize {
        let eps = T::lit(EPS_SCALE);
        let levels = T::lit(qmax(self.bits) as f64);
        let gl = self.gamma_lo.to_vec();
        let gh = self.gamma_hi.to_vec();
        let mins = self.w_min.to_vec();
        let maxs = self.w_max.to_vec();
        (0..self.layout.groups)
            .filter(|&g| {
                let lo = mins[g] * sigmoid(gl[g]);
                let hi = maxs[g] * sigmoid(gh[g]);
                let s_raw = (hi - lo) / levels;
                !(s_raw >= eps)
            })
            .count()
    }

    /// Eagerly replay the traced arithmetic and emit storable parameters
    /// plus integer codes. `dequantize(codes)` under the returned spec is
    /// bit-identical to the data produced by [`Self::fake_quant`] on the
    /// same weights.
    pub fn bake(&self, w: &[T]) -> (QuantSpec<T>, Vec<u8>) {
        assert_eq!(w.len(), self.layout.total(), "bake: weight count {}", w.len());
        let eps = T::lit(EPS_SCALE);
        let levels = T::lit(qmax(self.bits) as f64);
        let code_hi = T::lit(qmax(self.bits) as f64);
        let gl = self.gamma_lo.to_vec();
        let gh = self.gamma_hi.to_vec();
        let mins = self.w_min.to_vec();
        let maxs = self.w_max.to_vec();

        let mut scales = Vec::with_capacity(self.layout.groups);
        let mut zeros = Vec::with_capacity(self.layout.groups);
        let mut codes = Vec::with_capacity(w.len());
        for (g, chunk) in w.chunks(self.layout.elems).enumerate() {
            // Mirror the traced ops exactly: sigmoid formula, neg as
            // multiply by -1, max/min ties to the left operand.
            let lo = mins[g] * sigmoid(gl[g]);
            let hi = maxs[g] * sigmoid(gh[g]);
            let s_raw = (hi - lo) / levels;
            let s = if s_raw >= eps { s_raw } else { eps };
            let z = ((lo / s) * -T::one()).round();
            for &v in chunk {
                let c = if v >= lo { v } else { lo };
                let c = if c <= hi { c } else { hi };
                let q = (c / s).round() + z;
                let q = if q < T::zero() {
                    T::zero()
                } else if q > code_hi {
                    code_hi
                } else {
                    q
                };
                codes.push(q.as_f64() as u8);
            }
            scales.push(s);
            // Normalize -0.0 in stored parameters; (code - z) is unaffected.
            zeros.push(if z == T::zero() { T::zero() } else { z });
        }
        let spec = QuantSpec {
            bits: self.bits,
            group: self.group,
            layout: self.layout,
            scales,
            zeros,
        };
        (spec, codes)
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}
