//! Group-wise weight quantizers.
//!
//! Weights are quantized in contiguous groups along the input dimension of
//! each matrix (default: one group per matrix). Every scheme stores, per
//! group, a positive scale and a zero point, and maps a real weight to an
//! integer code:
//!
//! ```text
//! code = clamp(round(w / s) + z, 0, 2^bits - 1)      (round half away from 0)
//! ŵ    = (code - z) * s
//! ```
//!
//! so a code equal to the zero point reconstructs exactly 0, and any
//! weight inside the group's clipping range reconstructs within s/2.
//!
//! Submodules add the trainable variants: [`learnable`] gates the clipping
//! range with logistic factors trained by backprop, [`dual`] decomposes a
//! group into two signed binary matrices, and [`mos`] mixes per-channel
//! scale experts chosen by a token router in the 1-bit path.

pub mod dual;
pub mod learnable;
pub mod mos;
pub mod pack;

use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Scale used for a degenerate (constant) group, where max == min would
/// otherwise make the scale zero. Small enough that the constant is
/// reconstructed to within 0.5e-8.
pub const EPS_SCALE: f64 = 1e-8;

/// Grouping policy for a weight matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupSize {
    /// One group spanning the whole matrix.
    PerMatrix,
    /// Contiguous runs of this many elements along the input dimension.
    Of(usize),
}

impl serde::Serialize for GroupSize {
    /// Written as `"matrix"` or the group width, matching the
    /// configuration-file syntax.
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            GroupSize::PerMatrix => s.serialize_str("matrix"),
            GroupSize::Of(g) => s.serialize_u64(*g as u64),
        }
    }
}

impl<'de> serde::Deserialize<'de> for GroupSize {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct Visitor;
        impl serde::de::Visitor<'_> for Visitor {
            type Value = GroupSize;
            fn expecting(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                f.write_str("\"matrix\" or a positive group width")
            }
            fn visit_str<E: serde::de::Error>(self, v: &str) -> std::result::Result<GroupSize, E> {
                if v == "matrix" {
                    Ok(GroupSize::PerMatrix)
                } else {
                    Err(E::custom(format!("unknown group size '{v}' (use \"matrix\" or a number)")))
                }
            }
            fn visit_u64<E: serde::de::Error>(self, v: u64) -> std::result::Result<GroupSize, E> {
                if v == 0 {
                    Err(E::custom("group size must be positive"))
                } else {
                    Ok(GroupSize::Of(v as usize))
                }
            }
            fn visit_i64<E: serde::de::Error>(self, v: i64) -> std::result::Result<GroupSize, E> {
                if v <= 0 {
                    Err(E::custom("group size must be positive"))
                } else {
                    Ok(GroupSize::Of(v as usize))
                }
            }
        }
        d.deserialize_any(Visitor)
    }
}

impl std::str::FromStr for GroupSize {
    type Err = Error;
    /// Command-line syntax: `matrix` or a positive width.
    fn from_str(s: &str) -> Result<GroupSize> {
        if s == "matrix" {
            return Ok(GroupSize::PerMatrix);
        }
        match s.parse::<usize>() {
            Ok(g) if g > 0 => Ok(GroupSize::Of(g)),
            _ => Err(Error::config(format!(
                "invalid group size '{s}' (use 'matrix' or a positive number)"
            ))),
        }
    }
}

impl std::fmt::Display for GroupSize {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            GroupSize::PerMatrix => f.write_str("matrix"),
            GroupSize::Of(g) => write!(f, "{g}"),
        }
    }
}

/// Resolved grouping of a concrete tensor: `groups` groups of `elems`
/// consecutive elements each (row-major, so runs never straddle rows when
/// the group size divides the input dimension — enforced below).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupLayout {
    pub groups: usize,
    pub elems: usize,
}

impl GroupLayout {
    /// Resolve a grouping against a tensor shape.
    ///
    /// For `Of(g)`, the shape must be rank 2 and `g` must divide the input
    /// (last) dimension, so groups are contiguous runs inside a row.
    pub fn resolve(shape: &[usize], group: GroupSize) -> Result<GroupLayout> {
        let numel: usize = shape.iter().product();
        if numel == 0 {
            return Err(Error::config(format!("cannot group an empty tensor of shape {shape:?}")));
        }
        match group {
            GroupSize::PerMatrix => Ok(GroupLayout { groups: 1, elems: numel }),
            GroupSize::Of(g) => {
                if g == 0 {
                    return Err(Error::config("group size must be positive".to_string()));
                }
                if shape.len() != 2 {
                    return Err(Error::config(format!(
                        "grouped quantization needs a rank-2 weight, got shape {shape:?}"
                    )));
                }
                let input_dim = shape[1];
                if input_dim % g != 0 {
                    return Err(Error::config(format!(
                        "group size {g} does not divide input dimension {input_dim} (shape {shape:?})"
                    )));
                }
                Ok(GroupLayout { groups: numel / g, elems: g })
            }
        }
    }

    pub fn total(&self) -> usize {
        self.groups * self.elems
    }
}

/// Highest code for a bit width.
pub fn qmax(bits: u8) -> u32 {
    assert!((1..=8).contains(&bits), "bits must be in 1..=8, got {bits}");
    (1u32 << bits) - 1
}

/// Asymmetric scale for one group: `(max - min) / (2^bits - 1)`, falling
/// back to [`EPS_SCALE`] for constant groups.
pub fn compute_scale<T: Scalar>(group: &[T], bits: u8) -> T {
    assert!(!group.is_empty(), "compute_scale: empty group");
    let mut min = group[0];
    let mut max = group[0];
    for &v in group {
        if v < min {
            min = v;
        }
        if v > max {
            max = v;
        }
    }
    scale_from_range(min, max, bits)
}

/// Scale from a known [min, max] range.
pub fn scale_from_range<T: Scalar>(min: T, max: T, bits: u8) -> T {
    let s = (max - min) / T::lit(qmax(bits) as f64);
    if s > T::zero() {
        s
    } else {
        T::lit(EPS_SCALE)
    }
}

/// Zero point `z = -round(w_min / s)`, rounding half away from zero.
/// Integer-valued but kept in the scale's precision; normalized so a zero
/// minimum yields +0.0 rather than -0.0.
pub fn compute_zero_point<T: Scalar>(w_min: T, scale: T) -> T {
    let z = -(w_min / scale).round();
    if z == T::zero() {
        T::zero()
    } else {
        z
    }
}

/// Fitted group-wise quantizer state for one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantSpec<T: Scalar> {
    pub bits: u8,
    pub group: GroupSize,
    pub layout: GroupLayout,
    /// Per-group scale, strictly positive.
    pub scales: Vec<T>,
    /// Per-group zero point (integer-valued).
    pub zeros: Vec<T>,
}

impl<T: Scalar> QuantSpec<T> {
    /// Fit plain round-to-nearest parameters to a weight tensor.
    pub fn fit_rtn(w: &[T], shape: &[usize], bits: u8, group: GroupSize) -> Result<QuantSpec<T>> {
        let layout = GroupLayout::resolve(shape, group)?;
        assert_eq!(w.len(), layout.total(), "fit_rtn: {} weights for layout {layout:?}", w.len());
        let mut scales = Vec::with_capacity(layout.groups);
        let mut zeros = Vec::with_capacity(layout.groups);
        for g in w.chunks(layout.elems) {
            let mut min = g[0];
            for &v in g {
                if v < min {
                    min = v;
                }
            }
            let s = compute_scale(g, bits);
            scales.push(s);
            zeros.push(compute_zero_point(min, s));
        }
        Ok(QuantSpec { bits, group, layout, scales, zeros })
    }

    /// Quantize to integer codes with this spec's per-group parameters.
    pub fn quantize(&self, w: &[T]) -> Vec<u8> {
        quantize_rtn(w, self)
    }

    /// Reconstruct real weights from codes.
    pub fn dequantize(&self, codes: &[u8]) -> Vec<T> {
        dequantize(codes, self)
    }
}

/// Round-to-nearest quantization: `clamp(round(w/s) + z, 0, 2^bits - 1)`.
pub fn quantize_rtn<T: Scalar>(w: &[T], spec: &QuantSpec<T>) -> Vec<u8> {
    let layout = spec.layout;
    assert_eq!(w.len(), layout.total(), "quantize: {} weights for layout {layout:?}", w.len());
    let hi = T::lit(qmax(spec.bits) as f64);
    let mut codes = Vec::with_capacity(w.len());
    for (gi, g) in w.chunks(layout.elems).enumerate() {
        let (s, z) = (spec.scales[gi], spec.zeros[gi]);
        for &v in g {
            let q = (v / s).round() + z;
            let q = if q < T::zero() {
                T::zero()
            } else if q > hi {
                hi
            } else {
                q
            };
            codes.push(q.as_f64() as u8);
        }
    }
    codes
}

/// Reconstruction `ŵ = (code - z) * s`.
pub fn dequantize<T: Scalar>(codes: &[u8], spec: &QuantSpec<T>) -> Vec<T> {
    let layout = spec.layout;
    assert_eq!(codes.len(), layout.total(), "dequantize: {} codes for layout {layout:?}", codes.len());
    let mut out = Vec::with_capacity(codes.len());
    for (gi, g) in codes.chunks(layout.elems).enumerate() {
        let (s, z) = (spec.scales[gi], spec.zeros[gi]);
        for &c in g {
            out.push((T::lit(c as f64) - z) * s);
        }
    }
    out
}

/// Sign matrix of a weight tensor as `±1.0` values (zero maps to `+1`),
/// the frozen structure of the 1-bit mixture-of-scales path. As a stored
/// record this is a 1-bit code stream with scale 2 and zero point 0.5,
/// which reconstructs `±1` exactly.
pub fn sign_weights<T: Scalar>(w: &[T]) -> Vec<T> {
    w.iter()
        .map(|&v| if v < T::zero() { -T::one() } else { T::one() })
        .collect()
}

/// Convenience: fit, quantize, and reconstruct in one go.
pub fn rtn_roundtrip<T: Scalar>(
    w: &[T],
    shape: &[usize],
    bits: u8,
    group: GroupSize,
) -> Result<(QuantSpec<T>, Vec<u8>, Vec<T>)> {
    let spec = QuantSpec::fit_rtn(w, shape, bits, group)?;
    let codes = spec.quantize(w);
    let dq = spec.dequantize(&codes);
    Ok((spec, codes, dq))
}
