//! Desk-scale toolkit for ultra-low-bit weight quantization of small
//! transformer language models.
//!
//! The crate bundles everything needed to run quantization experiments on a
//! character-level toy transformer end to end:
//!
//! * [`tensor`] — a reverse-mode autodiff engine over dense row-major
//!   tensors, including a straight-through rounding op so quantizers can
//!   train through the integer grid.
//! * [`optim`] — decoupled-weight-decay AdamW over named parameter groups.
//! * [`quant`] — group-wise round-to-nearest quantization, learnable
//!   clipping, dual binarization, and a mixture-of-scales 1-bit scheme,
//!   plus bit-packing into a stable on-disk layout.
//! * [`lora`] — low-rank error-compensation factors initialized from a
//!   truncated SVD of the quantization residual.
//! * [`saliency`] — squared-gradient weight importance maps and the
//!   weighted preservation penalty built from them.
//! * [`model`] / [`data`] — the toy causal LM, char tokenizer, and corpus
//!   sampling utilities.
//! * [`calib`] — block-wise calibration that trains clipping/LoRA/scale
//!   parameters against the full-precision block outputs.
//! * [`eval`] — windowed perplexity and run-to-run comparison reports.
//! * [`checkpoint`] — the binary container that stores dense weights,
//!   packed codes, and metadata records with per-record checksums.
//! * [`config`] — the JSON experiment configuration shared by the CLI.

pub mod calib;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod lora;
pub mod model;
pub mod optim;
pub mod quant;
pub mod rng;
pub mod saliency;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
