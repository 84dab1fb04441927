//! Binary container for model checkpoints, quantized artifacts, and
//! saliency maps.
//!
//! One file holds a sequence of named records. All integers are
//! little-endian:
//!
//! ```text
//! header:  magic "ULBQ" | version u32 | record_count u32
//! record:  name_len u32 | name bytes (UTF-8)
//!          bits u8                  0 = raw bytes, 32 = dense f32,
//!                                   1..=8 = packed quantization codes
//!          group_size u32           0 = one group spans the tensor
//!          rank u32 | extent u32 × rank
//!          num_groups u32 | (scale f32, zero f32) × num_groups
//!          payload_len u32 | payload bytes
//!          crc32 u32                over name_len .. payload, inclusive
//! ```
//!
//! [`Container::from_bytes`] is the decoding entry point for untrusted
//! input: every length is bounds-checked before use, sizes are capped, and
//! any inconsistency returns a corrupt-file error — it must never panic.
//! Serialization is fully deterministic: the same records produce the same
//! bytes, which is what makes artifact files byte-comparable across runs.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Tokenizer;
use crate::error::{Error, Result};
use crate::lora::LoraPair;
use crate::model::{ModelConfig, QuantizedLinear, ToyTransformer, WeightForm};
use crate::quant::pack::{pack_codes, packed_len, unpack_codes};
use crate::quant::{GroupLayout, GroupSize, QuantSpec};
use crate::saliency::SaliencyMap;
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: [u8; 4] = *b"ULBQ";
pub const VERSION: u32 = 1;

/// Payload is opaque bytes (metadata JSON and the like).
pub const KIND_RAW: u8 = 0;
/// Payload is `numel` little-endian f32 values.
pub const KIND_DENSE: u8 = 32;

pub const MAX_NAME_LEN: usize = 4096;
pub const MAX_RANK: usize = 8;
pub const MAX_EXTENT: u64 = 1 << 24;
pub const MAX_NUMEL: u64 = 1 << 28;
/// Raw payloads (metadata) share the numel cap, in bytes.
pub const MAX_RAW_LEN: u64 = MAX_NUMEL;

/// Fixed fields of a record with an empty name and payload; used to reject
/// absurd record counts before looping.
const MIN_RECORD_BYTES: u64 = 4 + 1 + 4 + 4 + 4 + 4 + 4;

/// The reserved record carrying the file-level JSON metadata.
pub const META_RECORD: &str = "meta";

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    /// 0 = raw, 32 = dense f32, 1..=8 = packed codes of that width.
    pub bits: u8,
    /// Quantization group width along the input dimension; 0 means one
    /// group for the whole tensor.
    pub group_size: u32,
    pub shape: Vec<usize>,
    pub scales: Vec<f32>,
    pub zeros: Vec<f32>,
    pub payload: Vec<u8>,
}

impl Record {
    pub fn raw(name: impl Into<String>, payload: Vec<u8>) -> Record {
        Record {
            name: name.into(),
            bits: KIND_RAW,
            group_size: 0,
            shape: Vec::new(),
            scales: Vec::new(),
            zeros: Vec::new(),
            payload,
        }
    }

    pub fn dense_f32(name: impl Into<String>, shape: &[usize], values: &[f32]) -> Record {
        let numel: usize = shape.iter().product();
        assert_eq!(values.len(), numel, "dense record: {} values for {:?}", values.len(), shape);
        let mut payload = Vec::with_capacity(values.len() * 4);
        for v in values {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        Record {
            name: name.into(),
            bits: KIND_DENSE,
            group_size: 0,
            shape: shape.to_vec(),
            scales: Vec::new(),
            zeros: Vec::new(),
            payload,
        }
    }

    /// A packed record from a fitted quantizer and its per-element codes
    /// (one byte per element, as produced by [`QuantSpec::quantize`]).
    pub fn quantized<T: Scalar>(
        name: impl Into<String>,
        shape: &[usize],
        spec: &QuantSpec<T>,
        codes: &[u8],
    ) -> Record {
        let numel: usize = shape.iter().product();
        assert_eq!(codes.len(), numel, "quantized record: code/shape mismatch");
        let group_size = match spec.group {
            GroupSize::PerMatrix => 0,
            GroupSize::Of(g) => g as u32,
        };
        Record {
            name: name.into(),
            bits: spec.bits,
            group_size,
            shape: shape.to_vec(),
            scales: spec.scales.iter().map(|s| s.as_f64() as f32).collect(),
            zeros: spec.zeros.iter().map(|z| z.as_f64() as f32).collect(),
            payload: pack_codes(codes, spec.bits),
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Decode a dense record's payload.
    pub fn dense_values(&self) -> Result<Vec<f32>> {
        if self.bits != KIND_DENSE {
            return Err(Error::corrupt(format!(
                "record '{}' is not dense (bits = {})",
                self.name, self.bits
            )));
        }
        Ok(self
            .payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    /// Rebuild the quantizer description stored alongside a packed record.
    pub fn spec(&self) -> Result<QuantSpec<f32>> {
        let group = if self.group_size == 0 {
            GroupSize::PerMatrix
        } else {
            GroupSize::Of(self.group_size as usize)
        };
        let layout = GroupLayout::resolve(&self.shape, group)
            .map_err(|e| Error::corrupt(format!("record '{}': {e}", self.name)))?;
        Ok(QuantSpec {
            bits: self.bits,
            group,
            layout,
            scales: self.scales.clone(),
            zeros: self.zeros.clone(),
        })
    }

    /// Reconstruct a packed record's weights.
    pub fn dequantized(&self) -> Result<Vec<f32>> {
        if !(1..=8).contains(&self.bits) {
            return Err(Error::corrupt(format!(
                "record '{}' is not packed (bits = {})",
                self.name, self.bits
            )));
        }
        let codes = unpack_codes(&self.payload, self.bits, self.numel())?;
        Ok(self.spec()?.dequantize(&codes))
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    pub records: Vec<Record>,
}

impl Container {
    pub fn new() -> Container {
        Container::default()
    }

    /// Append a record; the name must be fresh.
    pub fn push(&mut self, record: Record) {
        assert!(
            self.get(&record.name).is_none(),
            "duplicate record name '{}'",
            record.name
        );
        self.records.push(record);
    }

    pub fn get(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }

    /// Like [`Container::get`] but a missing record is an error that names
    /// what was being looked for.
    pub fn require(&self, name: &str) -> Result<&Record> {
        self.get(name)
            .ok_or_else(|| Error::corrupt(format!("container is missing record '{name}'")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        let mut body = Vec::new();
        for rec in &self.records {
            body.clear();
            body.extend_from_slice(&(rec.name.len() as u32).to_le_bytes());
            body.extend_from_slice(rec.name.as_bytes());
            body.push(rec.bits);
            body.extend_from_slice(&rec.group_size.to_le_bytes());
            body.extend_from_slice(&(rec.shape.len() as u32).to_le_bytes());
            for &e in &rec.shape {
                body.extend_from_slice(&(e as u32).to_le_bytes());
            }
            body.extend_from_slice(&(rec.scales.len() as u32).to_le_bytes());
            for (s, z) in rec.scales.iter().zip(&rec.zeros) {
                body.extend_from_slice(&s.to_le_bytes());
                body.extend_from_slice(&z.to_le_bytes());
            }
            body.extend_from_slice(&(rec.payload.len() as u32).to_le_bytes());
            body.extend_from_slice(&rec.payload);
            out.extend_from_slice(&body);
            out.extend_from_slice(&crc32fast::hash(&body).to_le_bytes());
        }
        out
    }

    /// Parse a container from untrusted bytes. Returns a corrupt-file
    /// error on any structural problem; never panics.
    pub fn from_bytes(bytes: &[u8]) -> Result<Container> {
        let mut r = Reader { buf: bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::corrupt("bad magic; not a ULBQ container"));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::corrupt(format!(
                "unsupported container version {version} (expected {VERSION})"
            )));
        }
        let count = r.u32("record count")? as u64;
        if count * MIN_RECORD_BYTES > bytes.len() as u64 {
            return Err(Error::corrupt(format!(
                "record count {count} cannot fit in {} bytes",
                bytes.len()
            )));
        }
        let mut records = Vec::with_capacity(count as usize);
        for _ in 0..count {
            records.push(parse_record(&mut r)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::corrupt(format!(
                "{} trailing bytes after the last record",
                bytes.len() - r.pos
            )));
        }
        let mut names: Vec<&str> = records.iter().map(|r| r.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::corrupt("duplicate record names"));
        }
        Ok(Container { records })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes())
            .map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Container> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Container::from_bytes(&bytes)
            .map_err(|e| Error::corrupt(format!("{}: {e}", path.display())))
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::corrupt(format!(
                "truncated while reading {what}: wanted {n} bytes, had {}",
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        let b = self.take(4, what)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

fn parse_record(r: &mut Reader<'_>) -> Result<Record> {
    let body_start = r.pos;

    let name_len = r.u32("name length")? as usize;
    if name_len > MAX_NAME_LEN {
        return Err(Error::corrupt(format!(
            "record name of {name_len} bytes exceeds the {MAX_NAME_LEN} cap"
        )));
    }
    let name = std::str::from_utf8(r.take(name_len, "record name")?)
        .map_err(|_| Error::corrupt("record name is not valid UTF-8"))?
        .to_string();

    let bits = r.u8("bits")?;
    if bits != KIND_RAW && bits != KIND_DENSE && !(1..=8).contains(&bits) {
        return Err(Error::corrupt(format!("record '{name}': invalid bits value {bits}")));
    }
    let group_size = r.u32("group size")?;

    let rank = r.u32("rank")? as usize;
    if rank > MAX_RANK {
        return Err(Error::corrupt(format!("record '{name}': rank {rank} exceeds {MAX_RANK}")));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut numel: u64 = 1;
    for _ in 0..rank {
        let e = r.u32("extent")? as u64;
        if e > MAX_EXTENT {
            return Err(Error::corrupt(format!(
                "record '{name}': extent {e} exceeds {MAX_EXTENT}"
            )));
        }
        numel = numel.saturating_mul(e);
        shape.push(e as usize);
    }
    if numel > MAX_NUMEL {
        return Err(Error::corrupt(format!(
            "record '{name}': {numel} elements exceed the {MAX_NUMEL} cap"
        )));
    }

    let num_groups = r.u32("group count")? as usize;
    if num_groups as u64 > numel.max(1) {
        return Err(Error::corrupt(format!(
            "record '{name}': {num_groups} groups for {numel} elements"
        )));
    }
    let mut scales = Vec::with_capacity(num_groups);
    let mut zeros = Vec::with_capacity(num_groups);
    for _ in 0..num_groups {
        scales.push(r.f32("scale")?);
        zeros.push(r.f32("zero point")?);
    }

    let payload_len = r.u32("payload length")? as u64;

    // Per-kind consistency, checked before touching the payload.
    match bits {
        KIND_RAW => {
            if rank != 0 || group_size != 0 || num_groups != 0 {
                return Err(Error::corrupt(format!(
                    "record '{name}': raw records carry no shape or groups"
                )));
            }
            if payload_len > MAX_RAW_LEN {
                return Err(Error::corrupt(format!(
                    "record '{name}': raw payload of {payload_len} bytes exceeds the cap"
                )));
            }
        }
        KIND_DENSE => {
            if group_size != 0 || num_groups != 0 {
                return Err(Error::corrupt(format!(
                    "record '{name}': dense records carry no groups"
                )));
            }
            if payload_len != numel * 4 {
                return Err(Error::corrupt(format!(
                    "record '{name}': dense payload is {payload_len} bytes, expected {}",
                    numel * 4
                )));
            }
        }
        b => {
            let group = if group_size == 0 {
                GroupSize::PerMatrix
            } else {
                GroupSize::Of(group_size as usize)
            };
            let layout = GroupLayout::resolve(&shape, group)
                .map_err(|e| Error::corrupt(format!("record '{name}': {e}")))?;
            if num_groups != layout.groups {
                return Err(Error::corrupt(format!(
                    "record '{name}': {num_groups} groups stored, layout needs {}",
                    layout.groups
                )));
            }
            let expected = packed_len(numel as usize, b) as u64;
            if payload_len != expected {
                return Err(Error::corrupt(format!(
                    "record '{name}': packed payload is {payload_len} bytes, expected {expected}"
                )));
            }
        }
    }

    let payload = r.take(payload_len as usize, "payload")?.to_vec();

    let body = &r.buf[body_start..r.pos];
    let stored_crc = r.u32("checksum")?;
    let actual_crc = crc32fast::hash(body);
    if stored_crc != actual_crc {
        return Err(Error::corrupt(format!(
            "record '{name}': checksum mismatch (stored {stored_crc:#010x}, computed {actual_crc:#010x})"
        )));
    }

    Ok(Record { name, bits, group_size, shape, scales, zeros, payload })
}

// ---------------------------------------------------------------------------
// File-level metadata and model persistence.

/// JSON stored in the reserved `meta` record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// "model" for full-precision checkpoints, "quantized" for artifacts,
    /// "saliency" for sensitivity maps.
    pub kind: String,
    pub config: ModelConfig,
    /// The tokenizer's character set, in id order.
    pub alphabet: String,
    /// Per-layer quantization descriptors; empty for full-precision files.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub layers: BTreeMap<String, LayerMeta>,
}

/// How one linear layer is stored inside a quantized artifact.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct LayerMeta {
    /// "dense", "rtn", "learnable_clip", "dual_binary", or "mos".
    pub form: String,
    pub bits: u8,
    pub group_size: u32,
    /// 0 means no low-rank correction is stored.
    pub lora_rank: usize,
}

fn read_meta(container: &Container) -> Result<CheckpointMeta> {
    let rec = container.require(META_RECORD)?;
    serde_json::from_slice(&rec.payload)
        .map_err(|e| Error::corrupt(format!("invalid checkpoint metadata: {e}")))
}

/// The `kind` declared in an artifact's metadata ("model", "quantized",
/// or "saliency"), so callers can dispatch before committing to a loader.
pub fn artifact_kind(path: impl AsRef<Path>) -> Result<String> {
    let container = Container::load(path)?;
    let rec = container.require(META_RECORD)?;
    let meta: serde_json::Value = serde_json::from_slice(&rec.payload)
        .map_err(|e| Error::corrupt(format!("invalid artifact metadata: {e}")))?;
    meta.get("kind")
        .and_then(|k| k.as_str())
        .map(str::to_string)
        .ok_or_else(|| Error::corrupt("artifact metadata declares no kind"))
}

fn meta_record(meta: &CheckpointMeta) -> Record {
    let json = serde_json::to_vec(meta).expect("checkpoint metadata serializes");
    Record::raw(META_RECORD, json)
}

fn tensor_f32<T: Scalar>(t: &Tensor<T>) -> Vec<f32> {
    t.to_vec().iter().map(|v| v.as_f64() as f32).collect()
}

fn fetch_dense<T: Scalar>(
    container: &Container,
    name: &str,
    shape: &[usize],
    requires_grad: bool,
) -> Result<Tensor<T>> {
    let rec = container.require(name)?;
    if rec.shape != shape {
        return Err(Error::corrupt(format!(
            "record '{name}' has shape {:?}, expected {:?}",
            rec.shape, shape
        )));
    }
    let values = rec.dense_values()?;
    let data: Vec<T> = values.iter().map(|&v| T::lit(v as f64)).collect();
    Ok(Tensor::leaf(shape, data, requires_grad))
}

/// Write a full-precision model plus its tokenizer.
pub fn save_model<T: Scalar>(
    model: &ToyTransformer<T>,
    tokenizer: &Tokenizer,
    path: impl AsRef<Path>,
) -> Result<()> {
    let meta = CheckpointMeta {
        kind: "model".into(),
        config: model.cfg,
        alphabet: tokenizer.alphabet().iter().collect(),
        layers: BTreeMap::new(),
    };
    let mut c = Container::new();
    c.push(meta_record(&meta));
    for (name, p) in model.named_params() {
        c.push(Record::dense_f32(name, p.shape(), &tensor_f32(&p)));
    }
    c.save(path)
}

/// Read a full-precision model and its tokenizer back.
pub fn load_model<T: Scalar>(path: impl AsRef<Path>) -> Result<(ToyTransformer<T>, Tokenizer)> {
    let container = Container::load(path)?;
    let meta = read_meta(&container)?;
    if meta.kind != "model" {
        return Err(Error::corrupt(format!(
            "expected a full-precision model checkpoint, found kind '{}'",
            meta.kind
        )));
    }
    let tokenizer = Tokenizer::from_alphabet(meta.alphabet.chars().collect())?;
    let model = ToyTransformer::from_named(meta.config, |name, shape| {
        fetch_dense(&container, name, shape, true)
    })?;
    Ok((model, tokenizer))
}

// ---------------------------------------------------------------------------
// Quantized artifacts.
//
// Layer records are named by suffix convention under the layer's own name:
//   dense / rtn / learnable_clip   "{name}"           (dense or packed)
//   dual_binary                    "{name}.b1" ".b2"  (1-bit, scale 2α, zero ½)
//   mos                            "{name}.signs" ".experts" ".router"
//   low-rank correction            "{name}.lora_b" ".lora_a"
//
// Trained gate parameters are not persisted: an artifact stores the baked
// reconstruction, which forwards bit-identically to the traced form it was
// baked from.

/// Per-group 1-bit encoding of a sign matrix scaled by `alpha`: code 1 is
/// `+alpha`, code 0 is `-alpha`. With scale `2·alpha` and zero point `0.5`
/// the reconstruction `(code - 0.5) * 2·alpha` is exact in f32, because
/// both factors only adjust the exponent.
fn signed_record(name: String, shape: &[usize], signs: &[f32], alphas: &[f32], layout: GroupLayout) -> Record {
    assert_eq!(signs.len(), layout.total(), "sign/layout mismatch for '{name}'");
    assert_eq!(alphas.len(), layout.groups, "alpha/layout mismatch for '{name}'");
    let codes: Vec<u8> = signs.iter().map(|&s| if s > 0.0 { 1 } else { 0 }).collect();
    let group_size = if layout.groups == 1 { 0 } else { layout.elems as u32 };
    Record {
        name,
        bits: 1,
        group_size,
        shape: shape.to_vec(),
        scales: alphas.iter().map(|&a| 2.0 * a).collect(),
        zeros: vec![0.5; layout.groups],
        payload: pack_codes(&codes, 1),
    }
}

fn push_lora<T: Scalar>(c: &mut Container, name: &str, lora: &LoraPair<T>) {
    c.push(Record::dense_f32(format!("{name}.lora_b"), lora.b.shape(), &tensor_f32(&lora.b)));
    c.push(Record::dense_f32(format!("{name}.lora_a"), lora.a.shape(), &tensor_f32(&lora.a)));
}

/// Serialize one linear layer's current weight form into records, and
/// return its descriptor.
pub fn push_layer<T: Scalar>(c: &mut Container, lin: &QuantizedLinear<T>) -> LayerMeta {
    let name = &lin.name;
    let shape = lin.weight.shape().to_vec();
    let meta = match &lin.form {
        WeightForm::Dense => {
            c.push(Record::dense_f32(name.clone(), &shape, &tensor_f32(&lin.weight)));
            LayerMeta { form: "dense".into(), bits: 32, group_size: 0, lora_rank: 0 }
        }
        WeightForm::Static { dequantized } => {
            // A fixed reconstruction with no surviving quantizer state is
            // stored dense; packed static layers come from the learnable
            // path below.
            c.push(Record::dense_f32(name.clone(), &shape, &tensor_f32(dequantized)));
            LayerMeta { form: "rtn".into(), bits: 32, group_size: 0, lora_rank: 0 }
        }
        WeightForm::Learnable(clip) => {
            let (spec, codes) = clip.bake(&lin.weight.to_vec());
            let group_size = match spec.group {
                GroupSize::PerMatrix => 0,
                GroupSize::Of(g) => g as u32,
            };
            let bits = spec.bits;
            c.push(Record::quantized(name.clone(), &shape, &spec, &codes));
            LayerMeta { form: "learnable_clip".into(), bits, group_size, lora_rank: 0 }
        }
        WeightForm::DualBinary(p) => {
            let layout = p.layout;
            let a1: Vec<f32> = tensor_f32(&p.alpha1);
            let a2: Vec<f32> = tensor_f32(&p.alpha2);
            let b1: Vec<f32> = tensor_f32(&p.b1);
            let b2: Vec<f32> = tensor_f32(&p.b2);
            c.push(signed_record(format!("{name}.b1"), &shape, &b1, &a1, layout));
            c.push(signed_record(format!("{name}.b2"), &shape, &b2, &a2, layout));
            let group_size = if layout.groups == 1 { 0 } else { layout.elems as u32 };
            LayerMeta { form: "dual_binary".into(), bits: 1, group_size, lora_rank: 0 }
        }
        WeightForm::Mos { mos, signs } => {
            let layout = GroupLayout { groups: 1, elems: signs.numel() };
            let ones = [1.0f32];
            c.push(signed_record(
                format!("{name}.signs"),
                &shape,
                &tensor_f32(signs),
                &ones,
                layout,
            ));
            c.push(Record::dense_f32(
                format!("{name}.experts"),
                mos.experts.shape(),
                &tensor_f32(&mos.experts),
            ));
            c.push(Record::dense_f32(
                format!("{name}.router"),
                mos.router.shape(),
                &tensor_f32(&mos.router),
            ));
            LayerMeta {
                form: "mos".into(),
                bits: 1,
                group_size: 0,
                lora_rank: 0,
            }
        }
    };
    let mut meta = meta;
    if let Some(lora) = &lin.lora {
        push_lora(c, name, lora);
        meta.lora_rank = lora.rank();
    }
    meta
}

/// Rebuild a layer's weight form (and correction) from its records.
///
/// Every baked form loads as the exact reconstruction its traced
/// counterpart computes, so evaluating a loaded artifact matches
/// evaluating the calibrated model in memory bit for bit; only the
/// mixture-of-scales form stays dynamic, because its scales depend on the
/// activations.
pub fn read_layer<T: Scalar>(
    container: &Container,
    lin: &mut QuantizedLinear<T>,
    meta: &LayerMeta,
) -> Result<()> {
    let name = lin.name.clone();
    let shape = lin.weight.shape().to_vec();
    let static_form = |values: Vec<f32>| -> WeightForm<T> {
        let data: Vec<T> = values.iter().map(|&v| T::lit(v as f64)).collect();
        WeightForm::Static { dequantized: Tensor::leaf(&shape, data, false) }
    };
    lin.form = match meta.form.as_str() {
        "dense" => {
            // The quantizer is off for this layer, so the stored record IS
            // the working weight; put it back where forward reads it.
            lin.weight = fetch_dense(container, &name, &shape, false)?;
            WeightForm::Dense
        }
        "rtn" => {
            let rec = container.require(&name)?;
            if rec.shape != shape {
                return Err(Error::corrupt(format!(
                    "record '{name}' has shape {:?}, expected {:?}",
                    rec.shape, shape
                )));
            }
            static_form(rec.dense_values()?)
        }
        "learnable_clip" => {
            let rec = container.require(&name)?;
            if rec.shape != shape {
                return Err(Error::corrupt(format!(
                    "record '{name}' has shape {:?}, expected {:?}",
                    rec.shape, shape
                )));
            }
            static_form(rec.dequantized()?)
        }
        "dual_binary" => {
            let r1 = container.require(&format!("{name}.b1"))?;
            let r2 = container.require(&format!("{name}.b2"))?;
            if r1.shape != shape || r2.shape != shape {
                return Err(Error::corrupt(format!(
                    "dual-binary records for '{name}' do not match the layer shape"
                )));
            }
            let d1 = r1.dequantized()?;
            let d2 = r2.dequantized()?;
            let sum: Vec<f32> = d1.iter().zip(&d2).map(|(a, b)| a + b).collect();
            static_form(sum)
        }
        "mos" => {
            let signs = container.require(&format!("{name}.signs"))?;
            if signs.shape != shape {
                return Err(Error::corrupt(format!(
                    "sign record for '{name}' does not match the layer shape"
                )));
            }
            let sign_values = signs.dequantized()?;
            let experts = container.require(&format!("{name}.experts"))?;
            let router = container.require(&format!("{name}.router"))?;
            if experts.shape.len() != 2
                || router.shape.len() != 2
                || experts.shape[0] != router.shape[0]
                || experts.shape[1] != shape[0]
                || router.shape[1] != shape[1]
            {
                return Err(Error::corrupt(format!(
                    "mixture records for '{name}' have inconsistent shapes"
                )));
            }
            let to_tensor = |rec: &Record, grad: bool| -> Result<Tensor<T>> {
                let vals = rec.dense_values()?;
                let data: Vec<T> = vals.iter().map(|&v| T::lit(v as f64)).collect();
                Ok(Tensor::leaf(&rec.shape, data, grad))
            };
            let mos = crate::quant::mos::MixtureOfScales {
                experts: to_tensor(experts, true)?,
                router: to_tensor(router, true)?,
            };
            let sign_data: Vec<T> = sign_values.iter().map(|&v| T::lit(v as f64)).collect();
            WeightForm::Mos { mos, signs: Tensor::leaf(&shape, sign_data, false) }
        }
        other => {
            return Err(Error::corrupt(format!("layer '{name}' has unknown form '{other}'")));
        }
    };
    lin.lora = if meta.lora_rank > 0 {
        let out = shape[0];
        let inp = shape[1];
        let b = fetch_dense::<T>(container, &format!("{name}.lora_b"), &[out, meta.lora_rank], true)?;
        let a = fetch_dense::<T>(container, &format!("{name}.lora_a"), &[meta.lora_rank, inp], true)?;
        Some(LoraPair { b, a })
    } else {
        None
    };
    Ok(())
}

/// Write a quantized artifact: dense records for everything outside the
/// quantizable linears, per-form records for the linears themselves, and a
/// metadata record describing each layer. `extra` records (run info,
/// resolved configuration) are appended as raw JSON.
pub fn save_quantized<T: Scalar>(
    model: &ToyTransformer<T>,
    tokenizer: &Tokenizer,
    extra: &[(String, Vec<u8>)],
    path: impl AsRef<Path>,
) -> Result<()> {
    let mut c = Container::new();
    let mut layers = BTreeMap::new();
    // Reserve the meta slot up front so the record order is stable:
    // meta, shared tensors, then blocks in order.
    let mut shared = Vec::new();
    for (name, p) in model.named_params() {
        let is_linear = model.quantizable_names().contains(&name);
        if !is_linear {
            shared.push(Record::dense_f32(name, p.shape(), &tensor_f32(&p)));
        }
    }
    let mut layer_records = Container::new();
    for blk in &model.blocks {
        for lin in blk.linears() {
            let meta = push_layer(&mut layer_records, lin);
            layers.insert(lin.name.clone(), meta);
        }
    }
    let meta = CheckpointMeta {
        kind: "quantized".into(),
        config: model.cfg,
        alphabet: tokenizer.alphabet().iter().collect(),
        layers,
    };
    c.push(meta_record(&meta));
    for rec in shared {
        c.push(rec);
    }
    for rec in layer_records.records {
        c.push(rec);
    }
    for (name, payload) in extra {
        c.push(Record::raw(name.clone(), payload.clone()));
    }
    c.save(path)
}

/// Read a quantized artifact back into an evaluable model.
pub fn load_quantized<T: Scalar>(
    path: impl AsRef<Path>,
) -> Result<(ToyTransformer<T>, Tokenizer, CheckpointMeta)> {
    let container = Container::load(path)?;
    let meta = read_meta(&container)?;
    if meta.kind != "quantized" {
        return Err(Error::corrupt(format!(
            "expected a quantized artifact, found kind '{}'",
            meta.kind
        )));
    }
    let tokenizer = Tokenizer::from_alphabet(meta.alphabet.chars().collect())?;
    let quantized: Vec<String> = meta.layers.keys().cloned().collect();
    let model = ToyTransformer::from_named(meta.config, |name, shape| {
        if quantized.iter().any(|q| q == name) {
            // Placeholder; the stored form replaces it below. Loaded
            // artifacts freeze the original weight.
            Ok(Tensor::leaf(shape, vec![T::zero(); shape.iter().product()], false))
        } else {
            fetch_dense(&container, name, shape, false)
        }
    })?;
    let mut model = model;
    for blk in &mut model.blocks {
        for lin in blk.linears_mut() {
            let layer_meta = meta.layers.get(&lin.name).ok_or_else(|| {
                Error::corrupt(format!("artifact has no descriptor for layer '{}'", lin.name))
            })?;
            read_layer(&container, lin, layer_meta)?;
        }
    }
    Ok((model, tokenizer, meta))
}

// ---------------------------------------------------------------------------
// Saliency maps.

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SaliencyMeta {
    kind: String,
    samples_used: usize,
    dropped_samples: usize,
    names: Vec<String>,
}

/// Write a sensitivity map as one dense record per parameter.
pub fn save_saliency<T: Scalar>(
    map: &SaliencyMap<T>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let meta = SaliencyMeta {
        kind: "saliency".into(),
        samples_used: map.samples_used,
        dropped_samples: map.dropped_samples,
        names: map.entries().iter().map(|(n, _)| n.clone()).collect(),
    };
    let mut c = Container::new();
    c.push(Record::raw(META_RECORD, serde_json::to_vec(&meta).expect("meta serializes")));
    for (name, values) in map.entries() {
        let vals: Vec<f32> = values.iter().map(|v| v.as_f64() as f32).collect();
        c.push(Record::dense_f32(name.clone(), &[vals.len()], &vals));
    }
    c.save(path)
}

/// Read a sensitivity map back, preserving entry order.
pub fn load_saliency<T: Scalar>(path: impl AsRef<Path>) -> Result<SaliencyMap<T>> {
    let container = Container::load(path)?;
    let rec = container.require(META_RECORD)?;
    let meta: SaliencyMeta = serde_json::from_slice(&rec.payload)
        .map_err(|e| Error::corrupt(format!("invalid saliency metadata: {e}")))?;
    if meta.kind != "saliency" {
        return Err(Error::corrupt(format!(
            "expected a saliency map, found kind '{}'",
            meta.kind
        )));
    }
    let mut entries = Vec::with_capacity(meta.names.len());
    for name in &meta.names {
        let values = container.require(name)?.dense_values()?;
        let data: Vec<T> = values.iter().map(|&v| T::lit(v as f64)).collect();
        entries.push((name.clone(), data));
    }
    Ok(SaliencyMap::new(entries, meta.dropped_samples, meta.samples_used))
}
