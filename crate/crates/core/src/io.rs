//! Named-tensor container, packed code storage, and calibration files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "LSIQ" | major: u16 | minor: u16 | header_len: u64 | header JSON | zero pad to 8 | payload
//! ```
//!
//! The header is `{"metadata": {...}, "tensors": {name: {dtype, shape, offset, length}}}`
//! with sorted keys. Offsets are relative to the payload start and aligned to
//! 8 bytes. Dtypes are `f64`, `f32` and `q<k>` (k-bit codes packed LSB-first).

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};
use serde_json::{json, Value};

use crate::error::{LsiError, Result};
use crate::lsi::LsiParams;
use crate::model::{
    Block, BlockSmooth, ChannelSmooth, LayerGraph, Linear, ModelConfig, Norm, WeightState, LINEAR_NAMES,
};
use crate::quant::{ClipLogits, Granularity, QuantConfig, QuantTarget, QuantizedTensor};
use crate::tensor::{Matrix, SvdFactors};

pub const MAGIC: &[u8; 4] = b"LSIQ";
pub const FORMAT_MAJOR: u16 = 1;
pub const FORMAT_MINOR: u16 = 0;
const PREAMBLE: usize = 16;

/// Pack `k`-bit codes LSB-first into `ceil(len·k/8)` bytes.
pub fn pack_codes(codes: &[u8], bits: u8) -> Result<Vec<u8>> {
    check_bits(bits)?;
    let k = bits as usize;
    let max = ((1u16 << bits) - 1) as u8;
    let mut out = vec![0u8; (codes.len() * k).div_ceil(8)];
    for (i, &c) in codes.iter().enumerate() {
        if c > max {
            return Err(LsiError::Domain(format!("code {c} at index {i} does not fit in {bits} bits")));
        }
        let bit = i * k;
        let word = (c as u16) << (bit % 8);
        out[bit / 8] |= word as u8;
        if bit % 8 + k > 8 {
            out[bit / 8 + 1] |= (word >> 8) as u8;
        }
    }
    Ok(out)
}

/// Inverse of [`pack_codes`].
pub fn unpack_codes(bytes: &[u8], bits: u8, count: usize) -> Result<Vec<u8>> {
    check_bits(bits)?;
    let k = bits as usize;
    let need = (count * k).div_ceil(8);
    if bytes.len() < need {
        return Err(LsiError::Domain(format!(
            "{} bytes cannot hold {count} codes of {bits} bits",
            bytes.len()
        )));
    }
    let mask = (1u16 << bits) - 1;
    Ok((0..count)
        .map(|i| {
            let bit = i * k;
            let lo = bytes[bit / 8] as u16;
            let hi = if bit % 8 + k > 8 { bytes[bit / 8 + 1] as u16 } else { 0 };
            (((lo | (hi << 8)) >> (bit % 8)) & mask) as u8
        })
        .collect())
}

fn check_bits(bits: u8) -> Result<()> {
    if (1..=8).contains(&bits) {
        Ok(())
    } else {
        Err(LsiError::Domain(format!("unsupported code width {bits}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F64 { shape: Vec<usize>, data: Vec<f64> },
    /// Stored as `f32`; read back widened.
    F32 { shape: Vec<usize>, data: Vec<f64> },
    Codes { bits: u8, shape: Vec<usize>, codes: Vec<u8> },
}

impl TensorData {
    pub fn shape(&self) -> &[usize] {
        match self {
            TensorData::F64 { shape, .. } | TensorData::F32 { shape, .. } | TensorData::Codes { shape, .. } => shape,
        }
    }

    fn dtype(&self) -> String {
        match self {
            TensorData::F64 { .. } => "f64".into(),
            TensorData::F32 { .. } => "f32".into(),
            TensorData::Codes { bits, .. } => format!("q{bits}"),
        }
    }

    fn encode(&self) -> Result<Vec<u8>> {
        Ok(match self {
            TensorData::F64 { data, .. } => data.iter().flat_map(|v| v.to_le_bytes()).collect(),
            TensorData::F32 { data, .. } => data.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect(),
            TensorData::Codes { bits, codes, .. } => pack_codes(codes, *bits)?,
        })
    }
}

/// In-memory form of a container file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorContainer {
    pub metadata: BTreeMap<String, Value>,
    pub tensors: BTreeMap<String, TensorData>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    length: u64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    metadata: BTreeMap<String, Value>,
    tensors: UniqueTable,
}

/// Tensor table that rejects repeated names.
struct UniqueTable(Vec<(String, Entry)>);

impl<'de> Deserialize<'de> for UniqueTable {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = UniqueTable;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a map of tensor entries")
            }
            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> std::result::Result<UniqueTable, A::Error> {
                let mut seen = std::collections::BTreeSet::new();
                let mut out = Vec::new();
                while let Some((name, entry)) = map.next_entry::<String, Entry>()? {
                    if !seen.insert(name.clone()) {
                        return Err(serde::de::Error::custom(format!("duplicate tensor name `{name}`")));
                    }
                    out.push((name, entry));
                }
                Ok(UniqueTable(out))
            }
        }
        d.deserialize_map(V)
    }
}

fn align8(n: usize) -> usize {
    n.div_ceil(8) * 8
}

impl TensorContainer {
    pub fn insert(&mut self, name: impl Into<String>, t: TensorData) {
        self.tensors.insert(name.into(), t);
    }

    pub fn insert_matrix(&mut self, name: impl Into<String>, m: &Matrix) {
        self.insert(
            name,
            TensorData::F64 {
                shape: vec![m.rows(), m.cols()],
                data: m.data().to_vec(),
            },
        );
    }

    pub fn insert_vec(&mut self, name: impl Into<String>, v: &[f64]) {
        self.insert(
            name,
            TensorData::F64 {
                shape: vec![v.len()],
                data: v.to_vec(),
            },
        );
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut table = serde_json::Map::new();
        let mut payload = Vec::new();
        for (name, t) in &self.tensors {
            let bytes = t.encode()?;
            payload.resize(align8(payload.len()), 0);
            let entry = Entry {
                dtype: t.dtype(),
                shape: t.shape().to_vec(),
                offset: payload.len() as u64,
                length: bytes.len() as u64,
            };
            payload.extend_from_slice(&bytes);
            table.insert(name.clone(), serde_json::to_value(entry).expect("entry serializes"));
        }
        let header = json!({ "metadata": self.metadata, "tensors": table });
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(PREAMBLE + header.len() + 8 + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_MAJOR.to_le_bytes());
        out.extend_from_slice(&FORMAT_MINOR.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.resize(align8(out.len()), 0);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < PREAMBLE {
            return Err(LsiError::parse("byte 0", format!("file of {} bytes is shorter than the preamble", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(LsiError::parse("byte 0", "bad magic"));
        }
        let major = u16::from_le_bytes([bytes[4], bytes[5]]);
        if major != FORMAT_MAJOR {
            return Err(LsiError::parse("byte 4", format!("unsupported format major version {major}")));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let header_end = (PREAMBLE as u64)
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len() as u64)
            .ok_or_else(|| LsiError::parse("byte 8", format!("header length {header_len} runs past end of file")))?
            as usize;
        let header: Header = serde_json::from_slice(&bytes[PREAMBLE..header_end])
            .map_err(|e| LsiError::parse(format!("header byte {}", PREAMBLE), format!("invalid header: {e}")))?;
        let payload_start = align8(header_end);
        if payload_start > bytes.len() {
            return Err(LsiError::parse(format!("byte {header_end}"), "header padding runs past end of file"));
        }
        let payload = &bytes[payload_start..];
        let mut spans: Vec<(u64, u64, &str)> = Vec::new();
        let mut tensors = BTreeMap::new();
        for (name, e) in &header.tensors.0 {
            let loc = format!("tensor `{name}`");
            if e.offset % 8 != 0 {
                return Err(LsiError::parse(loc, format!("offset {} is not 8-byte aligned", e.offset)));
            }
            let end = e
                .offset
                .checked_add(e.length)
                .filter(|&end| end <= payload.len() as u64)
                .ok_or_else(|| {
                    LsiError::parse(
                        loc.clone(),
                        format!(
                            "bytes {}..+{} exceed the {}-byte payload",
                            e.offset,
                            e.length,
                            payload.len()
                        ),
                    )
                })?;
            let count = e
                .shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| LsiError::parse(loc.clone(), "shape overflows"))?;
            let raw = &payload[e.offset as usize..end as usize];
            let expect_len = |unit: usize| -> Result<()> {
                match count.checked_mul(unit) {
                    Some(n) if n as u64 == e.length => Ok(()),
                    _ => Err(LsiError::parse(
                        loc.clone(),
                        format!("length {} does not match shape {:?}", e.length, e.shape),
                    )),
                }
            };
            let data = match e.dtype.as_str() {
                "f64" => {
                    expect_len(8)?;
                    TensorData::F64 {
                        shape: e.shape.clone(),
                        data: raw
                            .chunks_exact(8)
                            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                            .collect(),
                    }
                }
                "f32" => {
                    expect_len(4)?;
                    TensorData::F32 {
                        shape: e.shape.clone(),
                        data: raw
                            .chunks_exact(4)
                            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                            .collect(),
                    }
                }
                d if d.starts_with('q') => {
                    let bits: u8 = d[1..]
                        .parse()
                        .ok()
                        .filter(|b| (1..=8).contains(b))
                        .ok_or_else(|| LsiError::parse(loc.clone(), format!("unknown dtype `{d}`")))?;
                    let need = count.checked_mul(bits as usize).map(|b| b.div_ceil(8));
                    if need != Some(e.length as usize) {
                        return Err(LsiError::parse(
                            loc,
                            format!("length {} does not match {count} codes of {bits} bits", e.length),
                        ));
                    }
                    let used = count * bits as usize;
                    if used % 8 != 0 && raw[raw.len() - 1] >> (used % 8) != 0 {
                        return Err(LsiError::parse(loc, "nonzero padding bits"));
                    }
                    TensorData::Codes {
                        bits,
                        shape: e.shape.clone(),
                        codes: unpack_codes(raw, bits, count)?,
                    }
                }
                d => return Err(LsiError::parse(loc, format!("unknown dtype `{d}`"))),
            };
            spans.push((e.offset, end, name));
            tensors.insert(name.clone(), data);
        }
        spans.sort();
        for w in spans.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(LsiError::parse(
                    format!("tensor `{}`", w[1].2),
                    format!("bytes overlap tensor `{}`", w[0].2),
                ));
            }
        }
        Ok(TensorContainer {
            metadata: header.metadata,
            tensors,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    fn get(&self, name: &str) -> Result<&TensorData> {
        self.tensors
            .get(name)
            .ok_or_else(|| LsiError::parse(format!("tensor `{name}`"), "missing"))
    }

    fn has(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    fn floats(&self, name: &str) -> Result<(&[usize], &[f64])> {
        match self.get(name)? {
            TensorData::F64 { shape, data } | TensorData::F32 { shape, data } => Ok((shape, data)),
            TensorData::Codes { .. } => Err(LsiError::parse(format!("tensor `{name}`"), "expected floats")),
        }
    }

    pub fn vector(&self, name: &str) -> Result<Vec<f64>> {
        Ok(self.floats(name)?.1.to_vec())
    }

    pub fn matrix(&self, name: &str) -> Result<Matrix> {
        let (shape, data) = self.floats(name)?;
        match shape {
            [r, c] => Matrix::from_vec(*r, *c, data.to_vec()),
            _ => Err(LsiError::parse(format!("tensor `{name}`"), format!("expected 2-D shape, got {shape:?}"))),
        }
    }
}

/// Write via a temporary file in the target directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| LsiError::Io(e.error))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Models

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct WriteOptions {
    /// Store float tensors as `f32`. Lossy.
    pub f32_floats: bool,
}

fn granularity_value(g: Granularity) -> Value {
    match g {
        Granularity::PerTensor => json!("per_tensor"),
        Granularity::PerChannel => json!("per_channel"),
        Granularity::Group(n) => json!({ "group": n }),
    }
}

fn granularity_from(v: &Value, loc: &str) -> Result<Granularity> {
    match v {
        Value::String(s) if s == "per_tensor" => Ok(Granularity::PerTensor),
        Value::String(s) if s == "per_channel" => Ok(Granularity::PerChannel),
        Value::Object(m) => m
            .get("group")
            .and_then(Value::as_u64)
            .filter(|&g| g > 0)
            .map(|g| Granularity::Group(g as usize))
            .ok_or_else(|| LsiError::parse(loc, "bad group granularity")),
        _ => Err(LsiError::parse(loc, "bad granularity")),
    }
}

struct ModelWriter {
    c: TensorContainer,
    f32_floats: bool,
}

impl ModelWriter {
    fn mat(&mut self, name: String, m: &Matrix) {
        if self.f32_floats {
            self.c.insert(
                name,
                TensorData::F32 {
                    shape: vec![m.rows(), m.cols()],
                    data: m.data().to_vec(),
                },
            );
        } else {
            self.c.insert_matrix(name, m);
        }
    }

    fn vec(&mut self, name: String, v: &[f64]) {
        if self.f32_floats {
            self.c.insert(
                name,
                TensorData::F32 {
                    shape: vec![v.len()],
                    data: v.to_vec(),
                },
            );
        } else {
            self.c.insert_vec(name, v);
        }
    }

    fn linear(&mut self, p: &str, lin: &Linear) -> Value {
        self.vec(format!("{p}.bias"), &lin.bias);
        if let Some(c) = &lin.clip {
            self.vec(format!("{p}.clip_gamma"), &c.gamma);
            self.vec(format!("{p}.clip_beta"), &c.beta);
        }
        let mut meta = json!({ "state": lin.weight.kind(), "clip": lin.clip.is_some() });
        match &lin.weight {
            WeightState::Float(w) => self.mat(format!("{p}.weight"), w),
            WeightState::Lsi(lp) => {
                self.mat(format!("{p}.u"), &lp.factors.u);
                self.vec(format!("{p}.s"), &lp.factors.s);
                self.mat(format!("{p}.v_h"), &lp.factors.v_h);
                self.vec(format!("{p}.increment"), &lp.increment);
                if let Some(k) = &lp.square {
                    self.mat(format!("{p}.square"), k);
                }
            }
            WeightState::Quantized(q) => {
                self.c.insert(
                    format!("{p}.codes"),
                    TensorData::Codes {
                        bits: q.config.bits,
                        shape: vec![q.rows, q.cols],
                        codes: q.codes.clone(),
                    },
                );
                // Scales and zero points stay f64 so folds round-trip exactly.
                self.c.insert_vec(format!("{p}.scales"), &q.scales);
                self.c.insert_vec(format!("{p}.zeros"), &q.zeros);
                meta["bits"] = json!(q.config.bits);
                meta["granularity"] = granularity_value(q.config.granularity);
                if let Some(c) = &q.config.clip {
                    self.c.insert_vec(format!("{p}.qclip_gamma"), &c.gamma);
                    self.c.insert_vec(format!("{p}.qclip_beta"), &c.beta);
                }
            }
        }
        meta
    }
}

pub fn model_to_container(model: &LayerGraph, opts: WriteOptions) -> TensorContainer {
    let mut w = ModelWriter {
        c: TensorContainer::default(),
        f32_floats: opts.f32_floats,
    };
    w.mat("embedding".into(), &model.embedding);
    w.mat("head".into(), &model.head);
    w.vec("final_norm.gain".into(), &model.final_norm.gain);
    w.vec("final_norm.bias".into(), &model.final_norm.bias);
    let mut blocks = Vec::new();
    for (i, b) in model.blocks.iter().enumerate() {
        let p = format!("blocks.{i}");
        w.vec(format!("{p}.norm1.gain"), &b.norm1.gain);
        w.vec(format!("{p}.norm1.bias"), &b.norm1.bias);
        w.vec(format!("{p}.norm2.gain"), &b.norm2.gain);
        w.vec(format!("{p}.norm2.bias"), &b.norm2.bias);
        let mut lin_meta = serde_json::Map::new();
        for (lin, name) in b.linears().iter().zip(LINEAR_NAMES) {
            lin_meta.insert(name.into(), w.linear(&format!("{p}.{name}"), lin));
        }
        if let Some(s) = &b.smooth {
            for (n, cs) in [("qkv", &s.qkv), ("out", &s.out), ("mlp", &s.mlp)] {
                w.vec(format!("{p}.smooth.{n}.scale"), &cs.scale);
                w.vec(format!("{p}.smooth.{n}.shift"), &cs.shift);
            }
            w.vec(format!("{p}.smooth.attn"), &s.attn);
        }
        blocks.push(json!({ "linears": lin_meta, "smooth": b.smooth.is_some() }));
    }
    w.c.metadata.insert("kind".into(), json!("lsiquant-model"));
    w.c.metadata.insert(
        "config".into(),
        serde_json::to_value(&model.config).expect("config serializes"),
    );
    w.c.metadata.insert("blocks".into(), Value::Array(blocks));
    w.c
}

fn read_linear(c: &TensorContainer, p: &str, meta: &Value) -> Result<Linear> {
    let loc = format!("metadata for `{p}`");
    let state = meta
        .get("state")
        .and_then(Value::as_str)
        .ok_or_else(|| LsiError::parse(loc.clone(), "missing weight state"))?;
    let clip = if meta.get("clip").and_then(Value::as_bool).unwrap_or(false) {
        Some(ClipLogits {
            gamma: c.vector(&format!("{p}.clip_gamma"))?,
            beta: c.vector(&format!("{p}.clip_beta"))?,
        })
    } else {
        None
    };
    let weight = match state {
        "float" => WeightState::Float(c.matrix(&format!("{p}.weight"))?),
        "lsi" => {
            let sq = format!("{p}.square");
            WeightState::Lsi(LsiParams {
                factors: SvdFactors {
                    u: c.matrix(&format!("{p}.u"))?,
                    s: c.vector(&format!("{p}.s"))?,
                    v_h: c.matrix(&format!("{p}.v_h"))?,
                },
                increment: c.vector(&format!("{p}.increment"))?,
                square: if c.has(&sq) { Some(c.matrix(&sq)?) } else { None },
            })
        }
        "quantized" => {
            let name = format!("{p}.codes");
            let TensorData::Codes { bits, shape, codes } = c.get(&name)? else {
                return Err(LsiError::parse(format!("tensor `{name}`"), "expected packed codes"));
            };
            let [rows, cols] = shape[..] else {
                return Err(LsiError::parse(format!("tensor `{name}`"), "expected 2-D codes"));
            };
            let meta_bits = meta.get("bits").and_then(Value::as_u64);
            if meta_bits != Some(*bits as u64) {
                return Err(LsiError::parse(loc, "bit width disagrees with stored codes"));
            }
            let gran = granularity_from(meta.get("granularity").unwrap_or(&Value::Null), &loc)?;
            let qg = format!("{p}.qclip_gamma");
            let qclip = if c.has(&qg) {
                Some(ClipLogits {
                    gamma: c.vector(&qg)?,
                    beta: c.vector(&format!("{p}.qclip_beta"))?,
                })
            } else {
                None
            };
            let q = QuantizedTensor {
                rows,
                cols,
                codes: codes.clone(),
                scales: c.vector(&format!("{p}.scales"))?,
                zeros: c.vector(&format!("{p}.zeros"))?,
                config: QuantConfig {
                    bits: *bits,
                    granularity: gran,
                    target: QuantTarget::Weight,
                    clip: qclip,
                },
            };
            q.validate().map_err(|e| LsiError::parse(format!("tensor `{name}`"), e.to_string()))?;
            WeightState::Quantized(q)
        }
        other => return Err(LsiError::parse(loc, format!("unknown weight state `{other}`"))),
    };
    Ok(Linear {
        weight,
        bias: c.vector(&format!("{p}.bias"))?,
        clip,
    })
}

pub fn model_from_container(c: &TensorContainer) -> Result<LayerGraph> {
    if c.metadata.get("kind").and_then(Value::as_str) != Some("lsiquant-model") {
        return Err(LsiError::parse("metadata.kind", "not a model file"));
    }
    let config: ModelConfig = serde_json::from_value(c.metadata.get("config").cloned().unwrap_or(Value::Null))
        .map_err(|e| LsiError::parse("metadata.config", e.to_string()))?;
    let blocks_meta = c
        .metadata
        .get("blocks")
        .and_then(Value::as_array)
        .ok_or_else(|| LsiError::parse("metadata.blocks", "missing block list"))?;
    let mut blocks = Vec::with_capacity(blocks_meta.len());
    for (i, bm) in blocks_meta.iter().enumerate() {
        let p = format!("blocks.{i}");
        let lm = bm
            .get("linears")
            .ok_or_else(|| LsiError::parse(format!("metadata.blocks[{i}]"), "missing linears"))?;
        let lin = |name: &str| -> Result<Linear> {
            let meta = lm
                .get(name)
                .ok_or_else(|| LsiError::parse(format!("metadata.blocks[{i}]"), format!("missing `{name}`")))?;
            read_linear(c, &format!("{p}.{name}"), meta)
        };
        let (q, k, v, o, up, down) = (lin("q")?, lin("k")?, lin("v")?, lin("o")?, lin("up")?, lin("down")?);
        let smooth = if bm.get("smooth").and_then(Value::as_bool).unwrap_or(false) {
            let cs = |n: &str| -> Result<ChannelSmooth> {
                Ok(ChannelSmooth {
                    scale: c.vector(&format!("{p}.smooth.{n}.scale"))?,
                    shift: c.vector(&format!("{p}.smooth.{n}.shift"))?,
                })
            };
            Some(BlockSmooth {
                qkv: cs("qkv")?,
                attn: c.vector(&format!("{p}.smooth.attn"))?,
                out: cs("out")?,
                mlp: cs("mlp")?,
            })
        } else {
            None
        };
        blocks.push(Block {
            norm1: Norm {
                gain: c.vector(&format!("{p}.norm1.gain"))?,
                bias: c.vector(&format!("{p}.norm1.bias"))?,
            },
            q,
            k,
            v,
            o,
            norm2: Norm {
                gain: c.vector(&format!("{p}.norm2.gain"))?,
                bias: c.vector(&format!("{p}.norm2.bias"))?,
            },
            up,
            down,
            smooth,
        });
    }
    let model = LayerGraph {
        config,
        embedding: c.matrix("embedding")?,
        blocks,
        final_norm: Norm {
            gain: c.vector("final_norm.gain")?,
            bias: c.vector("final_norm.bias")?,
        },
        head: c.matrix("head")?,
    };
    model
        .validate()
        .map_err(|e| LsiError::parse("model", format!("inconsistent model: {e}")))?;
    Ok(model)
}

pub fn encode_model(model: &LayerGraph) -> Result<Vec<u8>> {
    model_to_container(model, WriteOptions::default()).to_bytes()
}

pub fn decode_model(bytes: &[u8]) -> Result<LayerGraph> {
    model_from_container(&TensorContainer::from_bytes(bytes)?)
}

pub fn write_model(path: &Path, model: &LayerGraph) -> Result<()> {
    write_model_with(path, model, WriteOptions::default())
}

pub fn write_model_with(path: &Path, model: &LayerGraph, opts: WriteOptions) -> Result<()> {
    model_to_container(model, opts).write(path)
}

pub fn read_model(path: &Path) -> Result<LayerGraph> {
    model_from_container(&TensorContainer::read(path)?)
}

// ---------------------------------------------------------------------------
// Calibration data

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CalibFormat {
    /// One sequence per line, whitespace-separated decimal ids; ids must be
    /// below `vocab` when given.
    Tokens { vocab: Option<usize> },
    /// A container with `sample.<i>` matrices.
    Activations,
}

pub fn parse_tokens(text: &str, vocab: Option<usize>) -> Result<Vec<Vec<usize>>> {
    let mut out = Vec::new();
    let mut line_start = 0usize;
    for (ln, line) in text.split('\n').enumerate() {
        let mut seq = Vec::new();
        let mut pos = 0;
        for tok in line.split_ascii_whitespace() {
            let col = pos + line[pos..].find(tok).expect("token is in line");
            pos = col + tok.len();
            let loc = || format!("line {}, column {} (byte {})", ln + 1, col + 1, line_start + col);
            let id: usize = tok
                .parse()
                .map_err(|_| LsiError::parse(loc(), format!("`{tok}` is not a token id")))?;
            if let Some(v) = vocab {
                if id >= v {
                    return Err(LsiError::parse(loc(), format!("token id {id} outside vocabulary of {v}")));
                }
            }
            seq.push(id);
        }
        if !seq.is_empty() {
            out.push(seq);
        }
        line_start += line.len() + 1;
    }
    if out.is_empty() {
        return Err(LsiError::Domain("calibration file holds no sequences".into()));
    }
    Ok(out)
}

pub fn format_tokens(seqs: &[Vec<usize>]) -> String {
    let mut s = String::new();
    for seq in seqs {
        let line: Vec<String> = seq.iter().map(usize::to_string).collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    s
}

pub fn write_tokens(path: &Path, seqs: &[Vec<usize>]) -> Result<()> {
    write_atomic(path, format_tokens(seqs).as_bytes())
}

pub fn write_activations(path: &Path, samples: &[Matrix]) -> Result<()> {
    let mut c = TensorContainer::default();
    c.metadata.insert("kind".into(), json!("lsiquant-activations"));
    c.metadata.insert("samples".into(), json!(samples.len()));
    for (i, m) in samples.iter().enumerate() {
        c.insert_matrix(format!("sample.{i:06}"), m);
    }
    c.write(path)
}

pub fn load_calib(path: &Path, format: CalibFormat) -> Result<crate::model::CalibSet> {
    use crate::model::CalibSet;
    match format {
        CalibFormat::Tokens { vocab } => {
            let bytes = std::fs::read(path)?;
            let text = std::str::from_utf8(&bytes).map_err(|e| {
                LsiError::parse(format!("byte {}", e.valid_up_to()), "file is not UTF-8 text")
            })?;
            Ok(CalibSet::Tokens(parse_tokens(text, vocab)?))
        }
        CalibFormat::Activations => {
            let c = TensorContainer::read(path)?;
            let n = c
                .metadata
                .get("samples")
                .and_then(Value::as_u64)
                .ok_or_else(|| LsiError::parse("metadata.samples", "missing sample count"))?
                as usize;
            if n == 0 {
                return Err(LsiError::Domain("calibration file holds no samples".into()));
            }
            if c.tensors.len() != n {
                return Err(LsiError::parse(
                    "metadata.samples",
                    format!("declares {n} samples but holds {} tensors", c.tensors.len()),
                ));
            }
            let samples = (0..n)
                .map(|i| c.matrix(&format!("sample.{i:06}")))
                .collect::<Result<Vec<_>>>()?;
            Ok(CalibSet::Activations(samples))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pack_examples() {
        assert_eq!(pack_codes(&[1, 2], 4).unwrap(), vec![0x21]);
        assert_eq!(pack_codes(&[0, 0, 0, 0], 2).unwrap(), vec![0x00]);
        assert_eq!(pack_codes(&[7, 0, 5], 3).unwrap(), vec![0b0100_0111, 0b0000_0001]);
        assert!(matches!(pack_codes(&[4], 2), Err(LsiError::Domain(_))));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut c = TensorContainer::default();
        c.insert_vec("a", &[1.0]);
        c.insert_vec("b", &[2.0]);
        let bytes = c.to_bytes().unwrap();
        let mut patched = bytes.clone();
        let at = patched.windows(4).position(|w| w == b"\"b\":").unwrap();
        patched[at + 1] = b'a';
        let err = TensorContainer::from_bytes(&patched).unwrap_err();
        assert!(matches!(&err, LsiError::Parse { message, .. } if message.contains("duplicate")), "{err}");
    }

    #[test]
    fn token_parsing_errors() {
        assert!(matches!(parse_tokens("", None), Err(LsiError::Domain(_))));
        let err = parse_tokens("1 2 3\n4 99 5\n", Some(50)).unwrap_err();
        match err {
            LsiError::Parse { location, .. } => assert_eq!(location, "line 2, column 3 (byte 8)"),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_tokens("1 x\n", None), Err(LsiError::Parse { .. })));
        assert_eq!(parse_tokens("1 2\n\n3\n", None).unwrap(), vec![vec![1, 2], vec![3]]);
    }
}
