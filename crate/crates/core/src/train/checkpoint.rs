//! Versioned binary checkpoint layout.
//!
//! ```text
//! "RQCK"  u8 version  u64 step  u32 len + utf8 config digest
//! table(params)  table(ema)  checksum
//! table  := u32 count, entry*
//! entry  := u32 len + utf8 name, u8 dtype, u8 rank, u64 dim * rank, payload
//! dtype 0 (f32):       numel * f32
//! dtype 1 (quantized): u8 bit, u8 granularity (0 tensor, 1 channel),
//!                      u32 n_scales, f32 * n_scales, u64 n_bytes, u8 * n_bytes
//! ```
//!
//! `checksum` is the first 8 bytes of the SHA-256 of everything before it, so
//! a flipped payload byte is a format error rather than a silently different
//! model. All integers and floats are little-endian. Int4 payloads are packed two
//! values per byte with the even index in the low nibble.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::quant::{Granularity, QData, QuantizedTensor, ScaleSet};
use crate::seq2seq::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"RQCK";
pub const FORMAT_VERSION: u8 = 1;
const MAX_RANK: usize = 8;
const DTYPE_F32: u8 = 0;
const DTYPE_QUANTIZED: u8 = 1;
const CHECKSUM_LEN: usize = 8;

fn checksum(body: &[u8]) -> [u8; CHECKSUM_LEN] {
    Sha256::digest(body)[..CHECKSUM_LEN].try_into().expect("digest is 32 bytes")
}

/// One stored tensor.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorEntry {
    Float(Tensor),
    Quantized(QuantizedTensor),
}

impl TensorEntry {
    pub fn shape(&self) -> &[usize] {
        match self {
            TensorEntry::Float(t) => t.shape(),
            TensorEntry::Quantized(q) => &q.shape,
        }
    }

    fn bit_eq(&self, other: &TensorEntry) -> bool {
        match (self, other) {
            (TensorEntry::Float(a), TensorEntry::Float(b)) => a.bit_eq(b),
            (TensorEntry::Quantized(a), TensorEntry::Quantized(b)) => {
                a.shape == b.shape
                    && a.bit == b.bit
                    && a.qdata == b.qdata
                    && a.scales.granularity == b.scales.granularity
                    && a.scales.scales.iter().map(|s| s.to_bits()).eq(b.scales.scales.iter().map(|s| s.to_bits()))
            }
            _ => false,
        }
    }
}

/// The raw file contents: two named tables.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointFile {
    pub step: u64,
    pub config_digest: String,
    pub params: Vec<(String, TensorEntry)>,
    pub ema: Vec<(String, TensorEntry)>,
}

impl CheckpointFile {
    pub fn bit_eq(&self, other: &CheckpointFile) -> bool {
        let table_eq = |a: &[(String, TensorEntry)], b: &[(String, TensorEntry)]| {
            a.len() == b.len() && a.iter().zip(b).all(|((na, ta), (nb, tb))| na == nb && ta.bit_eq(tb))
        };
        self.step == other.step
            && self.config_digest == other.config_digest
            && table_eq(&self.params, &other.params)
            && table_eq(&self.ema, &other.ema)
    }
}

/// Raw parameters plus their EMA shadow after `step` updates.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub config_digest: String,
    pub params: ParamStore,
    pub ema: ParamStore,
}

impl Checkpoint {
    pub fn bit_eq(&self, other: &Checkpoint) -> bool {
        self.step == other.step
            && self.config_digest == other.config_digest
            && self.params.bit_eq(&other.params)
            && self.ema.bit_eq(&other.ema)
    }

    pub fn to_file(&self) -> CheckpointFile {
        let table = |s: &ParamStore| s.iter().map(|(n, t)| (n.to_string(), TensorEntry::Float(t.clone()))).collect();
        CheckpointFile {
            step: self.step,
            config_digest: self.config_digest.clone(),
            params: table(&self.params),
            ema: table(&self.ema),
        }
    }

    /// Fails if any entry is quantized.
    pub fn from_file(file: CheckpointFile) -> Result<Checkpoint> {
        let table = |entries: Vec<(String, TensorEntry)>| -> Result<ParamStore> {
            let mut store = ParamStore::new();
            for (name, entry) in entries {
                match entry {
                    TensorEntry::Float(t) => store.insert(name, t)?,
                    TensorEntry::Quantized(_) => {
                        return Err(Error::Config(format!("{name} is quantized; expected a float checkpoint")))
                    }
                }
            }
            Ok(store)
        };
        Ok(Checkpoint {
            step: file.step,
            config_digest: file.config_digest,
            params: table(file.params)?,
            ema: table(file.ema)?,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        encode(&self.to_file())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        Checkpoint::from_file(decode(bytes)?)
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    save_file(&ckpt.to_file(), path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::from_file(load_file(path)?)
}

pub fn save_file(file: &CheckpointFile, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(file)).map_err(|e| Error::io(path, e))
}

pub fn load_file(path: impl AsRef<Path>) -> Result<CheckpointFile> {
    let path = path.as_ref();
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn encode(file: &CheckpointFile) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(FORMAT_VERSION);
    out.extend_from_slice(&file.step.to_le_bytes());
    put_str(&mut out, &file.config_digest);
    for table in [&file.params, &file.ema] {
        out.extend_from_slice(&(table.len() as u32).to_le_bytes());
        for (name, entry) in table {
            put_str(&mut out, name);
            put_entry(&mut out, entry);
        }
    }
    let sum = checksum(&out);
    out.extend_from_slice(&sum);
    out
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_entry(out: &mut Vec<u8>, entry: &TensorEntry) {
    out.push(match entry {
        TensorEntry::Float(_) => DTYPE_F32,
        TensorEntry::Quantized(_) => DTYPE_QUANTIZED,
    });
    let shape = entry.shape();
    out.push(shape.len() as u8);
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match entry {
        TensorEntry::Float(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        TensorEntry::Quantized(q) => {
            out.push(q.bit as u8);
            out.push(match q.scales.granularity {
                Granularity::PerTensor => 0,
                Granularity::PerChannel => 1,
            });
            out.extend_from_slice(&(q.scales.scales.len() as u32).to_le_bytes());
            q.scales.scales.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
            let bytes: Vec<u8> = match &q.qdata {
                QData::Packed4 { bytes, .. } => bytes.clone(),
                QData::Bytes(v) => v.iter().map(|&b| b as u8).collect(),
            };
            out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
            out.extend_from_slice(&bytes);
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, detail: impl Into<String>) -> Error {
        Error::Format { offset: self.pos, detail: detail.into() }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let remaining = self.bytes.len() - self.pos;
        if n > remaining {
            return Err(self.err(format!("truncated {what}: need {n} bytes, {remaining} left")));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| self.err("size overflow"))?, what)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let start = self.pos;
        let n = self.u32(what)? as usize;
        let bytes = self.take(n, what)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::Format { offset: start, detail: format!("{what} is not utf-8") })
    }

    fn entry(&mut self, name: &str) -> Result<TensorEntry> {
        let at = self.pos;
        let dtype = self.u8("dtype tag")?;
        let rank = self.u8("rank")? as usize;
        if rank > MAX_RANK {
            return Err(Error::Format { offset: at + 1, detail: format!("{name}: rank {rank} exceeds {MAX_RANK}") });
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u64("dimension")? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| self.err(format!("{name}: element count overflows")))?;
        match dtype {
            DTYPE_F32 => Ok(TensorEntry::Float(Tensor::from_vec(shape, self.f32s(numel, name)?))),
            DTYPE_QUANTIZED => {
                let at = self.pos;
                let bit = self.u8("bit width")? as u32;
                if !(2..=8).contains(&bit) {
                    return Err(Error::Format { offset: at, detail: format!("{name}: stored bit width {bit}") });
                }
                let at = self.pos;
                let granularity = match self.u8("granularity")? {
                    0 => Granularity::PerTensor,
                    1 => Granularity::PerChannel,
                    g => return Err(Error::Format { offset: at, detail: format!("{name}: granularity tag {g}") }),
                };
                let at = self.pos;
                let n_scales = self.u32("scale count")? as usize;
                let scales = self.f32s(n_scales, "scales")?;
                let scales = ScaleSet::new(scales, granularity)
                    .map_err(|e| Error::Format { offset: at, detail: format!("{name}: {e}") })?;
                let at = self.pos;
                let n_bytes = self.u64("payload length")? as usize;
                let expected = if bit <= 4 { numel.div_ceil(2) } else { numel };
                if n_bytes != expected {
                    return Err(Error::Format {
                        offset: at,
                        detail: format!("{name}: payload of {n_bytes} bytes for {numel} values"),
                    });
                }
                let raw = self.take(n_bytes, name)?;
                let qdata = if bit <= 4 {
                    QData::Packed4 { bytes: raw.to_vec(), len: numel }
                } else {
                    QData::Bytes(raw.iter().map(|&b| b as i8).collect())
                };
                Ok(TensorEntry::Quantized(QuantizedTensor { shape, bit, scales, qdata }))
            }
            t => Err(Error::Format { offset: at, detail: format!("{name}: unknown dtype tag {t}") }),
        }
    }

    fn table(&mut self, what: &str) -> Result<Vec<(String, TensorEntry)>> {
        let count = self.u32(what)? as usize;
        let mut out = Vec::new();
        for _ in 0..count {
            let at = self.pos;
            let name = self.string("tensor name")?;
            if out.iter().any(|(n, _)| n == &name) {
                return Err(Error::Format { offset: at, detail: format!("duplicate tensor {name} in {what}") });
            }
            let entry = self.entry(&name)?;
            out.push((name, entry));
        }
        Ok(out)
    }
}

pub fn decode(bytes: &[u8]) -> Result<CheckpointFile> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format { offset: 0, detail: "bad magic bytes".into() });
    }
    let version = r.u8("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion { found: version, expected: FORMAT_VERSION });
    }
    let step = r.u64("step")?;
    let config_digest = r.string("config digest")?;
    let params = r.table("parameter table")?;
    let ema = r.table("ema table")?;
    let body_end = r.pos;
    let stored = r.take(CHECKSUM_LEN, "checksum")?;
    if r.pos != bytes.len() {
        return Err(r.err(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    if stored != checksum(&bytes[..body_end]) {
        return Err(Error::Format { offset: body_end, detail: "checksum mismatch".into() });
    }
    Ok(CheckpointFile { step, config_digest, params, ema })
}
