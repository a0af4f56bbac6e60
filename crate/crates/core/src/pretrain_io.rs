//! Named-tensor checkpoints (NTC1) and encoder initialization from them.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "NTC1"            magic
//! u32               entry count
//! per entry:
//!   u16             name length in bytes
//!   [u8]            UTF-8 name
//!   u8              dtype (0 = f32, 1 = f64)
//!   u8              rank
//!   [u32; rank]     dims
//!   [f32|f64]       row-major data
//! optional trailer, present only when metadata is non-empty:
//!   "META"
//!   u32             pair count
//!   per pair: u16 key length, key bytes, u32 value length, value bytes
//! ```
//!
//! Tensor names follow the model's shape table (`encoder.embed.token`,
//! `encoder.layer.{i}.attn.q.weight`, …), so a converted BERT-style
//! checkpoint only needs its tensors renamed and its linear weights stored
//! `[in, out]`.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::numerics::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"NTC1";
const META_MAGIC: &[u8; 4] = b"META";

#[derive(Debug, Clone)]
pub enum StoredData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

/// A tensor as stored on disk, in its original precision.
#[derive(Debug, Clone)]
pub struct StoredTensor {
    shape: Vec<usize>,
    data: StoredData,
}

impl StoredTensor {
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Self {
        let data = match T::DTYPE {
            DType::F32 => StoredData::F32(t.data().iter().map(|v| v.to_f64_lossy() as f32).collect()),
            DType::F64 => StoredData::F64(t.data().iter().map(|v| v.to_f64_lossy()).collect()),
        };
        StoredTensor { shape: t.shape().to_vec(), data }
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data: Vec<T> = match &self.data {
            StoredData::F32(v) => v.iter().map(|&x| T::from_f64_lossy(x as f64)).collect(),
            StoredData::F64(v) => v.iter().map(|&x| T::from_f64_lossy(x)).collect(),
        };
        Tensor::new(self.shape.clone(), data).expect("stored tensor is consistent")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        match self.data {
            StoredData::F32(_) => DType::F32,
            StoredData::F64(_) => DType::F64,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn cast(&self, dtype: DType) -> Self {
        match dtype {
            DType::F32 => StoredTensor::from_tensor(&self.to_tensor::<f32>()),
            DType::F64 => StoredTensor::from_tensor(&self.to_tensor::<f64>()),
        }
    }

    fn bits(&self) -> Vec<u64> {
        match &self.data {
            StoredData::F32(v) => v.iter().map(|x| x.to_bits() as u64).collect(),
            StoredData::F64(v) => v.iter().map(|x| x.to_bits()).collect(),
        }
    }
}

/// Equality is bitwise on the stored values.
impl PartialEq for StoredTensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.dtype() == other.dtype() && self.bits() == other.bits()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    entries: IndexMap<String, StoredTensor>,
    pub metadata: IndexMap<String, String>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: StoredTensor) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::DuplicateName(name));
        }
        self.entries.insert(name, tensor);
        Ok(())
    }

    pub fn insert_tensor<T: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<T>) -> Result<()> {
        self.insert(name, StoredTensor::from_tensor(t))
    }

    pub fn get(&self, name: &str) -> Option<&StoredTensor> {
        self.entries.get(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &StoredTensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn from_params<T: Scalar>(params: &ModelParams<T>) -> Self {
        let entries = params.iter().map(|(n, t)| (n.to_string(), StoredTensor::from_tensor(t))).collect();
        Checkpoint { entries, metadata: IndexMap::new() }
    }

    /// Full model parameters, cast to `T`; names and shapes must match `cfg`.
    pub fn to_params<T: Scalar>(&self, cfg: &ModelConfig) -> Result<ModelParams<T>> {
        let named = self.entries.iter().map(|(k, v)| (k.clone(), v.to_tensor::<T>())).collect();
        ModelParams::from_named(cfg, named)
    }

    /// Keeps only entries whose name starts with `prefix`.
    pub fn filtered(&self, prefix: &str) -> Self {
        Checkpoint {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
            metadata: self.metadata.clone(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            let name_len = u16::try_from(name.len())
                .map_err(|_| Error::InvalidData(format!("tensor name too long: {name}")))?;
            let rank = u8::try_from(t.shape.len())
                .map_err(|_| Error::InvalidData(format!("{name}: rank too large")))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.dtype().code());
            out.push(rank);
            for &d in &t.shape {
                let d = u32::try_from(d).map_err(|_| Error::InvalidData(format!("{name}: dim too large")))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            match &t.data {
                StoredData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                StoredData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        if !self.metadata.is_empty() {
            out.extend_from_slice(META_MAGIC);
            out.extend_from_slice(&(self.metadata.len() as u32).to_le_bytes());
            for (k, v) in &self.metadata {
                let klen = u16::try_from(k.len())
                    .map_err(|_| Error::InvalidData(format!("metadata key too long: {k}")))?;
                out.extend_from_slice(&klen.to_le_bytes());
                out.extend_from_slice(k.as_bytes());
                out.extend_from_slice(&(v.len() as u32).to_le_bytes());
                out.extend_from_slice(v.as_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic").map_err(|_| Error::BadMagic { expected: "NTC1" })? != MAGIC {
            return Err(Error::BadMagic { expected: "NTC1" });
        }
        let count = r.u32("entry count")?;
        let mut ckpt = Checkpoint::new();
        for _ in 0..count {
            let name_len = r.u16("name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "name")?)
                .map_err(|_| Error::InvalidData("tensor name is not UTF-8".into()))?
                .to_owned();
            let code = r.u8("dtype")?;
            let dtype = DType::from_code(code)
                .ok_or_else(|| Error::InvalidData(format!("{name}: unknown dtype {code}")))?;
            let rank = r.u8("rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("dims")? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = r.take(numel * dtype.size(), "tensor data")?;
            let data = match dtype {
                DType::F32 => StoredData::F32(
                    raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
                ),
                DType::F64 => StoredData::F64(
                    raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
                ),
            };
            ckpt.insert(name, StoredTensor { shape, data })?;
        }
        if r.pos < bytes.len() {
            if r.take(4, "metadata")? != META_MAGIC {
                return Err(Error::BadMagic { expected: "META" });
            }
            let n = r.u32("metadata count")?;
            for _ in 0..n {
                let klen = r.u16("metadata key")? as usize;
                let k = String::from_utf8_lossy(r.take(klen, "metadata key")?).into_owned();
                let vlen = r.u32("metadata value")? as usize;
                let v = String::from_utf8_lossy(r.take(vlen, "metadata value")?).into_owned();
                ckpt.metadata.insert(k, v);
            }
            if r.pos != bytes.len() {
                return Err(Error::InvalidData("trailing bytes after metadata".into()));
            }
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::TruncatedFile(what))?;
        let s = self.bytes.get(self.pos..end).ok_or(Error::TruncatedFile(what))?;
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// What [`init_encoder`] did with each name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct InitReport {
    /// Model tensors overwritten from the checkpoint.
    pub initialized: Vec<String>,
    /// Encoder tensors the checkpoint does not provide.
    pub skipped: Vec<String>,
    /// Encoder tensors present in the checkpoint with an incompatible shape.
    pub shape_mismatched: Vec<String>,
    /// Checkpoint entries that were not consumed.
    pub unused: Vec<String>,
}

impl InitReport {
    pub fn coverage(&self) -> f64 {
        let total = self.initialized.len() + self.skipped.len() + self.shape_mismatched.len();
        if total == 0 {
            0.0
        } else {
            self.initialized.len() as f64 / total as f64
        }
    }
}

pub const ENCODER_PREFIX: &str = "encoder.";
const POSITION_TABLE: &str = "encoder.embed.position";

/// Copies every encoder tensor whose name and shape match from `ckpt`.
///
/// Layer `i` of the model reads `encoder.layer.{i}.…` from the checkpoint, so
/// a deeper checkpoint donates its bottom layers. A longer position table is
/// cut to the model's `max_positions`. Only `encoder.*` tensors are written;
/// the MLM head's output projection is the encoder token table and follows it.
/// In strict mode any shape mismatch is an error and nothing is written.
pub fn init_encoder<T: Scalar>(
    params: &mut ModelParams<T>,
    ckpt: &Checkpoint,
    strict: bool,
) -> Result<InitReport> {
    let mut report = InitReport::default();
    let mut plan: Vec<(String, Tensor<T>)> = Vec::new();
    let mut consumed = std::collections::HashSet::new();

    for (name, current) in params.iter() {
        if !name.starts_with(ENCODER_PREFIX) {
            continue;
        }
        let Some(stored) = ckpt.get(name) else {
            report.skipped.push(name.to_string());
            continue;
        };
        let want = current.shape();
        let have = stored.shape();
        let value = if have == want {
            Some(stored.to_tensor::<T>())
        } else if name == POSITION_TABLE && have.len() == 2 && have[1] == want[1] && have[0] > want[0] {
            let full = stored.to_tensor::<T>();
            let keep = want[0] * want[1];
            Some(Tensor::new(want.to_vec(), full.data()[..keep].to_vec())?)
        } else {
            None
        };
        match value {
            Some(v) => {
                consumed.insert(name.to_string());
                plan.push((name.to_string(), v));
                report.initialized.push(name.to_string());
            }
            None => {
                if strict {
                    return Err(Error::ShapeMismatch(format!(
                        "{name}: model {want:?}, checkpoint {have:?}"
                    )));
                }
                report.shape_mismatched.push(name.to_string());
            }
        }
    }
    for (name, value) in plan {
        params.set(&name, value)?;
    }
    report.unused = ckpt.names().filter(|n| !consumed.contains(*n)).map(str::to_owned).collect();
    Ok(report)
}
