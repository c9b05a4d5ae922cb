//! Checkpoint archive: JSON metadata followed by named little-endian arrays.
//!
//! ```text
//! "VMRNCKPT" | version u16 | meta_len u64 | meta JSON
//! count u64 | { name_len u32 | name | dtype u16 | rank u32 | dims u64.. | data }..
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{format_err, Result};
use crate::model::Vmrnn;
use crate::params::ParamStore;
use crate::tensor::{DType, Real, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"VMRNCKPT";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Metadata stored alongside the parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    /// Seed the model was created with.
    pub seed: u64,
    pub epoch: usize,
    pub step: usize,
    #[serde(default)]
    pub val_mse: Option<f64>,
}

pub fn encode_checkpoint<T: Real>(meta: &CheckpointMeta, store: &ParamStore<T>) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(meta).map_err(|e| format_err(format!("metadata: {e}")))?;
    let mut out = Vec::with_capacity(store.num_scalars() * std::mem::size_of::<T>() + json.len() + 64);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(store.len() as u64).to_le_bytes());
    for (name, value) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&T::DTYPE.code().to_le_bytes());
        out.extend_from_slice(&(value.rank() as u32).to_le_bytes());
        for &d in value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in value.data() {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format_err(format!("truncated checkpoint at byte {}", self.at)))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("two bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("eight bytes"));
        usize::try_from(v).map_err(|_| format_err("length overflows usize"))
    }
}

fn read_array<T: Real>(r: &mut Reader<'_>, dtype: DType, count: usize) -> Result<Vec<T>> {
    let bytes = r.take(count.checked_mul(dtype.size()).ok_or_else(|| format_err("array too large"))?)?;
    Ok(match dtype {
        DType::F32 => bytes.chunks_exact(4).map(|c| T::lit(f32::read_le(c) as f64)).collect(),
        DType::F64 => bytes.chunks_exact(8).map(|c| T::lit(f64::read_le(c))).collect(),
    })
}

/// Parses an archive; arrays are converted to `T` if stored otherwise.
pub fn decode_checkpoint<T: Real>(bytes: &[u8]) -> Result<(CheckpointMeta, ParamStore<T>)> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(format_err("bad checkpoint magic"));
    }
    let version = r.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(format_err(format!("unsupported checkpoint version {version}")));
    }
    let meta_len = r.len()?;
    let meta: CheckpointMeta =
        serde_json::from_slice(r.take(meta_len)?).map_err(|e| format_err(format!("metadata: {e}")))?;
    let count = r.len()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name =
            std::str::from_utf8(r.take(name_len)?).map_err(|_| format_err("parameter name is not UTF-8"))?.to_owned();
        let code = r.u16()?;
        let dtype = DType::from_code(code).ok_or_else(|| format_err(format!("unknown dtype code {code}")))?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut n: usize = 1;
        for _ in 0..rank {
            let d = r.len()?;
            n = n.checked_mul(d).ok_or_else(|| format_err("shape overflow"))?;
            shape.push(d);
        }
        let data = read_array::<T>(&mut r, dtype, n)?;
        store.add(name, Tensor::from_vec(&shape, data)?);
    }
    if r.at != bytes.len() {
        return Err(format_err(format!("{} trailing bytes in checkpoint", bytes.len() - r.at)));
    }
    Ok((meta, store))
}

/// Writes atomically through a temporary sibling file.
pub fn save_checkpoint<T: Real>(path: &Path, meta: &CheckpointMeta, store: &ParamStore<T>) -> Result<()> {
    let bytes = encode_checkpoint(meta, store)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Loads an archive and rebuilds the model it describes, checking that every
/// parameter name and shape matches.
pub fn load_checkpoint<T: Real>(path: &Path) -> Result<(Vmrnn, ParamStore<T>, CheckpointMeta)> {
    let (meta, loaded) = decode_checkpoint::<T>(&fs::read(path)?)?;
    let (model, mut store) = Vmrnn::init::<T>(&meta.model, meta.seed)?;
    store.load_from(&loaded)?;
    Ok((model, store, meta))
}
