//! Binary checkpoints.
//!
//! Layout: `b"STPV"`, `u32` version, `u64` metadata length, UTF-8 JSON
//! metadata, then one record per tensor:
//! `[u16 name length, name, u8 dtype, u8 ndim, ndim x u64 dims, payload]`,
//! all little-endian.

use std::path::Path;

use serde::{Deserialize, Serialize};
use vidpriv_tensor::{DType, Element, ParamStore, RngSnapshot, Tensor};

use crate::error::{CheckpointError, Error, Result};

pub const MAGIC: &[u8; 4] = b"STPV";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub phase: String,
    pub epoch: usize,
    pub optimizer_steps: u64,
    pub record_count: usize,
    pub rng: Option<RngSnapshot>,
    pub config: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: ParamStore,
}

pub fn encode(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut meta = ck.meta.clone();
    meta.record_count = ck.tensors.len();
    let json = serde_json::to_vec(&meta)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (name, t) in ck.tensors.iter() {
        let nb = name.as_bytes();
        let len = u16::try_from(nb.len()).map_err(|_| CheckpointError::Corrupt(format!("name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(nb);
        out.push(f32::DTYPE.code());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in t.data() {
            x.write_le(&mut out);
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        if self.bytes.len() - self.pos < n {
            return Err(CheckpointError::Truncated(format!("{what} at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic").map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = u32::from_le_bytes(r.take(4, "version")?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    let meta_len = r.u64("metadata length")? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len, "metadata")?)
        .map_err(|e| CheckpointError::Corrupt(format!("metadata: {e}")))?;
    let mut tensors = ParamStore::new();
    for i in 0..meta.record_count {
        let what = format!("record {i}");
        let nlen = u16::from_le_bytes(r.take(2, &what)?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(r.take(nlen, &what)?)
            .map_err(|_| CheckpointError::Corrupt(format!("{what}: name is not UTF-8")))?
            .to_string();
        let head = r.take(2, &what)?;
        let dtype = DType::from_code(head[0]).ok_or_else(|| CheckpointError::Corrupt(format!("{name}: dtype {}", head[0])))?;
        if dtype != DType::F32 {
            return Err(CheckpointError::Corrupt(format!("{name}: only f32 records are supported")));
        }
        let mut shape = Vec::with_capacity(head[1] as usize);
        for _ in 0..head[1] {
            shape.push(r.u64(&what)? as usize);
        }
        let n: usize = shape.iter().product();
        let payload = r.take(n * dtype.size_of(), &what)?;
        let data = payload.chunks(4).map(f32::read_le).collect();
        let t = Tensor::from_vec(&shape, data).map_err(|e| CheckpointError::Corrupt(format!("{name}: {e}")))?;
        tensors.insert(name, t);
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Corrupt(format!(
            "{} trailing bytes after {} records",
            bytes.len() - r.pos,
            meta.record_count
        )));
    }
    Ok(Checkpoint { meta, tensors })
}

/// Writes atomically via a temporary file in the same directory.
pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode(ck)?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode(&bytes)?)
}
