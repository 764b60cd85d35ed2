//! Binary checkpoints: versioned header, JSON metadata block, and named
//! tensor records with per-record SHA-256 checksums. All integers and
//! floats little-endian.

use super::IoError;
use crate::nn::params::ParamSet;
use crate::optim::{AdamW, AdamWState};
use crate::tensor::{FloatMode, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"VXRCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Producing trainer: "stage1", "mlm", "stage2", ...
    pub kind: String,
    pub mode: FloatMode,
    pub step: u64,
    pub seed: u64,
    /// Canonical config snapshot the run was launched with.
    pub config: String,
    /// Per-parameter Adam step counters.
    pub opt_t: BTreeMap<String, u64>,
    /// Free-form extras (e.g. vocabulary text for text models).
    pub extra: BTreeMap<String, String>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: BTreeMap<String, Tensor>,
}

fn record_digest(name: &str, shape: &[usize], payload: &[u8]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(name.as_bytes());
    for &d in shape {
        h.update((d as u64).to_le_bytes());
    }
    h.update(payload);
    h.finalize().into()
}

fn wr(path: &Path, e: std::io::Error) -> IoError {
    IoError::Write { path: path.to_path_buf(), source: e }
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), IoError> {
        let path = path.as_ref();
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir).map_err(|e| wr(path, e))?;
            }
        }
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());

        let meta =
            serde_json::to_vec(&self.meta).map_err(|source| IoError::Json { path: path.into(), source })?;
        buf.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        buf.extend_from_slice(&meta);
        let meta_digest: [u8; 32] = Sha256::digest(&meta).into();
        buf.extend_from_slice(&meta_digest);

        buf.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, t) in &self.tensors {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            buf.push(0); // dtype: raw f64 payload
            let mut payload = Vec::with_capacity(t.data().len() * 8);
            for &x in t.data() {
                payload.extend_from_slice(&x.to_le_bytes());
            }
            buf.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            buf.extend_from_slice(&payload);
            buf.extend_from_slice(&record_digest(name, t.shape(), &payload));
        }
        let mut f = std::fs::File::create(path).map_err(|e| wr(path, e))?;
        f.write_all(&buf).map_err(|e| wr(path, e))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint, IoError> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|source| IoError::Read { path: path.into(), source })?;
        let mut r = Reader { path, bytes: &bytes, pos: 0 };

        if r.take(8)? != MAGIC {
            return Err(IoError::BadMagic { path: path.into() });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(IoError::BadVersion { path: path.into(), found: version, want: VERSION });
        }
        let meta_len = r.u64()? as usize;
        let meta_bytes = r.take(meta_len)?.to_vec();
        let meta_digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        if <[u8; 32]>::from(Sha256::digest(&meta_bytes)) != meta_digest {
            return Err(IoError::Checksum { record: "<metadata>".into() });
        }
        let meta: CheckpointMeta = serde_json::from_slice(&meta_bytes)
            .map_err(|source| IoError::Json { path: path.into(), source })?;

        let count = r.u64()? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| IoError::Truncated {
                path: path.into(),
                what: "non-utf8 record name".into(),
            })?;
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let dtype = r.take(1)?[0];
            if dtype != 0 {
                return Err(IoError::Truncated {
                    path: path.into(),
                    what: format!("record '{name}': unknown dtype {dtype}"),
                });
            }
            let payload_len = r.u64()? as usize;
            let payload = r.take(payload_len)?;
            let digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
            if record_digest(&name, &shape, payload) != digest {
                return Err(IoError::Checksum { record: name });
            }
            let data: Vec<f64> = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| IoError::Truncated {
                path: path.into(),
                what: format!("record '{name}': {e}"),
            })?;
            if tensors.insert(name.clone(), t).is_some() {
                return Err(IoError::DuplicateRecord { name });
            }
        }
        if r.pos != bytes.len() {
            return Err(IoError::Truncated { path: path.into(), what: "trailing bytes".into() });
        }
        Ok(Checkpoint { meta, tensors })
    }

    /// Metadata guards applied by every consumer: float mode must match;
    /// the config snapshot must match unless `force`.
    pub fn verify(&self, kind: &str, config: &str, mode: FloatMode, force: bool) -> Result<(), IoError> {
        if self.meta.kind != kind {
            return Err(IoError::KindMismatch { found: self.meta.kind.clone(), want: kind.into() });
        }
        if self.meta.mode != mode {
            return Err(IoError::ModeMismatch {
                found: self.meta.mode.name().into(),
                want: mode.name().into(),
            });
        }
        if !force && self.meta.config != config {
            return Err(IoError::ConfigMismatch);
        }
        Ok(())
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor, IoError> {
        self.tensors.get(name).ok_or_else(|| IoError::MissingRecord { name: name.into() })
    }

    /// Tensors under `prefix.` with the prefix stripped, as a ParamSet.
    pub fn param_set(&self, prefix: &str, mode: FloatMode) -> Result<ParamSet, IoError> {
        let want = format!("{prefix}.");
        let mut out = ParamSet::new(mode);
        for (name, t) in &self.tensors {
            if let Some(rest) = name.strip_prefix(&want) {
                out.insert(rest.to_string(), t.clone());
            }
        }
        if out.is_empty() {
            return Err(IoError::MissingRecord { name: format!("{prefix}.*") });
        }
        Ok(out)
    }
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], IoError> {
        if self.pos + n > self.bytes.len() {
            return Err(IoError::Truncated {
                path: self.path.into(),
                what: format!("wanted {n} bytes at offset {}", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, IoError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, IoError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Copy a ParamSet into tensor records under `prefix.`.
pub fn pack_params(tensors: &mut BTreeMap<String, Tensor>, prefix: &str, params: &ParamSet) {
    for (name, t) in params.iter() {
        tensors.insert(format!("{prefix}.{name}"), t.clone());
    }
}

/// Record optimizer moments as `opt.m.<param>` / `opt.v.<param>` plus the
/// per-parameter step counters for the metadata block.
pub fn pack_opt(tensors: &mut BTreeMap<String, Tensor>, opt: &AdamW) -> BTreeMap<String, u64> {
    let mut t_by_name = BTreeMap::new();
    for (name, st) in opt.states() {
        tensors.insert(format!("opt.m.{name}"), st.m.clone());
        tensors.insert(format!("opt.v.{name}"), st.v.clone());
        t_by_name.insert(name.clone(), st.t);
    }
    t_by_name
}

pub fn unpack_opt(ckpt: &Checkpoint) -> Result<AdamW, IoError> {
    let mut opt = AdamW::default();
    for (name, &t) in &ckpt.meta.opt_t {
        let m = ckpt.tensor(&format!("opt.m.{name}"))?.clone();
        let v = ckpt.tensor(&format!("opt.v.{name}"))?.clone();
        opt.states_mut().insert(name.clone(), AdamWState { m, v, t });
    }
    Ok(opt)
}
