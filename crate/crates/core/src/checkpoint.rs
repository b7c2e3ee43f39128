//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//! `b"DTSS"`, `u32` version, 32-byte SHA-256 of the model config, `u32` entry
//! count, then per entry: `u32` name length, UTF-8 name, `u32` rank, `u64`
//! per dimension, `f32` payload. Optimizer state, when present, is stored as
//! entries named `optim.m.<param>`, `optim.v.<param>` and `optim.step`.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::optim::AdamW;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DTSS";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_digest: [u8; 32],
    pub entries: Vec<(String, Tensor)>,
}

/// SHA-256 of the model config's canonical TOML form.
pub fn config_digest(cfg: &ModelConfig) -> [u8; 32] {
    let text = toml::to_string(cfg).expect("model config serializes");
    Sha256::digest(text.as_bytes()).into()
}

/// Writes to a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp"));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format {
                path: self.path.to_path_buf(),
                reason: format!("truncated at byte {} (needed {n} more)", self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    /// Parameters, buffers and (optionally) optimizer state of a model.
    pub fn from_model(model: &Model, opt: Option<&AdamW>) -> Checkpoint {
        let mut entries: Vec<(String, Tensor)> = Vec::new();
        for p in model.params() {
            entries.push((p.name.clone(), p.value.clone()));
        }
        for b in model.buffers() {
            entries.push((b.name.clone(), b.value.clone()));
        }
        if let Some(o) = opt {
            let (m, v) = o.moments();
            for (p, (m, v)) in model.params().iter().zip(m.iter().zip(v)) {
                entries.push((
                    format!("optim.m.{}", p.name),
                    Tensor::new(p.value.shape().to_vec(), m.clone()).unwrap(),
                ));
                entries.push((
                    format!("optim.v.{}", p.name),
                    Tensor::new(p.value.shape().to_vec(), v.clone()).unwrap(),
                ));
            }
            let s = o.steps_taken();
            // Split into two exactly representable halves.
            let halves = vec![(s & 0xFFFF) as f32, (s >> 16) as f32];
            entries.push(("optim.step".into(), Tensor::new(vec![2], halves).unwrap()));
        }
        Checkpoint {
            config_digest: config_digest(model.config()),
            entries,
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_digest);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
        let fmt = |reason: String| Error::Format {
            path: path.to_path_buf(),
            reason,
        };
        let mut r = Reader {
            buf: bytes,
            pos: 0,
            path,
        };
        if r.take(4)? != MAGIC {
            return Err(fmt("bad magic; not a checkpoint".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(fmt(format!("unsupported version {version}")));
        }
        let config_digest: [u8; 32] = r.take(32)?.try_into().unwrap();
        let count = r.u32()? as usize;
        let mut entries = Vec::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| fmt("entry name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| fmt(format!("shape of `{name}` overflows")))?;
            let raw = r.take(
                n.checked_mul(4)
                    .ok_or_else(|| fmt("payload overflows".into()))?,
            )?;
            let data = raw
                .chunks(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| fmt(format!("entry `{name}`: {e}")))?;
            entries.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(fmt(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint {
            config_digest,
            entries,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::decode(&bytes, path)
    }

    /// Copies parameters and buffers into `model`; refuses a checkpoint
    /// written for a different model config.
    pub fn restore(&self, model: &mut Model, path: &Path) -> Result<()> {
        if self.config_digest != config_digest(model.config()) {
            return Err(Error::DigestMismatch {
                path: path.to_path_buf(),
            });
        }
        let fmt = |reason: String| Error::Format {
            path: path.to_path_buf(),
            reason,
        };
        let mut updates: Vec<(bool, usize, Tensor)> = Vec::new();
        for (i, p) in model.params().iter().enumerate() {
            let t = self
                .get(&p.name)
                .ok_or_else(|| fmt(format!("missing tensor `{}`", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(fmt(format!(
                    "tensor `{}` has shape {:?}, model expects {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            updates.push((true, i, t.clone()));
        }
        for (i, b) in model.buffers().iter().enumerate() {
            let t = self
                .get(&b.name)
                .ok_or_else(|| fmt(format!("missing tensor `{}`", b.name)))?;
            if t.shape() != b.value.shape() {
                return Err(fmt(format!(
                    "tensor `{}` has shape {:?}, model expects {:?}",
                    b.name,
                    t.shape(),
                    b.value.shape()
                )));
            }
            updates.push((false, i, t.clone()));
        }
        for (is_param, i, t) in updates {
            if is_param {
                model.params_mut()[i].value = t;
            } else {
                model.buffers_mut()[i].value = t;
            }
        }
        Ok(())
    }

    /// Optimizer state, if the checkpoint carries one.
    pub fn restore_optimizer(&self, model: &Model, opt: &mut AdamW) -> Result<bool> {
        let Some(step) = self.get("optim.step") else {
            return Ok(false);
        };
        let d = step.data();
        if d.len() != 2 {
            return Err(Error::Argument("optim.step must hold two values".into()));
        }
        let step = d[0] as u64 | ((d[1] as u64) << 16);
        let mut m = Vec::new();
        let mut v = Vec::new();
        for p in model.params() {
            let get = |k: &str| {
                self.get(&format!("optim.{k}.{}", p.name))
                    .map(|t| t.data().to_vec())
                    .ok_or_else(|| {
                        Error::Argument(format!("missing optimizer moment for `{}`", p.name))
                    })
            };
            m.push(get("m")?);
            v.push(get("v")?);
        }
        opt.set_state(step, m, v)?;
        Ok(true)
    }
}
