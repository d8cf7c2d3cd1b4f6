//! Checkpoint container.
//!
//! Little-endian layout:
//!
//! ```text
//! magic "LBLC" | version u16 = 1 | stage u8
//! config: u32 length + JSON bytes (ModelConfig)
//! meta:   u32 length + JSON bytes (free-form training metadata)
//! tensor count u32
//! per tensor: u16 name length, name bytes, u8 rank, u64 dims, f64 values
//! optimizer: u8 present; if 1: u64 step count, then per tensor m and v (f64)
//! sha256 of all preceding bytes (32 bytes)
//! ```
//!
//! The lowercase hex of the trailing digest is the checkpoint hash.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::ModelConfig;
use super::model::Lblm;
use crate::diffcore::{OptimState, ParamStore, ParamTensor};
use crate::error::{LblmError, Result};
use crate::signal::write_atomic;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LBLC";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Init,
    Mstp,
    Astp,
    Finetuned,
}

impl Stage {
    pub fn code(self) -> u8 {
        match self {
            Stage::Init => 0,
            Stage::Mstp => 1,
            Stage::Astp => 2,
            Stage::Finetuned => 3,
        }
    }

    pub fn from_code(c: u8) -> Option<Stage> {
        Some(match c {
            0 => Stage::Init,
            1 => Stage::Mstp,
            2 => Stage::Astp,
            3 => Stage::Finetuned,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Init => "init",
            Stage::Mstp => "mstp",
            Stage::Astp => "astp",
            Stage::Finetuned => "finetuned",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub model: ModelConfig,
    pub meta: serde_json::Value,
    /// Backbone, heads and any classifier parameters.
    pub params: ParamStore,
    pub optim: Option<OptimState>,
}

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v: u32 = v
        .try_into()
        .map_err(|_| LblmError::config("block too large for checkpoint"))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_f64s(buf: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(LblmError::Format {
                offset: self.pos,
                msg: format!("truncated checkpoint reading {what}"),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = n.checked_mul(8).ok_or_else(|| LblmError::Format {
            offset: self.pos,
            msg: format!("{what} size overflows"),
        })?;
        Ok(self
            .take(bytes, what)?
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect())
    }

    fn json(&mut self, what: &str) -> Result<(usize, &'a [u8])> {
        let len = self.u32(what)?;
        let at = self.pos;
        Ok((at, self.take(len, what)?))
    }
}

impl Checkpoint {
    pub fn from_model(stage: Stage, model: &Lblm, meta: serde_json::Value) -> Checkpoint {
        Checkpoint {
            stage,
            model: model.cfg.clone(),
            meta,
            params: model.params.clone(),
            optim: None,
        }
    }

    pub fn model(&self) -> Lblm {
        Lblm {
            cfg: self.model.clone(),
            params: self.params.clone(),
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.push(self.stage.code());
        let cfg = serde_json::to_vec(&self.model)?;
        put_u32(&mut buf, cfg.len())?;
        buf.extend_from_slice(&cfg);
        let meta = serde_json::to_vec(&self.meta)?;
        put_u32(&mut buf, meta.len())?;
        buf.extend_from_slice(&meta);
        put_u32(&mut buf, self.params.len())?;
        for p in self.params.iter() {
            let name = p.name.as_bytes();
            let nlen: u16 = name
                .len()
                .try_into()
                .map_err(|_| LblmError::config("parameter name too long"))?;
            buf.extend_from_slice(&nlen.to_le_bytes());
            buf.extend_from_slice(name);
            buf.push(p.shape.len() as u8);
            for d in &p.shape {
                buf.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            put_f64s(&mut buf, &p.values);
        }
        match &self.optim {
            None => buf.push(0),
            Some(st) => {
                if st.m.len() != self.params.len() {
                    return Err(LblmError::shape("optimizer state does not match parameters"));
                }
                buf.push(1);
                buf.extend_from_slice(&st.step_count.to_le_bytes());
                for (m, v) in st.m.iter().zip(&st.v) {
                    put_f64s(&mut buf, m);
                    put_f64s(&mut buf, v);
                }
            }
        }
        let digest = Sha256::digest(&buf);
        buf.extend_from_slice(&digest);
        Ok(buf)
    }

    pub fn decode(buf: &[u8]) -> Result<Checkpoint> {
        if buf.len() < 4 || &buf[..4] != CHECKPOINT_MAGIC {
            return Err(LblmError::Format {
                offset: 0,
                msg: "bad magic, expected \"LBLC\"".into(),
            });
        }
        if buf.len() < 4 + 32 {
            return Err(LblmError::Format {
                offset: buf.len(),
                msg: "truncated checkpoint".into(),
            });
        }
        let body = &buf[..buf.len() - 32];
        if Sha256::digest(body).as_slice() != &buf[buf.len() - 32..] {
            return Err(LblmError::Format {
                offset: buf.len() - 32,
                msg: "checksum mismatch".into(),
            });
        }
        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u16("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(LblmError::Format {
                offset: 4,
                msg: format!("unsupported checkpoint version {version}"),
            });
        }
        let at = r.pos;
        let stage = Stage::from_code(r.u8("stage")?).ok_or_else(|| LblmError::Format {
            offset: at,
            msg: "unknown stage tag".into(),
        })?;
        let (at, cfg) = r.json("config")?;
        let model: ModelConfig = serde_json::from_slice(cfg).map_err(|e| LblmError::Format {
            offset: at,
            msg: format!("config block: {e}"),
        })?;
        let (at, meta) = r.json("metadata")?;
        let meta = serde_json::from_slice(meta).map_err(|e| LblmError::Format {
            offset: at,
            msg: format!("metadata block: {e}"),
        })?;
        let count = r.u32("tensor count")?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let nlen = r.u16("name length")? as usize;
            let at = r.pos;
            let name = std::str::from_utf8(r.take(nlen, "name")?)
                .map_err(|_| LblmError::Format {
                    offset: at,
                    msg: "parameter name is not UTF-8".into(),
                })?
                .to_string();
            let rank = r.u8("rank")? as usize;
            let shape = (0..rank)
                .map(|_| r.u64("dimension").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n = shape.iter().try_fold(1usize, |a, d| a.checked_mul(*d)).ok_or_else(|| LblmError::Format {
                offset: r.pos,
                msg: "tensor size overflows".into(),
            })?;
            let values = r.f64s(n, "tensor values")?;
            let at = r.pos;
            params
                .insert(ParamTensor::new(name, shape, values)?)
                .map_err(|e| LblmError::Format {
                    offset: at,
                    msg: e.to_string(),
                })?;
        }
        let optim = match r.u8("optimizer flag")? {
            0 => None,
            1 => {
                let step_count = r.u64("step count")?;
                let mut m = Vec::with_capacity(params.len());
                let mut v = Vec::with_capacity(params.len());
                for p in params.iter() {
                    m.push(r.f64s(p.numel(), "first moment")?);
                    v.push(r.f64s(p.numel(), "second moment")?);
                }
                Some(OptimState { m, v, step_count })
            }
            f => {
                return Err(LblmError::Format {
                    offset: r.pos - 1,
                    msg: format!("invalid optimizer flag {f}"),
                })
            }
        };
        if r.pos != body.len() {
            return Err(LblmError::Format {
                offset: r.pos,
                msg: "trailing bytes before checksum".into(),
            });
        }
        Ok(Checkpoint {
            stage,
            model,
            meta,
            params,
            optim,
        })
    }

    /// Hex sha256 of the encoded checkpoint body.
    pub fn hash(&self) -> Result<String> {
        let bytes = self.encode()?;
        Ok(hex(&bytes[bytes.len() - 32..]))
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.encode()?;
        write_atomic(path, &bytes)?;
        Ok(hex(&bytes[bytes.len() - 32..]))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let buf = std::fs::read(path).map_err(|e| LblmError::io(path, e))?;
        Checkpoint::decode(&buf)
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Hex sha256 of arbitrary bytes.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}
