//! Versioned parameter container: magic, version, JSON metadata, then named
//! tensors stored as little-endian `f32`.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use super::encoder::EncoderParams;
use super::params::Parameters;
use crate::error::{ClampError, Result};

const MAGIC: &[u8; 8] = b"CLMPCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: Value,
    pub tensors: Vec<(String, Vec<f32>)>,
}

fn schema(msg: impl Into<String>) -> ClampError {
    ClampError::Schema { file: "checkpoint".into(), msg: msg.into() }
}

impl Checkpoint {
    pub fn from_params<P: Parameters, M: Serialize>(kind: &str, meta: &M, params: &P) -> Result<Self> {
        Ok(Self {
            kind: kind.to_string(),
            meta: serde_json::to_value(meta)?,
            tensors: params.tensors().into_iter().map(|(n, t)| (n, t.iter().map(|&v| v as f32).collect())).collect(),
        })
    }

    /// Copies stored tensors into `params`, checking names and sizes.
    pub fn fill<P: Parameters>(&self, params: &mut P) -> Result<()> {
        let targets = params.tensors_mut();
        if targets.len() != self.tensors.len() {
            return Err(schema(format!("{} tensors stored, {} expected", self.tensors.len(), targets.len())));
        }
        for ((name, dst), (sname, src)) in targets.into_iter().zip(&self.tensors) {
            if &name != sname || dst.len() != src.len() {
                return Err(schema(format!("tensor {sname} ({}) does not match {name} ({})", src.len(), dst.len())));
            }
            dst.iter_mut().zip(src).for_each(|(d, &s)| *d = s as f64);
        }
        Ok(())
    }

    pub fn meta_as<T: DeserializeOwned>(&self) -> Result<T> {
        Ok(serde_json::from_value(self.meta.clone())?)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&serde_json::json!({ "kind": self.kind, "meta": self.meta }))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.len() as u32).to_le_bytes());
            for v in t {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = bytes.get(pos..pos + n).ok_or_else(|| schema("truncated checkpoint"))?;
            pos += n;
            Ok(s)
        };
        if take(8)? != MAGIC {
            return Err(schema("missing CLMPCKPT header"));
        }
        let u32_of = |s: &[u8]| u32::from_le_bytes(s.try_into().expect("4 bytes")) as usize;
        let version = u32_of(take(4)?);
        if version != VERSION as usize {
            return Err(schema(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u32_of(take(4)?);
        let header: Value = serde_json::from_slice(take(hlen)?)?;
        let kind = header["kind"].as_str().ok_or_else(|| schema("missing kind"))?.to_string();
        let meta = header["meta"].clone();
        let n = u32_of(take(4)?);
        let mut tensors = Vec::with_capacity(n);
        for _ in 0..n {
            let len = u32_of(take(4)?);
            let name = String::from_utf8(take(len)?.to_vec()).map_err(|_| schema("tensor name is not UTF-8"))?;
            let count = u32_of(take(4)?);
            let data =
                take(4 * count)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            tensors.push((name, data));
        }
        if pos != bytes.len() {
            return Err(schema("trailing bytes after tensors"));
        }
        Ok(Self { kind, meta, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| ClampError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| ClampError::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            ClampError::Schema { msg, .. } => ClampError::Schema { file: path.display().to_string(), msg },
            other => other,
        })
    }
}

#[derive(serde::Serialize, serde::Deserialize)]
struct EncoderMeta {
    config: super::encoder::HapticEncoderConfig,
    input_mean: Vec<f64>,
    input_std: Vec<f64>,
}

pub fn encoder_checkpoint(params: &EncoderParams) -> Result<Checkpoint> {
    let meta = EncoderMeta {
        config: params.config.clone(),
        input_mean: params.input_mean.clone(),
        input_std: params.input_std.clone(),
    };
    Checkpoint::from_params("haptic_encoder", &meta, params)
}

pub fn encoder_from_checkpoint(ck: &Checkpoint) -> Result<EncoderParams> {
    if ck.kind != "haptic_encoder" {
        return Err(schema(format!("expected a haptic_encoder checkpoint, found {}", ck.kind)));
    }
    let meta: EncoderMeta = ck.meta_as()?;
    let mut params = EncoderParams::init(&meta.config)?;
    params.input_mean = meta.input_mean;
    params.input_std = meta.input_std;
    ck.fill(&mut params)?;
    Ok(params)
}
