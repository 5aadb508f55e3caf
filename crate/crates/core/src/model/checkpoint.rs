use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ChannelLayout, JointModel, ModelConfig, ParamStore};
use crate::error::{Error, Result};
use crate::numerics::NdArray;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DWCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const MAX_HEADER: usize = 1 << 20;
const MAX_NAME: usize = 256;

/// Structured header stored as JSON after the magic and version.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub layout: ChannelLayout,
    pub model: ModelConfig,
    /// Optimizer steps taken so far.
    pub step: u64,
    /// Fingerprint of the run configuration that produced the checkpoint.
    pub fingerprint: String,
}

/// Model weights plus any extra named arrays (optimizer moments).
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub model: JointModel,
    pub extra: Vec<(String, NdArray<f32>)>,
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn get_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| Error::io(path, e))?;
    Ok(u32::from_le_bytes(b))
}

fn get_str(r: &mut impl Read, path: &Path, limit: usize) -> Result<String> {
    let len = get_u32(r, path)? as usize;
    if len > limit {
        return Err(Error::format(path, format!("string of {len} bytes exceeds limit {limit}")));
    }
    let mut b = vec![0u8; len];
    r.read_exact(&mut b).map_err(|e| Error::io(path, e))?;
    String::from_utf8(b).map_err(|_| Error::format(path, "string is not utf-8"))
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_str(&mut out, &serde_json::to_string(&self.header).expect("header serializes"));
        let params = &self.model.params;
        let count = params.names.len() + self.extra.len();
        out.extend_from_slice(&(count as u32).to_le_bytes());
        let named = params
            .names
            .iter()
            .zip(&params.values)
            .chain(self.extra.iter().map(|(n, v)| (n, v)));
        for (name, value) in named {
            put_str(&mut out, name);
            value.write_to(&mut out).expect("writing to a Vec cannot fail");
        }
        out
    }

    pub fn from_reader(r: &mut impl Read, path: &Path) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::format(path, "not a checkpoint (bad magic)"));
        }
        let version = get_u32(r, path)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
        }
        let header: CheckpointHeader = serde_json::from_str(&get_str(r, path, MAX_HEADER)?)
            .map_err(|e| Error::format(path, format!("bad header: {e}")))?;
        let count = get_u32(r, path)? as usize;
        let mut names = Vec::new();
        let mut values = Vec::new();
        for _ in 0..count {
            names.push(get_str(r, path, MAX_NAME)?);
            values.push(NdArray::<f32>::read_from(r).map_err(|e| Error::format(path, e.to_string()))?);
        }
        let n_model = super::param_specs(&header.model, &header.layout).len();
        if count < n_model {
            return Err(Error::format(path, "checkpoint holds fewer arrays than the model needs"));
        }
        let extra: Vec<_> = names.split_off(n_model).into_iter().zip(values.split_off(n_model)).collect();
        let model = JointModel {
            config: header.model.clone(),
            layout: header.layout,
            params: ParamStore { names, values },
        };
        model.validate().map_err(|e| Error::format(path, e.to_string()))?;
        Ok(Self { header, model, extra })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        // write-then-rename so a crash never leaves a truncated checkpoint
        let tmp = path.with_extension("partial");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(&mut std::io::BufReader::new(f), path)
    }

    pub fn extra(&self, name: &str) -> Option<&NdArray<f32>> {
        self.extra.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }
}
