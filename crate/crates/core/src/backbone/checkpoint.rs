//! Binary checkpoint format.
//!
//! ```text
//! "AMCK" | version u32 | entry count u32
//! entry: name_len u16 | name utf8 | ndim u8 | dims u32 x ndim | f32 data
//! json_len u32 | json
//! ```
//!
//! Integers and floats are little-endian. Entry names carry a group prefix
//! (`param/`, `ema/`, `stat/`, `ema_stat/`, `velocity/`). The trailing JSON
//! holds the step count, backbone spec and the training configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BackboneSpec, ModelState, ParamSet, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"AMCK";
const VERSION: u32 = 1;

const GROUPS: [&str; 5] = ["param", "ema", "stat", "ema_stat", "velocity"];

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub state: ModelState,
    /// Training configuration snapshot, stored verbatim.
    pub train_config: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct Trailer {
    step_count: u64,
    backbone: BackboneSpec,
    train_config: serde_json::Value,
}

fn group<'a>(state: &'a ModelState, g: &str) -> &'a ParamSet {
    match g {
        "param" => &state.params,
        "ema" => &state.ema,
        "stat" => &state.stats,
        "ema_stat" => &state.ema_stats,
        _ => &state.velocity,
    }
}

pub fn write_checkpoint(state: &ModelState, train_config: &serde_json::Value) -> Result<Vec<u8>> {
    state.validate()?;
    let count: usize = GROUPS.iter().map(|g| group(state, g).len()).sum();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(count as u32).to_le_bytes());
    for g in GROUPS {
        for (name, t) in group(state, g) {
            let full = format!("{g}/{name}");
            out.extend_from_slice(&(full.len() as u16).to_le_bytes());
            out.extend_from_slice(full.as_bytes());
            out.push(t.shape.len() as u8);
            for &d in &t.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let trailer = serde_json::to_vec(&Trailer {
        step_count: state.step_count,
        backbone: state.spec.clone(),
        train_config: train_config.clone(),
    })?;
    out.extend_from_slice(&(trailer.len() as u32).to_le_bytes());
    out.extend_from_slice(&trailer);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated {
                expected: self.pos + n,
                found: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32()?;
    let mut groups: [ParamSet; 5] = Default::default();
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("non-utf8 entry name".into()))?
            .to_string();
        let ndim = r.u8()? as usize;
        let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = r
            .take(n * 4)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let (g, key) = name
            .split_once('/')
            .ok_or_else(|| Error::Format(format!("entry '{name}' has no group prefix")))?;
        let gi = GROUPS
            .iter()
            .position(|&x| x == g)
            .ok_or_else(|| Error::Format(format!("unknown entry group '{g}'")))?;
        groups[gi].insert(key.to_string(), Tensor { shape, data });
    }
    let json_len = r.u32()? as usize;
    let trailer: Trailer = serde_json::from_slice(r.take(json_len)?)?;
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after checkpoint", bytes.len() - r.pos)));
    }
    let [params, ema, stats, ema_stats, velocity] = groups;
    let state = ModelState {
        spec: trailer.backbone,
        params,
        ema,
        stats,
        ema_stats,
        velocity,
        step_count: trailer.step_count,
    };
    state.validate()?;
    Ok(Checkpoint {
        state,
        train_config: trailer.train_config,
    })
}

pub fn save_checkpoint(path: &Path, state: &ModelState, train_config: &serde_json::Value) -> Result<()> {
    let bytes = write_checkpoint(state, train_config)?;
    let tmp = path.with_extension("amck.tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    read_checkpoint(&bytes)
}
