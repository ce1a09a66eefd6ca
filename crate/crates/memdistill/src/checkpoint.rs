//! The DDCK container for resumable distillation runs: `"DDCK"`, `u32`
//! version, `u32` header length, a JSON header (configuration, counters, RNG
//! state, tensor shapes), then little-endian `f64` values for φ, the outer
//! velocity and the loss history in that order. The payload is exact, so a
//! resumed run continues bit for bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use memdistill_core::distill::{DistillConfig, RunState};
use memdistill_core::rng::StreamRng;
use memdistill_core::Tensor;

use crate::artifact::split_container;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DDCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    config: DistillConfig,
    num_classes: usize,
    iteration: usize,
    rng: StreamRng,
    phi: Vec<Vec<usize>>,
    velocity: Vec<Vec<usize>>,
    losses: usize,
}

/// A saved run: its configuration and where it stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: DistillConfig,
    pub num_classes: usize,
    pub state: RunState,
}

pub fn to_bytes(ck: &Checkpoint) -> Result<Vec<u8>> {
    let s = &ck.state;
    let header = Header {
        config: ck.config.clone(),
        num_classes: ck.num_classes,
        iteration: s.iteration,
        rng: s.rng.clone(),
        phi: s.phi.iter().map(|t| t.shape().to_vec()).collect(),
        velocity: s.velocity.iter().map(|t| t.shape().to_vec()).collect(),
        losses: s.losses.len(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    let values = s
        .phi
        .iter()
        .chain(&s.velocity)
        .flat_map(|t| t.data().iter())
        .chain(&s.losses);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let what = "checkpoint";
    let (json, payload) = split_container(bytes, MAGIC, what, VERSION)?;
    let h: Header = serde_json::from_slice(json)?;
    let count: usize = h.phi.iter().chain(&h.velocity).map(|s| s.iter().product::<usize>()).sum::<usize>() + h.losses;
    if payload.len() != 8 * count {
        return Err(Error::format(
            what,
            format!("header declares {} values but the payload holds {} bytes", count, payload.len()),
        ));
    }
    let mut values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let mut take = |shape: &[usize]| -> Result<Tensor> {
        let n = shape.iter().product();
        Ok(Tensor::new(shape.to_vec(), values.by_ref().take(n).collect())?)
    };
    let phi = h.phi.iter().map(|s| take(s)).collect::<Result<Vec<_>>>()?;
    let velocity = h.velocity.iter().map(|s| take(s)).collect::<Result<Vec<_>>>()?;
    let losses: Vec<f64> = values.collect();
    Ok(Checkpoint {
        config: h.config,
        num_classes: h.num_classes,
        state: RunState {
            iteration: h.iteration,
            phi,
            velocity,
            losses,
            rng: h.rng,
        },
    })
}

/// Writes next to `path` first and renames, so a crash never leaves a
/// partial checkpoint under the final name.
pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = to_bytes(ck)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(Error::io(&tmp))?;
    fs::rename(&tmp, path).map_err(Error::io(path))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(Error::io(path))?;
    from_bytes(&bytes)
}
