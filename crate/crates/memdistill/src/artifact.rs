//! The DDAM container: `"DDAM"`, `u32` version, `u32` header length, a JSON
//! header, then little-endian `f32` values: the bases row-major followed
//! by the addressing matrices `A_1..A_r`, each row-major.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use memdistill_core::distill::DistillConfig;
use memdistill_core::memory::{
    AddressingSet, BudgetPlan, DistilledArtifact, MemoryBank, Parameterization, FORMAT_VERSION,
};
use memdistill_core::Tensor;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DDAM";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub num_bases: usize,
    pub base_shape: [usize; 3],
    pub downsample: usize,
    pub target_shape: [usize; 3],
    pub r: usize,
    pub query_dim: usize,
    pub parameterization: Parameterization,
    pub num_classes: usize,
    pub dataset: String,
    /// Hex, so the full 64 bits survive any JSON reader.
    pub fingerprint: String,
    pub budget: BudgetPlan,
    pub config: Option<DistillConfig>,
}

impl Header {
    fn payload_floats(&self) -> usize {
        let [c, h, w] = self.base_shape;
        self.num_bases * c * h * w + self.r * self.query_dim * self.num_bases
    }
}

pub fn to_bytes(a: &DistilledArtifact) -> Result<Vec<u8>> {
    a.validate()?;
    let header = Header {
        num_bases: a.bank.num_bases(),
        base_shape: a.bank.base_shape,
        downsample: a.bank.downsample,
        target_shape: a.bank.target_shape,
        r: a.addressing.count(),
        query_dim: a.addressing.query_dim(),
        parameterization: a.parameterization,
        num_classes: a.num_classes,
        dataset: a.dataset.clone(),
        fingerprint: format!("{:016x}", a.fingerprint),
        budget: a.budget.clone(),
        config: a.config.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let n = a.bank.bases.len() + a.addressing.matrices.len();
    let mut out = Vec::with_capacity(12 + json.len() + 4 * n);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&a.version.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for &v in a.bank.bases.data().iter().chain(a.addressing.matrices.data()) {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

/// Magic, version and header; shared with the checkpoint container.
pub(crate) fn split_container<'a>(
    bytes: &'a [u8],
    magic: &[u8; 4],
    what: &'static str,
    supported: u32,
) -> Result<(&'a [u8], &'a [u8])> {
    if bytes.len() < 12 {
        return Err(Error::format(what, format!("file of {} bytes is too short", bytes.len())));
    }
    if &bytes[..4] != magic {
        return Err(Error::format(
            what,
            format!(
                "wrong magic: expected {:?}, found {:?}",
                String::from_utf8_lossy(magic),
                String::from_utf8_lossy(&bytes[..4])
            ),
        ));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != supported {
        return Err(Error::Version {
            what,
            found: version,
            supported,
        });
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let rest = &bytes[12..];
    if rest.len() < hlen {
        return Err(Error::format(what, format!("header of {} bytes is truncated", hlen)));
    }
    Ok(rest.split_at(hlen))
}

pub fn from_bytes(bytes: &[u8]) -> Result<DistilledArtifact> {
    let what = "artifact";
    let (json, payload) = split_container(bytes, MAGIC, what, FORMAT_VERSION)?;
    let h: Header = serde_json::from_slice(json)?;
    let expect = h.payload_floats();
    if payload.len() != 4 * expect {
        return Err(Error::format(
            what,
            format!(
                "header declares K={}, r={}, d_y={} ({} floats) but the payload holds {} bytes",
                h.num_bases,
                h.r,
                h.query_dim,
                expect,
                payload.len()
            ),
        ));
    }
    let values: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let [c, hh, w] = h.base_shape;
    let nb = h.num_bases * c * hh * w;
    let bank = MemoryBank::new(
        Tensor::new([h.num_bases, c * hh * w], values[..nb].to_vec())?,
        h.target_shape,
        h.downsample,
    )?;
    if bank.base_shape != h.base_shape {
        return Err(Error::format(
            what,
            format!("base shape {:?} does not follow from {:?} / {}", h.base_shape, h.target_shape, h.downsample),
        ));
    }
    let addressing = AddressingSet::new(Tensor::new([h.r, h.query_dim, h.num_bases], values[nb..].to_vec())?)?;
    let fingerprint = u64::from_str_radix(&h.fingerprint, 16)
        .map_err(|e| Error::format(what, format!("fingerprint '{}': {}", h.fingerprint, e)))?;
    let a = DistilledArtifact {
        version: FORMAT_VERSION,
        bank,
        addressing,
        parameterization: h.parameterization,
        num_classes: h.num_classes,
        dataset: h.dataset,
        fingerprint,
        budget: h.budget,
        config: h.config,
    };
    a.validate()?;
    Ok(a)
}

pub fn save_artifact(a: &DistilledArtifact, path: &Path) -> Result<()> {
    let bytes = to_bytes(a)?;
    fs::write(path, bytes).map_err(Error::io(path))
}

pub fn load_artifact(path: &Path) -> Result<DistilledArtifact> {
    let bytes = fs::read(path).map_err(Error::io(path))?;
    from_bytes(&bytes)
}
