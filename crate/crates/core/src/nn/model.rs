//! Model persistence: a binary parameter blob plus a JSON sidecar.
//!
//! Blob layout (little-endian): magic `LSRM`, u32 version, u32 tensor
//! count, then per tensor a u32 length and its f32 values. Tensors follow
//! the layer order of the spec (conv: weight, bias; batch norm: scale,
//! shift, running mean, running variance). When optimizer state is saved,
//! a u32 count of moment tensors follows with the first moments, then the
//! second moments, in the same length-prefixed form.
//!
//! The sidecar at `<model>.json` holds the spec, loss curve and optimizer
//! step.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::adam::{AdamConfig, AdamState};
use super::network::{Network, NetworkParams, NetworkSpec};
use super::train::EpochLog;
use crate::error::{Error, Result};
use crate::io::{push_f32s, read_f32s, read_file, read_u32, write_file, write_json};

pub const LSRM_MAGIC: &[u8; 4] = b"LSRM";
pub const LSRM_VERSION: u32 = 1;

/// A trained (or initialized) model with its training record.
#[derive(Debug, Clone, PartialEq)]
pub struct SavedModel {
    pub network: Network<f32>,
    pub history: Vec<EpochLog>,
    pub adam: Option<AdamState>,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    spec: NetworkSpec,
    epochs: usize,
    loss_curve: Vec<EpochLog>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    optimizer: Option<OptimizerRecord>,
}

#[derive(Serialize, Deserialize)]
struct OptimizerRecord {
    config: AdamConfig,
    step: u64,
}

pub fn sidecar_path(model: &Path) -> PathBuf {
    let mut s = model.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn push_tensors<'a>(out: &mut Vec<u8>, tensors: impl ExactSizeIterator<Item = &'a [f32]>) {
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.len() as u32).to_le_bytes());
        push_f32s(out, t);
    }
}

fn read_tensors(bytes: &[u8], at: &mut usize) -> Result<Vec<Vec<f32>>> {
    let count = read_u32(bytes, *at)? as usize;
    *at += 4;
    let mut out = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = read_u32(bytes, *at)? as usize;
        out.push(read_f32s(bytes, *at + 4, len)?);
        *at += 4 + 4 * len;
    }
    Ok(out)
}

pub fn encode_params(params: &NetworkParams<f32>, adam: Option<&AdamState>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(LSRM_MAGIC);
    out.extend_from_slice(&LSRM_VERSION.to_le_bytes());
    push_tensors(&mut out, params.tensors().into_iter());
    if let Some(a) = adam {
        let moments: Vec<&[f32]> = a.m.iter().chain(&a.v).map(|v| v.as_slice()).collect();
        push_tensors(&mut out, moments.into_iter());
    }
    out
}

/// Decodes a blob against `spec`, returning parameters and the raw moment
/// tensors (first moments then second moments) if present.
pub fn decode_params(bytes: &[u8], spec: &NetworkSpec) -> Result<(NetworkParams<f32>, Option<(Vec<Vec<f32>>, Vec<Vec<f32>>)>)> {
    if bytes.get(0..4) != Some(LSRM_MAGIC.as_slice()) {
        return Err(Error::Format("missing LSRM magic".into()));
    }
    let version = read_u32(bytes, 4)?;
    if version != LSRM_VERSION {
        return Err(Error::Format(format!("unsupported LSRM version {version}")));
    }
    let mut at = 8;
    let tensors = read_tensors(bytes, &mut at)?;
    let mut params = NetworkParams::<f32>::init(spec, 0);
    {
        let slots = params.tensors_mut();
        if slots.len() != tensors.len() {
            return Err(Error::Format(format!("model has {} tensors, spec needs {}", tensors.len(), slots.len())));
        }
        for (i, (slot, t)) in slots.into_iter().zip(tensors).enumerate() {
            if slot.len() != t.len() {
                return Err(Error::Format(format!("tensor {i} has {} values, spec needs {}", t.len(), slot.len())));
            }
            *slot = t;
        }
    }
    let moments = if at < bytes.len() {
        let mut all = read_tensors(bytes, &mut at)?;
        if all.len() % 2 != 0 {
            return Err(Error::Format("odd number of optimizer moment tensors".into()));
        }
        let v = all.split_off(all.len() / 2);
        Some((all, v))
    } else {
        None
    };
    if at != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after LSRM data", bytes.len() - at)));
    }
    Ok((params, moments))
}

pub fn save_model(path: &Path, model: &SavedModel) -> Result<()> {
    write_file(path, &encode_params(&model.network.params, model.adam.as_ref()))?;
    let sidecar = Sidecar {
        spec: model.network.spec.clone(),
        epochs: model.history.len(),
        loss_curve: model.history.clone(),
        optimizer: model.adam.as_ref().map(|a| OptimizerRecord { config: a.config, step: a.step }),
    };
    write_json(&sidecar_path(path), &sidecar)
}

pub fn load_model(path: &Path) -> Result<SavedModel> {
    let side = sidecar_path(path);
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    decode_model(&read_file(path)?, &text).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        Error::Json { source, .. } => Error::json(side.display(), source),
        other => other,
    })
}

/// Rebuilds a model from its blob and the text of its sidecar.
pub fn decode_model(blob: &[u8], sidecar: &str) -> Result<SavedModel> {
    let sidecar: Sidecar = serde_json::from_str(sidecar).map_err(|e| Error::json("model sidecar", e))?;
    let (params, moments) = decode_params(blob, &sidecar.spec)?;
    let network = Network::new(sidecar.spec, params)?;
    let adam = match (sidecar.optimizer, moments) {
        (Some(rec), Some((m, v))) => {
            let state = AdamState { config: rec.config, step: rec.step, m, v };
            let mut probe = network.params.clone();
            if !state.matches(&probe.trainable_mut()) {
                return Err(Error::Format("optimizer moments do not match the network".into()));
            }
            Some(state)
        }
        (None, None) => None,
        _ => return Err(Error::Format("sidecar and blob disagree about optimizer state".into())),
    };
    Ok(SavedModel { network, history: sidecar.loss_curve, adam })
}
