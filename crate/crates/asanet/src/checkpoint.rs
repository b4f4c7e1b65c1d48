//! Checkpoints: `manifest.json` describing every stored array plus
//! `weights.bin` holding their values as little-endian `f64`.
//!
//! Besides the parameters, a checkpoint carries batch-norm running
//! statistics, Adam moments and the loop position, so training resumed from
//! it continues exactly as the uninterrupted run would.

use std::fs;
use std::path::Path;

use asanet_core::nn::ParamGroup;
use asanet_core::train::{TrainConfig, Trainer};
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};

const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: ParamGroup,
    /// Offset in values (not bytes) into `weights.bin`.
    pub offset: usize,
    /// Adam moment offsets; absent for parameters trained by plain SGD.
    pub moments: Option<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNormEntry {
    pub name: String,
    pub channels: usize,
    pub mean_offset: usize,
    pub var_offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: u32,
    pub config: TrainConfig,
    pub seed: u64,
    /// Next epoch to run.
    pub epoch: usize,
    pub optim_step: u64,
    pub pmi_raised: bool,
    pub params: Vec<ParamEntry>,
    pub batch_norms: Vec<BatchNormEntry>,
    pub num_values: usize,
}

pub fn save(trainer: &Trainer, dir: &Path) -> Result<()> {
    let mut values: Vec<f64> = Vec::new();
    let mut params = Vec::new();
    for (i, p) in trainer.model.params.iter().enumerate() {
        let offset = values.len();
        values.extend_from_slice(p.value.data());
        let moments = match p.group {
            ParamGroup::Network => {
                let m = values.len();
                values.extend_from_slice(&trainer.optim.m[i]);
                let v = values.len();
                values.extend_from_slice(&trainer.optim.v[i]);
                Some((m, v))
            }
            ParamGroup::Centers => None,
        };
        params.push(ParamEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            group: p.group,
            offset,
            moments,
        });
    }
    let mut batch_norms = Vec::new();
    for bn in trainer.model.batch_norms() {
        let mean_offset = values.len();
        values.extend_from_slice(&bn.state.running_mean);
        let var_offset = values.len();
        values.extend_from_slice(&bn.state.running_var);
        batch_norms.push(BatchNormEntry {
            name: bn.name.clone(),
            channels: bn.state.running_mean.len(),
            mean_offset,
            var_offset,
        });
    }
    let manifest = Manifest {
        format: FORMAT_VERSION,
        config: trainer.config.clone(),
        seed: trainer.config.seed,
        epoch: trainer.epoch,
        optim_step: trainer.optim.step,
        pmi_raised: trainer.pmi.raised,
        params,
        batch_norms,
        num_values: values.len(),
    };
    fs::create_dir_all(dir).at(dir)?;
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in &values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let p = dir.join("weights.bin");
    fs::write(&p, bytes).at(&p)?;
    let p = dir.join("manifest.json");
    fs::write(&p, serde_json::to_vec_pretty(&manifest)?).at(&p)
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

/// Rebuild a trainer from `dir`. Everything is validated before any value is
/// used, so a corrupt checkpoint yields an error and nothing else.
pub fn load(dir: &Path) -> Result<Trainer> {
    let p = dir.join("manifest.json");
    let raw = fs::read(&p).map_err(|e| format_err(format!("{}: {e}", p.display())))?;
    let m: Manifest =
        serde_json::from_slice(&raw).map_err(|e| format_err(format!("{}: {e}", p.display())))?;
    if m.format != FORMAT_VERSION {
        return Err(format_err(format!("unsupported checkpoint format {}", m.format)));
    }
    let p = dir.join("weights.bin");
    let bytes = fs::read(&p).map_err(|e| format_err(format!("{}: {e}", p.display())))?;
    if bytes.len() != m.num_values * 8 {
        return Err(format_err(format!(
            "weights.bin holds {} bytes, manifest needs {}",
            bytes.len(),
            m.num_values * 8
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let slice = |offset: usize, len: usize| -> Result<&[f64]> {
        values
            .get(offset..offset + len)
            .ok_or_else(|| format_err(format!("range {offset}+{len} outside weights.bin")))
    };

    let mut trainer = Trainer::new(m.config.clone())?;
    if trainer.model.params.len() != m.params.len() {
        return Err(format_err(format!(
            "checkpoint lists {} parameters, the configured model has {}",
            m.params.len(),
            trainer.model.params.len()
        )));
    }
    for (i, (p, e)) in trainer.model.params.iter_mut().zip(&m.params).enumerate() {
        if p.name != e.name || p.value.shape() != e.shape.as_slice() || p.group != e.group {
            return Err(format_err(format!("parameter {i} `{}` does not match the model", e.name)));
        }
        let n = p.value.len();
        p.value.data_mut().copy_from_slice(slice(e.offset, n)?);
        match (p.group, e.moments) {
            (ParamGroup::Network, Some((mo, vo))) => {
                trainer.optim.m[i].copy_from_slice(slice(mo, n)?);
                trainer.optim.v[i].copy_from_slice(slice(vo, n)?);
            }
            (ParamGroup::Centers, None) => {}
            _ => return Err(format_err(format!("optimizer state of `{}` is malformed", e.name))),
        }
    }
    let bns = trainer.model.batch_norms_mut();
    if bns.len() != m.batch_norms.len() {
        return Err(format_err("batch-norm layer count does not match the model"));
    }
    for (bn, e) in bns.into_iter().zip(&m.batch_norms) {
        if bn.name != e.name || bn.state.running_mean.len() != e.channels {
            return Err(format_err(format!("batch norm `{}` does not match the model", e.name)));
        }
        bn.state.running_mean.copy_from_slice(slice(e.mean_offset, e.channels)?);
        bn.state.running_var.copy_from_slice(slice(e.var_offset, e.channels)?);
    }
    trainer.epoch = m.epoch;
    trainer.optim.step = m.optim_step;
    trainer.pmi.raised = m.pmi_raised;
    Ok(trainer)
}
