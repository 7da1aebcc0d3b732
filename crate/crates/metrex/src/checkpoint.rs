//! Parameter checkpoints: a versioned JSON document mapping stable tensor
//! names to shaped arrays, plus optimizer moments and the iteration
//! counter. JSON float round-tripping is exact, so save/load preserves
//! parameters bit for bit.

use std::path::Path;

use serde::{Deserialize, Serialize};

use metrex_core::agent::{AgentConfig, AgentParams};
use metrex_core::nn::{AdamConfig, AdamState, Tensor};

use crate::error::{CliError, CliResult};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: u32,
    pub feature_dim: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    /// Iterations already completed when this checkpoint was written.
    pub iteration: usize,
    pub params: Vec<NamedTensor>,
    pub adam: AdamDump,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedTensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamDump {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub m: Vec<NamedTensor>,
    pub v: Vec<NamedTensor>,
}

fn named(names: &[String], tensors: &[Tensor]) -> Vec<NamedTensor> {
    names
        .iter()
        .zip(tensors)
        .map(|(n, t)| NamedTensor {
            name: n.clone(),
            rows: t.rows(),
            cols: t.cols(),
            data: t.data().to_vec(),
        })
        .collect()
}

fn tensors_of(named: &[NamedTensor]) -> CliResult<Vec<(String, Tensor)>> {
    named
        .iter()
        .map(|nt| {
            Tensor::from_vec(nt.rows, nt.cols, nt.data.clone())
                .map(|t| (nt.name.clone(), t))
                .map_err(CliError::from)
        })
        .collect()
}

pub fn save(
    path: &Path,
    params: &AgentParams,
    adam: &AdamState,
    iteration: usize,
) -> CliResult<()> {
    let names = params.names();
    let (m, v) = adam.moments();
    let doc = Checkpoint {
        format: 1,
        feature_dim: params.config().feature_dim,
        dim: params.config().dim,
        layers: params.config().layers,
        heads: params.config().heads,
        iteration,
        params: named(&names, params.tensors()),
        adam: AdamDump {
            step: adam.step,
            lr: adam.cfg.lr,
            beta1: adam.cfg.beta1,
            beta2: adam.cfg.beta2,
            eps: adam.cfg.eps,
            weight_decay: adam.cfg.weight_decay,
            m: named(&names, m),
            v: named(&names, v),
        },
    };
    std::fs::write(path, serde_json::to_string(&doc)?)?;
    Ok(())
}

pub fn load(path: &Path) -> CliResult<(AgentParams, AdamState, usize)> {
    let text = std::fs::read_to_string(path)?;
    let doc: Checkpoint = serde_json::from_str(&text)?;
    if doc.format != 1 {
        return Err(CliError::Validation(format!(
            "unsupported checkpoint format {}, expected 1",
            doc.format
        )));
    }
    let cfg = AgentConfig {
        feature_dim: doc.feature_dim,
        dim: doc.dim,
        layers: doc.layers,
        heads: doc.heads,
    };
    let params = AgentParams::from_named(cfg, &tensors_of(&doc.params)?)?;
    let adam_cfg = AdamConfig {
        lr: doc.adam.lr,
        beta1: doc.adam.beta1,
        beta2: doc.adam.beta2,
        eps: doc.adam.eps,
        weight_decay: doc.adam.weight_decay,
    };
    let m: Vec<Tensor> = tensors_of(&doc.adam.m)?.into_iter().map(|(_, t)| t).collect();
    let v: Vec<Tensor> = tensors_of(&doc.adam.v)?.into_iter().map(|(_, t)| t).collect();
    let adam = AdamState::from_moments(m, v, doc.adam.step, adam_cfg);
    Ok((params, adam, doc.iteration))
}
