use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::LossCoefficients;
use crate::tensor::Tensor;

use super::forward::Denoiser;
use super::params::ParamKind;
use super::train::TrainState;
use super::DenoiserConfig;

const BLOB: &str = "params.bin";
const META: &str = "meta.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamInfo {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
}

/// Contents of `meta.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: DenoiserConfig,
    pub step: usize,
    pub seed: u64,
    pub coefficients: LossCoefficients,
    pub params: Vec<ParamInfo>,
    /// Hex SHA-256 of the parameter blob.
    pub sha256: String,
}

/// Writes `params.bin` (little-endian `f64`s in parameter order) and `meta.json`.
pub fn save_checkpoint(dir: &Path, state: &TrainState, coefficients: &LossCoefficients) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let p = &state.model.params;
    let mut blob = Vec::with_capacity(p.scalar_count() * 8);
    for v in &p.values {
        for x in v.data() {
            blob.extend_from_slice(&x.to_le_bytes());
        }
    }
    let meta = CheckpointMeta {
        config: state.model.config.clone(),
        step: state.step,
        seed: state.seed,
        coefficients: *coefficients,
        params: p
            .names
            .iter()
            .zip(&p.kinds)
            .zip(&p.values)
            .map(|((n, k), v)| ParamInfo {
                name: n.clone(),
                kind: *k,
                shape: v.shape().to_vec(),
            })
            .collect(),
        sha256: hex::encode(Sha256::digest(&blob)),
    };
    let blob_path = dir.join(BLOB);
    fs::write(&blob_path, &blob).map_err(|e| Error::io(&blob_path, e))?;
    let meta_path = dir.join(META);
    fs::write(&meta_path, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(&meta_path, e))
}

/// Restores the network saved by [`save_checkpoint`]; optimizer moments start at zero.
pub fn load_checkpoint(dir: &Path) -> Result<(TrainState, CheckpointMeta)> {
    let meta_path = dir.join(META);
    let meta: CheckpointMeta =
        serde_json::from_slice(&fs::read(&meta_path).map_err(|e| Error::io(&meta_path, e))?)?;
    let blob_path = dir.join(BLOB);
    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    if hex::encode(Sha256::digest(&blob)) != meta.sha256 {
        return Err(Error::Validation(format!("{} does not match its checksum", blob_path.display())));
    }
    let mut model = Denoiser::new(meta.config.clone())?;
    let expected: Vec<(&str, &[usize])> = model
        .params
        .names
        .iter()
        .zip(&model.params.values)
        .map(|(n, v)| (n.as_str(), v.shape()))
        .collect();
    let stored: Vec<(&str, &[usize])> = meta.params.iter().map(|p| (p.name.as_str(), p.shape.as_slice())).collect();
    if expected != stored {
        return Err(Error::Config("checkpoint parameters do not match its configuration".into()));
    }
    let total: usize = meta.params.iter().map(|p| p.shape.iter().product::<usize>()).sum();
    if blob.len() != total * 8 {
        return Err(Error::Validation("parameter blob has the wrong length".into()));
    }
    let mut values = Vec::with_capacity(meta.params.len());
    let mut chunks = blob.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    for p in &meta.params {
        let n = p.shape.iter().product();
        values.push(Tensor::new(p.shape.clone(), chunks.by_ref().take(n).collect())?);
    }
    model.load_params(values)?;
    let mut state = TrainState::new(model, meta.seed);
    state.step = meta.step;
    Ok((state, meta))
}
