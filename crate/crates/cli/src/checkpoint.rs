//! Weight files plus a JSON sidecar describing how they were produced.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use smcdo::data::Normalization;
use smcdo::graph::ModelGraph;
use smcdo::stochastic::{DropoutMode, DropoutSpec};
use smcdo::tensor::serialize::{from_bytes, to_bytes, LayerWeights};
use smcdo::train::{build, ArchConfig, EpochRecord, TrainHistory};
use smcdo::{Error, Result};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    /// Hash of the configuration parts that determine the weights.
    pub config_hash: String,
    pub member: usize,
    pub seed: u64,
    pub epoch: usize,
    pub rate_train: f64,
    pub arch: ArchConfig,
    pub dropout_mode: DropoutMode,
    pub normalization: Normalization,
    pub weights_sha256: String,
    pub metrics: Option<EpochRecord>,
    pub history: TrainHistory,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sidecar_path(weights: &Path) -> PathBuf {
    weights.with_extension("json")
}

/// Writes `<path>` and its `.json` sidecar; `meta.weights_sha256` is filled in here.
pub fn save(path: &Path, weights: &[LayerWeights], mut meta: CheckpointMeta) -> Result<CheckpointMeta> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let bytes = to_bytes(weights);
    meta.weights_sha256 = sha256_hex(&bytes);
    std::fs::write(path, &bytes)?;
    let json = serde_json::to_string_pretty(&meta).expect("metadata serialises");
    std::fs::write(sidecar_path(path), json + "\n")?;
    Ok(meta)
}

pub fn load(path: &Path) -> Result<(Vec<LayerWeights>, CheckpointMeta)> {
    let bytes = std::fs::read(path).map_err(|e| Error::Data(format!("checkpoint {}: {e}", path.display())))?;
    let side = sidecar_path(path);
    let text = std::fs::read_to_string(&side).map_err(|e| Error::Data(format!("checkpoint sidecar {}: {e}", side.display())))?;
    let meta: CheckpointMeta =
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("checkpoint sidecar {}: {e}", side.display())))?;
    if sha256_hex(&bytes) != meta.weights_sha256 {
        return Err(Error::WeightFormat(format!("{} does not match the hash in its sidecar", path.display())));
    }
    Ok((from_bytes(&bytes)?, meta))
}

/// Rebuilds the architecture and installs the stored weights.
pub fn instantiate(weights: &[LayerWeights], meta: &CheckpointMeta, rate_inf: f64) -> Result<ModelGraph> {
    let spec = DropoutSpec { mode: meta.dropout_mode, rate_train: meta.rate_train, rate_inf, scaling: Default::default() };
    let graph = build(&meta.arch, spec, 0)?;
    graph
        .replace_params(weights.to_vec())
        .map_err(|e| Error::WeightFormat(format!("checkpoint does not fit the architecture: {e}")))?;
    Ok(graph)
}

/// `member*.bin` files of a directory in name order, or the single file given.
pub fn discover(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let entries = std::fs::read_dir(path).map_err(|e| Error::Data(format!("checkpoint directory {}: {e}", path.display())))?;
    let mut found: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|x| x == "bin")
                && p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("member"))
        })
        .collect();
    found.sort();
    if found.is_empty() {
        return Err(Error::Data(format!("no member*.bin checkpoints in {}", path.display())));
    }
    Ok(found)
}
