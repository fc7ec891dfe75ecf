//! Checkpoint directories: a JSON manifest plus one binary tensor file
//! per parameter and optimizer moment, each entry checksummed.
//!
//! Loading verifies every checksum and shape and restores state down
//! to the training stream's word position, so a resumed run continues
//! the unbroken run bit for bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{DawnError, Result};
use crate::io::tensor_file::{deserialize_tensor, serialize_tensor};
use crate::model::{ModelConfig, VelocityModel};
use crate::rng::{RngState, SeededRng};
use crate::tensor::Tensor;

use super::{AdamState, TrainConfig, TrainState};

const FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    file: String,
    shape: Vec<usize>,
    sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    model: ModelConfig,
    train: TrainConfig,
    epoch: usize,
    adam_step: u64,
    rng: RngState,
    tensors: Vec<TensorEntry>,
}

fn ck_err(msg: impl std::fmt::Display) -> DawnError {
    DawnError::Checkpoint(msg.to_string())
}

fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn write_entry(dir: &Path, name: String, tensor: &Tensor) -> Result<TensorEntry> {
    let file = format!("{name}.dwnt");
    let path = dir.join(&file);
    serialize_tensor(tensor, &path)?;
    let bytes = fs::read(&path)?;
    Ok(TensorEntry {
        name,
        file,
        shape: tensor.shape().to_vec(),
        sha256: sha256_hex(&bytes),
    })
}

/// Writes the full training state into `dir` (created if missing).
pub fn save(dir: impl AsRef<Path>, state: &TrainState, cfg: &TrainConfig) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut tensors = Vec::new();
    for (name, value) in state.params.entries() {
        tensors.push(write_entry(dir, format!("p.{name}"), value)?);
    }
    let (m, v) = state.adam.moments();
    for ((name, _), (mt, vt)) in state.params.entries().zip(m.iter().zip(v)) {
        tensors.push(write_entry(dir, format!("m.{name}"), mt)?);
        tensors.push(write_entry(dir, format!("v.{name}"), vt)?);
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        model: state.model.config().clone(),
        train: cfg.clone(),
        epoch: state.epoch,
        adam_step: state.adam.step_count(),
        rng: state.rng.state(),
        tensors,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| ck_err(format!("manifest serialization: {e}")))?;
    fs::write(dir.join(MANIFEST), json + "\n")?;
    Ok(())
}

pub struct LoadedCheckpoint {
    pub state: TrainState,
    pub train_cfg: TrainConfig,
}

fn read_entry(dir: &Path, entry: &TensorEntry) -> Result<Tensor> {
    let path = dir.join(&entry.file);
    if !path.is_file() {
        return Err(ck_err(format!("missing tensor file for `{}`", entry.name)));
    }
    let bytes = fs::read(&path)?;
    let digest = sha256_hex(&bytes);
    if digest != entry.sha256 {
        return Err(ck_err(format!(
            "checksum mismatch for `{}` ({} vs manifest {})",
            entry.name, digest, entry.sha256
        )));
    }
    let tensor = deserialize_tensor(&path)
        .map_err(|e| ck_err(format!("tensor `{}`: {e}", entry.name)))?;
    if tensor.shape() != entry.shape {
        return Err(ck_err(format!(
            "shape mismatch for `{}`: file has {:?}, manifest {:?}",
            entry.name,
            tensor.shape(),
            entry.shape
        )));
    }
    Ok(tensor)
}

/// Restores a checkpoint written by [`save`].
pub fn load(dir: impl AsRef<Path>) -> Result<LoadedCheckpoint> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST);
    let json = fs::read_to_string(&manifest_path)
        .map_err(|e| ck_err(format!("{}: {e}", manifest_path.display())))?;
    let manifest: Manifest =
        serde_json::from_str(&json).map_err(|e| ck_err(format!("manifest parse: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(ck_err(format!(
            "unsupported checkpoint version {}",
            manifest.format_version
        )));
    }
    let model = VelocityModel::new(manifest.model.clone())?;
    // The freshly initialized set fixes the canonical name order and
    // shapes that the manifest must reproduce.
    let mut params = model.init_params(manifest.train.seed);
    let reference: Vec<String> = params.entries().map(|(n, _)| n.to_string()).collect();

    let lookup = |prefix: &str, name: &str| -> Result<Tensor> {
        let full = format!("{prefix}.{name}");
        let entry = manifest
            .tensors
            .iter()
            .find(|e| e.name == full)
            .ok_or_else(|| ck_err(format!("manifest lacks tensor `{full}`")))?;
        read_entry(dir, entry)
    };

    let mut m = Vec::with_capacity(reference.len());
    let mut v = Vec::with_capacity(reference.len());
    for name in &reference {
        *params
            .get_mut(name)
            .expect("reference names come from this set") = lookup("p", name)?;
        m.push(lookup("m", name)?);
        v.push(lookup("v", name)?);
    }
    let adam = AdamState::from_parts(
        m,
        v,
        manifest.adam_step,
        manifest.train.adam_beta1,
        manifest.train.adam_beta2,
        manifest.train.adam_eps,
    );
    let state = TrainState {
        model,
        params,
        adam,
        epoch: manifest.epoch,
        rng: SeededRng::from_state(&manifest.rng),
    };
    Ok(LoadedCheckpoint {
        state,
        train_cfg: manifest.train,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::operators::SumOperator;
    use crate::train::{train_epoch, NoiseRange};

    fn setup() -> (TrainState, TrainConfig, Tensor) {
        let cfg = TrainConfig {
            batch_size: 8,
            max_epochs: 20,
            lr_init: 1e-3,
            seed: 404,
            noise_range: NoiseRange::Fixed(4.0),
            ..TrainConfig::default()
        };
        let state = TrainState::new(ModelConfig::mlp_toy(true), &cfg).unwrap();
        let mut rng = SeededRng::new(777);
        let dataset = rng.sample_standard_normal(&[24, 2]).unwrap();
        (state, cfg, dataset)
    }

    #[test]
    fn round_trip_is_bitwise() {
        let (mut state, cfg, dataset) = setup();
        let op = SumOperator::new();
        for _ in 0..2 {
            train_epoch(&mut state, &dataset, &op, &cfg).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        save(dir.path(), &state, &cfg).unwrap();
        let loaded = load(dir.path()).unwrap();
        assert_eq!(loaded.state.params, state.params);
        assert_eq!(loaded.state.epoch, state.epoch);
        assert_eq!(loaded.state.adam.step_count(), state.adam.step_count());
        assert_eq!(loaded.state.rng.state(), state.rng.state());
        assert_eq!(loaded.train_cfg, cfg);
    }

    #[test]
    fn resume_reproduces_unbroken_run() {
        let op = SumOperator::new();
        let (mut full, cfg, dataset) = setup();
        let mut full_losses = Vec::new();
        for _ in 0..10 {
            full_losses.push(train_epoch(&mut full, &dataset, &op, &cfg).unwrap());
        }

        let (mut half, cfg2, _) = setup();
        for _ in 0..5 {
            train_epoch(&mut half, &dataset, &op, &cfg2).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        save(dir.path(), &half, &cfg2).unwrap();
        let mut resumed = load(dir.path()).unwrap().state;
        let mut resumed_losses = Vec::new();
        for _ in 0..5 {
            resumed_losses.push(train_epoch(&mut resumed, &dataset, &op, &cfg2).unwrap());
        }
        assert_eq!(&full_losses[5..], &resumed_losses[..]);
        assert_eq!(full.params, resumed.params);
    }

    #[test]
    fn missing_tensor_file_is_reported_by_name() {
        let (state, cfg, _) = setup();
        let dir = tempfile::tempdir().unwrap();
        save(dir.path(), &state, &cfg).unwrap();
        fs::remove_file(dir.path().join("m.enc.w.dwnt")).unwrap();
        let err = match load(dir.path()) {
            Err(e) => e.to_string(),
            Ok(_) => panic!("load succeeded with a missing tensor"),
        };
        assert!(err.contains("m.enc.w"), "{err}");
    }

    #[test]
    fn corrupted_tensor_is_reported_by_name() {
        let (state, cfg, _) = setup();
        let dir = tempfile::tempdir().unwrap();
        save(dir.path(), &state, &cfg).unwrap();
        let victim = dir.path().join("p.out.w.dwnt");
        let mut bytes = fs::read(&victim).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0xFF;
        fs::write(&victim, bytes).unwrap();
        let err = match load(dir.path()) {
            Err(e) => e.to_string(),
            Ok(_) => panic!("load succeeded with a corrupt tensor"),
        };
        assert!(err.contains("p.out.w") && err.contains("checksum"), "{err}");
    }
}
