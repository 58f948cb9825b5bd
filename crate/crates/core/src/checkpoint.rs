//! Model checkpoints: one `.npz` archive of named parameter arrays next to a
//! JSON manifest describing how to rebuild the model around them.

use std::fs::File;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Ix2, OwnedRepr};
use ndarray_npy::{NpzReader, NpzWriter};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::{ArchitectureGenome, Denoiser, DenoiserConfig, ParamSet};
use crate::schedule::{NoiseSchedule, PredictionKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub genome: ArchitectureGenome,
    pub config: DenoiserConfig,
    pub seed: u64,
    pub schedule: NoiseSchedule,
    pub parameterization: PredictionKind,
    pub step: u64,
    /// Block uids per stage: resnets first, then cross-attention blocks.
    pub uids: Vec<Vec<u64>>,
    pub next_uid: u64,
    pub checksum: String,
    #[serde(default)]
    pub notes: serde_json::Value,
}

fn npy_err(e: impl std::fmt::Display) -> Error {
    Error::Npy(e.to_string())
}

pub fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("npz"), stem.with_extension("json"))
}

/// Writes `<stem>.npz` and `<stem>.json`.
pub fn save(model: &Denoiser, stem: &Path, step: u64, notes: serde_json::Value) -> Result<CheckpointManifest> {
    if let Some(dir) = stem.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let (npz, json) = paths(stem);
    save_params(model, &npz)?;

    let manifest = CheckpointManifest {
        genome: model.genome(),
        config: model.config,
        seed: model.seed,
        schedule: NoiseSchedule::Cosine,
        parameterization: PredictionKind::V,
        step,
        uids: model
            .stages
            .iter()
            .map(|s| s.resnets.iter().map(|b| b.uid).chain(s.attns.iter().map(|b| b.uid)).collect())
            .collect(),
        next_uid: model.next_uid(),
        checksum: model.checksum(),
        notes,
    };
    let tmp = json.with_extension("json.tmp");
    std::fs::write(&tmp, serde_json::to_string_pretty(&manifest)?)?;
    std::fs::rename(&tmp, &json)?;
    Ok(manifest)
}

pub fn load_manifest(stem: &Path) -> Result<CheckpointManifest> {
    let (_, json) = paths(stem);
    Ok(serde_json::from_str(&std::fs::read_to_string(json)?)?)
}

/// Rebuilds the model and verifies the parameter checksum.
pub fn load(stem: &Path) -> Result<(Denoiser, CheckpointManifest)> {
    let manifest = load_manifest(stem)?;
    let (npz, _) = paths(stem);
    let mut model = Denoiser::build(&manifest.genome, manifest.config, manifest.seed)?;
    load_params(&mut model, &npz)?;
    for (stage, uids) in model.stages.iter_mut().zip(&manifest.uids) {
        let nr = stage.resnets.len();
        for (b, &u) in stage.resnets.iter_mut().zip(uids.iter()) {
            b.uid = u;
        }
        for (b, &u) in stage.attns.iter_mut().zip(uids[nr..].iter()) {
            b.uid = u;
        }
    }
    model.set_next_uid(manifest.next_uid);
    let found = model.checksum();
    if found != manifest.checksum {
        return Err(Error::Npy(format!("checksum mismatch: manifest {}, arrays {found}", manifest.checksum)));
    }
    Ok((model, manifest))
}

/// Writes every array of `params` to an `.npz` archive.
pub fn save_params<P: ParamSet>(params: &P, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut writer = NpzWriter::new(File::create(path)?);
    let mut failure = None;
    params.visit("", &mut |name, a| {
        if failure.is_none() {
            if let Err(e) = writer.add_array(name.as_str(), a) {
                failure = Some(npy_err(e));
            }
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    writer.finish().map_err(npy_err)?;
    Ok(())
}

/// Overwrites the arrays of `params` from an archive written by [`save_params`].
pub fn load_params<P: ParamSet>(params: &mut P, path: &Path) -> Result<()> {
    let mut reader = NpzReader::new(File::open(path)?).map_err(npy_err)?;
    let mut failure = None;
    params.visit_mut("", &mut |name, a| {
        if failure.is_some() {
            return;
        }
        match reader.by_name::<OwnedRepr<f64>, Ix2>(name.as_str()) {
            Ok(v) if v.dim() == a.dim() => a.assign(&v),
            Ok(v) => failure = Some(Error::Shape(format!("{name}: stored {:?}, expected {:?}", v.dim(), a.dim()))),
            Err(e) => failure = Some(Error::Npy(format!("{name}: {e}"))),
        }
    });
    failure.map_or(Ok(()), Err)
}

/// Reads a single named array from a checkpoint archive.
pub fn read_array(stem: &Path, name: &str) -> Result<Array2<f64>> {
    let (npz, _) = paths(stem);
    let mut reader = NpzReader::new(File::open(npz)?).map_err(npy_err)?;
    reader.by_name::<OwnedRepr<f64>, Ix2>(name).map_err(npy_err)
}
