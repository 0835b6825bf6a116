//! Checkpoint directories: `manifest.json` plus `params.bin`, the parameter
//! values as little-endian `f32` concatenated in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_err, json_err, Error, Result};
use crate::gff::FusionMode;
use crate::network::{ArchConfig, NetworkParams};
use crate::nn::ParamKind;
use crate::trainer::EpochLog;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamSpec {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
}

/// Training randomness is derived from the seed and epoch alone, so these
/// two values are the whole generator state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    pub seed: u64,
    pub epoch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub arch: ArchConfig,
    pub fusion: FusionMode,
    /// Optimizer steps taken.
    pub iter: u64,
    pub rng: RngState,
    pub history: Vec<EpochLog>,
    pub params: Vec<ParamSpec>,
    /// SHA-256 of `params.bin`, hex.
    pub params_sha256: String,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub params: NetworkParams<f32>,
}

fn encode(params: &NetworkParams<f32>) -> Vec<u8> {
    params
        .store
        .entries()
        .iter()
        .flat_map(|e| e.value.data().iter().flat_map(|v| v.to_le_bytes()))
        .collect()
}

impl Checkpoint {
    pub fn new(params: NetworkParams<f32>, iter: u64, rng: RngState, history: Vec<EpochLog>) -> Self {
        let specs = params
            .store
            .entries()
            .iter()
            .map(|e| ParamSpec {
                name: e.name.clone(),
                kind: e.kind,
                shape: e.value.shape().to_vec(),
            })
            .collect();
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            arch: params.net.cfg().clone(),
            fusion: params.net.fusion(),
            iter,
            rng,
            history,
            params: specs,
            params_sha256: hex::encode(Sha256::digest(encode(&params))),
        };
        Self { manifest, params }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&self.manifest).map_err(json_err(&path))?;
        fs::write(&path, text + "\n").map_err(io_err(&path))?;
        let path = dir.join(PARAMS_FILE);
        fs::write(&path, encode(&self.params)).map_err(io_err(&path))
    }

    /// Reads a checkpoint, checking the manifest against the layout its
    /// architecture implies and the blob against the recorded size and hash.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(json_err(&path))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {} (expected {FORMAT_VERSION})",
                manifest.format_version
            )));
        }
        let mut params = NetworkParams::<f32>::init(&manifest.arch, manifest.fusion, 0)?;
        let entries = params.store.entries();
        if entries.len() != manifest.params.len() {
            return Err(Error::Checkpoint(format!(
                "manifest lists {} tensors, architecture has {}",
                manifest.params.len(),
                entries.len()
            )));
        }
        for (e, spec) in entries.iter().zip(&manifest.params) {
            if e.name != spec.name || e.kind != spec.kind || e.value.shape() != spec.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "manifest tensor `{}` {:?} {:?} does not match architecture tensor `{}` {:?} {:?}",
                    spec.name,
                    spec.kind,
                    spec.shape,
                    e.name,
                    e.kind,
                    e.value.shape()
                )));
            }
        }

        let path = dir.join(PARAMS_FILE);
        let blob = fs::read(&path).map_err(io_err(&path))?;
        let expected: usize = manifest.params.iter().map(|p| p.shape.iter().product::<usize>()).sum();
        if blob.len() != 4 * expected {
            return Err(Error::Checkpoint(format!(
                "{} is {} bytes, manifest needs {}",
                path.display(),
                blob.len(),
                4 * expected
            )));
        }
        let digest = hex::encode(Sha256::digest(&blob));
        if digest != manifest.params_sha256 {
            return Err(Error::Checkpoint(format!(
                "{} hash {digest} differs from manifest {}",
                path.display(),
                manifest.params_sha256
            )));
        }
        let mut values = blob
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
        for e in params.store.entries_mut() {
            for v in e.value.data_mut() {
                *v = values.next().expect("length checked");
            }
        }
        Ok(Self { manifest, params })
    }
}
