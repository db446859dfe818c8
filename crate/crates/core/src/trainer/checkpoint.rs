use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Checkpoint, RunManifest, TrainError};
use crate::model::{AdamConfig, Layout, ModelConfig, OptState, Params};
use crate::vocab::VocabLayout;

pub const FORMAT: &str = "nmtlab-checkpoint-1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const DATA_FILE: &str = "tensors.bin";
const M_PREFIX: &str = "adam.m/";
const V_PREFIX: &str = "adam.v/";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamEntry {
    pub config: AdamConfig,
    pub step: u64,
}

/// `manifest.json` of a checkpoint directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub step: u64,
    pub model_config: ModelConfig,
    pub vocab: VocabLayout,
    pub run: RunManifest,
    pub adam: AdamEntry,
    pub dtype: String,
    pub data_file: String,
    pub sha256: String,
    pub tensors: Vec<TensorEntry>,
}

/// Outcome of the content-hash comparison on load.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Integrity {
    Verified,
    HashMismatch { expected: String, actual: String },
}

fn write_tensor(
    buf: &mut Vec<u8>,
    entries: &mut Vec<TensorEntry>,
    name: String,
    shape: &[usize],
    data: &[f32],
) {
    let offset = buf.len() as u64;
    for x in data {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    entries.push(TensorEntry {
        name,
        shape: shape.to_vec(),
        offset,
        nbytes: (data.len() * 4) as u64,
    });
}

/// Writes `manifest.json` and `tensors.bin` (little-endian f32, row-major)
/// into `dir`, creating it if needed.
pub fn save_checkpoint(c: &Checkpoint, dir: impl AsRef<Path>) -> Result<(), TrainError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| TrainError::io(dir, e))?;
    let layout = c.params.layout().clone();
    let mut buf = Vec::with_capacity(layout.len() * 12);
    let mut entries = Vec::with_capacity(layout.tensors().len() * 3);
    for (prefix, p) in [("", &c.params), (M_PREFIX, &c.opt.m), (V_PREFIX, &c.opt.v)] {
        for (i, t) in layout.tensors().iter().enumerate() {
            write_tensor(
                &mut buf,
                &mut entries,
                format!("{prefix}{}", t.name),
                &t.shape,
                p.tensor(i),
            );
        }
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        step: c.step,
        model_config: *layout.config(),
        vocab: c.vocab.clone(),
        run: c.run.clone(),
        adam: AdamEntry {
            config: c.opt.config,
            step: c.opt.step,
        },
        dtype: "f32-le".into(),
        data_file: DATA_FILE.into(),
        sha256: hex::encode(Sha256::digest(&buf)),
        tensors: entries,
    };
    let data_path = dir.join(DATA_FILE);
    fs::write(&data_path, &buf).map_err(|e| TrainError::io(&data_path, e))?;
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| TrainError::Checkpoint(e.to_string()))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    fs::write(&manifest_path, json + "\n").map_err(|e| TrainError::io(&manifest_path, e))?;
    Ok(())
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Manifest, TrainError> {
    let path = dir.as_ref().join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| TrainError::io(&path, e))?;
    let m: Manifest = serde_json::from_str(&text)
        .map_err(|e| TrainError::Checkpoint(format!("{}: {e}", path.display())))?;
    if m.format != FORMAT {
        return Err(TrainError::Checkpoint(format!(
            "unsupported checkpoint format {:?}",
            m.format
        )));
    }
    if m.dtype != "f32-le" {
        return Err(TrainError::Checkpoint(format!(
            "unsupported dtype {:?}",
            m.dtype
        )));
    }
    Ok(m)
}

fn read_tensor(
    m: &Manifest,
    data: &[u8],
    name: &str,
    shape: &[usize],
) -> Result<Vec<f32>, TrainError> {
    let e = m
        .tensors
        .iter()
        .find(|e| e.name == name)
        .ok_or_else(|| TrainError::MissingTensor(name.to_string()))?;
    if e.shape != shape {
        return Err(TrainError::ShapeMismatch {
            tensor: name.to_string(),
            expected: shape.to_vec(),
            found: e.shape.clone(),
        });
    }
    let len: usize = shape.iter().product();
    if e.nbytes != (len * 4) as u64 {
        return Err(TrainError::ShapeMismatch {
            tensor: name.to_string(),
            expected: shape.to_vec(),
            found: vec![e.nbytes as usize / 4],
        });
    }
    let start = e.offset as usize;
    let bytes = data.get(start..start + len * 4).ok_or_else(|| {
        TrainError::Checkpoint(format!("tensor {name} lies outside the data file"))
    })?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Loads a checkpoint directory. A content-hash mismatch is reported in the
/// returned [`Integrity`] (and logged) but does not fail the load.
pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(Checkpoint, Integrity), TrainError> {
    let dir = dir.as_ref();
    let m = read_manifest(dir)?;
    let data_path: PathBuf = dir.join(&m.data_file);
    let data = fs::read(&data_path).map_err(|e| TrainError::io(&data_path, e))?;
    let actual = hex::encode(Sha256::digest(&data));
    let integrity = if actual == m.sha256 {
        Integrity::Verified
    } else {
        log::warn!(
            "checkpoint {}: content hash mismatch (manifest {}, data {})",
            dir.display(),
            m.sha256,
            actual
        );
        Integrity::HashMismatch {
            expected: m.sha256.clone(),
            actual,
        }
    };

    let layout = Arc::new(Layout::new(m.model_config)?);
    let mut bufs: [Vec<f32>; 3] = Default::default();
    for (buf, prefix) in bufs.iter_mut().zip(["", M_PREFIX, V_PREFIX]) {
        buf.reserve(layout.len());
        for t in layout.tensors() {
            buf.extend(read_tensor(
                &m,
                &data,
                &format!("{prefix}{}", t.name),
                &t.shape,
            )?);
        }
    }
    let [p, mm, vv] = bufs;
    let params = Params::from_vec(layout.clone(), p)?;
    let mut opt = OptState::new(layout.clone(), m.adam.config);
    opt.m = Params::from_vec(layout.clone(), mm)?;
    opt.v = Params::from_vec(layout, vv)?;
    opt.step = m.adam.step;
    Ok((
        Checkpoint {
            step: m.step,
            params,
            opt,
            vocab: m.vocab,
            run: m.run,
        },
        integrity,
    ))
}
