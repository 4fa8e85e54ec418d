//! Checkpoint directories: `manifest.json`, one blob per tensor under
//! `tensors/`, optimizer moments under `optimizer/`, plus the vocabulary and
//! chat template when present. Every blob carries a SHA-256 in the manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::ChatTemplate;
use crate::error::{Error, Result};
use crate::lora::{merge_all, LoraAdapter};
use crate::params::ParamStore;
use crate::ssm::{ModelConfig, SsmModel};
use crate::tensor::{Scalar, Tensor};
use crate::tokenizer::Vocab;

use super::{Adam, AdamConfig, TrainConfig, TrainState};

pub const CHECKPOINT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const VOCAB_FILE: &str = "vocab.tsv";
const TEMPLATE_FILE: &str = "template.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BlobEntry {
    name: String,
    file: String,
    shape: Vec<usize>,
    sha256: String,
    #[serde(default)]
    trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct MomentEntry {
    name: String,
    m: BlobEntry,
    v: BlobEntry,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FileEntry {
    file: String,
    sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    dtype: String,
    step: usize,
    epoch: usize,
    cursor: usize,
    best_eval_loss: Option<f64>,
    model_config: ModelConfig,
    train_config: TrainConfig,
    adapters: BTreeMap<String, LoraAdapter>,
    tensors: Vec<BlobEntry>,
    optimizer: AdamConfig,
    optimizer_t: u64,
    moments: Vec<MomentEntry>,
    vocab: Option<FileEntry>,
    template: Option<FileEntry>,
}

fn sha_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

fn dtype_name<T: Scalar>() -> String {
    format!("{:?}", T::DTYPE).to_lowercase()
}

fn write_file(root: &Path, rel: &str, bytes: &[u8]) -> Result<FileEntry> {
    let path = root.join(rel);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::at_path(parent, e))?;
    }
    std::fs::write(&path, bytes).map_err(|e| Error::at_path(&path, e))?;
    Ok(FileEntry {
        file: rel.to_string(),
        sha256: sha_hex(bytes),
    })
}

fn write_blob<T: Scalar>(root: &Path, rel: String, name: &str, t: &Tensor<T>, trainable: bool) -> Result<BlobEntry> {
    let f = write_file(root, &rel, &t.to_bytes())?;
    Ok(BlobEntry {
        name: name.to_string(),
        file: f.file,
        shape: t.shape().to_vec(),
        sha256: f.sha256,
        trainable,
    })
}

fn read_verified(root: &Path, file: &str, sha256: &str) -> Result<Vec<u8>> {
    if Path::new(file).components().any(|c| !matches!(c, std::path::Component::Normal(_))) {
        return Err(Error::Checkpoint(format!("manifest entry `{file}` escapes the checkpoint directory")));
    }
    let path = root.join(file);
    let bytes = std::fs::read(&path).map_err(|e| Error::at_path(&path, e))?;
    let actual = sha_hex(&bytes);
    if actual != sha256 {
        return Err(Error::Checkpoint(format!(
            "{file}: sha256 {actual} does not match manifest {sha256}"
        )));
    }
    Ok(bytes)
}

fn read_blob<T: Scalar>(root: &Path, e: &BlobEntry) -> Result<Tensor<T>> {
    let t = Tensor::from_bytes(&read_verified(root, &e.file, &e.sha256)?)?;
    if t.shape() != e.shape.as_slice() {
        return Err(Error::Checkpoint(format!(
            "{}: shape {:?} does not match manifest {:?}",
            e.file,
            t.shape(),
            e.shape
        )));
    }
    Ok(t)
}

fn write_contents<T: Scalar>(state: &TrainState<T>, root: &Path) -> Result<()> {
    let mut tensors = Vec::new();
    for (_, p) in state.model.params.iter() {
        tensors.push(write_blob(root, format!("tensors/{}.bin", p.name), &p.name, &p.value, p.trainable)?);
    }
    let mut moments = Vec::new();
    for (name, (m, v)) in &state.optimizer.moments {
        moments.push(MomentEntry {
            name: name.clone(),
            m: write_blob(root, format!("optimizer/{name}.m.bin"), name, m, true)?,
            v: write_blob(root, format!("optimizer/{name}.v.bin"), name, v, true)?,
        });
    }
    let vocab = state
        .vocab
        .as_ref()
        .map(|v| write_file(root, VOCAB_FILE, v.to_tsv().as_bytes()))
        .transpose()?;
    let template = state
        .template
        .as_ref()
        .map(|t| Ok::<_, Error>(write_file(root, TEMPLATE_FILE, serde_json::to_string_pretty(t)?.as_bytes())?))
        .transpose()?;
    let manifest = Manifest {
        version: CHECKPOINT_VERSION,
        dtype: dtype_name::<T>(),
        step: state.step,
        epoch: state.epoch,
        cursor: state.cursor,
        best_eval_loss: state.best_eval_loss,
        model_config: state.model.config.clone(),
        train_config: state.config.clone(),
        adapters: state.model.adapters.clone(),
        tensors,
        optimizer: state.optimizer.config,
        optimizer_t: state.optimizer.t,
        moments,
        vocab,
        template,
    };
    let path = root.join(MANIFEST);
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::at_path(&path, e))
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(format!(".{suffix}-{}", std::process::id()));
    path.with_file_name(name)
}

/// Writes `state` to the directory `path`. The directory appears complete or
/// not at all: contents go to a temporary sibling that is renamed into place.
pub fn save_checkpoint<T: Scalar>(state: &TrainState<T>, path: &Path) -> Result<()> {
    let tmp = sibling(path, "tmp");
    if tmp.exists() {
        std::fs::remove_dir_all(&tmp).map_err(|e| Error::at_path(&tmp, e))?;
    }
    std::fs::create_dir_all(&tmp).map_err(|e| Error::at_path(&tmp, e))?;
    if let Err(e) = write_contents(state, &tmp) {
        let _ = std::fs::remove_dir_all(&tmp);
        return Err(e);
    }
    let old = sibling(path, "old");
    if path.exists() {
        std::fs::rename(path, &old).map_err(|e| Error::at_path(path, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::at_path(path, e))?;
    if old.exists() {
        std::fs::remove_dir_all(&old).map_err(|e| Error::at_path(&old, e))?;
    }
    Ok(())
}

/// Loads a checkpoint, verifying version, dtype, every hash and every shape
/// before any state is returned.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<TrainState<T>> {
    let mpath = path.join(MANIFEST);
    let text = std::fs::read_to_string(&mpath).map_err(|e| Error::at_path(&mpath, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", mpath.display())))?;
    if m.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "checkpoint version {}, expected {CHECKPOINT_VERSION}",
            m.version
        )));
    }
    if m.dtype != dtype_name::<T>() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} tensors, requested {}",
            m.dtype,
            dtype_name::<T>()
        )));
    }
    m.model_config.validate()?;
    m.train_config.validate()?;

    let mut params = ParamStore::new();
    for e in &m.tensors {
        params.insert(&e.name, read_blob(path, e)?, e.trainable)?;
    }
    let reference = SsmModel::<T>::new(m.model_config.clone())?;
    for (_, p) in reference.params.iter() {
        match params.value(&p.name) {
            None => return Err(Error::Checkpoint(format!("missing tensor `{}`", p.name))),
            Some(t) if t.shape() != p.value.shape() => {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` has shape {:?}, the model config implies {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )))
            }
            Some(_) => {}
        }
    }
    for ad in m.adapters.values() {
        for (name, shape) in [(ad.a_name(), [ad.rank, ad.d_in]), (ad.b_name(), [ad.d_out, ad.rank])] {
            if params.value(&name).map(|t| t.shape()) != Some(&shape[..]) {
                return Err(Error::Checkpoint(format!("adapter tensor `{name}` missing or misshapen")));
            }
        }
    }

    let mut moments = BTreeMap::new();
    for e in &m.moments {
        let (mm, vv): (Tensor<T>, Tensor<T>) = (read_blob(path, &e.m)?, read_blob(path, &e.v)?);
        if params.value(&e.name).map(|t| t.shape()) != Some(mm.shape()) || mm.shape() != vv.shape() {
            return Err(Error::Checkpoint(format!("optimizer moments for `{}` do not match the parameter", e.name)));
        }
        moments.insert(e.name.clone(), (mm, vv));
    }
    let vocab = m
        .vocab
        .as_ref()
        .map(|f| {
            let bytes = read_verified(path, &f.file, &f.sha256)?;
            Vocab::from_tsv(std::str::from_utf8(&bytes)?)
        })
        .transpose()?;
    let template = m
        .template
        .as_ref()
        .map(|f| {
            let t: ChatTemplate = serde_json::from_slice(&read_verified(path, &f.file, &f.sha256)?)?;
            t.validate()?;
            Ok::<_, Error>(t)
        })
        .transpose()?;
    if let Some(v) = &vocab {
        if v.len() != m.model_config.vocab_size {
            return Err(Error::Checkpoint(format!(
                "vocabulary has {} entries, the model expects {}",
                v.len(),
                m.model_config.vocab_size
            )));
        }
    }

    Ok(TrainState {
        model: SsmModel {
            config: m.model_config,
            params,
            adapters: m.adapters,
        },
        optimizer: Adam {
            config: m.optimizer,
            t: m.optimizer_t,
            moments,
        },
        config: m.train_config,
        step: m.step,
        epoch: m.epoch,
        cursor: m.cursor,
        best_eval_loss: m.best_eval_loss,
        vocab,
        template,
    })
}

/// Writes a model-only checkpoint with every adapter folded into its base weight.
pub fn save_merged<T: Scalar>(state: &TrainState<T>, path: &Path) -> Result<()> {
    let mut model = state.model.clone();
    merge_all(&mut model)?;
    let merged = TrainState {
        model,
        optimizer: Adam::new(state.optimizer.config),
        config: state.config.clone(),
        step: state.step,
        epoch: state.epoch,
        cursor: state.cursor,
        best_eval_loss: state.best_eval_loss,
        vocab: state.vocab.clone(),
        template: state.template.clone(),
    };
    save_checkpoint(&merged, path)
}

/// Steps at which a run of `total_steps` writes `step-{n}` checkpoints.
/// A final checkpoint follows unless the last step is already among them.
pub fn checkpoint_steps(total_steps: usize, interval: usize) -> Vec<usize> {
    if interval == 0 {
        return Vec::new();
    }
    (1..=total_steps / interval).map(|k| k * interval).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cadence() {
        assert_eq!(checkpoint_steps(1200, 500), vec![500, 1000]);
        assert_eq!(checkpoint_steps(499, 500), Vec::<usize>::new());
        assert_eq!(checkpoint_steps(1000, 500), vec![500, 1000]);
    }
}
