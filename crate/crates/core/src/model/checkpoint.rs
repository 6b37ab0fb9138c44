//! Checkpoint directories: `manifest.json` plus one `.phmt` file per
//! parameter. Directories are assembled under a temporary name and renamed
//! into place, so a checkpoint either exists completely or not at all.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::allocator::AllocationPlan;
use crate::error::{PhmError, Result};
use crate::tensor_file::{self, DType, Tensor};

use super::config::ToyModelConfig;
use super::train::Stage;
use super::transformer::{Layout, ToyModel};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: Stage,
    pub step: usize,
    /// PHM-only validation CE, when known.
    pub metric: Option<f64>,
    pub plan: Option<AllocationPlan>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    config: ToyModelConfig,
    layout: Layout,
    #[serde(flatten)]
    meta: CheckpointMeta,
    params: Vec<ParamEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    file: String,
    len: usize,
}

/// Path next to `dir` used while the checkpoint is being written.
pub fn staging_path(dir: &Path) -> PathBuf {
    let mut name = dir.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(format!(".tmp-{}", std::process::id()));
    dir.with_file_name(name)
}

/// Writes `model` to the fresh directory `dir`.
pub fn save(model: &ToyModel, meta: &CheckpointMeta, dir: &Path) -> Result<()> {
    if dir.exists() {
        return Err(PhmError::Config(format!("checkpoint {} already exists", dir.display())));
    }
    let tmp = staging_path(dir);
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    fs::create_dir_all(&tmp)?;
    let result = (|| {
        let mut params = Vec::new();
        let mut err = None;
        model.for_each_param(&mut |name, _, s| {
            if err.is_some() {
                return;
            }
            let file = format!("{name}.phmt");
            if let Err(e) = tensor_file::write(&tmp.join(&file), &Tensor::from_vector(s), DType::F64) {
                err = Some(e);
            }
            params.push(ParamEntry { name: name.to_string(), file, len: s.len() });
        });
        if let Some(e) = err {
            return Err(e);
        }
        let manifest = Manifest { config: model.config.clone(), layout: model.layout(), meta: meta.clone(), params };
        fs::write(tmp.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
        fs::rename(&tmp, dir)?;
        Ok(())
    })();
    if result.is_err() {
        let _ = fs::remove_dir_all(&tmp);
    }
    result
}

pub fn load(dir: &Path) -> Result<(ToyModel, CheckpointMeta)> {
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let mut values: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for p in &manifest.params {
        let (t, _) = tensor_file::read(&dir.join(&p.file))?;
        if t.data.len() != p.len {
            return Err(PhmError::Format(format!("{} holds {} values, manifest says {}", p.file, t.data.len(), p.len)));
        }
        values.insert(p.name.clone(), t.data);
    }
    let mut model = ToyModel::skeleton(&manifest.config, &manifest.layout)?;
    let mut err = None;
    model.for_each_param_mut(&mut |name, _, s| match values.remove(name) {
        Some(v) if v.len() == s.len() => s.copy_from_slice(&v),
        Some(_) => err = Some(PhmError::Format(format!("parameter {name} has the wrong size"))),
        None => err = Some(PhmError::Format(format!("parameter {name} missing from checkpoint"))),
    });
    if let Some(e) = err {
        return Err(e);
    }
    if let Some(extra) = values.keys().next() {
        return Err(PhmError::Format(format!("checkpoint holds unknown parameter {extra}")));
    }
    Ok((model, manifest.meta))
}
