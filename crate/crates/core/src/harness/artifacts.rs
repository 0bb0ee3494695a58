use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{DataConfig, ModelSource};
use crate::error::{Error, Result};
use crate::model::{train, TrainReport, TrainedModel};
use crate::synthdata::{default_classes, generate_dataset, Dataset};

/// A persisted file and its content hash.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    /// Path relative to the output directory, `/`-separated.
    pub path: String,
    pub sha256: String,
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

/// The output directory of one run.
#[derive(Clone, Debug)]
pub struct Workspace {
    root: PathBuf,
    cache: Option<PathBuf>,
}

impl Workspace {
    pub fn new(root: &Path, cache: Option<&Path>) -> Result<Self> {
        fs::create_dir_all(root)?;
        Ok(Workspace {
            root: root.to_path_buf(),
            cache: cache.map(Path::to_path_buf),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// Creates the parent directories of `rel` and returns its full path.
    pub fn prepare(&self, rel: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        Ok(p)
    }

    /// Every file below the root except the top-level outputs, sorted.
    pub fn inventory(&self, exclude: &[&str]) -> Result<Vec<ArtifactRecord>> {
        let mut files = Vec::new();
        collect(&self.root, &self.root, &mut files)?;
        files.sort();
        files
            .into_iter()
            .filter(|rel| !exclude.contains(&rel.as_str()))
            .map(|rel| {
                Ok(ArtifactRecord {
                    sha256: file_sha256(&self.root.join(&rel))?,
                    path: rel,
                })
            })
            .collect()
    }

    /// Loads `source.path`, or trains the model (through the cache when one
    /// is configured), and persists it as `models/<role>.cpak`.
    pub fn provide_model(&self, role: &str, source: &ModelSource, data: &DataConfig) -> Result<TrainedModel> {
        let dest = self.prepare(&format!("models/{role}.cpak"))?;
        let model = match &source.path {
            Some(p) => TrainedModel::load(p)?,
            None => {
                let key = model_key(source, data);
                let cached = self.cache.as_ref().map(|c| c.join(format!("model-{key}.cpak")));
                let report_dest = self.prepare(&format!("models/{role}.train.json"))?;
                match cached.as_ref().filter(|p| p.exists()).map(|p| TrainedModel::load(p)) {
                    Some(Ok(m)) => {
                        let report = cached.as_ref().expect("cache hit").with_extension("train.json");
                        if report.exists() {
                            fs::copy(&report, &report_dest)?;
                        }
                        m
                    }
                    _ => {
                        let (m, report) = train_model(source, data)?;
                        let report = serde_json::to_vec_pretty(&report)?;
                        fs::write(&report_dest, &report)?;
                        if let Some(p) = &cached {
                            if let Some(dir) = p.parent() {
                                fs::create_dir_all(dir)?;
                            }
                            m.save(p)?;
                            fs::write(p.with_extension("train.json"), &report)?;
                        }
                        m
                    }
                }
            }
        };
        model.save(&dest)?;
        Ok(model)
    }
}

fn collect(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let p = entry.path();
        if entry.file_type()?.is_dir() {
            collect(root, &p, out)?;
        } else {
            let rel = p.strip_prefix(root).map_err(|e| Error::invalid(e.to_string()))?;
            out.push(rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/"));
        }
    }
    Ok(())
}

/// Cache key of a trained model: hash of everything that determines it.
pub fn model_key(source: &ModelSource, data: &DataConfig) -> String {
    let json = serde_json::json!({
        "architecture": source.architecture,
        "seed": source.seed,
        "train": source.train,
        "train_per_class": data.train_per_class,
        "train_seed": data.train_seed,
        "image_size": data.image_size,
    });
    hex::encode(&Sha256::digest(json.to_string().as_bytes())[..8])
}

pub fn training_data(data: &DataConfig) -> Result<Dataset> {
    generate_dataset(
        &default_classes(),
        data.train_per_class,
        (data.image_size, data.image_size),
        data.train_seed,
    )
}

pub fn train_model(source: &ModelSource, data: &DataConfig) -> Result<(TrainedModel, TrainReport)> {
    let ds = training_data(data)?;
    let spec = source
        .architecture
        .spec(&[3, data.image_size, data.image_size], ds.classes.len());
    let mut model = TrainedModel::build(spec, source.seed)?;
    let report = train(&mut model, &ds.images, &ds.labels, &source.train)?;
    Ok((model, report))
}
