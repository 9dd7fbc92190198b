use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::Prediction;

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("cache {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cache {path}, line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

/// Read access to cached predictions by (instance, config).
pub trait PredictionLookup {
    fn lookup(&self, instance_id: &str, config_id: &str) -> Option<&Prediction>;
}

/// Append-only JSONL store of predictions. Later lines win on reload, which
/// is how forced re-runs supersede earlier entries.
#[derive(Debug)]
pub struct RunCache {
    path: PathBuf,
    entries: BTreeMap<(String, String), Prediction>,
}

impl RunCache {
    /// Opens (or creates) the cache at `path` and loads its entries.
    pub fn open(path: &Path) -> Result<Self, CacheError> {
        let io = |source| CacheError::Io {
            path: path.to_path_buf(),
            source,
        };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(io)?;
        }
        if !path.exists() {
            File::create(path).map_err(io)?;
        }
        let text = fs::read_to_string(path).map_err(io)?;
        let mut entries = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let p: Prediction = serde_json::from_str(line).map_err(|e| CacheError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
            entries.insert((p.instance_id.clone(), p.config_id.clone()), p);
        }
        Ok(RunCache {
            path: path.to_path_buf(),
            entries,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn get(&self, instance_id: &str, config_id: &str) -> Option<&Prediction> {
        self.entries
            .get(&(instance_id.to_string(), config_id.to_string()))
    }

    pub fn contains(&self, instance_id: &str, config_id: &str) -> bool {
        self.get(instance_id, config_id).is_some()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn append(&mut self, prediction: &Prediction) -> Result<(), CacheError> {
        let io = |source| CacheError::Io {
            path: self.path.clone(),
            source,
        };
        let mut f = OpenOptions::new().append(true).open(&self.path).map_err(io)?;
        let line = serde_json::to_string(prediction).expect("prediction serializes");
        writeln!(f, "{line}").map_err(io)?;
        f.flush().map_err(io)?;
        self.entries.insert(
            (prediction.instance_id.clone(), prediction.config_id.clone()),
            prediction.clone(),
        );
        Ok(())
    }

    /// Predictions of one config, ordered by instance id.
    pub fn predictions_for<'a>(&'a self, config_id: &'a str) -> impl Iterator<Item = &'a Prediction> + 'a {
        self.entries.values().filter(move |p| p.config_id == config_id)
    }

    pub fn config_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.entries.keys().map(|(_, c)| c.clone()).collect();
        ids.sort();
        ids.dedup();
        ids
    }
}

impl PredictionLookup for RunCache {
    fn lookup(&self, instance_id: &str, config_id: &str) -> Option<&Prediction> {
        self.get(instance_id, config_id)
    }
}

impl PredictionLookup for [RunCache] {
    fn lookup(&self, instance_id: &str, config_id: &str) -> Option<&Prediction> {
        self.iter().rev().find_map(|c| c.get(instance_id, config_id))
    }
}

impl PredictionLookup for Vec<RunCache> {
    fn lookup(&self, instance_id: &str, config_id: &str) -> Option<&Prediction> {
        self.as_slice().lookup(instance_id, config_id)
    }
}
