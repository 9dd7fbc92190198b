use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Deserialize;

use crate::corpus::{self, Corpus, LoadOptions};
use crate::embeddings::EmbeddingStore;
use crate::inference::{BackendSpec, DecodeParams};

/// Project file (TOML). Relative paths are resolved against the file's directory.
///
/// ```toml
/// corpus = ["data/train.jsonl", "data/validation.jsonl"]
/// embeddings = ["emb/question.jsonl", "emb/image.jsonl", "emb/joint.jsonl"]
/// cache_dir = "cache"
/// image_root = "images"
/// concurrency = 4
/// seed = 13
///
/// [decode]
/// max_tokens = 128
///
/// [backends.internvl]
/// kind = "openai"
/// base_url = "http://localhost:8000/v1"
/// model = "OpenGVLab/InternVL3-78B"
///
/// [plans]
/// submission = "plans/confidence.json"
/// ```
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectConfig {
    pub corpus: Vec<PathBuf>,
    #[serde(default)]
    pub embeddings: Vec<PathBuf>,
    pub cache_dir: PathBuf,
    #[serde(default = "default_image_root")]
    pub image_root: PathBuf,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub decode: DecodeParams,
    #[serde(default)]
    pub backends: BTreeMap<String, BackendSpec>,
    /// Named plan files, usable as `--plan <name>`.
    #[serde(default)]
    pub plans: BTreeMap<String, PathBuf>,
    /// Base URL of the embedding service.
    #[serde(default)]
    pub embed_endpoint: Option<String>,
}

fn default_image_root() -> PathBuf {
    PathBuf::from(".")
}

fn default_concurrency() -> usize {
    4
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl ProjectConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("cannot read project file {}", path.display()))?;
        let mut cfg: ProjectConfig =
            toml::from_str(&text).with_context(|| format!("invalid project file {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("")).to_path_buf();
        cfg.resolve_paths(&base);
        if cfg.corpus.is_empty() {
            bail!("project file lists no corpus files");
        }
        if cfg.concurrency == 0 {
            bail!("concurrency must be at least 1");
        }
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        for p in self.corpus.iter_mut().chain(self.embeddings.iter_mut()) {
            resolve(base, p);
        }
        resolve(base, &mut self.cache_dir);
        resolve(base, &mut self.image_root);
        for p in self.plans.values_mut() {
            resolve(base, p);
        }
        for spec in self.backends.values_mut() {
            if let BackendSpec::Mock { script } = spec {
                resolve(base, script);
            }
        }
    }

    pub fn load_corpus(&self) -> Result<Corpus> {
        load_corpus_files(&self.corpus)
    }

    /// Embedding files that exist; missing ones are skipped with a warning.
    pub fn load_embeddings(&self) -> Result<EmbeddingStore> {
        let mut store = EmbeddingStore::new();
        for p in &self.embeddings {
            if !p.exists() {
                log::warn!("embedding file {} does not exist; skipping", p.display());
                continue;
            }
            store
                .load_jsonl(p)
                .with_context(|| format!("loading embeddings from {}", p.display()))?;
        }
        Ok(store)
    }

    /// A plan name from `[plans]`, or a path.
    pub fn plan_path(&self, name_or_path: &str) -> PathBuf {
        self.plans
            .get(name_or_path)
            .cloned()
            .unwrap_or_else(|| PathBuf::from(name_or_path))
    }

    /// Cache file for one configuration.
    pub fn cache_path(&self, config_id: &str) -> PathBuf {
        self.cache_dir.join(format!("{}.jsonl", config_id.replace(':', "__")))
    }
}

/// Loads and concatenates corpus files, rejecting ids repeated across files.
pub fn load_corpus_files(paths: &[PathBuf]) -> Result<Corpus> {
    let mut all = Vec::new();
    for p in paths {
        let c = corpus::load_corpus_with(p, &LoadOptions::default())
            .with_context(|| format!("loading corpus {}", p.display()))?;
        all.extend(c.instances().iter().cloned());
    }
    if all.is_empty() {
        bail!("corpus is empty");
    }
    Ok(Corpus::from_instances(all)?)
}
