//! Unit-norm embedding storage, question/image fusion and exact cosine ranking.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Instance;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("zero vector cannot be normalized")]
    ZeroVector,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("question and image vectors are antipodal; their mean is zero")]
    Antipodal,
    #[error("no {space} embedding for instance '{id}'")]
    Missing { space: Space, id: String },
    #[error("instance '{id}' appears twice in space {space}")]
    Duplicate { space: Space, id: String },
    #[error("embedding file {path}, line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("embedding service request failed (retryable): {0}")]
    Transport(String),
    #[error("embedding service returned an invalid response: {0}")]
    Protocol(String),
    #[error("instance '{id}' lacks input for space {space}: {message}")]
    Input {
        space: Space,
        id: String,
        message: String,
    },
}

impl EmbeddingError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, EmbeddingError::Transport(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Space {
    Question,
    Image,
    Joint,
}

impl Space {
    pub fn as_str(self) -> &'static str {
        match self {
            Space::Question => "question",
            Space::Image => "image",
            Space::Joint => "joint",
        }
    }
}

impl fmt::Display for Space {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Space {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "question" => Ok(Space::Question),
            "image" => Ok(Space::Image),
            "joint" => Ok(Space::Joint),
            other => Err(format!("unknown space '{other}' (allowed: question, image, joint)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub instance_id: String,
    pub space: Space,
    pub vector: Vec<f64>,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn normalize(v: &[f64]) -> Result<Vec<f64>, EmbeddingError> {
    let n = norm(v);
    if n == 0.0 || !n.is_finite() {
        return Err(EmbeddingError::ZeroVector);
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Normalized mean of a question vector and an image vector.
pub fn fuse(question: &[f64], image: &[f64]) -> Result<Vec<f64>, EmbeddingError> {
    if question.len() != image.len() {
        return Err(EmbeddingError::DimensionMismatch {
            expected: question.len(),
            got: image.len(),
        });
    }
    let mean: Vec<f64> = question
        .iter()
        .zip(image)
        .map(|(q, i)| (q + i) / 2.0)
        .collect();
    normalize(&mean).map_err(|_| EmbeddingError::Antipodal)
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64, EmbeddingError> {
    if a.len() != b.len() {
        return Err(EmbeddingError::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(EmbeddingError::ZeroVector);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Default)]
struct SpaceTable {
    dimension: usize,
    vectors: HashMap<String, Vec<f64>>,
}

#[derive(Debug, Clone, Default)]
pub struct EmbeddingStore {
    spaces: BTreeMap<Space, SpaceTable>,
}

impl EmbeddingStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a record, normalizing its vector.
    pub fn insert(&mut self, record: EmbeddingRecord) -> Result<(), EmbeddingError> {
        let vector = normalize(&record.vector)?;
        let table = self.spaces.entry(record.space).or_insert_with(|| SpaceTable {
            dimension: vector.len(),
            vectors: HashMap::new(),
        });
        if table.vectors.is_empty() {
            table.dimension = vector.len();
        }
        if vector.len() != table.dimension {
            return Err(EmbeddingError::DimensionMismatch {
                expected: table.dimension,
                got: vector.len(),
            });
        }
        if table.vectors.contains_key(&record.instance_id) {
            return Err(EmbeddingError::Duplicate {
                space: record.space,
                id: record.instance_id,
            });
        }
        table.vectors.insert(record.instance_id, vector);
        Ok(())
    }

    pub fn dimension(&self, space: Space) -> Option<usize> {
        self.spaces.get(&space).map(|t| t.dimension)
    }

    pub fn len(&self, space: Space) -> usize {
        self.spaces.get(&space).map_or(0, |t| t.vectors.len())
    }

    pub fn get(&self, space: Space, id: &str) -> Option<&[f64]> {
        self.spaces
            .get(&space)
            .and_then(|t| t.vectors.get(id))
            .map(Vec::as_slice)
    }

    pub fn require(&self, space: Space, id: &str) -> Result<&[f64], EmbeddingError> {
        self.get(space, id).ok_or_else(|| EmbeddingError::Missing {
            space,
            id: id.to_string(),
        })
    }

    pub fn load_jsonl(&mut self, path: &Path) -> Result<(), EmbeddingError> {
        let text = fs::read_to_string(path).map_err(|source| EmbeddingError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |message: String| EmbeddingError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message,
            };
            let rec: EmbeddingRecord =
                serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
            self.insert(rec).map_err(|e| parse_err(e.to_string()))?;
        }
        Ok(())
    }

    pub fn from_files<P: AsRef<Path>>(paths: &[P]) -> Result<Self, EmbeddingError> {
        let mut store = Self::new();
        for p in paths {
            store.load_jsonl(p.as_ref())?;
        }
        Ok(store)
    }
}

/// Writes records as JSONL, one per line, in the given order.
pub fn write_jsonl(path: &Path, records: &[EmbeddingRecord]) -> Result<(), EmbeddingError> {
    let io = |source| EmbeddingError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = fs::File::create(path).map_err(io)?;
    for r in records {
        let line = serde_json::to_string(r).expect("record serializes");
        writeln!(f, "{line}").map_err(io)?;
    }
    Ok(())
}

/// A ranking candidate: instance id plus its corpus position (the tie-break key).
#[derive(Debug, Clone, Copy)]
pub struct Candidate<'a> {
    pub id: &'a str,
    pub order: usize,
}

pub enum Query<'a> {
    Id(&'a str),
    Vector(&'a [f64]),
}

/// Ranks candidates by cosine similarity to the query, descending.
/// Exact ties keep ascending corpus order.
pub fn rank(
    store: &EmbeddingStore,
    space: Space,
    query: Query<'_>,
    candidates: &[Candidate<'_>],
) -> Result<Vec<(String, f64)>, EmbeddingError> {
    let q = match query {
        Query::Id(id) => store.require(space, id)?,
        Query::Vector(v) => v,
    };
    let scored = candidates
        .iter()
        .map(|c| Ok((*c, cosine(q, store.require(space, c.id)?)?)))
        .collect::<Result<Vec<_>, EmbeddingError>>()?;
    Ok(sort_ranked(scored))
}

/// Orders scored candidates by similarity (descending) then corpus order.
pub fn sort_ranked(mut scored: Vec<(Candidate<'_>, f64)>) -> Vec<(String, f64)> {
    scored.sort_by(|(ca, sa), (cb, sb)| sb.total_cmp(sa).then(ca.order.cmp(&cb.order)));
    scored
        .into_iter()
        .map(|(c, s)| (c.id.to_string(), s))
        .collect()
}

// ---------------------------------------------------------------------------
// Client for the embedding service.

#[derive(Debug, Serialize)]
struct EmbedItem<'a> {
    instance_id: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    text: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    image_base64: Option<String>,
}

#[derive(Debug, Serialize)]
struct EmbedRequest<'a> {
    space: Space,
    items: Vec<EmbedItem<'a>>,
}

#[derive(Debug, Deserialize)]
struct EmbedVector {
    instance_id: String,
    vector: Vec<f64>,
}

#[derive(Debug, Deserialize)]
struct EmbedResponse {
    #[allow(dead_code)]
    model_name: String,
    dimension: usize,
    vectors: Vec<EmbedVector>,
}

#[derive(Debug, Clone)]
pub struct FetchOptions {
    pub batch_size: usize,
    pub concurrency: usize,
    pub timeout: Duration,
    /// Base directory for relative `image_path`s.
    pub image_root: PathBuf,
}

impl Default for FetchOptions {
    fn default() -> Self {
        Self {
            batch_size: 32,
            concurrency: 4,
            timeout: Duration::from_secs(120),
            image_root: PathBuf::from("."),
        }
    }
}

/// Requests embeddings for `instances` from the service at `endpoint` (base URL).
///
/// Requests are chunked by `batch_size` and issued with at most `concurrency`
/// in flight; results are returned in instance order and normalized. When a
/// `store` is supplied, vectors must agree with its dimension for `space`.
pub fn fetch_embeddings(
    endpoint: &str,
    instances: &[&Instance],
    space: Space,
    store: Option<&EmbeddingStore>,
    opts: &FetchOptions,
) -> Result<Vec<EmbeddingRecord>, EmbeddingError> {
    if instances.is_empty() {
        return Ok(Vec::new());
    }
    let client = reqwest::blocking::Client::builder()
        .timeout(opts.timeout)
        .build()
        .map_err(|e| EmbeddingError::Transport(e.to_string()))?;
    let url = format!("{}/embed", endpoint.trim_end_matches('/'));
    let batches: Vec<&[&Instance]> = instances.chunks(opts.batch_size.max(1)).collect();
    let mut results: Vec<Option<Result<Vec<EmbeddingRecord>, EmbeddingError>>> =
        (0..batches.len()).map(|_| None).collect();

    for (wave_idx, wave) in batches.chunks(opts.concurrency.max(1)).enumerate() {
        let base = wave_idx * opts.concurrency.max(1);
        let outputs: Vec<_> = std::thread::scope(|s| {
            let handles: Vec<_> = wave
                .iter()
                .map(|batch| {
                    let client = &client;
                    let url = &url;
                    s.spawn(move || fetch_batch(client, url, batch, space, &opts.image_root))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("fetch thread panicked"))
                .collect()
        });
        for (i, out) in outputs.into_iter().enumerate() {
            results[base + i] = Some(out);
        }
    }

    let mut records = Vec::with_capacity(instances.len());
    for r in results {
        records.extend(r.expect("every batch ran")?);
    }
    let expected = store.and_then(|s| s.dimension(space));
    let first_dim = records.first().map(|r| r.vector.len());
    for r in &records {
        let want = expected.or(first_dim).unwrap_or(r.vector.len());
        if r.vector.len() != want {
            return Err(EmbeddingError::DimensionMismatch {
                expected: want,
                got: r.vector.len(),
            });
        }
    }
    Ok(records)
}

fn fetch_batch(
    client: &reqwest::blocking::Client,
    url: &str,
    batch: &[&Instance],
    space: Space,
    image_root: &Path,
) -> Result<Vec<EmbeddingRecord>, EmbeddingError> {
    let mut items = Vec::with_capacity(batch.len());
    for inst in batch {
        let needs_text = matches!(space, Space::Question | Space::Joint);
        let needs_image = matches!(space, Space::Image | Space::Joint);
        let image_base64 = if needs_image {
            if inst.image_path.is_empty() {
                return Err(EmbeddingError::Input {
                    space,
                    id: inst.instance_id.clone(),
                    message: "image_path is empty".into(),
                });
            }
            let path = image_root.join(&inst.image_path);
            let bytes = fs::read(&path).map_err(|source| EmbeddingError::Io { path, source })?;
            Some(base64::engine::general_purpose::STANDARD.encode(bytes))
        } else {
            None
        };
        items.push(EmbedItem {
            instance_id: &inst.instance_id,
            text: needs_text.then_some(inst.question.as_str()),
            image_base64,
        });
    }
    let resp = client
        .post(url)
        .json(&EmbedRequest { space, items })
        .send()
        .map_err(|e| EmbeddingError::Transport(e.to_string()))?;
    let status = resp.status();
    if status.is_server_error() || status.as_u16() == 429 {
        return Err(EmbeddingError::Transport(format!("HTTP {status}")));
    }
    if !status.is_success() {
        let body = resp.text().unwrap_or_default();
        return Err(EmbeddingError::Protocol(format!("HTTP {status}: {body}")));
    }
    let body: EmbedResponse = resp
        .json()
        .map_err(|e| EmbeddingError::Protocol(e.to_string()))?;
    if body.vectors.len() != batch.len() {
        return Err(EmbeddingError::Protocol(format!(
            "expected {} vectors, got {}",
            batch.len(),
            body.vectors.len()
        )));
    }
    batch
        .iter()
        .zip(body.vectors)
        .map(|(inst, v)| {
            if v.instance_id != inst.instance_id {
                return Err(EmbeddingError::Protocol(format!(
                    "response order mismatch: expected '{}', got '{}'",
                    inst.instance_id, v.instance_id
                )));
            }
            if v.vector.len() != body.dimension {
                return Err(EmbeddingError::DimensionMismatch {
                    expected: body.dimension,
                    got: v.vector.len(),
                });
            }
            Ok(EmbeddingRecord {
                instance_id: v.instance_id,
                space,
                vector: normalize(&v.vector)?,
            })
        })
        .collect()
}
