//! ROUGE-1 / ROUGE-L, per-slice aggregation, unanswerable precision and
//! confidence calibration.
//!
//! Tokenization lowercases and splits on every non-alphanumeric character.
//! No stemming. When both sides are empty the score is (1, 1, 1); when only
//! one side is empty it is (0, 0, 0).

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, Instance};
use crate::inference::{is_refusal, Prediction};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("prediction for unknown instance '{0}'")]
    UnknownInstance(String),
    #[error("instance '{0}' has no gold answer")]
    MissingGold(String),
    #[error("no predictions flagged as refusals; unanswerable precision is undefined")]
    NoRefusals,
    #[error("calibration edges must be strictly increasing with at least two entries: {0:?}")]
    BadEdges(Vec<f64>),
    #[error("no predictions to score")]
    Empty,
    #[error("bertscore file {path}: {message}")]
    BertScore { path: PathBuf, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ScoreTriple {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl ScoreTriple {
    pub fn from_pr(precision: f64, recall: f64) -> Self {
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        ScoreTriple {
            precision,
            recall,
            f1,
        }
    }

    fn perfect() -> Self {
        ScoreTriple {
            precision: 1.0,
            recall: 1.0,
            f1: 1.0,
        }
    }
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn score_from_overlap(overlap: usize, cand_len: usize, ref_len: usize) -> ScoreTriple {
    match (cand_len, ref_len) {
        (0, 0) => ScoreTriple::perfect(),
        (0, _) | (_, 0) => ScoreTriple::default(),
        // 2PR/(P+R) in counts
        _ => ScoreTriple {
            precision: overlap as f64 / cand_len as f64,
            recall: overlap as f64 / ref_len as f64,
            f1: (2 * overlap) as f64 / (cand_len + ref_len) as f64,
        },
    }
}

/// Clipped unigram overlap between token sequences.
pub fn unigram_overlap(cand: &[String], reference: &[String]) -> usize {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in reference {
        *counts.entry(t).or_insert(0) += 1;
    }
    let mut overlap = 0;
    for t in cand {
        if let Some(n) = counts.get_mut(t.as_str()) {
            if *n > 0 {
                *n -= 1;
                overlap += 1;
            }
        }
    }
    overlap
}

/// Longest common subsequence length, O(n·m) time and O(m) space.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge1(candidate: &str, reference: &str) -> ScoreTriple {
    let c = tokenize(candidate);
    let r = tokenize(reference);
    score_from_overlap(unigram_overlap(&c, &r), c.len(), r.len())
}

pub fn rouge_l(candidate: &str, reference: &str) -> ScoreTriple {
    let c = tokenize(candidate);
    let r = tokenize(reference);
    score_from_overlap(lcs_len(&c, &r), c.len(), r.len())
}

/// Anything carrying an instance id and an answer: cached predictions,
/// ensemble outputs, submission rows.
pub trait Answered {
    fn instance_id(&self) -> &str;
    fn answer(&self) -> &str;
}

impl Answered for Prediction {
    fn instance_id(&self) -> &str {
        &self.instance_id
    }
    fn answer(&self) -> &str {
        &self.answer_text
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SliceBy {
    None,
    QuestionType,
    FigureType,
    Both,
}

impl std::str::FromStr for SliceBy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(SliceBy::None),
            "question_type" => Ok(SliceBy::QuestionType),
            "figure_type" => Ok(SliceBy::FigureType),
            "both" => Ok(SliceBy::Both),
            other => Err(format!(
                "unknown slice '{other}' (allowed: none, question_type, figure_type, both)"
            )),
        }
    }
}

fn slice_key(inst: &Instance, by: SliceBy) -> String {
    match by {
        SliceBy::None => "all".to_string(),
        SliceBy::QuestionType => inst.question_type.to_string(),
        SliceBy::FigureType => inst.figure_type.clone(),
        SliceBy::Both => format!("{} / {}", inst.figure_type, inst.question_type),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceScores {
    pub count: usize,
    pub rouge1: ScoreTriple,
    pub rouge_l: ScoreTriple,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bertscore: Option<f64>,
}

#[derive(Debug, Default)]
struct Accum {
    n: usize,
    r1: [f64; 3],
    rl: [f64; 3],
    bs_sum: f64,
    bs_n: usize,
}

impl Accum {
    fn add(&mut self, r1: ScoreTriple, rl: ScoreTriple, bs: Option<f64>) {
        self.n += 1;
        for (acc, v) in self.r1.iter_mut().zip([r1.precision, r1.recall, r1.f1]) {
            *acc += v;
        }
        for (acc, v) in self.rl.iter_mut().zip([rl.precision, rl.recall, rl.f1]) {
            *acc += v;
        }
        if let Some(b) = bs {
            self.bs_sum += b;
            self.bs_n += 1;
        }
    }

    fn finish(&self) -> SliceScores {
        let n = self.n as f64;
        let triple = |a: [f64; 3]| ScoreTriple {
            precision: a[0] / n,
            recall: a[1] / n,
            f1: a[2] / n,
        };
        SliceScores {
            count: self.n,
            rouge1: triple(self.r1),
            rouge_l: triple(self.rl),
            bertscore: (self.bs_n > 0).then(|| self.bs_sum / self.bs_n as f64),
        }
    }
}

fn gold_of<'c>(corpus: &'c Corpus, id: &str) -> Result<&'c Instance, MetricsError> {
    let inst = corpus
        .get(id)
        .ok_or_else(|| MetricsError::UnknownInstance(id.to_string()))?;
    if inst.gold_answer.is_empty() {
        return Err(MetricsError::MissingGold(id.to_string()));
    }
    Ok(inst)
}

/// Unweighted mean ROUGE-1 / ROUGE-L per slice; empty slices are omitted.
pub fn aggregate<A: Answered>(
    predictions: &[A],
    corpus: &Corpus,
    slice_by: SliceBy,
) -> Result<BTreeMap<String, SliceScores>, MetricsError> {
    aggregate_with_bertscore(predictions, corpus, slice_by, None)
}

/// As [`aggregate`], also averaging externally computed BERTScores where given.
pub fn aggregate_with_bertscore<A: Answered>(
    predictions: &[A],
    corpus: &Corpus,
    slice_by: SliceBy,
    bertscore: Option<&HashMap<String, f64>>,
) -> Result<BTreeMap<String, SliceScores>, MetricsError> {
    let mut slices: BTreeMap<String, Accum> = BTreeMap::new();
    for p in predictions {
        let inst = gold_of(corpus, p.instance_id())?;
        let r1 = rouge1(p.answer(), &inst.gold_answer);
        let rl = rouge_l(p.answer(), &inst.gold_answer);
        let bs = bertscore.and_then(|m| m.get(p.instance_id()).copied());
        slices
            .entry(slice_key(inst, slice_by))
            .or_default()
            .add(r1, rl, bs);
    }
    Ok(slices.into_iter().map(|(k, a)| (k, a.finish())).collect())
}

/// Reads `{"instance_id": score, ...}`.
pub fn load_bertscore(path: &Path) -> Result<HashMap<String, f64>, MetricsError> {
    let err = |message: String| MetricsError::BertScore {
        path: path.to_path_buf(),
        message,
    };
    let text = fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| err(e.to_string()))
}

/// Share of refusal predictions whose gold question type is unanswerable.
pub fn unanswerable_precision(predictions: &[Prediction], corpus: &Corpus) -> Result<f64, MetricsError> {
    let mut refusals = 0usize;
    let mut correct = 0usize;
    for p in predictions.iter().filter(|p| is_refusal(p)) {
        let inst = corpus
            .get(&p.instance_id)
            .ok_or_else(|| MetricsError::UnknownInstance(p.instance_id.clone()))?;
        refusals += 1;
        if inst.question_type == crate::corpus::QuestionType::Unanswerable {
            correct += 1;
        }
    }
    if refusals == 0 {
        return Err(MetricsError::NoRefusals);
    }
    Ok(correct as f64 / refusals as f64)
}

pub const DEFAULT_EDGES: [f64; 8] = [0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    /// Mean ROUGE-1 F1; `None` for an empty bin.
    pub mean_score: Option<f64>,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub bins: Vec<CalibrationBin>,
    /// Predictions with confidence below the lowest edge.
    pub below_range: CalibrationBin,
    pub total: usize,
}

/// Bins are `[lower, upper)` except the last, which is closed.
pub fn calibration(
    predictions: &[Prediction],
    corpus: &Corpus,
    edges: &[f64],
) -> Result<CalibrationReport, MetricsError> {
    if edges.len() < 2 || edges.windows(2).any(|w| w[0] >= w[1]) || edges.iter().any(|e| !e.is_finite()) {
        return Err(MetricsError::BadEdges(edges.to_vec()));
    }
    if predictions.is_empty() {
        return Err(MetricsError::Empty);
    }
    let nbins = edges.len() - 1;
    let mut sums = vec![0.0; nbins];
    let mut counts = vec![0usize; nbins];
    let (mut below_sum, mut below_n) = (0.0, 0usize);
    let last = edges[nbins];
    for p in predictions {
        let inst = gold_of(corpus, &p.instance_id)?;
        let f1 = rouge1(&p.answer_text, &inst.gold_answer).f1;
        let c = p.confidence;
        let bin = if c < edges[0] {
            None
        } else if c >= last {
            // the last bin is closed; anything past the top edge lands there too
            Some(nbins - 1)
        } else {
            edges.windows(2).position(|w| c >= w[0] && c < w[1])
        };
        match bin {
            Some(b) => {
                sums[b] += f1;
                counts[b] += 1;
            }
            None => {
                below_sum += f1;
                below_n += 1;
            }
        }
    }
    let total = predictions.len();
    let mk = |lower, upper, n: usize, sum: f64| CalibrationBin {
        lower,
        upper,
        count: n,
        mean_score: (n > 0).then(|| sum / n as f64),
        fraction: n as f64 / total as f64,
    };
    Ok(CalibrationReport {
        bins: (0..nbins)
            .map(|b| mk(edges[b], edges[b + 1], counts[b], sums[b]))
            .collect(),
        below_range: mk(0.0, edges[0], below_n, below_sum),
        total,
    })
}

/// Aligned plain-text table of slice scores.
pub fn slices_table(slices: &BTreeMap<String, SliceScores>) -> String {
    let width = slices.keys().map(|k| k.chars().count()).max().unwrap_or(5).max(5);
    let with_bs = slices.values().any(|s| s.bertscore.is_some());
    let mut out = String::new();
    let _ = write!(
        out,
        "{:<width$} {:>6} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7}",
        "slice", "n", "R1-F1", "R1-P", "R1-R", "RL-F1", "RL-P", "RL-R"
    );
    if with_bs {
        let _ = write!(out, " {:>7}", "BS-F1");
    }
    out.push('\n');
    for (k, s) in slices {
        let _ = write!(
            out,
            "{:<width$} {:>6} {:>7.2} {:>7.2} {:>7.2} {:>7.2} {:>7.2} {:>7.2}",
            k,
            s.count,
            100.0 * s.rouge1.f1,
            100.0 * s.rouge1.precision,
            100.0 * s.rouge1.recall,
            100.0 * s.rouge_l.f1,
            100.0 * s.rouge_l.precision,
            100.0 * s.rouge_l.recall
        );
        if with_bs {
            match s.bertscore {
                Some(b) => {
                    let _ = write!(out, " {:>7.2}", 100.0 * b);
                }
                None => {
                    let _ = write!(out, " {:>7}", "-");
                }
            }
        }
        out.push('\n');
    }
    out
}

pub fn calibration_table(report: &CalibrationReport) -> String {
    let mut out = format!("{:<11} {:>6} {:>9} {:>9}\n", "bin", "n", "R1-F1", "share");
    let row = |out: &mut String, label: String, b: &CalibrationBin| {
        let score = b
            .mean_score
            .map_or_else(|| "-".to_string(), |m| format!("{:.2}", 100.0 * m));
        let _ = writeln!(
            out,
            "{:<11} {:>6} {:>9} {:>8.2}%",
            label,
            b.count,
            score,
            100.0 * b.fraction
        );
    };
    row(&mut out, format!("<{:.1}", report.below_range.upper), &report.below_range);
    for b in &report.bins {
        row(&mut out, format!("{:.1}_{:.1}", b.lower, b.upper), b);
    }
    out
}
