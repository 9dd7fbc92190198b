//! Final answer selection from cached per-configuration predictions.
//!
//! Two plan shapes: a confidence plan (take the stage-1 answer when its
//! confidence reaches the threshold, else route by question type) and a
//! type table ((figure-type group, question type) → configuration). Plans
//! are JSON data; routing never calls a backend.
//!
//! Question-type keys in plan files may be a full type (`binary_visual`),
//! a family shared by the visual and non-visual variants (`binary`, `mc4`,
//! `infinite`, `unanswerable`), or `*`. The most specific key wins.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, QuestionType};
use crate::inference::PredictionLookup;
use crate::metrics::Answered;

pub const DEFAULT_CONFIDENCE_PLAN: &str = include_str!("../resources/plans/confidence_default.json");
pub const DEFAULT_TYPE_TABLE_PLAN: &str = include_str!("../resources/plans/type_table_default.json");

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error("no cached prediction for instance '{instance}' under config '{config}'")]
    MissingPrediction { instance: String, config: String },
    #[error("unknown instance '{0}'")]
    UnknownInstance(String),
    #[error("type table has no entry for group '{group}' and question type {question_type}")]
    MissingTableEntry {
        group: String,
        question_type: QuestionType,
    },
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error("plan file {path}: {message}")]
    PlanFile { path: PathBuf, message: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// Expands a question-type keyed map with family and wildcard keys into a
/// total map over all seven types.
fn resolve_type_map(raw: &BTreeMap<String, String>, what: &str) -> Result<BTreeMap<QuestionType, String>, EnsembleError> {
    let mut out = BTreeMap::new();
    // rank: 0 = wildcard, 1 = family, 2 = exact
    let mut rank: BTreeMap<QuestionType, u8> = BTreeMap::new();
    for (key, config) in raw {
        let matches: Vec<(QuestionType, u8)> = if key == "*" {
            QuestionType::ALL.iter().map(|&q| (q, 0)).collect()
        } else if let Ok(q) = key.parse::<QuestionType>() {
            vec![(q, 2)]
        } else {
            let fam: Vec<_> = QuestionType::ALL
                .iter()
                .filter(|q| q.family() == key.as_str())
                .map(|&q| (q, 1))
                .collect();
            if fam.is_empty() {
                return Err(EnsembleError::InvalidPlan(format!(
                    "{what}: unknown question-type key '{key}'"
                )));
            }
            fam
        };
        for (q, r) in matches {
            if rank.get(&q).is_none_or(|&old| r > old) {
                rank.insert(q, r);
                out.insert(q, config.clone());
            }
        }
    }
    if let Some(missing) = QuestionType::ALL.iter().find(|q| !out.contains_key(q)) {
        return Err(EnsembleError::InvalidPlan(format!(
            "{what}: no entry for question type {missing}"
        )));
    }
    Ok(out)
}

fn type_map_to_raw(map: &BTreeMap<QuestionType, String>) -> BTreeMap<String, String> {
    map.iter().map(|(q, c)| (q.to_string(), c.clone())).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawConfidencePlan", into = "RawConfidencePlan")]
pub struct ConfidencePlan {
    pub stage1_config: String,
    pub threshold: f64,
    pub fallback: BTreeMap<QuestionType, String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfidencePlan {
    stage1_config: String,
    threshold: f64,
    fallback: BTreeMap<String, String>,
}

impl TryFrom<RawConfidencePlan> for ConfidencePlan {
    type Error = EnsembleError;
    fn try_from(raw: RawConfidencePlan) -> Result<Self, Self::Error> {
        if !raw.threshold.is_finite() || raw.threshold < 0.0 {
            return Err(EnsembleError::InvalidPlan(format!(
                "threshold must be a non-negative number, got {}",
                raw.threshold
            )));
        }
        Ok(ConfidencePlan {
            stage1_config: raw.stage1_config,
            threshold: raw.threshold,
            fallback: resolve_type_map(&raw.fallback, "fallback")?,
        })
    }
}

impl From<ConfidencePlan> for RawConfidencePlan {
    fn from(p: ConfidencePlan) -> Self {
        RawConfidencePlan {
            stage1_config: p.stage1_config,
            threshold: p.threshold,
            fallback: type_map_to_raw(&p.fallback),
        }
    }
}

impl ConfidencePlan {
    pub fn config_ids(&self) -> BTreeSet<String> {
        std::iter::once(self.stage1_config.clone())
            .chain(self.fallback.values().cloned())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTypeTablePlan", into = "RawTypeTablePlan")]
pub struct TypeTablePlan {
    pub table: BTreeMap<String, BTreeMap<QuestionType, String>>,
    /// Group used for figure types without a row of their own.
    pub default_group: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTypeTablePlan {
    default_group: String,
    table: BTreeMap<String, BTreeMap<String, String>>,
}

impl TryFrom<RawTypeTablePlan> for TypeTablePlan {
    type Error = EnsembleError;
    fn try_from(raw: RawTypeTablePlan) -> Result<Self, Self::Error> {
        let table = raw
            .table
            .iter()
            .map(|(g, row)| Ok((g.clone(), resolve_type_map(row, &format!("row '{g}'"))?)))
            .collect::<Result<BTreeMap<_, _>, EnsembleError>>()?;
        if !table.contains_key(&raw.default_group) {
            return Err(EnsembleError::InvalidPlan(format!(
                "default group '{}' has no row",
                raw.default_group
            )));
        }
        Ok(TypeTablePlan {
            table,
            default_group: raw.default_group,
        })
    }
}

impl From<TypeTablePlan> for RawTypeTablePlan {
    fn from(p: TypeTablePlan) -> Self {
        RawTypeTablePlan {
            default_group: p.default_group,
            table: p
                .table
                .iter()
                .map(|(g, row)| (g.clone(), type_map_to_raw(row)))
                .collect(),
        }
    }
}

impl TypeTablePlan {
    pub fn group_of<'a>(&'a self, figure_type: &'a str) -> &'a str {
        if self.table.contains_key(figure_type) {
            figure_type
        } else {
            &self.default_group
        }
    }

    pub fn route(&self, figure_type: &str, qt: QuestionType) -> Result<&str, EnsembleError> {
        let group = self.group_of(figure_type);
        self.table
            .get(group)
            .and_then(|row| row.get(&qt))
            .map(String::as_str)
            .ok_or_else(|| EnsembleError::MissingTableEntry {
                group: group.to_string(),
                question_type: qt,
            })
    }

    pub fn config_ids(&self) -> BTreeSet<String> {
        self.table.values().flat_map(|r| r.values().cloned()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Plan {
    Confidence(ConfidencePlan),
    TypeTable(TypeTablePlan),
}

impl Plan {
    pub fn parse(text: &str) -> Result<Self, EnsembleError> {
        serde_json::from_str(text).map_err(|e| EnsembleError::InvalidPlan(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, EnsembleError> {
        let text = fs::read_to_string(path).map_err(|source| EnsembleError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text).map_err(|e| EnsembleError::PlanFile {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }

    pub fn config_ids(&self) -> BTreeSet<String> {
        match self {
            Plan::Confidence(p) => p.config_ids(),
            Plan::TypeTable(p) => p.config_ids(),
        }
    }
}

pub fn default_confidence_plan() -> ConfidencePlan {
    match Plan::parse(DEFAULT_CONFIDENCE_PLAN).expect("bundled plan parses") {
        Plan::Confidence(p) => p,
        Plan::TypeTable(_) => unreachable!("bundled confidence plan has kind=confidence"),
    }
}

pub fn default_type_table_plan() -> TypeTablePlan {
    match Plan::parse(DEFAULT_TYPE_TABLE_PLAN).expect("bundled plan parses") {
        Plan::TypeTable(p) => p,
        Plan::Confidence(_) => unreachable!("bundled type table has kind=type_table"),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Stage1,
    Fallback,
    Table,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutedAnswer {
    pub instance_id: String,
    pub answer: String,
    pub source_config: String,
    pub stage: Stage,
}

impl Answered for RoutedAnswer {
    fn instance_id(&self) -> &str {
        &self.instance_id
    }
    fn answer(&self) -> &str {
        &self.answer
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EnsembleOutput {
    pub answers: Vec<RoutedAnswer>,
    /// Answer counts per (stage, source config).
    pub provenance: BTreeMap<String, usize>,
}

impl EnsembleOutput {
    fn push(&mut self, a: RoutedAnswer) {
        let stage = match a.stage {
            Stage::Stage1 => "stage1",
            Stage::Fallback => "fallback",
            Stage::Table => "table",
        };
        *self
            .provenance
            .entry(format!("{stage} {}", a.source_config))
            .or_insert(0) += 1;
        self.answers.push(a);
    }
}

fn cached<'a, L: PredictionLookup + ?Sized>(
    caches: &'a L,
    instance: &str,
    config: &str,
) -> Result<&'a crate::inference::Prediction, EnsembleError> {
    caches
        .lookup(instance, config)
        .ok_or_else(|| EnsembleError::MissingPrediction {
            instance: instance.to_string(),
            config: config.to_string(),
        })
}

pub fn apply_confidence_plan<L: PredictionLookup + ?Sized>(
    plan: &ConfidencePlan,
    caches: &L,
    corpus: &Corpus,
    instance_ids: &[String],
) -> Result<EnsembleOutput, EnsembleError> {
    let mut out = EnsembleOutput::default();
    for id in instance_ids {
        let inst = corpus
            .get(id)
            .ok_or_else(|| EnsembleError::UnknownInstance(id.clone()))?;
        let first = cached(caches, id, &plan.stage1_config)?;
        let routed = if first.confidence >= plan.threshold {
            RoutedAnswer {
                instance_id: id.clone(),
                answer: first.answer_text.clone(),
                source_config: plan.stage1_config.clone(),
                stage: Stage::Stage1,
            }
        } else {
            let config = &plan.fallback[&inst.question_type];
            RoutedAnswer {
                instance_id: id.clone(),
                answer: cached(caches, id, config)?.answer_text.clone(),
                source_config: config.clone(),
                stage: Stage::Fallback,
            }
        };
        out.push(routed);
    }
    Ok(out)
}

pub fn apply_type_table<L: PredictionLookup + ?Sized>(
    plan: &TypeTablePlan,
    caches: &L,
    corpus: &Corpus,
    instance_ids: &[String],
) -> Result<EnsembleOutput, EnsembleError> {
    let mut out = EnsembleOutput::default();
    for id in instance_ids {
        let inst = corpus
            .get(id)
            .ok_or_else(|| EnsembleError::UnknownInstance(id.clone()))?;
        let config = plan.route(&inst.figure_type, inst.question_type)?;
        out.push(RoutedAnswer {
            instance_id: id.clone(),
            answer: cached(caches, id, config)?.answer_text.clone(),
            source_config: config.to_string(),
            stage: Stage::Table,
        });
    }
    Ok(out)
}

pub fn apply_plan<L: PredictionLookup + ?Sized>(
    plan: &Plan,
    caches: &L,
    corpus: &Corpus,
    instance_ids: &[String],
) -> Result<EnsembleOutput, EnsembleError> {
    match plan {
        Plan::Confidence(p) => apply_confidence_plan(p, caches, corpus, instance_ids),
        Plan::TypeTable(p) => apply_type_table(p, caches, corpus, instance_ids),
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    /// Requested instances without an answer.
    pub gaps: Vec<String>,
    /// Instances answered more than once.
    pub duplicates: Vec<String>,
    /// Answers for instances that were not requested.
    pub extras: Vec<String>,
}

impl CoverageReport {
    pub fn is_complete(&self) -> bool {
        self.gaps.is_empty() && self.duplicates.is_empty() && self.extras.is_empty()
    }
}

pub fn coverage_check(output: &EnsembleOutput, instance_ids: &[String]) -> CoverageReport {
    let wanted: BTreeSet<&str> = instance_ids.iter().map(String::as_str).collect();
    let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
    for a in &output.answers {
        *seen.entry(a.instance_id.as_str()).or_insert(0) += 1;
    }
    CoverageReport {
        gaps: instance_ids
            .iter()
            .filter(|id| !seen.contains_key(id.as_str()))
            .cloned()
            .collect(),
        duplicates: seen
            .iter()
            .filter(|(_, &n)| n > 1)
            .map(|(id, _)| id.to_string())
            .collect(),
        extras: seen
            .keys()
            .filter(|id| !wanted.contains(*id))
            .map(|id| id.to_string())
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmissionRow {
    pub instance_id: String,
    pub answer: String,
}

impl Answered for SubmissionRow {
    fn instance_id(&self) -> &str {
        &self.instance_id
    }
    fn answer(&self) -> &str {
        &self.answer
    }
}

pub fn write_submission(path: &Path, output: &EnsembleOutput) -> Result<(), EnsembleError> {
    let io = |source| EnsembleError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = fs::File::create(path).map_err(io)?;
    for a in &output.answers {
        let row = SubmissionRow {
            instance_id: a.instance_id.clone(),
            answer: a.answer.clone(),
        };
        writeln!(f, "{}", serde_json::to_string(&row).expect("row serializes")).map_err(io)?;
    }
    Ok(())
}

pub fn read_submission(path: &Path) -> Result<Vec<SubmissionRow>, EnsembleError> {
    let text = fs::read_to_string(path).map_err(|source| EnsembleError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| EnsembleError::PlanFile {
                path: path.to_path_buf(),
                message: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}
