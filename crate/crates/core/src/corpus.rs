//! Dataset schema, JSONL loading and split-aware lookup.
//!
//! One JSON object per line. File order is preserved and doubles as the
//! tie-break order for retrieval, so nothing here may reorder instances.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompting::CANONICAL_REFUSAL;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: duplicate instance_id '{id}'")]
    DuplicateId { line: usize, id: String },
    #[error("line {line}: unknown question_type '{value}' (allowed: {allowed})")]
    UnknownQuestionType {
        line: usize,
        value: String,
        allowed: String,
    },
    #[error("line {line}: unknown figure_type '{value}' (allowed: {allowed})")]
    UnknownFigureType {
        line: usize,
        value: String,
        allowed: String,
    },
    #[error("line {line}: instance '{id}' violates schema: {message}")]
    Invalid {
        line: usize,
        id: String,
        message: String,
    },
    #[error("corpus is empty")]
    Empty,
    #[error("unknown instance '{0}'")]
    UnknownInstance(String),
}

/// The seven question categories; each figure carries one question of each.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionType {
    BinaryVisual,
    BinaryNonvisual,
    Mc4Visual,
    Mc4Nonvisual,
    InfiniteVisual,
    InfiniteNonvisual,
    Unanswerable,
}

impl QuestionType {
    pub const ALL: [QuestionType; 7] = [
        QuestionType::BinaryVisual,
        QuestionType::BinaryNonvisual,
        QuestionType::Mc4Visual,
        QuestionType::Mc4Nonvisual,
        QuestionType::InfiniteVisual,
        QuestionType::InfiniteNonvisual,
        QuestionType::Unanswerable,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            QuestionType::BinaryVisual => "binary_visual",
            QuestionType::BinaryNonvisual => "binary_nonvisual",
            QuestionType::Mc4Visual => "mc4_visual",
            QuestionType::Mc4Nonvisual => "mc4_nonvisual",
            QuestionType::InfiniteVisual => "infinite_visual",
            QuestionType::InfiniteNonvisual => "infinite_nonvisual",
            QuestionType::Unanswerable => "unanswerable",
        }
    }

    /// Visual/non-visual variants collapse to one family name.
    pub fn family(self) -> &'static str {
        match self {
            QuestionType::BinaryVisual | QuestionType::BinaryNonvisual => "binary",
            QuestionType::Mc4Visual | QuestionType::Mc4Nonvisual => "mc4",
            QuestionType::InfiniteVisual | QuestionType::InfiniteNonvisual => "infinite",
            QuestionType::Unanswerable => "unanswerable",
        }
    }

    pub fn is_multiple_choice(self) -> bool {
        matches!(self, QuestionType::Mc4Visual | QuestionType::Mc4Nonvisual)
    }

    pub fn is_answerable(self) -> bool {
        self != QuestionType::Unanswerable
    }

    pub fn allowed_values() -> String {
        Self::ALL.map(|q| q.as_str()).join(", ")
    }
}

impl fmt::Display for QuestionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for QuestionType {
    type Err = String;

    /// Case-insensitive; spaces and hyphens are treated as underscores.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm: String = s
            .trim()
            .chars()
            .map(|c| match c {
                ' ' | '-' => '_',
                c => c.to_ascii_lowercase(),
            })
            .collect();
        QuestionType::ALL
            .into_iter()
            .find(|q| q.as_str() == norm)
            .ok_or_else(|| s.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }

    /// Train and validation are merged into one development pool.
    pub fn is_dev(self) -> bool {
        matches!(self, Split::Train | Split::Validation)
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "validation" | "val" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            _ => Err(s.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerOption {
    pub key: String,
    pub text: String,
}

/// One question about one figure, with the oracle metadata the prompt uses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub instance_id: String,
    pub image_id: String,
    #[serde(default)]
    pub image_path: String,
    pub question: String,
    pub question_type: QuestionType,
    pub figure_type: String,
    pub compound: bool,
    pub figs_numb: u32,
    pub caption: String,
    #[serde(default)]
    pub answer_options: Vec<AnswerOption>,
    #[serde(default)]
    pub gold_answer: String,
    pub split: Split,
}

impl Instance {
    fn validate(&self) -> Result<(), String> {
        if self.instance_id.trim().is_empty() {
            return Err("empty instance_id".into());
        }
        if self.image_id.trim().is_empty() {
            return Err("empty image_id".into());
        }
        if self.figs_numb < 1 {
            return Err("figs_numb must be at least 1".into());
        }
        if !self.compound && self.figs_numb != 1 {
            return Err(format!(
                "compound=false requires figs_numb=1, got {}",
                self.figs_numb
            ));
        }
        if self.question_type.is_answerable()
            && self.question_type.is_multiple_choice() == self.answer_options.is_empty()
        {
            return Err(if self.answer_options.is_empty() {
                format!("{} requires answer_options", self.question_type)
            } else {
                format!("{} must not carry answer_options", self.question_type)
            });
        }
        // test split may ship without gold answers
        let gold_missing = self.gold_answer.is_empty() && self.split == Split::Test;
        if self.question_type == QuestionType::Unanswerable
            && !gold_missing
            && self.gold_answer != CANONICAL_REFUSAL
        {
            return Err("unanswerable gold_answer must be the canonical refusal string".into());
        }
        Ok(())
    }
}

/// Raw line shape; question_type and split arrive as strings so unknown
/// values can be reported with the allowed set.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawInstance {
    instance_id: String,
    image_id: String,
    #[serde(default)]
    image_path: String,
    question: String,
    question_type: String,
    figure_type: String,
    compound: bool,
    figs_numb: u32,
    caption: String,
    #[serde(default)]
    answer_options: Vec<AnswerOption>,
    #[serde(default)]
    gold_answer: String,
    split: String,
}

/// Lowercase, trimmed, inner whitespace collapsed.
pub fn normalize_figure_type(s: &str) -> String {
    s.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    /// Keep only these splits; `None` keeps everything.
    pub splits: Option<BTreeSet<Split>>,
    /// Closed figure-type vocabulary; `None` accepts any non-empty type.
    pub figure_types: Option<BTreeSet<String>>,
}

#[derive(Debug, Clone, Default)]
pub struct Corpus {
    instances: Vec<Instance>,
    position: HashMap<String, usize>,
    by_image: BTreeMap<String, Vec<usize>>,
    by_type: BTreeMap<(String, QuestionType), Vec<usize>>,
}

pub fn load_corpus(path: &Path, split_filter: Option<&BTreeSet<Split>>) -> Result<Corpus, CorpusError> {
    load_corpus_with(
        path,
        &LoadOptions {
            splits: split_filter.cloned(),
            figure_types: None,
        },
    )
}

pub fn load_corpus_with(path: &Path, opts: &LoadOptions) -> Result<Corpus, CorpusError> {
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_corpus(&text, opts)
}

pub fn parse_corpus(text: &str, opts: &LoadOptions) -> Result<Corpus, CorpusError> {
    let mut instances = Vec::new();
    let mut seen = HashMap::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawInstance = serde_json::from_str(line).map_err(|e| CorpusError::Malformed {
            line: line_no,
            message: e.to_string(),
        })?;
        let question_type =
            raw.question_type
                .parse::<QuestionType>()
                .map_err(|value| CorpusError::UnknownQuestionType {
                    line: line_no,
                    value,
                    allowed: QuestionType::allowed_values(),
                })?;
        let split = raw.split.parse::<Split>().map_err(|value| CorpusError::Malformed {
            line: line_no,
            message: format!("unknown split '{value}' (allowed: train, validation, test)"),
        })?;
        let figure_type = normalize_figure_type(&raw.figure_type);
        let vocabulary_miss = opts
            .figure_types
            .as_ref()
            .is_some_and(|allowed| !allowed.contains(&figure_type));
        if figure_type.is_empty() || vocabulary_miss {
            let allowed = opts
                .figure_types
                .as_ref()
                .map(|a| a.iter().cloned().collect::<Vec<_>>().join(", "))
                .unwrap_or_else(|| "any non-empty string".into());
            return Err(CorpusError::UnknownFigureType {
                line: line_no,
                value: raw.figure_type,
                allowed,
            });
        }
        let inst = Instance {
            instance_id: raw.instance_id,
            image_id: raw.image_id,
            image_path: raw.image_path,
            question: raw.question,
            question_type,
            figure_type,
            compound: raw.compound,
            figs_numb: raw.figs_numb,
            caption: raw.caption,
            answer_options: raw.answer_options,
            gold_answer: raw.gold_answer,
            split,
        };
        inst.validate().map_err(|message| CorpusError::Invalid {
            line: line_no,
            id: inst.instance_id.clone(),
            message,
        })?;
        if seen.insert(inst.instance_id.clone(), line_no).is_some() {
            return Err(CorpusError::DuplicateId {
                line: line_no,
                id: inst.instance_id,
            });
        }
        if opts.splits.as_ref().is_some_and(|s| !s.contains(&inst.split)) {
            continue;
        }
        instances.push(inst);
    }
    Ok(Corpus::from_instances_unchecked(instances))
}

impl Corpus {
    /// Validates instances and builds the indices.
    pub fn from_instances(instances: Vec<Instance>) -> Result<Self, CorpusError> {
        let mut seen = BTreeSet::new();
        for (i, inst) in instances.iter().enumerate() {
            inst.validate().map_err(|message| CorpusError::Invalid {
                line: i + 1,
                id: inst.instance_id.clone(),
                message,
            })?;
            if !seen.insert(inst.instance_id.as_str()) {
                return Err(CorpusError::DuplicateId {
                    line: i + 1,
                    id: inst.instance_id.clone(),
                });
            }
        }
        Ok(Self::from_instances_unchecked(instances))
    }

    fn from_instances_unchecked(instances: Vec<Instance>) -> Self {
        let mut position = HashMap::with_capacity(instances.len());
        let mut by_image: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        let mut by_type: BTreeMap<(String, QuestionType), Vec<usize>> = BTreeMap::new();
        for (i, inst) in instances.iter().enumerate() {
            position.insert(inst.instance_id.clone(), i);
            by_image.entry(inst.image_id.clone()).or_default().push(i);
            by_type
                .entry((inst.figure_type.clone(), inst.question_type))
                .or_default()
                .push(i);
        }
        Corpus {
            instances,
            position,
            by_image,
            by_type,
        }
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn instances(&self) -> &[Instance] {
        &self.instances
    }

    pub fn get(&self, id: &str) -> Option<&Instance> {
        self.position.get(id).map(|&i| &self.instances[i])
    }

    pub fn require(&self, id: &str) -> Result<&Instance, CorpusError> {
        self.get(id)
            .ok_or_else(|| CorpusError::UnknownInstance(id.to_string()))
    }

    /// Corpus (file) order of an instance.
    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.position.get(id).copied()
    }

    pub fn by_image(&self, image_id: &str) -> impl Iterator<Item = &Instance> {
        self.by_image
            .get(image_id)
            .into_iter()
            .flatten()
            .map(|&i| &self.instances[i])
    }

    pub fn image_count(&self) -> usize {
        self.by_image.len()
    }

    pub fn by_type(&self, figure_type: &str, qt: QuestionType) -> impl Iterator<Item = &Instance> {
        self.by_type
            .get(&(figure_type.to_string(), qt))
            .into_iter()
            .flatten()
            .map(|&i| &self.instances[i])
    }

    pub fn in_splits<'a>(&'a self, splits: &'a [Split]) -> impl Iterator<Item = &'a Instance> + 'a {
        self.instances.iter().filter(|i| splits.contains(&i.split))
    }

    /// Train + validation.
    pub fn dev_pool(&self) -> impl Iterator<Item = &Instance> {
        self.instances.iter().filter(|i| i.split.is_dev())
    }

    /// Sub-corpus with the given instances, keeping corpus order.
    pub fn filter<F: Fn(&Instance) -> bool>(&self, keep: F) -> Corpus {
        Corpus::from_instances_unchecked(
            self.instances.iter().filter(|i| keep(i)).cloned().collect(),
        )
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for inst in &self.instances {
            out.push_str(&serde_json::to_string(inst).expect("instance serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl(&self, path: &Path) -> std::io::Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(self.to_jsonl().as_bytes())
    }

    pub fn question_type_counts(&self) -> BTreeMap<QuestionType, usize> {
        let mut counts = BTreeMap::new();
        for inst in &self.instances {
            *counts.entry(inst.question_type).or_insert(0) += 1;
        }
        counts
    }

    pub fn figure_type_counts(&self) -> BTreeMap<String, usize> {
        let mut counts = BTreeMap::new();
        for inst in &self.instances {
            *counts.entry(inst.figure_type.clone()).or_insert(0) += 1;
        }
        counts
    }
}

/// Share of instances per figure type.
pub fn figure_type_shares(corpus: &Corpus) -> Result<BTreeMap<String, f64>, CorpusError> {
    if corpus.is_empty() {
        return Err(CorpusError::Empty);
    }
    let total = corpus.len() as f64;
    Ok(corpus
        .figure_type_counts()
        .into_iter()
        .map(|(k, n)| (k, n as f64 / total))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(id: &str, image: &str, qt: &str, extra: &str) -> String {
        let (opts, gold) = match qt {
            "mc4_visual" | "mc4_nonvisual" => (
                r#"[{"key":"A","text":"x"},{"key":"B","text":"y"},{"key":"C","text":"z"},{"key":"D","text":"w"}]"#,
                "A".to_string(),
            ),
            "unanswerable" => ("[]", CANONICAL_REFUSAL.to_string()),
            _ => ("[]", "yes".to_string()),
        };
        format!(
            r#"{{"instance_id":"{id}","image_id":"{image}","image_path":"img/{image}.png","question":"q?","question_type":"{qt}","figure_type":"line chart","compound":false,"figs_numb":1,"caption":"c","answer_options":{opts},"gold_answer":"{gold}","split":"train"{extra}}}"#
        )
    }

    #[test]
    fn empty_file_gives_empty_corpus() {
        let c = parse_corpus("", &LoadOptions::default()).unwrap();
        assert!(c.is_empty());
        assert!(figure_type_shares(&c).is_err());
    }

    #[test]
    fn compound_figure_keeps_subfigure_count() {
        let l = r#"{"instance_id":"a","image_id":"i","question":"q","question_type":"binary_visual","figure_type":"Line  Chart","compound":true,"figs_numb":2,"caption":"c","answer_options":[],"gold_answer":"Yes","split":"train"}"#;
        let c = parse_corpus(l, &LoadOptions::default()).unwrap();
        let inst = &c.instances()[0];
        assert_eq!(inst.figs_numb, 2);
        assert!(inst.compound);
        assert_eq!(inst.figure_type, "line chart");
    }

    #[test]
    fn malformed_line_names_line_number() {
        let text = format!("{}\n{{not json\n", line("a", "i", "binary_visual", ""));
        let err = parse_corpus(&text, &LoadOptions::default()).unwrap_err();
        assert!(matches!(err, CorpusError::Malformed { line: 2, .. }), "{err}");
    }

    #[test]
    fn duplicate_id_rejected() {
        let text = format!(
            "{}\n{}\n",
            line("a", "i", "binary_visual", ""),
            line("a", "i", "binary_nonvisual", "")
        );
        let err = parse_corpus(&text, &LoadOptions::default()).unwrap_err();
        assert!(matches!(err, CorpusError::DuplicateId { line: 2, ref id } if id == "a"));
    }

    #[test]
    fn unknown_question_type_lists_allowed() {
        let text = line("a", "i", "trick_question", "");
        let err = parse_corpus(&text, &LoadOptions::default()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("trick_question") && msg.contains("mc4_nonvisual"), "{msg}");
    }

    #[test]
    fn question_type_normalized_case_insensitively() {
        assert_eq!("Binary-Visual".parse::<QuestionType>(), Ok(QuestionType::BinaryVisual));
        assert_eq!("MC4_NONVISUAL".parse::<QuestionType>(), Ok(QuestionType::Mc4Nonvisual));
    }

    #[test]
    fn figure_type_vocabulary_enforced_when_given() {
        let text = line("a", "i", "binary_visual", "");
        let opts = LoadOptions {
            splits: None,
            figure_types: Some(["bar chart".to_string()].into()),
        };
        let err = parse_corpus(&text, &opts).unwrap_err();
        assert!(err.to_string().contains("bar chart"));
    }

    #[test]
    fn schema_invariants_enforced() {
        // mc4 without options
        let bad = line("a", "i", "binary_visual", "").replace("binary_visual", "mc4_visual");
        assert!(parse_corpus(&bad, &LoadOptions::default()).is_err());
        // non-compound with two subfigures
        let bad = line("a", "i", "binary_visual", "").replace("\"figs_numb\":1", "\"figs_numb\":2");
        assert!(parse_corpus(&bad, &LoadOptions::default()).is_err());
        // unanswerable with a wrong gold answer
        let bad = line("a", "i", "unanswerable", "").replace(CANONICAL_REFUSAL, "no idea");
        assert!(parse_corpus(&bad, &LoadOptions::default()).is_err());
    }

    #[test]
    fn split_filter_applies() {
        let text = format!(
            "{}\n{}\n",
            line("a", "i", "binary_visual", ""),
            line("b", "j", "binary_visual", "").replace("\"train\"", "\"test\"")
        );
        let only_test: BTreeSet<Split> = [Split::Test].into();
        let c = parse_corpus(
            &text,
            &LoadOptions {
                splits: Some(only_test),
                figure_types: None,
            },
        )
        .unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c.instances()[0].instance_id, "b");
    }

    #[test]
    fn shares_hand_counted() {
        let mut text = String::new();
        for (i, ft) in std::iter::repeat("line chart")
            .take(10)
            .chain(std::iter::repeat("bar chart").take(6))
            .chain(std::iter::repeat("tree").take(4))
            .enumerate()
        {
            text.push_str(&line(&format!("x{i}"), &format!("im{i}"), "binary_visual", "").replace("line chart", ft));
            text.push('\n');
        }
        let c = parse_corpus(&text, &LoadOptions::default()).unwrap();
        let s = figure_type_shares(&c).unwrap();
        assert_eq!(s["line chart"], 0.5);
        assert_eq!(s["bar chart"], 0.3);
        assert_eq!(s["tree"], 0.2);
    }

    #[test]
    fn single_type_share_is_one() {
        let c = parse_corpus(&line("a", "i", "binary_visual", ""), &LoadOptions::default()).unwrap();
        assert_eq!(figure_type_shares(&c).unwrap()["line chart"], 1.0);
    }
}
