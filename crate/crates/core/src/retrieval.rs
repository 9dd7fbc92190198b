//! Few-shot example selection.
//!
//! Candidates always come from the train split and never share the query's
//! image. The filtered pool narrows to the query's figure type and subfigure
//! count, relaxing to figure type only and then to the whole pool when a
//! level is empty. Two-shot selection takes the best answerable and the best
//! unanswerable candidate from one ranking, answerable first.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, Instance, QuestionType, Split};
use crate::embeddings::{self, Candidate, EmbeddingError, EmbeddingStore, Space};

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("corpus has no train-split instances to retrieve from")]
    EmptyTrainSplit,
    #[error("candidate pool for '{0}' is empty")]
    EmptyPool(String),
    #[error("candidate pool for '{query}' has no {kind} instance")]
    MissingKind { query: String, kind: &'static str },
    #[error("unsupported shot count {0} (allowed: 0, 1, 2)")]
    Shots(u8),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error("no selections given")]
    NoSelections,
    #[error("unknown instance '{0}'")]
    UnknownInstance(String),
    #[error("invalid retrieval spec '{0}'")]
    Parse(String),
}

/// Which vectors drive similarity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalSpace {
    /// Question text embeddings.
    Question,
    /// Normalized mean of question and image embeddings.
    FusedQuestionImage,
    /// One vision-language vector per image-question pair.
    Joint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterMode {
    Filtered,
    Unfiltered,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RetrievalSpec {
    pub shots: u8,
    pub space: RetrievalSpace,
    pub filter_mode: FilterMode,
}

impl RetrievalSpec {
    pub fn zero_shot() -> Self {
        RetrievalSpec {
            shots: 0,
            space: RetrievalSpace::Question,
            filter_mode: FilterMode::Filtered,
        }
    }

    pub fn new(shots: u8, space: RetrievalSpace, filter_mode: FilterMode) -> Result<Self, RetrievalError> {
        match shots {
            0 => Ok(Self::zero_shot()),
            1 | 2 => Ok(RetrievalSpec {
                shots,
                space,
                filter_mode,
            }),
            n => Err(RetrievalError::Shots(n)),
        }
    }
}

/// Short form: `0s`, `1s_q_f`, `2s_q_img_nf`, `1s_q_img_f_blip` (joint space).
impl fmt::Display for RetrievalSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.shots == 0 {
            return write!(f, "0s");
        }
        let space = match self.space {
            RetrievalSpace::Question => "q",
            RetrievalSpace::FusedQuestionImage | RetrievalSpace::Joint => "q_img",
        };
        let filter = match self.filter_mode {
            FilterMode::Filtered => "f",
            FilterMode::Unfiltered => "nf",
        };
        write!(f, "{}s_{space}_{filter}", self.shots)?;
        if self.space == RetrievalSpace::Joint {
            write!(f, "_blip")?;
        }
        Ok(())
    }
}

impl FromStr for RetrievalSpec {
    type Err = RetrievalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || RetrievalError::Parse(s.to_string());
        let parts: Vec<&str> = s.split('_').collect();
        let shots: u8 = parts[0]
            .strip_suffix('s')
            .and_then(|n| n.parse().ok())
            .ok_or_else(err)?;
        if shots == 0 {
            return if parts.len() == 1 { Ok(Self::zero_shot()) } else { Err(err()) };
        }
        let (space, rest) = match &parts[1..] {
            ["q", "img", rest @ ..] => (RetrievalSpace::FusedQuestionImage, rest),
            ["q", rest @ ..] => (RetrievalSpace::Question, rest),
            _ => return Err(err()),
        };
        let (filter_mode, rest) = match rest {
            ["f", rest @ ..] => (FilterMode::Filtered, rest),
            ["nf", rest @ ..] => (FilterMode::Unfiltered, rest),
            _ => return Err(err()),
        };
        let space = match (space, rest) {
            (space, []) => space,
            (RetrievalSpace::FusedQuestionImage, ["blip"]) => RetrievalSpace::Joint,
            _ => return Err(err()),
        };
        RetrievalSpec::new(shots, space, filter_mode).map_err(|_| err())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotSelection {
    pub example_ids: Vec<String>,
    pub similarities: Vec<f64>,
    pub pool_size: usize,
}

/// Audit record for one query's selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub query_id: String,
    pub example_ids: Vec<String>,
    pub similarities: Vec<f64>,
    pub spec: String,
}

impl SelectionRecord {
    pub fn new(query_id: &str, spec: &RetrievalSpec, sel: &FewShotSelection) -> Self {
        SelectionRecord {
            query_id: query_id.to_string(),
            example_ids: sel.example_ids.clone(),
            similarities: sel.similarities.clone(),
            spec: spec.to_string(),
        }
    }
}

/// Few-shot candidates for `query`, in corpus order.
pub fn candidate_pool<'c>(
    corpus: &'c Corpus,
    query: &Instance,
    filter_mode: FilterMode,
) -> Result<Vec<&'c Instance>, RetrievalError> {
    let train: Vec<&Instance> = corpus
        .instances()
        .iter()
        .filter(|i| i.split == Split::Train)
        .collect();
    if train.is_empty() {
        return Err(RetrievalError::EmptyTrainSplit);
    }
    let unfiltered: Vec<&Instance> = train
        .into_iter()
        .filter(|i| i.image_id != query.image_id)
        .collect();
    if filter_mode == FilterMode::Unfiltered {
        return Ok(unfiltered);
    }
    let same_type: Vec<&Instance> = unfiltered
        .iter()
        .copied()
        .filter(|i| i.figure_type == query.figure_type)
        .collect();
    let same_type_and_count: Vec<&Instance> = same_type
        .iter()
        .copied()
        .filter(|i| i.figs_numb == query.figs_numb)
        .collect();
    Ok(if !same_type_and_count.is_empty() {
        same_type_and_count
    } else if !same_type.is_empty() {
        same_type
    } else {
        unfiltered
    })
}

/// Vector representing `id` in the retrieval space.
fn retrieval_vector(
    store: &EmbeddingStore,
    space: RetrievalSpace,
    id: &str,
) -> Result<Vec<f64>, EmbeddingError> {
    match space {
        RetrievalSpace::Question => Ok(store.require(Space::Question, id)?.to_vec()),
        RetrievalSpace::Joint => Ok(store.require(Space::Joint, id)?.to_vec()),
        RetrievalSpace::FusedQuestionImage => embeddings::fuse(
            store.require(Space::Question, id)?,
            store.require(Space::Image, id)?,
        ),
    }
}

/// Full ranking of the candidate pool for `query`.
pub fn rank_pool(
    corpus: &Corpus,
    store: &EmbeddingStore,
    query: &Instance,
    spec: &RetrievalSpec,
) -> Result<Vec<(String, f64)>, RetrievalError> {
    let pool = candidate_pool(corpus, query, spec.filter_mode)?;
    let q = retrieval_vector(store, spec.space, &query.instance_id)?;
    let mut scored = Vec::with_capacity(pool.len());
    for inst in &pool {
        let v = retrieval_vector(store, spec.space, &inst.instance_id)?;
        let order = corpus.index_of(&inst.instance_id).expect("pool drawn from corpus");
        scored.push((
            Candidate {
                id: &inst.instance_id,
                order,
            },
            embeddings::cosine(&q, &v)?,
        ));
    }
    Ok(embeddings::sort_ranked(scored))
}

pub fn select(
    corpus: &Corpus,
    store: &EmbeddingStore,
    query: &Instance,
    spec: &RetrievalSpec,
) -> Result<FewShotSelection, RetrievalError> {
    if spec.shots == 0 {
        return Ok(FewShotSelection {
            example_ids: Vec::new(),
            similarities: Vec::new(),
            pool_size: 0,
        });
    }
    if spec.shots > 2 {
        return Err(RetrievalError::Shots(spec.shots));
    }
    let ranking = rank_pool(corpus, store, query, spec)?;
    let pool_size = ranking.len();
    if ranking.is_empty() {
        return Err(RetrievalError::EmptyPool(query.instance_id.clone()));
    }
    let picked: Vec<(String, f64)> = if spec.shots == 1 {
        vec![ranking[0].clone()]
    } else {
        let is_unanswerable = |id: &str| {
            corpus
                .get(id)
                .is_some_and(|i| i.question_type == QuestionType::Unanswerable)
        };
        let answerable = ranking
            .iter()
            .find(|(id, _)| !is_unanswerable(id))
            .ok_or(RetrievalError::MissingKind {
                query: query.instance_id.clone(),
                kind: "answerable",
            })?;
        let unanswerable = ranking
            .iter()
            .find(|(id, _)| is_unanswerable(id))
            .ok_or(RetrievalError::MissingKind {
                query: query.instance_id.clone(),
                kind: "unanswerable",
            })?;
        vec![answerable.clone(), unanswerable.clone()]
    };
    let (example_ids, similarities) = picked.into_iter().unzip();
    Ok(FewShotSelection {
        example_ids,
        similarities,
        pool_size,
    })
}

/// Per query question type, the fraction of one-shot selections whose
/// example has the same question type.
pub fn match_rate(
    selections: &[SelectionRecord],
    corpus: &Corpus,
) -> Result<BTreeMap<QuestionType, f64>, RetrievalError> {
    if selections.is_empty() {
        return Err(RetrievalError::NoSelections);
    }
    let mut tally: BTreeMap<QuestionType, (usize, usize)> = BTreeMap::new();
    for sel in selections {
        let query = corpus
            .get(&sel.query_id)
            .ok_or_else(|| RetrievalError::UnknownInstance(sel.query_id.clone()))?;
        let Some(first) = sel.example_ids.first() else {
            continue;
        };
        let example = corpus
            .get(first)
            .ok_or_else(|| RetrievalError::UnknownInstance(first.clone()))?;
        let entry = tally.entry(query.question_type).or_default();
        entry.1 += 1;
        if example.question_type == query.question_type {
            entry.0 += 1;
        }
    }
    if tally.is_empty() {
        return Err(RetrievalError::NoSelections);
    }
    Ok(tally
        .into_iter()
        .map(|(qt, (hit, n))| (qt, hit as f64 / n as f64))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::AnswerOption;
    use crate::embeddings::EmbeddingRecord;
    use crate::prompting::CANONICAL_REFUSAL;

    fn inst(id: &str, image: &str, qt: QuestionType, ft: &str, figs: u32, split: Split) -> Instance {
        Instance {
            instance_id: id.into(),
            image_id: image.into(),
            image_path: format!("{image}.png"),
            question: format!("question {id}"),
            question_type: qt,
            figure_type: ft.into(),
            compound: figs > 1,
            figs_numb: figs,
            caption: "caption".into(),
            answer_options: if qt.is_multiple_choice() {
                ["A", "B", "C", "D"]
                    .iter()
                    .map(|k| AnswerOption { key: k.to_string(), text: k.to_lowercase() })
                    .collect()
            } else {
                vec![]
            },
            gold_answer: if qt == QuestionType::Unanswerable {
                CANONICAL_REFUSAL.into()
            } else {
                "A".into()
            },
            split,
        }
    }

    fn q_store(vs: &[(&str, [f64; 2])]) -> EmbeddingStore {
        let mut s = EmbeddingStore::new();
        for (id, v) in vs {
            s.insert(EmbeddingRecord {
                instance_id: id.to_string(),
                space: Space::Question,
                vector: v.to_vec(),
            })
            .unwrap();
        }
        s
    }

    use QuestionType::*;

    #[test]
    fn spec_ids_roundtrip() {
        for s in ["0s", "1s_q_f", "1s_q_nf", "2s_q_img_f", "2s_q_img_nf", "1s_q_img_f_blip"] {
            assert_eq!(s.parse::<RetrievalSpec>().unwrap().to_string(), s);
        }
        for bad in ["3s_q_f", "1s", "1s_img_f", "1s_q_f_blip", "0s_q_f", "xs"] {
            assert!(bad.parse::<RetrievalSpec>().is_err(), "{bad}");
        }
    }

    #[test]
    fn filtered_pool_same_type_and_subfigures() {
        let c = Corpus::from_instances(vec![
            inst("p1", "a", BinaryVisual, "pie chart", 1, Split::Train),
            inst("p2", "b", BinaryVisual, "pie chart", 1, Split::Train),
            inst("p3", "c", BinaryVisual, "pie chart", 1, Split::Train),
            inst("p4", "d", BinaryVisual, "pie chart", 2, Split::Train),
            inst("l1", "e", BinaryVisual, "line chart", 1, Split::Train),
        ])
        .unwrap();
        let q = inst("q", "z", BinaryVisual, "pie chart", 1, Split::Validation);
        let pool: Vec<_> = candidate_pool(&c, &q, FilterMode::Filtered)
            .unwrap()
            .iter()
            .map(|i| i.instance_id.as_str())
            .collect();
        assert_eq!(pool, ["p1", "p2", "p3"]);
    }

    #[test]
    fn same_image_instances_excluded() {
        let mut v: Vec<Instance> = QuestionType::ALL
            .iter()
            .enumerate()
            .map(|(i, qt)| inst(&format!("own{i}"), "own", *qt, "line chart", 1, Split::Train))
            .collect();
        v.push(inst("other", "x", BinaryVisual, "line chart", 1, Split::Train));
        let c = Corpus::from_instances(v).unwrap();
        let q = c.get("own0").unwrap();
        for mode in [FilterMode::Filtered, FilterMode::Unfiltered] {
            let pool = candidate_pool(&c, q, mode).unwrap();
            assert_eq!(pool.len(), 1);
            assert_eq!(pool[0].instance_id, "other");
        }
    }

    #[test]
    fn filter_ladder_falls_back() {
        let c = Corpus::from_instances(vec![
            inst("a", "a", BinaryVisual, "line chart", 1, Split::Train),
            inst("b", "b", BinaryVisual, "tree", 1, Split::Train),
            inst("v", "v", BinaryVisual, "tree", 3, Split::Validation),
        ])
        .unwrap();
        let ids = |q: &Instance| -> Vec<String> {
            candidate_pool(&c, q, FilterMode::Filtered)
                .unwrap()
                .iter()
                .map(|i| i.instance_id.clone())
                .collect()
        };
        // same type exists, different subfigure count
        assert_eq!(ids(&inst("q", "q", BinaryVisual, "tree", 3, Split::Validation)), ["b"]);
        // no same type at all
        let q = inst("q", "q", BinaryVisual, "graph", 1, Split::Validation);
        assert_eq!(ids(&q), ["a", "b"]);
        let unf: Vec<String> = candidate_pool(&c, &q, FilterMode::Unfiltered)
            .unwrap()
            .iter()
            .map(|i| i.instance_id.clone())
            .collect();
        assert_eq!(ids(&q), unf);
    }

    #[test]
    fn empty_train_split_errors() {
        let c = Corpus::from_instances(vec![inst("v", "v", BinaryVisual, "tree", 1, Split::Validation)]).unwrap();
        assert!(matches!(
            candidate_pool(&c, c.get("v").unwrap(), FilterMode::Unfiltered),
            Err(RetrievalError::EmptyTrainSplit)
        ));
    }

    #[test]
    fn one_shot_takes_argmax() {
        let c = Corpus::from_instances(vec![
            inst("b", "ib", BinaryVisual, "tree", 1, Split::Train),
            inst("a", "ia", BinaryVisual, "tree", 1, Split::Train),
            inst("q", "iq", BinaryVisual, "tree", 1, Split::Validation),
        ])
        .unwrap();
        let s = q_store(&[("q", [1.0, 0.0]), ("a", [0.9, 0.4358898943540674]), ("b", [0.8, 0.6])]);
        let spec = RetrievalSpec::new(1, RetrievalSpace::Question, FilterMode::Unfiltered).unwrap();
        let sel = select(&c, &s, c.get("q").unwrap(), &spec).unwrap();
        assert_eq!(sel.example_ids, ["a"]);
        assert!((sel.similarities[0] - 0.9).abs() < 1e-12);
        assert_eq!(sel.pool_size, 2);
    }

    #[test]
    fn one_shot_tie_prefers_earlier_corpus_index() {
        let c = Corpus::from_instances(vec![
            inst("first", "i1", BinaryVisual, "tree", 1, Split::Train),
            inst("second", "i2", BinaryVisual, "tree", 1, Split::Train),
            inst("q", "iq", BinaryVisual, "tree", 1, Split::Validation),
        ])
        .unwrap();
        let s = q_store(&[("q", [1.0, 0.0]), ("second", [0.6, 0.8]), ("first", [0.6, 0.8])]);
        let spec = RetrievalSpec::new(1, RetrievalSpace::Question, FilterMode::Filtered).unwrap();
        assert_eq!(select(&c, &s, c.get("q").unwrap(), &spec).unwrap().example_ids, ["first"]);
    }

    #[test]
    fn two_shot_answerable_first_then_unanswerable() {
        let c = Corpus::from_instances(vec![
            inst("u1", "i1", Unanswerable, "tree", 1, Split::Train),
            inst("a1", "i2", BinaryVisual, "tree", 1, Split::Train),
            inst("u2", "i3", Unanswerable, "tree", 1, Split::Train),
            inst("q", "iq", BinaryVisual, "tree", 1, Split::Validation),
        ])
        .unwrap();
        let at = |cos: f64| [cos, (1.0 - cos * cos).sqrt()];
        let s = q_store(&[("q", [1.0, 0.0]), ("u1", at(0.95)), ("a1", at(0.90)), ("u2", at(0.85))]);
        let spec = RetrievalSpec::new(2, RetrievalSpace::Question, FilterMode::Filtered).unwrap();
        let sel = select(&c, &s, c.get("q").unwrap(), &spec).unwrap();
        assert_eq!(sel.example_ids, ["a1", "u1"]);
    }

    #[test]
    fn two_shot_without_unanswerable_errors() {
        let c = Corpus::from_instances(vec![
            inst("a1", "i2", BinaryVisual, "tree", 1, Split::Train),
            inst("q", "iq", BinaryVisual, "tree", 1, Split::Validation),
        ])
        .unwrap();
        let s = q_store(&[("q", [1.0, 0.0]), ("a1", [0.0, 1.0])]);
        let spec = RetrievalSpec::new(2, RetrievalSpace::Question, FilterMode::Filtered).unwrap();
        assert!(matches!(
            select(&c, &s, c.get("q").unwrap(), &spec),
            Err(RetrievalError::MissingKind { kind: "unanswerable", .. })
        ));
    }

    #[test]
    fn zero_shot_is_empty_and_missing_embedding_errors() {
        let c = Corpus::from_instances(vec![
            inst("a1", "i2", BinaryVisual, "tree", 1, Split::Train),
            inst("q", "iq", BinaryVisual, "tree", 1, Split::Validation),
        ])
        .unwrap();
        let s = q_store(&[("q", [1.0, 0.0])]);
        let sel = select(&c, &s, c.get("q").unwrap(), &RetrievalSpec::zero_shot()).unwrap();
        assert!(sel.example_ids.is_empty());
        let spec = RetrievalSpec::new(1, RetrievalSpace::Question, FilterMode::Filtered).unwrap();
        let err = select(&c, &s, c.get("q").unwrap(), &spec).unwrap_err();
        assert!(err.to_string().contains("a1"));
    }

    #[test]
    fn match_rate_counts() {
        let mut v = Vec::new();
        for i in 0..10 {
            v.push(inst(&format!("q{i}"), &format!("iq{i}"), BinaryVisual, "tree", 1, Split::Validation));
        }
        v.push(inst("hit", "h", BinaryVisual, "tree", 1, Split::Train));
        v.push(inst("miss", "m", InfiniteVisual, "tree", 1, Split::Train));
        let c = Corpus::from_instances(v).unwrap();
        let sels: Vec<SelectionRecord> = (0..10)
            .map(|i| SelectionRecord {
                query_id: format!("q{i}"),
                example_ids: vec![if i < 7 { "hit" } else { "miss" }.into()],
                similarities: vec![0.5],
                spec: "1s_q_f".into(),
            })
            .collect();
        let r = match_rate(&sels, &c).unwrap();
        assert!((r[&BinaryVisual] - 0.7).abs() < 1e-15);
        assert!(match_rate(&[], &c).is_err());
    }
}
