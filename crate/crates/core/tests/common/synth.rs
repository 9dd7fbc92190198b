//! Synthetic corpus with planted embeddings and a brute-force retrieval oracle
//! written independently of the library's ranking code.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use figqa::corpus::{AnswerOption, Corpus, Instance, QuestionType, Split};
use figqa::embeddings::{EmbeddingRecord, EmbeddingStore, Space};
use figqa::prompting::CANONICAL_REFUSAL;
use figqa::retrieval::{FilterMode, RetrievalSpace, RetrievalSpec};

pub struct Synthetic {
    pub corpus: Corpus,
    pub store: EmbeddingStore,
    /// Raw (unnormalized) planted vectors per instance, by corpus index.
    pub question: Vec<Vec<f64>>,
    pub image: Vec<Vec<f64>>,
}

const TYPES: [QuestionType; 5] = [
    QuestionType::BinaryVisual,
    QuestionType::InfiniteNonvisual,
    QuestionType::Mc4Visual,
    QuestionType::Unanswerable,
    QuestionType::InfiniteVisual,
];

/// `images` figures with five questions each (one unanswerable). Every third
/// image is validation. Some question vectors are exact copies so ties occur.
pub fn synthetic(seed: u64, images: usize) -> Synthetic {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let figure_types = ["line chart", "bar chart", "pie chart"];
    let mut instances = Vec::new();
    let mut question = Vec::new();
    let mut image = Vec::new();
    for img in 0..images {
        let figure_type = figure_types[rng.gen_range(0..figure_types.len())];
        let compound = rng.gen_bool(0.4);
        let figs_numb = if compound { rng.gen_range(2..=3) } else { 1 };
        let split = if img % 3 == 2 { Split::Validation } else { Split::Train };
        let img_vec: Vec<f64> = (0..4).map(|_| rng.gen_range(-3i32..=3) as f64 + 0.5).collect();
        for (k, &qt) in TYPES.iter().enumerate() {
            let id = format!("s{img:02}_{k}");
            let q_vec: Vec<f64> = if !question.is_empty() && rng.gen_bool(0.2) {
                // planted exact tie with an earlier instance
                let j = rng.gen_range(0..question.len());
                let v: &Vec<f64> = &question[j];
                v.clone()
            } else {
                (0..4).map(|_| rng.gen_range(-4i32..=4) as f64 + 0.25).collect()
            };
            let options = if qt.is_multiple_choice() {
                ["A", "B", "C", "D"]
                    .iter()
                    .map(|k| AnswerOption {
                        key: k.to_string(),
                        text: format!("opt {k}"),
                    })
                    .collect()
            } else {
                Vec::new()
            };
            instances.push(Instance {
                instance_id: id,
                image_id: format!("img{img:02}"),
                image_path: format!("images/img{img:02}.png"),
                question: format!("question {k} about image {img}"),
                question_type: qt,
                figure_type: figure_type.to_string(),
                compound,
                figs_numb,
                caption: format!("caption {img}"),
                answer_options: options,
                gold_answer: if qt == QuestionType::Unanswerable {
                    CANONICAL_REFUSAL.to_string()
                } else {
                    "A".to_string()
                },
                split,
            });
            question.push(q_vec);
            image.push(img_vec.clone());
        }
    }
    let mut store = EmbeddingStore::new();
    for (i, inst) in instances.iter().enumerate() {
        for (space, v) in [(Space::Question, &question[i]), (Space::Image, &image[i])] {
            store
                .insert(EmbeddingRecord {
                    instance_id: inst.instance_id.clone(),
                    space,
                    vector: v.clone(),
                })
                .unwrap();
        }
    }
    Synthetic {
        corpus: Corpus::from_instances(instances).unwrap(),
        store,
        question,
        image,
    }
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

impl Synthetic {
    fn vector(&self, space: RetrievalSpace, i: usize) -> Vec<f64> {
        match space {
            RetrievalSpace::Question => self.question[i].clone(),
            // the halving in the mean does not change direction
            RetrievalSpace::FusedQuestionImage => unit(&self.question[i])
                .iter()
                .zip(unit(&self.image[i]))
                .map(|(a, b)| a + b)
                .collect(),
            RetrievalSpace::Joint => panic!("synthetic corpus has no joint vectors"),
        }
    }

    /// Corpus indices eligible as examples for query `q`.
    fn pool(&self, q: usize, filter: FilterMode) -> Vec<usize> {
        let all = self.corpus.instances();
        let base: Vec<usize> = (0..all.len())
            .filter(|&j| all[j].split == Split::Train && all[j].image_id != all[q].image_id)
            .collect();
        if filter == FilterMode::Unfiltered {
            return base;
        }
        let same_type: Vec<usize> = base
            .iter()
            .copied()
            .filter(|&j| all[j].figure_type == all[q].figure_type)
            .collect();
        let same_both: Vec<usize> = same_type
            .iter()
            .copied()
            .filter(|&j| all[j].figs_numb == all[q].figs_numb)
            .collect();
        [same_both, same_type, base]
            .into_iter()
            .find(|p| !p.is_empty())
            .unwrap_or_default()
    }

    /// Expected example ids: linear scan in corpus order keeping the first
    /// strictly greater similarity.
    pub fn oracle(&self, q: usize, spec: &RetrievalSpec) -> Vec<String> {
        let all = self.corpus.instances();
        let qv = self.vector(spec.space, q);
        let best = |keep: &dyn Fn(usize) -> bool| -> Option<usize> {
            let mut best: Option<(usize, f64)> = None;
            for j in self.pool(q, spec.filter_mode) {
                if !keep(j) {
                    continue;
                }
                let s = cos(&qv, &self.vector(spec.space, j));
                if best.is_none_or(|(_, b)| s > b) {
                    best = Some((j, s));
                }
            }
            best.map(|(j, _)| j)
        };
        let unans = |j: usize| all[j].question_type == QuestionType::Unanswerable;
        let picks = match spec.shots {
            1 => vec![best(&|_| true)],
            2 => vec![best(&|j| !unans(j)), best(&unans)],
            _ => vec![],
        };
        picks
            .into_iter()
            .map(|j| all[j.expect("pool has both kinds")].instance_id.clone())
            .collect()
    }
}

pub fn all_specs() -> Vec<RetrievalSpec> {
    let mut out = Vec::new();
    for shots in [1, 2] {
        for space in [RetrievalSpace::Question, RetrievalSpace::FusedQuestionImage] {
            for filter in [FilterMode::Filtered, FilterMode::Unfiltered] {
                out.push(RetrievalSpec::new(shots, space, filter).unwrap());
            }
        }
    }
    out
}
