//! Conditional prompt rendering.
//!
//! The template lives in `resources/prompt_v1.txt`; the version suffix is
//! bumped whenever its bytes change so cached runs can be told apart.

use std::fmt::Write as _;
use std::sync::OnceLock;

use minijinja::{context, Environment, UndefinedBehavior};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, Instance};
use crate::retrieval::FewShotSelection;

/// The exact answer the model is instructed to give when a question cannot be
/// answered from the figure. Gold answers for unanswerable questions use it too.
pub const CANONICAL_REFUSAL: &str =
    "It is not possible to answer this question based only on the provided data.";

pub const TEMPLATE_VERSION: &str = "v1";
pub const SYSTEM_MESSAGE: &str = include_str!("../resources/system_v1.txt");
const QUERY_TEMPLATE: &str = include_str!("../resources/prompt_v1.txt");
const IMAGE_LABEL: &str = "Image:";

pub fn canonical_refusal() -> &'static str {
    CANONICAL_REFUSAL
}

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("instance '{id}' has no {field}")]
    MissingField { id: String, field: &'static str },
    #[error("few-shot example '{0}' is not in the corpus")]
    UnknownExample(String),
    #[error("few-shot example '{0}' has no gold answer")]
    MissingGold(String),
    #[error("template error: {0}")]
    Template(#[from] minijinja::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Part {
    Text { text: String },
    /// Path as given in the corpus; resolved against an image root by backends.
    Image { path: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub parts: Vec<Part>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub system_message: String,
    pub turns: Vec<Turn>,
}

fn environment() -> &'static Environment<'static> {
    static ENV: OnceLock<Environment<'static>> = OnceLock::new();
    ENV.get_or_init(|| {
        let mut env = Environment::new();
        env.set_trim_blocks(true);
        env.set_lstrip_blocks(true);
        env.set_undefined_behavior(UndefinedBehavior::Strict);
        env.add_template("prompt_v1.txt", QUERY_TEMPLATE)
            .expect("bundled template parses");
        env
    })
}

/// Parts of the user turn asking `instance`'s question.
pub fn render_query(instance: &Instance) -> Result<Vec<Part>, PromptError> {
    let missing = |field| PromptError::MissingField {
        id: instance.instance_id.clone(),
        field,
    };
    if instance.caption.trim().is_empty() {
        return Err(missing("caption"));
    }
    if instance.figure_type.trim().is_empty() {
        return Err(missing("figure_type"));
    }
    let image = if instance.image_path.is_empty() {
        instance.image_id.clone()
    } else {
        instance.image_path.clone()
    };
    let body = environment().get_template("prompt_v1.txt")?.render(context! {
        question => instance.question,
        answer_options => instance.answer_options.iter()
            .map(|o| context! { key => o.key, text => o.text })
            .collect::<Vec<_>>(),
        caption => instance.caption,
        compound => instance.compound,
        figs_numb => instance.figs_numb,
        figure_type => instance.figure_type,
        refusal => CANONICAL_REFUSAL,
    })?;
    Ok(vec![
        Part::Text {
            text: IMAGE_LABEL.to_string(),
        },
        Part::Image { path: image },
        Part::Text { text: body },
    ])
}

pub fn render_bundle(
    query: &Instance,
    selection: &FewShotSelection,
    corpus: &Corpus,
) -> Result<PromptBundle, PromptError> {
    let mut turns = Vec::with_capacity(2 * selection.example_ids.len() + 1);
    for id in &selection.example_ids {
        let example = corpus
            .get(id)
            .ok_or_else(|| PromptError::UnknownExample(id.clone()))?;
        if example.gold_answer.is_empty() {
            return Err(PromptError::MissingGold(id.clone()));
        }
        turns.push(Turn {
            role: Role::User,
            parts: render_query(example)?,
        });
        turns.push(Turn {
            role: Role::Assistant,
            parts: vec![Part::Text {
                text: example.gold_answer.clone(),
            }],
        });
    }
    turns.push(Turn {
        role: Role::User,
        parts: render_query(query)?,
    });
    Ok(PromptBundle {
        system_message: SYSTEM_MESSAGE.to_string(),
        turns,
    })
}

impl PromptBundle {
    /// Human-readable dump, also used for golden-file comparison.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "[system]\n{}", self.system_message);
        for turn in &self.turns {
            let role = match turn.role {
                Role::User => "user",
                Role::Assistant => "assistant",
            };
            let _ = writeln!(out, "[{role}]");
            for part in &turn.parts {
                match part {
                    Part::Text { text } => {
                        let _ = writeln!(out, "{text}");
                    }
                    Part::Image { path } => {
                        let _ = writeln!(out, "<image {path}>");
                    }
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{AnswerOption, QuestionType, Split};

    fn base(qt: QuestionType, compound: bool) -> Instance {
        Instance {
            instance_id: "i".into(),
            image_id: "img".into(),
            image_path: "images/img.png".into(),
            question: "Which line peaks first?".into(),
            question_type: qt,
            figure_type: "line chart".into(),
            compound,
            figs_numb: if compound { 3 } else { 1 },
            caption: "Accuracy over epochs.".into(),
            answer_options: if qt.is_multiple_choice() {
                ["A", "B", "C", "D"]
                    .iter()
                    .map(|k| AnswerOption { key: k.to_string(), text: format!("option {k}") })
                    .collect()
            } else {
                vec![]
            },
            gold_answer: if qt == QuestionType::Unanswerable {
                CANONICAL_REFUSAL.into()
            } else {
                "B".into()
            },
            split: Split::Train,
        }
    }

    fn body(parts: &[Part]) -> &str {
        match &parts[2] {
            Part::Text { text } => text,
            p => panic!("unexpected part {p:?}"),
        }
    }

    #[test]
    fn refusal_string_is_exact() {
        assert_eq!(
            canonical_refusal(),
            "It is not possible to answer this question based only on the provided data."
        );
        assert_ne!(canonical_refusal(), canonical_refusal().to_lowercase());
    }

    #[test]
    fn multiple_choice_branch() {
        let parts = render_query(&base(QuestionType::Mc4Visual, false)).unwrap();
        let b = body(&parts);
        assert!(b.contains("Answer options:\nA: option A\nB: option B"));
        assert!(b.contains("Only respond with the key(s)"));
        assert!(!b.contains("Your task is to answer the question based on the figure."));
    }

    #[test]
    fn open_branch_has_no_options_block() {
        let b = render_query(&base(QuestionType::BinaryVisual, false)).unwrap();
        let b = body(&b);
        assert!(!b.contains("Answer options:"));
        assert!(b.contains("Your task is to answer the question based on the figure."));
    }

    #[test]
    fn compound_branches_are_exclusive() {
        let single = render_query(&base(QuestionType::BinaryVisual, false)).unwrap();
        let single = body(&single);
        assert!(single.contains("single figure object which cannot be decomposed into multiple subfigures"));
        assert!(!single.contains("(sub)figures which can be separated"));
        let comp = render_query(&base(QuestionType::BinaryVisual, true)).unwrap();
        let comp = body(&comp);
        assert!(comp.contains("contains 3 (sub)figures which can be separated and constitute individual figures."));
        assert!(!comp.contains("single figure object"));
    }

    #[test]
    fn every_user_turn_has_one_image_and_question() {
        let b = render_query(&base(QuestionType::InfiniteNonvisual, true)).unwrap();
        assert_eq!(b.iter().filter(|p| matches!(p, Part::Image { .. })).count(), 1);
        assert!(body(&b).starts_with("Question: '"));
        assert!(body(&b).contains(&format!("respond with '{CANONICAL_REFUSAL}'.")));
    }

    #[test]
    fn missing_caption_errors() {
        let mut i = base(QuestionType::BinaryVisual, false);
        i.caption.clear();
        assert!(matches!(render_query(&i), Err(PromptError::MissingField { field: "caption", .. })));
    }

    #[test]
    fn bundle_turn_structure() {
        let mut ex_a = base(QuestionType::BinaryVisual, false);
        ex_a.instance_id = "ea".into();
        let mut ex_u = base(QuestionType::Unanswerable, false);
        ex_u.instance_id = "eu".into();
        let corpus = Corpus::from_instances(vec![ex_a, ex_u]).unwrap();
        let q = base(QuestionType::BinaryNonvisual, false);

        let zero = FewShotSelection { example_ids: vec![], similarities: vec![], pool_size: 0 };
        let b0 = render_bundle(&q, &zero, &corpus).unwrap();
        assert_eq!(b0.turns.len(), 1);
        assert_eq!(b0.system_message, SYSTEM_MESSAGE);

        let two = FewShotSelection {
            example_ids: vec!["ea".into(), "eu".into()],
            similarities: vec![0.9, 0.8],
            pool_size: 2,
        };
        let b2 = render_bundle(&q, &two, &corpus).unwrap();
        let roles: Vec<Role> = b2.turns.iter().map(|t| t.role).collect();
        assert_eq!(roles, [Role::User, Role::Assistant, Role::User, Role::Assistant, Role::User]);
        assert_eq!(
            b2.turns[3].parts,
            vec![Part::Text { text: CANONICAL_REFUSAL.into() }]
        );
        assert_eq!(b2, render_bundle(&q, &two, &corpus).unwrap());
    }

    #[test]
    fn example_without_gold_errors() {
        let mut ex = base(QuestionType::BinaryVisual, false);
        ex.instance_id = "e".into();
        ex.gold_answer.clear();
        ex.split = Split::Test;
        let corpus = Corpus::from_instances(vec![ex]).unwrap();
        let sel = FewShotSelection { example_ids: vec!["e".into()], similarities: vec![1.0], pool_size: 1 };
        let q = base(QuestionType::BinaryVisual, false);
        assert!(matches!(render_bundle(&q, &sel, &corpus), Err(PromptError::MissingGold(_))));
    }
}
