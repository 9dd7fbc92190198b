//! Prompt execution against chat backends, confidence scoring and the run cache.

mod backend;
mod cache;

pub use backend::{
    Backend, BackendError, BackendSpec, Completion, CompletionRequest, MockBackend, MockEntry,
    OpenAiBackend,
};
pub use cache::{CacheError, PredictionLookup, RunCache};

use std::fmt;
use std::str::FromStr;
use std::thread;
use std::time::Duration;

use log::{debug, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Corpus;
use crate::embeddings::EmbeddingStore;
use crate::prompting::{self, PromptBundle, CANONICAL_REFUSAL};
use crate::retrieval::{self, RetrievalError, RetrievalSpec};

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("token log-probabilities are empty")]
    EmptyLogprobs,
    #[error("log-probability {0} is positive; expected natural-log probabilities <= 0")]
    PositiveLogprob(f64),
    #[error("backend returned no log-probabilities")]
    MissingLogprobs,
    #[error("backend failed after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: String },
    #[error("backend error: {0}")]
    Backend(String),
    #[error("invalid config id '{0}' (expected <backend>:<spec>, e.g. internvl:1s_q_img_f)")]
    ConfigId(String),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Prompt(#[from] prompting::PromptError),
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error("unknown instance '{0}'")]
    UnknownInstance(String),
}

/// Confidence of a completion: exp of the mean natural-log token probability.
pub fn confidence(token_logprobs: &[f64]) -> Result<f64, InferenceError> {
    if token_logprobs.is_empty() {
        return Err(InferenceError::EmptyLogprobs);
    }
    if let Some(&p) = token_logprobs.iter().find(|&&p| p > 0.0 || p.is_nan()) {
        return Err(InferenceError::PositiveLogprob(p));
    }
    let mean = token_logprobs.iter().sum::<f64>() / token_logprobs.len() as f64;
    Ok(mean.exp())
}

/// One experimental configuration, e.g. `pixtral:2s_q_img_f`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunConfig {
    pub backend: String,
    pub spec: RetrievalSpec,
    pub notes: String,
}

impl RunConfig {
    pub fn new(backend: &str, spec: RetrievalSpec) -> Self {
        RunConfig {
            backend: backend.to_string(),
            spec,
            notes: String::new(),
        }
    }

    pub fn config_id(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.backend, self.spec)
    }
}

impl FromStr for RunConfig {
    type Err = InferenceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (backend, spec) = s
            .split_once(':')
            .ok_or_else(|| InferenceError::ConfigId(s.to_string()))?;
        let valid_name = !backend.is_empty()
            && backend
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.');
        if !valid_name {
            return Err(InferenceError::ConfigId(s.to_string()));
        }
        let spec = spec
            .parse::<RetrievalSpec>()
            .map_err(|_| InferenceError::ConfigId(s.to_string()))?;
        Ok(RunConfig::new(backend, spec))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub instance_id: String,
    pub config_id: String,
    pub answer_text: String,
    pub token_logprobs: Vec<f64>,
    pub confidence: f64,
    pub created_at: String,
}

pub fn is_refusal(prediction: &Prediction) -> bool {
    prediction.answer_text.trim() == CANONICAL_REFUSAL
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeParams {
    pub temperature: f64,
    /// Completion token cap.
    pub max_tokens: u32,
    pub timeout_secs: u64,
    pub max_retries: u32,
    pub initial_backoff_ms: u64,
    pub max_backoff_ms: u64,
}

impl Default for DecodeParams {
    fn default() -> Self {
        DecodeParams {
            temperature: 0.0,
            max_tokens: 128,
            timeout_secs: 300,
            max_retries: 4,
            initial_backoff_ms: 500,
            max_backoff_ms: 16_000,
        }
    }
}

impl DecodeParams {
    fn backoff(&self, attempt: u32) -> Duration {
        let ms = self
            .initial_backoff_ms
            .saturating_mul(1u64 << attempt.min(20))
            .min(self.max_backoff_ms);
        Duration::from_millis(ms)
    }
}

/// Sends one bundle to `backend`, retrying transient failures.
pub fn run(
    bundle: &PromptBundle,
    backend: &dyn Backend,
    params: &DecodeParams,
    instance_id: &str,
    config_id: &str,
) -> Result<(String, Vec<f64>), InferenceError> {
    let request = CompletionRequest {
        instance_id,
        config_id,
        bundle,
        params,
    };
    let mut attempt = 0;
    loop {
        match backend.complete(&request) {
            Ok(c) => {
                let logprobs = c.token_logprobs.ok_or(InferenceError::MissingLogprobs)?;
                confidence(&logprobs)?;
                return Ok((c.text, logprobs));
            }
            Err(e) if e.is_transient() && attempt < params.max_retries => {
                let wait = params.backoff(attempt);
                debug!("{instance_id}: transient backend error ({e}); retrying in {wait:?}");
                thread::sleep(wait);
                attempt += 1;
            }
            Err(e) if e.is_transient() => {
                return Err(InferenceError::RetriesExhausted {
                    attempts: attempt + 1,
                    last: e.to_string(),
                })
            }
            Err(BackendError::MissingLogprobs) => return Err(InferenceError::MissingLogprobs),
            Err(e) => return Err(InferenceError::Backend(e.to_string())),
        }
    }
}

pub struct RunContext<'a> {
    pub corpus: &'a Corpus,
    pub store: &'a EmbeddingStore,
    pub backend: &'a dyn Backend,
    pub params: &'a DecodeParams,
    pub concurrency: usize,
    pub force: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub instance_id: String,
    pub error: String,
}

#[derive(Debug, Default)]
pub struct RunReport {
    /// Predictions for every successful instance (cached or new), in input order.
    pub predictions: Vec<Prediction>,
    pub failures: Vec<Failure>,
    pub backend_calls: usize,
    pub cached: usize,
}

impl RunReport {
    pub fn is_clean(&self) -> bool {
        self.failures.is_empty()
    }
}

fn predict_one(
    ctx: &RunContext<'_>,
    config: &RunConfig,
    config_id: &str,
    instance_id: &str,
) -> Result<Prediction, InferenceError> {
    let query = ctx
        .corpus
        .get(instance_id)
        .ok_or_else(|| InferenceError::UnknownInstance(instance_id.to_string()))?;
    let selection = retrieval::select(ctx.corpus, ctx.store, query, &config.spec)?;
    let bundle = prompting::render_bundle(query, &selection, ctx.corpus)?;
    let (answer_text, token_logprobs) =
        run(&bundle, ctx.backend, ctx.params, instance_id, config_id)?;
    let confidence = confidence(&token_logprobs)?;
    Ok(Prediction {
        instance_id: instance_id.to_string(),
        config_id: config_id.to_string(),
        answer_text,
        token_logprobs,
        confidence,
        created_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
    })
}

/// Retrieval, prompting and inference for each instance under `config`.
///
/// Cached pairs are skipped unless `ctx.force`. Up to `ctx.concurrency`
/// instances are in flight at once; results are appended to the cache in
/// input order after each wave, so cache files are deterministic.
pub fn run_config(
    ctx: &RunContext<'_>,
    config: &RunConfig,
    instance_ids: &[String],
    cache: &mut RunCache,
) -> Result<RunReport, InferenceError> {
    let config_id = config.config_id();
    let mut report = RunReport::default();
    let mut slots: Vec<Option<Prediction>> = vec![None; instance_ids.len()];
    let mut pending = Vec::new();
    for (i, id) in instance_ids.iter().enumerate() {
        match cache.get(id, &config_id) {
            Some(p) if !ctx.force => {
                slots[i] = Some(p.clone());
                report.cached += 1;
            }
            _ => pending.push(i),
        }
    }

    let wave_size = ctx.concurrency.max(1);
    for wave in pending.chunks(wave_size) {
        let outcomes: Vec<Result<Prediction, InferenceError>> = thread::scope(|s| {
            let handles: Vec<_> = wave
                .iter()
                .map(|&i| {
                    let id = &instance_ids[i];
                    let cid = &config_id;
                    s.spawn(move || predict_one(ctx, config, cid, id))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("inference worker panicked"))
                .collect()
        });
        for (&i, outcome) in wave.iter().zip(outcomes) {
            match outcome {
                Ok(p) => {
                    report.backend_calls += 1;
                    cache.append(&p)?;
                    slots[i] = Some(p);
                }
                Err(e) => {
                    if matches!(
                        e,
                        InferenceError::RetriesExhausted { .. }
                            | InferenceError::MissingLogprobs
                            | InferenceError::Backend(_)
                            | InferenceError::EmptyLogprobs
                            | InferenceError::PositiveLogprob(_)
                    ) {
                        report.backend_calls += 1;
                    }
                    warn!("{}: {e}", instance_ids[i]);
                    report.failures.push(Failure {
                        instance_id: instance_ids[i].clone(),
                        error: e.to_string(),
                    });
                }
            }
        }
    }
    report.predictions = slots.into_iter().flatten().collect();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn confidence_examples() {
        assert_eq!(confidence(&[0.0, 0.0, 0.0]).unwrap(), 1.0);
        assert!((confidence(&[0.5f64.ln(), 0.5f64.ln()]).unwrap() - 0.5).abs() < 1e-15);
        assert!((confidence(&[-1.0, -2.0, -3.0]).unwrap() - 0.135335).abs() < 1e-6);
        assert!(matches!(confidence(&[]), Err(InferenceError::EmptyLogprobs)));
        assert!(matches!(confidence(&[-0.1, 0.2]), Err(InferenceError::PositiveLogprob(_))));
    }

    #[test]
    fn config_ids_roundtrip() {
        for id in ["internvl:0s", "pixtral:2s_q_img_f", "internvl:1s_q_img_f_blip", "mock-1:1s_q_nf"] {
            assert_eq!(id.parse::<RunConfig>().unwrap().config_id(), id);
        }
        for bad in ["internvl", ":1s_q_f", "x:9s", "a b:0s"] {
            assert!(bad.parse::<RunConfig>().is_err(), "{bad}");
        }
    }

    fn pred(answer: &str) -> Prediction {
        Prediction {
            instance_id: "i".into(),
            config_id: "c:0s".into(),
            answer_text: answer.into(),
            token_logprobs: vec![0.0],
            confidence: 1.0,
            created_at: String::new(),
        }
    }

    #[test]
    fn refusal_detection_is_exact_after_trim() {
        assert!(is_refusal(&pred(CANONICAL_REFUSAL)));
        assert!(is_refusal(&pred(&format!("  {CANONICAL_REFUSAL}\n"))));
        assert!(!is_refusal(&pred("42")));
        assert!(!is_refusal(&pred(&CANONICAL_REFUSAL.to_lowercase())));
        assert!(!is_refusal(&pred(&format!("Sorry. {CANONICAL_REFUSAL}"))));
    }

    #[test]
    fn backoff_is_capped() {
        let p = DecodeParams::default();
        assert_eq!(p.backoff(0), Duration::from_millis(500));
        assert_eq!(p.backoff(2), Duration::from_millis(2000));
        assert_eq!(p.backoff(10), Duration::from_millis(16_000));
    }

    proptest! {
        #[test]
        fn confidence_in_unit_interval_and_monotone(
            lps in prop::collection::vec(-20.0f64..=0.0, 1..16),
            idx in any::<prop::sample::Index>(),
            bump in 0.001f64..1.0,
        ) {
            let c = confidence(&lps).unwrap();
            prop_assert!(c > 0.0 && c <= 1.0);
            let i = idx.index(lps.len());
            let mut lower = lps.clone();
            lower[i] -= bump;
            prop_assert!(confidence(&lower).unwrap() < c);
        }
    }
}
