//! The model-backend contract, retry handling, and response parsing.
//!
//! Two implementations ship with the crate: [`HttpBackend`] talks to a
//! chat-completions style endpoint and [`ReplayBackend`] answers from a
//! directory of recorded responses keyed by digest.

mod http;
mod replay;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompting::{PromptBundle, ResponseContract};
use crate::score::{score_from_f64, Score};

pub use http::{HttpBackend, HttpConfig, API_BASE_ENV, API_KEY_ENV};
pub use replay::{image_fixture_key, RecordingBackend, ReplayBackend};

/// Default number of retries after the first attempt.
pub const DEFAULT_MAX_RETRIES: u32 = 2;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("no replay fixture for key {0}")]
    MissingFixture(String),
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("backend configuration: {0}")]
    Config(String),
}

impl BackendError {
    fn is_transient(&self) -> bool {
        matches!(self, BackendError::Transport(_))
    }
}

/// A model endpoint. Implementations must tolerate concurrent calls.
pub trait Backend: Send + Sync {
    fn model_id(&self) -> &str;

    /// Whether the endpoint accepts a temperature parameter.
    fn supports_temperature(&self) -> bool {
        true
    }

    fn transcribe(&self, image: &Path, bundle: &PromptBundle) -> Result<String, BackendError>;

    fn complete(&self, bundle: &PromptBundle) -> Result<String, BackendError>;
}

impl<B: Backend + ?Sized> Backend for &B {
    fn model_id(&self) -> &str {
        (**self).model_id()
    }
    fn supports_temperature(&self) -> bool {
        (**self).supports_temperature()
    }
    fn transcribe(&self, image: &Path, bundle: &PromptBundle) -> Result<String, BackendError> {
        (**self).transcribe(image, bundle)
    }
    fn complete(&self, bundle: &PromptBundle) -> Result<String, BackendError> {
        (**self).complete(bundle)
    }
}

impl<B: Backend + ?Sized> Backend for Box<B> {
    fn model_id(&self) -> &str {
        (**self).model_id()
    }
    fn supports_temperature(&self) -> bool {
        (**self).supports_temperature()
    }
    fn transcribe(&self, image: &Path, bundle: &PromptBundle) -> Result<String, BackendError> {
        (**self).transcribe(image, bundle)
    }
    fn complete(&self, bundle: &PromptBundle) -> Result<String, BackendError> {
        (**self).complete(bundle)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CallOutcome {
    Ok,
    TransportError,
    MalformedOutput,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendCallLog {
    pub bundle_hash: String,
    pub model_id: String,
    pub latency_ms: u64,
    pub attempt: u32,
    pub outcome: CallOutcome,
}

/// Append-only call log. Entries are kept in memory and, when a sink file is
/// attached, written through as JSON lines.
#[derive(Default)]
pub struct CallLog {
    inner: Mutex<CallLogInner>,
}

#[derive(Default)]
struct CallLogInner {
    entries: Vec<BackendCallLog>,
    sink: Option<BufWriter<File>>,
}

impl CallLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_sink(path: &Path) -> std::io::Result<Self> {
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)?;
        Ok(CallLog {
            inner: Mutex::new(CallLogInner {
                entries: Vec::new(),
                sink: Some(BufWriter::new(file)),
            }),
        })
    }

    pub fn record(&self, entry: BackendCallLog) {
        let mut inner = self.inner.lock().expect("call log poisoned");
        if let Some(sink) = inner.sink.as_mut() {
            // the in-memory copy stays authoritative if the sink write fails
            let _ = serde_json::to_writer(&mut *sink, &entry)
                .and_then(|_| sink.write_all(b"\n").map_err(serde_json::Error::io));
        }
        inner.entries.push(entry);
    }

    pub fn entries(&self) -> Vec<BackendCallLog> {
        self.inner
            .lock()
            .expect("call log poisoned")
            .entries
            .clone()
    }

    pub fn flush(&self) -> std::io::Result<()> {
        let mut inner = self.inner.lock().expect("call log poisoned");
        match inner.sink.as_mut() {
            Some(sink) => sink.flush(),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoredFeedback {
    pub score: Score,
    pub feedback: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FeedbackError {
    #[error("malformed output: {0}")]
    MalformedOutput(String),
    #[error("score {score} is outside [0, {max}]")]
    ScoreOutOfRange { score: String, max: Score },
}

/// Finds the first JSON object in `text` that carries a `score` field and
/// reads `{score, feedback}` from it. Surrounding prose and code fences are
/// skipped. Scores are never clamped.
pub fn parse_scored_feedback(
    text: &str,
    max_points: Score,
) -> Result<ScoredFeedback, FeedbackError> {
    let mut from = 0;
    while let Some(rel) = text[from..].find('{') {
        let start = from + rel;
        let mut stream =
            serde_json::Deserializer::from_str(&text[start..]).into_iter::<serde_json::Value>();
        if let Some(Ok(serde_json::Value::Object(map))) = stream.next() {
            if let Some(score) = map.get("score") {
                let feedback = match map.get("feedback") {
                    Some(serde_json::Value::String(s)) => s.clone(),
                    Some(_) => {
                        return Err(FeedbackError::MalformedOutput(
                            "`feedback` is not a string".into(),
                        ))
                    }
                    None => {
                        return Err(FeedbackError::MalformedOutput(
                            "missing `feedback` field".into(),
                        ))
                    }
                };
                let score = read_score(score, max_points)?;
                return Ok(ScoredFeedback { score, feedback });
            }
        }
        from = start + 1;
    }
    Err(FeedbackError::MalformedOutput(
        "no JSON object with a `score` field".into(),
    ))
}

fn read_score(value: &serde_json::Value, max: Score) -> Result<Score, FeedbackError> {
    let number = match value {
        serde_json::Value::Number(n) => n.as_f64(),
        serde_json::Value::String(s) => s.trim().parse::<f64>().ok(),
        _ => None,
    }
    .ok_or_else(|| FeedbackError::MalformedOutput(format!("score {value} is not a number")))?;
    if number < 0.0 {
        return Err(FeedbackError::ScoreOutOfRange {
            score: value.to_string(),
            max,
        });
    }
    let score = score_from_f64(number)
        .map_err(|e| FeedbackError::MalformedOutput(format!("score {value}: {e}")))?;
    if score > max {
        return Err(FeedbackError::ScoreOutOfRange {
            score: value.to_string(),
            max,
        });
    }
    Ok(score)
}

#[derive(Debug, Error)]
pub enum RetryError {
    #[error("gave up after {attempts} attempts; last outcome {last:?}: {detail}")]
    ExhaustedRetries {
        attempts: u32,
        last: CallOutcome,
        detail: String,
    },
    #[error(transparent)]
    OutOfRange(FeedbackError),
    #[error(transparent)]
    Backend(BackendError),
}

/// Calls `backend` until it returns usable text. Transport failures and
/// unparseable scored responses are retried; out-of-range scores and
/// configuration problems are returned immediately.
pub fn complete_with_retry(
    backend: &dyn Backend,
    bundle: &PromptBundle,
    max_retries: u32,
    log: &CallLog,
) -> Result<String, RetryError> {
    let hash = bundle.digest();
    let mut last = (CallOutcome::Ok, String::new());
    for attempt in 1..=max_retries + 1 {
        let started = Instant::now();
        let result = backend.complete(bundle);
        let latency_ms = started.elapsed().as_millis() as u64;
        let mut entry = BackendCallLog {
            bundle_hash: hash.clone(),
            model_id: backend.model_id().to_string(),
            latency_ms,
            attempt,
            outcome: CallOutcome::Ok,
        };
        match result {
            Ok(text) => {
                if let ResponseContract::ScoredFeedback { max_points } = bundle.response_contract {
                    match parse_scored_feedback(&text, max_points) {
                        Ok(_) => {}
                        Err(e @ FeedbackError::ScoreOutOfRange { .. }) => {
                            log.record(entry);
                            return Err(RetryError::OutOfRange(e));
                        }
                        Err(FeedbackError::MalformedOutput(detail)) => {
                            entry.outcome = CallOutcome::MalformedOutput;
                            log.record(entry);
                            last = (CallOutcome::MalformedOutput, detail);
                            continue;
                        }
                    }
                }
                log.record(entry);
                return Ok(text);
            }
            Err(e) if e.is_transient() => {
                entry.outcome = CallOutcome::TransportError;
                log.record(entry);
                last = (CallOutcome::TransportError, e.to_string());
            }
            Err(e) => {
                entry.outcome = CallOutcome::TransportError;
                log.record(entry);
                return Err(RetryError::Backend(e));
            }
        }
    }
    Err(RetryError::ExhaustedRetries {
        attempts: max_retries + 1,
        last: last.0,
        detail: last.1,
    })
}

/// Transcribes one region image, retrying transport failures only.
pub fn transcribe_with_retry(
    backend: &dyn Backend,
    image: &Path,
    bundle: &PromptBundle,
    max_retries: u32,
    log: &CallLog,
) -> Result<String, RetryError> {
    let hash = bundle.digest();
    let mut detail = String::new();
    for attempt in 1..=max_retries + 1 {
        let started = Instant::now();
        let result = backend.transcribe(image, bundle);
        let mut entry = BackendCallLog {
            bundle_hash: hash.clone(),
            model_id: backend.model_id().to_string(),
            latency_ms: started.elapsed().as_millis() as u64,
            attempt,
            outcome: CallOutcome::Ok,
        };
        match result {
            Ok(text) => {
                log.record(entry);
                return Ok(text);
            }
            Err(e) => {
                entry.outcome = CallOutcome::TransportError;
                log.record(entry);
                if !e.is_transient() {
                    return Err(RetryError::Backend(e));
                }
                detail = e.to_string();
            }
        }
    }
    Err(RetryError::ExhaustedRetries {
        attempts: max_retries + 1,
        last: CallOutcome::TransportError,
        detail,
    })
}
