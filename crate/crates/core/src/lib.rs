//! Rubric-guided grading of handwritten free-response mathematics.
//!
//! The crate covers every stage after region cropping: loading batches and
//! TA exports, OCR and grading prompts, model backends, dual-rubric and
//! multi-run grading with review flags, evaluation statistics, and
//! student-facing messages.

pub mod analytics;
pub mod backend;
pub mod config;
pub mod digest;
pub mod grade;
pub mod ingest;
pub mod messaging;
pub mod pipeline;
pub mod prompting;
pub mod report;
pub mod results;
pub mod score;
pub mod template;

pub use score::{score_gap, Grid, QuestionSpec, RegionKind, Score, SubmissionId};
