//! Review queue for flagged grading outcomes.
//!
//! Items enter the queue from a results file, reviewers resolve them over
//! HTTP, and every change is kept in append-only JSON Lines logs so the
//! service can be restarted without losing or reordering anything.

mod api;
mod store;

pub use api::{router, serve, ServerOptions, DEFAULT_PORT, TOKEN_ENV};
pub use store::{
    item_id, FlagFilter, ItemState, ItemSummary, OutcomeView, ReviewError, ReviewItem, ReviewStore,
    ReviewVerdict, RubricView, QUEUE_LOG, VERDICT_LOG,
};
