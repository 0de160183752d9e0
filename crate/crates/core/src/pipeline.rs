//! Batch-level drivers for transcription and grading.
//!
//! Both fan out over a bounded rayon pool and then apply their results to
//! the batch on the calling thread, so record order and status changes are
//! the same whatever the thread count. Work already done (by region status
//! or an earlier results file with the same provenance) is skipped.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::{transcribe_with_retry, Backend, CallLog, RetryError};
use crate::config::Provenance;
use crate::grade::{FlagConfig, GradeError, GradeMode, Grader};
use crate::ingest::{Batch, RegionStatus};
use crate::prompting::{Prompter, Transcription};
use crate::results::ResultRecord;
use crate::score::{normalize_test_code, RegionKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FailureClass {
    Validation,
    Backend,
    Io,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Failure {
    pub test_code: String,
    pub question_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<RegionKind>,
    pub class: FailureClass,
    pub error: String,
}

fn retry_class(e: &RetryError) -> FailureClass {
    match e {
        RetryError::Backend(crate::backend::BackendError::Io { .. }) => FailureClass::Io,
        RetryError::OutOfRange(_) => FailureClass::Validation,
        _ => FailureClass::Backend,
    }
}

fn grade_class(e: &GradeError) -> FailureClass {
    match e {
        GradeError::Backend(r) => retry_class(r),
        _ => FailureClass::Validation,
    }
}

fn with_pool<T: Send>(threads: usize, work: impl FnOnce() -> T + Send) -> T {
    match rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
    {
        Ok(pool) => pool.install(work),
        Err(_) => work(),
    }
}

#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct TranscribeSummary {
    pub transcribed: usize,
    pub skipped: usize,
    pub failures: Vec<Failure>,
}

/// Transcribes every included Pending region.
pub fn transcribe_batch(
    batch: &mut Batch,
    prompter: &Prompter,
    backend: &dyn Backend,
    log: &CallLog,
    max_retries: u32,
    threads: usize,
) -> TranscribeSummary {
    let mut summary = TranscribeSummary::default();
    let mut jobs = Vec::new();
    for (index, record) in batch.records.iter().enumerate() {
        if record.is_excluded() {
            continue;
        }
        if record.status != RegionStatus::Pending {
            summary.skipped += 1;
            continue;
        }
        let failure = |class, error: String| Failure {
            test_code: record.submission.test_code.clone(),
            question_id: record.question_id.clone(),
            kind: Some(record.kind),
            class,
            error,
        };
        let Some(question) = batch.question(&record.question_id) else {
            summary.failures.push(failure(
                FailureClass::Validation,
                format!("unknown question `{}`", record.question_id),
            ));
            continue;
        };
        match prompter.build_ocr_prompt(question, record.kind) {
            Ok(bundle) => jobs.push((index, batch.image_path(record), bundle)),
            Err(e) => summary
                .failures
                .push(failure(FailureClass::Validation, e.to_string())),
        }
    }

    let outputs: Vec<_> = with_pool(threads, || {
        jobs.par_iter()
            .map(|(index, image, bundle)| {
                (
                    *index,
                    transcribe_with_retry(backend, image, bundle, max_retries, log),
                )
            })
            .collect()
    });

    for (index, result) in outputs {
        let record = &mut batch.records[index];
        match result {
            Ok(text) => {
                record.transcription = Some(text);
                record
                    .advance(RegionStatus::Transcribed)
                    .expect("pending record can advance");
                summary.transcribed += 1;
            }
            Err(e) => summary.failures.push(Failure {
                test_code: record.submission.test_code.clone(),
                question_id: record.question_id.clone(),
                kind: Some(record.kind),
                class: retry_class(&e),
                error: e.to_string(),
            }),
        }
    }
    summary
}

#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct GradeSummary {
    pub records: Vec<ResultRecord>,
    pub graded: usize,
    pub reused: usize,
    pub failures: Vec<Failure>,
}

struct Job {
    region_indices: Vec<usize>,
    test_code: String,
    section_id: String,
    question_id: String,
    transcription: Transcription,
    image_refs: Vec<String>,
}

/// Grades each (submission, question) whose included regions are all
/// transcribed. Records in `previous` with matching provenance are reused.
pub fn grade_batch(
    batch: &mut Batch,
    grader: &Grader<'_>,
    mode: GradeMode,
    flags: &FlagConfig,
    provenance: &Provenance,
    previous: &[ResultRecord],
    threads: usize,
) -> GradeSummary {
    let mut summary = GradeSummary::default();
    let mut groups: BTreeMap<(String, String), Vec<usize>> = BTreeMap::new();
    for (index, record) in batch.records.iter().enumerate() {
        if !record.is_excluded() {
            groups
                .entry((
                    normalize_test_code(&record.submission.test_code),
                    record.question_id.clone(),
                ))
                .or_default()
                .push(index);
        }
    }
    let reusable: HashMap<_, _> = previous
        .iter()
        .filter(|r| r.provenance() == *provenance)
        .map(|r| (r.key(), r))
        .collect();

    let mut jobs = Vec::new();
    for ((code, question_id), indices) in groups {
        let first = &batch.records[indices[0]];
        let key = (first.submission.quiz_id.clone(), code, question_id.clone());
        if let Some(done) = reusable.get(&key) {
            summary.records.push((*done).clone());
            summary.reused += 1;
            for &i in &indices {
                let _ = batch.records[i].advance(RegionStatus::Graded);
            }
            continue;
        }
        if let Some(&pending) = indices
            .iter()
            .find(|&&i| batch.records[i].status == RegionStatus::Pending)
        {
            let r = &batch.records[pending];
            summary.failures.push(Failure {
                test_code: r.submission.test_code.clone(),
                question_id: r.question_id.clone(),
                kind: Some(r.kind),
                class: FailureClass::Validation,
                error: "region has not been transcribed".into(),
            });
            continue;
        }
        let mut ordered = indices.clone();
        ordered.sort_by_key(|&i| batch.records[i].kind != RegionKind::Solution);
        let mut transcription = Transcription::default();
        for &i in &ordered {
            let r = &batch.records[i];
            let text = r.transcription.clone().unwrap_or_default();
            match r.kind {
                RegionKind::Solution => transcription.solution = text,
                RegionKind::FinalAnswer => transcription.final_answer = text,
            }
        }
        jobs.push(Job {
            image_refs: ordered
                .iter()
                .map(|&i| batch.records[i].image_ref.clone())
                .collect(),
            region_indices: ordered,
            test_code: first.submission.test_code.clone(),
            section_id: first.submission.section_id.clone(),
            question_id,
            transcription,
        });
    }

    let batch_ref = &*batch;
    let outputs: Vec<_> = with_pool(threads, || {
        jobs.par_iter()
            .map(|job| {
                let question = batch_ref
                    .question(&job.question_id)
                    .expect("records reference known questions");
                let rubrics = batch_ref.rubrics_for(&job.question_id);
                grader
                    .grade(&job.transcription, question, &rubrics, mode, flags)
                    .map(|outcome| {
                        ResultRecord::from_outcome(
                            &job.test_code,
                            &batch_ref.quiz_id,
                            &job.section_id,
                            &job.question_id,
                            question.max_points,
                            &outcome,
                            job.transcription.clone(),
                            job.image_refs.clone(),
                            provenance,
                        )
                    })
            })
            .collect()
    });

    for (job, result) in jobs.iter().zip(outputs) {
        match result {
            Ok(record) => {
                for &i in &job.region_indices {
                    batch.records[i]
                        .advance(RegionStatus::Graded)
                        .expect("transcribed record can advance");
                }
                summary.records.push(record);
                summary.graded += 1;
            }
            Err(e) => summary.failures.push(Failure {
                test_code: job.test_code.clone(),
                question_id: job.question_id.clone(),
                kind: None,
                class: grade_class(&e),
                error: e.to_string(),
            }),
        }
    }
    crate::results::sort_records(&mut summary.records);
    summary
}
