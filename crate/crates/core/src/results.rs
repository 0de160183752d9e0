//! The results file: one JSON line per graded (submission, question).

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::Provenance;
use crate::grade::{Flag, GradeOutcome, GradeRun, SelectionRule};
use crate::prompting::Transcription;
use crate::score::{normalize_test_code, Score};

#[derive(Debug, Error)]
pub enum ResultsError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} line {line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("{path} has two records for ({test_code}, {question_id})")]
    Duplicate {
        path: String,
        test_code: String,
        question_id: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSummary {
    pub rubric_id: String,
    pub run_index: u32,
    pub model_id: String,
    pub score: Score,
    pub feedback: String,
    pub bundle_hash: String,
}

impl From<&GradeRun> for RunSummary {
    fn from(run: &GradeRun) -> Self {
        RunSummary {
            rubric_id: run.rubric_id.clone(),
            run_index: run.run_index,
            model_id: run.model_id.clone(),
            score: run.score,
            feedback: run.feedback.clone(),
            bundle_hash: run.bundle_hash.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub test_code: String,
    pub quiz_id: String,
    pub section_id: String,
    pub question_id: String,
    pub max_points: Score,
    pub selected_score: Score,
    pub selection_rule: SelectionRule,
    pub selected_rubric_id: String,
    pub feedback: String,
    pub flags: BTreeSet<Flag>,
    pub runs: Vec<RunSummary>,
    pub transcription: Transcription,
    /// Region images as listed in the manifest, solution first.
    #[serde(default)]
    pub image_refs: Vec<String>,
    pub template_version: String,
    pub config_hash: String,
}

impl ResultRecord {
    #[allow(clippy::too_many_arguments)]
    pub fn from_outcome(
        test_code: &str,
        quiz_id: &str,
        section_id: &str,
        question_id: &str,
        max_points: Score,
        outcome: &GradeOutcome,
        transcription: Transcription,
        image_refs: Vec<String>,
        provenance: &Provenance,
    ) -> Self {
        ResultRecord {
            test_code: test_code.to_string(),
            quiz_id: quiz_id.to_string(),
            section_id: section_id.to_string(),
            question_id: question_id.to_string(),
            max_points,
            selected_score: outcome.selected_score,
            selection_rule: outcome.selection_rule,
            selected_rubric_id: outcome.selected_rubric_id.clone(),
            feedback: outcome.selected_feedback.clone(),
            flags: outcome.flags.clone(),
            runs: outcome.runs.iter().map(RunSummary::from).collect(),
            transcription,
            image_refs,
            template_version: provenance.template_version.clone(),
            config_hash: provenance.config_hash.clone(),
        }
    }

    /// (quiz, normalized test code, question): the sort and identity key.
    pub fn key(&self) -> (String, String, String) {
        (
            self.quiz_id.clone(),
            normalize_test_code(&self.test_code),
            self.question_id.clone(),
        )
    }

    pub fn provenance(&self) -> Provenance {
        Provenance {
            template_version: self.template_version.clone(),
            config_hash: self.config_hash.clone(),
        }
    }
}

pub fn sort_records(records: &mut [ResultRecord]) {
    records.sort_by_key(ResultRecord::key);
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRecord>, ResultsError> {
    let file = fs::File::open(path).map_err(|source| ResultsError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| ResultsError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ResultRecord =
            serde_json::from_str(&line).map_err(|e| ResultsError::Parse {
                path: path.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            })?;
        if !seen.insert(record.key()) {
            return Err(ResultsError::Duplicate {
                path: path.display().to_string(),
                test_code: record.test_code,
                question_id: record.question_id,
            });
        }
        out.push(record);
    }
    Ok(out)
}

/// Writes records sorted by key, so equal inputs give equal bytes.
pub fn write_results(path: &Path, records: &[ResultRecord]) -> Result<(), ResultsError> {
    let mut sorted = records.to_vec();
    sort_records(&mut sorted);
    let mut buf = Vec::new();
    for record in &sorted {
        serde_json::to_writer(&mut buf, record).expect("record serializes");
        buf.push(b'\n');
    }
    let io = |source| ResultsError::Io {
        path: path.display().to_string(),
        source,
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io)?;
    }
    let mut file = fs::File::create(path).map_err(io)?;
    file.write_all(&buf).map_err(io)
}
