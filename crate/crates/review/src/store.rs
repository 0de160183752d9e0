use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use gradepipe_core::analytics::{GradingVerdict, OcrVerdict, VerdictDistribution, VerdictRecord};
use gradepipe_core::digest::sha256_hex;
use gradepipe_core::grade::{Flag, SelectionRule};
use gradepipe_core::prompting::{RubricKind, Transcription};
use gradepipe_core::results::{ResultRecord, RunSummary};
use gradepipe_core::score::normalize_test_code;
use gradepipe_core::Score;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const QUEUE_LOG: &str = "queue.jsonl";
pub const VERDICT_LOG: &str = "verdicts.jsonl";

#[derive(Debug, Error)]
pub enum ReviewError {
    #[error("no review item `{0}`")]
    NotFound(String),
    #[error("item `{0}` is already resolved")]
    Conflict(String),
    #[error("{0}")]
    Validation(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} line {line}: {message}")]
    CorruptLog {
        path: String,
        line: usize,
        message: String,
    },
}

/// Stable item id: the first 16 hex digits of sha256(code NUL question).
pub fn item_id(test_code: &str, question_id: &str) -> String {
    let key = format!("{}\u{0}{}", normalize_test_code(test_code), question_id);
    sha256_hex(key.as_bytes())[..16].to_string()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ItemState {
    Open,
    Resolved,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RubricView {
    pub rubric_id: String,
    pub kind: RubricKind,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutcomeView {
    pub selected_score: Score,
    pub selection_rule: SelectionRule,
    pub selected_rubric_id: String,
    pub feedback: String,
    pub flags: BTreeSet<Flag>,
    pub runs: Vec<RunSummary>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewVerdict {
    pub reviewer_id: String,
    pub ocr_verdict: OcrVerdict,
    pub grading_verdict: GradingVerdict,
    pub reviewer_score: Score,
    #[serde(default)]
    pub note: String,
    pub timestamp: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewItem {
    pub item_id: String,
    pub test_code: String,
    pub quiz_id: String,
    pub question_id: String,
    pub max_points: Score,
    pub transcription: Transcription,
    pub outcome: OutcomeView,
    pub rubrics: Vec<RubricView>,
    pub image_refs: Vec<String>,
    pub state: ItemState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<ReviewVerdict>,
}

impl ReviewItem {
    pub fn from_result(record: &ResultRecord, rubrics: Vec<RubricView>) -> Self {
        ReviewItem {
            item_id: item_id(&record.test_code, &record.question_id),
            test_code: record.test_code.clone(),
            quiz_id: record.quiz_id.clone(),
            question_id: record.question_id.clone(),
            max_points: record.max_points,
            transcription: record.transcription.clone(),
            outcome: OutcomeView {
                selected_score: record.selected_score,
                selection_rule: record.selection_rule,
                selected_rubric_id: record.selected_rubric_id.clone(),
                feedback: record.feedback.clone(),
                flags: record.flags.clone(),
                runs: record.runs.clone(),
            },
            rubrics,
            image_refs: record.image_refs.clone(),
            state: ItemState::Open,
            verdict: None,
        }
    }

    pub fn summary(&self) -> ItemSummary {
        ItemSummary {
            item_id: self.item_id.clone(),
            test_code: self.test_code.clone(),
            quiz_id: self.quiz_id.clone(),
            question_id: self.question_id.clone(),
            selected_score: self.outcome.selected_score,
            max_points: self.max_points,
            flags: self.outcome.flags.clone(),
            state: self.state,
        }
    }

    fn verdict_record(&self) -> Option<VerdictRecord> {
        self.verdict.as_ref().map(|v| VerdictRecord {
            test_code: self.test_code.clone(),
            question_id: self.question_id.clone(),
            ocr_verdict: v.ocr_verdict,
            grading_verdict: v.grading_verdict,
            reviewer_score: v.reviewer_score,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemSummary {
    pub item_id: String,
    pub test_code: String,
    pub quiz_id: String,
    pub question_id: String,
    pub selected_score: Score,
    pub max_points: Score,
    pub flags: BTreeSet<Flag>,
    pub state: ItemState,
}

/// Which results to enqueue.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub enum FlagFilter {
    /// Any result carrying at least one flag.
    #[default]
    AnyFlag,
    /// Results carrying at least one of these flag names.
    Named(BTreeSet<String>),
}

impl FlagFilter {
    pub fn matches(&self, flags: &BTreeSet<Flag>) -> bool {
        match self {
            FlagFilter::AnyFlag => !flags.is_empty(),
            FlagFilter::Named(names) => flags.iter().any(|f| names.contains(f.name())),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct VerdictEvent {
    item_id: String,
    test_code: String,
    question_id: String,
    verdict: ReviewVerdict,
}

struct State {
    items: BTreeMap<String, ReviewItem>,
    /// Enqueue order, which the queue listing follows.
    order: Vec<String>,
    resolved: Vec<String>,
    queue_log: File,
    verdict_log: File,
}

/// The review queue. Every mutation is appended to a JSON Lines log under
/// one lock before it becomes visible, and reopening a state directory
/// replays both logs.
pub struct ReviewStore {
    dir: PathBuf,
    state: Mutex<State>,
}

fn open_append(path: &Path) -> Result<File, ReviewError> {
    OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|source| ReviewError::Io {
            path: path.display().to_string(),
            source,
        })
}

fn read_log<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, ReviewError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(source) => {
            return Err(ReviewError::Io {
                path: path.display().to_string(),
                source,
            })
        }
    };
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| ReviewError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| ReviewError::CorruptLog {
                path: path.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            })?,
        );
    }
    Ok(out)
}

fn append_line<T: Serialize>(file: &mut File, path: &Path, value: &T) -> Result<(), ReviewError> {
    let mut line = serde_json::to_vec(value).expect("event serializes");
    line.push(b'\n');
    file.write_all(&line)
        .and_then(|_| file.flush())
        .map_err(|source| ReviewError::Io {
            path: path.display().to_string(),
            source,
        })
}

impl ReviewStore {
    pub fn open(dir: &Path) -> Result<Self, ReviewError> {
        fs::create_dir_all(dir).map_err(|source| ReviewError::Io {
            path: dir.display().to_string(),
            source,
        })?;
        let mut items = BTreeMap::new();
        let mut order = Vec::new();
        let mut resolved = Vec::new();
        for item in read_log::<ReviewItem>(&dir.join(QUEUE_LOG))? {
            if !items.contains_key(&item.item_id) {
                order.push(item.item_id.clone());
                items.insert(item.item_id.clone(), item);
            }
        }
        for event in read_log::<VerdictEvent>(&dir.join(VERDICT_LOG))? {
            if let Some(item) = items.get_mut(&event.item_id) {
                if item.state == ItemState::Open {
                    item.state = ItemState::Resolved;
                    item.verdict = Some(event.verdict);
                    resolved.push(event.item_id);
                }
            }
        }
        Ok(ReviewStore {
            dir: dir.to_path_buf(),
            state: Mutex::new(State {
                items,
                order,
                resolved,
                queue_log: open_append(&dir.join(QUEUE_LOG))?,
                verdict_log: open_append(&dir.join(VERDICT_LOG))?,
            }),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, State> {
        self.state.lock().expect("review state poisoned")
    }

    /// Adds one Open item per matching result. Items already known are left
    /// untouched. Returns how many were added.
    pub fn enqueue_flagged(
        &self,
        results: &[ResultRecord],
        filter: &FlagFilter,
        rubrics: &dyn Fn(&ResultRecord) -> Vec<RubricView>,
    ) -> Result<usize, ReviewError> {
        let mut state = self.lock();
        let path = self.dir.join(QUEUE_LOG);
        let mut added = 0;
        for record in results.iter().filter(|r| filter.matches(&r.flags)) {
            let item = ReviewItem::from_result(record, rubrics(record));
            if state.items.contains_key(&item.item_id) {
                continue;
            }
            append_line(&mut state.queue_log, &path, &item)?;
            state.order.push(item.item_id.clone());
            state.items.insert(item.item_id.clone(), item);
            added += 1;
        }
        Ok(added)
    }

    pub fn queue(&self, filter: Option<ItemState>) -> Vec<ItemSummary> {
        let state = self.lock();
        state
            .order
            .iter()
            .map(|id| &state.items[id])
            .filter(|item| filter.is_none_or(|s| item.state == s))
            .map(ReviewItem::summary)
            .collect()
    }

    pub fn item(&self, id: &str) -> Result<ReviewItem, ReviewError> {
        self.lock()
            .items
            .get(id)
            .cloned()
            .ok_or_else(|| ReviewError::NotFound(id.to_string()))
    }

    /// Resolves an Open item. The first verdict wins; later ones conflict.
    pub fn resolve(&self, id: &str, verdict: ReviewVerdict) -> Result<ReviewItem, ReviewError> {
        let mut state = self.lock();
        let item = state
            .items
            .get(id)
            .ok_or_else(|| ReviewError::NotFound(id.to_string()))?;
        if item.state == ItemState::Resolved {
            return Err(ReviewError::Conflict(id.to_string()));
        }
        if verdict.reviewer_score > item.max_points {
            return Err(ReviewError::Validation(format!(
                "reviewer_score {} exceeds the question's {} points",
                verdict.reviewer_score, item.max_points
            )));
        }
        if verdict.reviewer_id.trim().is_empty() {
            return Err(ReviewError::Validation("reviewer_id is required".into()));
        }
        let event = VerdictEvent {
            item_id: id.to_string(),
            test_code: item.test_code.clone(),
            question_id: item.question_id.clone(),
            verdict: verdict.clone(),
        };
        let path = self.dir.join(VERDICT_LOG);
        append_line(&mut state.verdict_log, &path, &event)?;
        let item = state.items.get_mut(id).expect("checked above");
        item.state = ItemState::Resolved;
        item.verdict = Some(verdict);
        let item = item.clone();
        state.resolved.push(id.to_string());
        Ok(item)
    }

    /// Verdicts in resolution order, as analytics consumes them.
    pub fn verdicts(&self) -> Vec<VerdictRecord> {
        let state = self.lock();
        state
            .resolved
            .iter()
            .filter_map(|id| state.items[id].verdict_record())
            .collect()
    }

    pub fn stats(&self) -> VerdictDistribution {
        let state = self.lock();
        VerdictDistribution::from_verdicts(
            state
                .items
                .values()
                .filter_map(|i| i.verdict.as_ref())
                .map(|v| (v.ocr_verdict, v.grading_verdict)),
        )
    }

    /// Snapshot of every item, for replay comparisons.
    pub fn snapshot(&self) -> Vec<ReviewItem> {
        let state = self.lock();
        state
            .order
            .iter()
            .map(|id| state.items[id].clone())
            .collect()
    }
}
