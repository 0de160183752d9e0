//! Batch loading, TA-score linkage, and exclusion handling.
//!
//! A batch is one quiz manifest: the questions, their rubrics, and one
//! record per pre-cropped region image. Exclusions are decided per region
//! and never look at scores.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompting::{RubricKind, RubricLoadError, RubricSpec};
use crate::score::{
    normalize_test_code, QuestionError, QuestionSpec, RegionKind, Score, ScoreParseError,
    SubmissionId,
};

pub const BATCH_FILE: &str = "batch.json";

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("manifest {path}: {message}")]
    ManifestParse { path: String, message: String },
    #[error("region ({test_code}, {question_id}, {kind:?}) appears more than once")]
    DuplicateRegion {
        test_code: String,
        question_id: String,
        kind: RegionKind,
    },
    #[error("question `{question_id}` references rubric `{rubric_id}` but {path} does not exist")]
    DanglingRubric {
        question_id: String,
        rubric_id: String,
        path: String,
    },
    #[error("rubric `{rubric_id}` is for question `{found}` but is listed under `{expected}`")]
    RubricQuestion {
        rubric_id: String,
        expected: String,
        found: String,
    },
    #[error("question `{0}` has more than one {1:?} rubric")]
    DuplicateRubricKind(String, RubricKind),
    #[error("region references unknown question `{0}`")]
    UnknownQuestion(String),
    #[error("region has an empty test code")]
    EmptyTestCode,
    #[error("question `{0}` is defined twice")]
    DuplicateQuestion(String),
    #[error(transparent)]
    Question(#[from] QuestionError),
    #[error(transparent)]
    Rubric(#[from] RubricLoadError),
    #[error("TA export line {line}: {message}")]
    TaParse { line: u64, message: String },
    #[error("TA export has conflicting scores for ({test_code}, {quiz_id}, {question_id})")]
    ConflictingTaScores {
        test_code: String,
        quiz_id: String,
        question_id: String,
    },
    #[error("TA score {score} for ({test_code}, {question_id}) exceeds the question's {max}")]
    TaScoreExceedsMax {
        test_code: String,
        question_id: String,
        score: Score,
        max: Score,
    },
    #[error("exclusion policy mentions score field `{0}`; exclusions must not depend on scores")]
    PolicyReferencesScores(String),
    #[error("exclusion policy: {0}")]
    PolicyParse(String),
    #[error("region status cannot move from {from:?} to {to:?}")]
    InvalidTransition {
        from: RegionStatus,
        to: RegionStatus,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IngestError + '_ {
    move |source| IngestError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RegionStatus {
    Pending,
    Transcribed,
    Graded,
    Excluded,
}

impl RegionStatus {
    fn rank(self) -> u8 {
        match self {
            RegionStatus::Pending => 0,
            RegionStatus::Transcribed => 1,
            RegionStatus::Graded => 2,
            RegionStatus::Excluded => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ExclusionReason {
    SegmentationFailure,
    ScanQuality,
    UnmatchedTestCode,
    #[serde(rename = "MissingTAExport")]
    MissingTaExport,
    FirstQuizPolicy,
    SectionArtifact,
    ReviewerUnavailable,
}

impl ExclusionReason {
    pub fn as_str(self) -> &'static str {
        match self {
            ExclusionReason::SegmentationFailure => "SegmentationFailure",
            ExclusionReason::ScanQuality => "ScanQuality",
            ExclusionReason::UnmatchedTestCode => "UnmatchedTestCode",
            ExclusionReason::MissingTaExport => "MissingTAExport",
            ExclusionReason::FirstQuizPolicy => "FirstQuizPolicy",
            ExclusionReason::SectionArtifact => "SectionArtifact",
            ExclusionReason::ReviewerUnavailable => "ReviewerUnavailable",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionRecord {
    pub submission: SubmissionId,
    pub question_id: String,
    pub kind: RegionKind,
    pub image_ref: String,
    pub status: RegionStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exclusion: Option<ExclusionReason>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ta_score: Option<Score>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transcription: Option<String>,
}

impl RegionRecord {
    pub fn new(
        submission: SubmissionId,
        question_id: impl Into<String>,
        kind: RegionKind,
        image_ref: impl Into<String>,
    ) -> Self {
        RegionRecord {
            submission,
            question_id: question_id.into(),
            kind,
            image_ref: image_ref.into(),
            status: RegionStatus::Pending,
            exclusion: None,
            ta_score: None,
            transcription: None,
        }
    }

    pub fn key(&self) -> (String, String, RegionKind) {
        (
            normalize_test_code(&self.submission.test_code),
            self.question_id.clone(),
            self.kind,
        )
    }

    pub fn is_excluded(&self) -> bool {
        self.status == RegionStatus::Excluded
    }

    /// Moves Pending → Transcribed → Graded. Excluded records stay put.
    pub fn advance(&mut self, to: RegionStatus) -> Result<(), IngestError> {
        if to == RegionStatus::Excluded || self.status.rank() >= to.rank() {
            if self.status == to {
                return Ok(());
            }
            return Err(IngestError::InvalidTransition {
                from: self.status,
                to,
            });
        }
        if self.status == RegionStatus::Excluded {
            return Err(IngestError::InvalidTransition {
                from: self.status,
                to,
            });
        }
        self.status = to;
        Ok(())
    }

    /// Marks the record excluded. The first reason sticks.
    pub fn exclude(&mut self, reason: ExclusionReason) {
        if self.status != RegionStatus::Excluded {
            self.status = RegionStatus::Excluded;
            self.exclusion = Some(reason);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Batch {
    pub quiz_id: String,
    pub section_id: String,
    pub questions: Vec<QuestionSpec>,
    pub rubrics: BTreeMap<String, RubricSpec>,
    pub records: Vec<RegionRecord>,
    /// Directory that relative `image_ref`s resolve against.
    #[serde(default)]
    pub image_root: PathBuf,
}

#[derive(Debug, Deserialize)]
struct ManifestRegion {
    test_code: String,
    question_id: String,
    kind: RegionKind,
    image_ref: String,
    #[serde(default)]
    section_id: Option<String>,
}

#[derive(Debug, Deserialize)]
struct Manifest {
    quiz_id: String,
    section_id: String,
    #[serde(default)]
    questions: Vec<QuestionSpec>,
    #[serde(default)]
    regions: Vec<ManifestRegion>,
    #[serde(default = "default_rubric_dir")]
    rubric_dir: String,
}

fn default_rubric_dir() -> String {
    "rubrics".to_string()
}

/// Reads a quiz manifest. Rubric files are looked up as
/// `<rubric_dir>/<rubric_id>.json` next to the manifest.
pub fn load_manifest(path: &Path) -> Result<Batch, IngestError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| IngestError::ManifestParse {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
    let base = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let rubric_dir = base.join(&manifest.rubric_dir);

    let mut question_ids = BTreeSet::new();
    let mut rubrics = BTreeMap::new();
    for q in &manifest.questions {
        q.validate()?;
        if !question_ids.insert(q.question_id.clone()) {
            return Err(IngestError::DuplicateQuestion(q.question_id.clone()));
        }
        let mut kinds = BTreeSet::new();
        for rubric_id in &q.rubric_ids {
            let rubric_path = rubric_dir.join(format!("{rubric_id}.json"));
            if !rubric_path.exists() {
                return Err(IngestError::DanglingRubric {
                    question_id: q.question_id.clone(),
                    rubric_id: rubric_id.clone(),
                    path: rubric_path.display().to_string(),
                });
            }
            let rubric = RubricSpec::load(&rubric_path)?;
            if rubric.question_id != q.question_id {
                return Err(IngestError::RubricQuestion {
                    rubric_id: rubric_id.clone(),
                    expected: q.question_id.clone(),
                    found: rubric.question_id,
                });
            }
            if !kinds.insert(rubric.kind) {
                return Err(IngestError::DuplicateRubricKind(
                    q.question_id.clone(),
                    rubric.kind,
                ));
            }
            rubrics.insert(rubric_id.clone(), rubric);
        }
    }

    let mut seen = BTreeSet::new();
    let mut records = Vec::with_capacity(manifest.regions.len());
    for region in manifest.regions {
        if region.test_code.trim().is_empty() {
            return Err(IngestError::EmptyTestCode);
        }
        if !question_ids.contains(&region.question_id) {
            return Err(IngestError::UnknownQuestion(region.question_id));
        }
        let record = RegionRecord::new(
            SubmissionId {
                test_code: region.test_code.trim().to_string(),
                quiz_id: manifest.quiz_id.clone(),
                section_id: region
                    .section_id
                    .unwrap_or_else(|| manifest.section_id.clone()),
            },
            region.question_id,
            region.kind,
            region.image_ref,
        );
        if !seen.insert(record.key()) {
            return Err(IngestError::DuplicateRegion {
                test_code: record.submission.test_code,
                question_id: record.question_id,
                kind: record.kind,
            });
        }
        records.push(record);
    }

    Ok(Batch {
        quiz_id: manifest.quiz_id,
        section_id: manifest.section_id,
        questions: manifest.questions,
        rubrics,
        records,
        image_root: base,
    })
}

impl Batch {
    pub fn question(&self, question_id: &str) -> Option<&QuestionSpec> {
        self.questions.iter().find(|q| q.question_id == question_id)
    }

    pub fn included(&self) -> impl Iterator<Item = &RegionRecord> {
        self.records.iter().filter(|r| !r.is_excluded())
    }

    pub fn excluded(&self) -> impl Iterator<Item = (&RegionRecord, ExclusionReason)> {
        self.records
            .iter()
            .filter_map(|r| r.exclusion.filter(|_| r.is_excluded()).map(|e| (r, e)))
    }

    pub fn image_path(&self, record: &RegionRecord) -> PathBuf {
        let p = Path::new(&record.image_ref);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.image_root.join(p)
        }
    }

    pub fn rubrics_for(&self, question_id: &str) -> Vec<&RubricSpec> {
        self.question(question_id)
            .map(|q| {
                q.rubric_ids
                    .iter()
                    .filter_map(|id| self.rubrics.get(id))
                    .collect()
            })
            .unwrap_or_default()
    }

    pub fn save(&self, dir: &Path) -> Result<(), IngestError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = dir.join(BATCH_FILE);
        let mut text = serde_json::to_string_pretty(self).expect("batch serializes");
        text.push('\n');
        fs::write(&path, text).map_err(io_err(&path))
    }

    pub fn load_state(dir: &Path) -> Result<Self, IngestError> {
        let path = dir.join(BATCH_FILE);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        serde_json::from_str(&text).map_err(|e| IngestError::ManifestParse {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    /// Marks every record matched by `policy` as excluded, keeping the
    /// records in place.
    pub fn mark_exclusions(&mut self, policy: &ExclusionPolicy) {
        for record in &mut self.records {
            if record.is_excluded() {
                continue;
            }
            if let Some(reason) = policy.reason_for(record) {
                record.exclude(reason);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaScoreRecord {
    pub test_code: String,
    pub quiz_id: String,
    pub question_id: String,
    pub ta_score: Score,
}

/// Reads `test_code,quiz_id,question_id,score` rows.
pub fn read_ta_export<R: Read>(reader: R) -> Result<Vec<TaScoreRecord>, IngestError> {
    let mut csv = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = csv
        .headers()
        .map_err(|e| IngestError::TaParse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let expected = ["test_code", "quiz_id", "question_id", "score"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(IngestError::TaParse {
            line: 1,
            message: format!("expected header {}", expected.join(",")),
        });
    }
    let mut out = Vec::new();
    for row in csv.records() {
        let row = row.map_err(|e| IngestError::TaParse {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let score =
            Score::from_decimal(&row[3]).map_err(|e: ScoreParseError| IngestError::TaParse {
                line,
                message: e.to_string(),
            })?;
        out.push(TaScoreRecord {
            test_code: row[0].to_string(),
            quiz_id: row[1].to_string(),
            question_id: row[2].to_string(),
            ta_score: score,
        });
    }
    Ok(out)
}

pub fn read_ta_export_file(path: &Path) -> Result<Vec<TaScoreRecord>, IngestError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    read_ta_export(file)
}

/// Joins TA scores onto the batch by (test code, quiz, question). Codes are
/// compared after trimming and case-folding; anything that fails to link is
/// excluded rather than reported as an error.
pub fn link_ta_scores(mut batch: Batch, export: &[TaScoreRecord]) -> Result<Batch, IngestError> {
    let mut index: HashMap<(String, String, String), Score> = HashMap::new();
    let mut exported_questions = BTreeSet::new();
    for row in export {
        let key = (
            normalize_test_code(&row.test_code),
            row.quiz_id.trim().to_string(),
            row.question_id.trim().to_string(),
        );
        if key.1 == batch.quiz_id {
            exported_questions.insert(key.2.clone());
        }
        if let Some(previous) = index.insert(key.clone(), row.ta_score) {
            if previous != row.ta_score {
                return Err(IngestError::ConflictingTaScores {
                    test_code: row.test_code.clone(),
                    quiz_id: key.1,
                    question_id: key.2,
                });
            }
        }
    }

    let max_points: HashMap<String, Score> = batch
        .questions
        .iter()
        .map(|q| (q.question_id.clone(), q.max_points))
        .collect();

    for record in &mut batch.records {
        if record.is_excluded() {
            continue;
        }
        if !exported_questions.contains(&record.question_id) {
            record.exclude(ExclusionReason::MissingTaExport);
            continue;
        }
        let key = (
            normalize_test_code(&record.submission.test_code),
            record.submission.quiz_id.clone(),
            record.question_id.clone(),
        );
        match index.get(&key) {
            Some(&score) => {
                let max = max_points[&record.question_id];
                if score > max {
                    return Err(IngestError::TaScoreExceedsMax {
                        test_code: record.submission.test_code.clone(),
                        question_id: record.question_id.clone(),
                        score,
                        max,
                    });
                }
                record.ta_score = Some(score);
            }
            None => record.exclude(ExclusionReason::UnmatchedTestCode),
        }
    }
    Ok(batch)
}

/// Region attributes an exclusion rule may test. There is deliberately no
/// variant for any score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PolicyField {
    QuizId,
    SectionId,
    TestCode,
    QuestionId,
    Kind,
}

impl PolicyField {
    pub fn parse(name: &str) -> Result<Self, IngestError> {
        let lowered = name.trim().to_ascii_lowercase();
        match lowered.as_str() {
            "quiz_id" => Ok(PolicyField::QuizId),
            "section_id" => Ok(PolicyField::SectionId),
            "test_code" => Ok(PolicyField::TestCode),
            "question_id" => Ok(PolicyField::QuestionId),
            "kind" => Ok(PolicyField::Kind),
            other if is_score_like(other) => {
                Err(IngestError::PolicyReferencesScores(name.to_string()))
            }
            _ => Err(IngestError::PolicyParse(format!("unknown field `{name}`"))),
        }
    }

    fn value<'a>(self, record: &'a RegionRecord) -> std::borrow::Cow<'a, str> {
        match self {
            PolicyField::QuizId => record.submission.quiz_id.as_str().into(),
            PolicyField::SectionId => record.submission.section_id.as_str().into(),
            PolicyField::TestCode => normalize_test_code(&record.submission.test_code).into(),
            PolicyField::QuestionId => record.question_id.as_str().into(),
            PolicyField::Kind => record.kind.as_str().into(),
        }
    }
}

fn is_score_like(field: &str) -> bool {
    [
        "score", "gap", "grade", "points", "verdict", "flag", "mae", "within",
    ]
    .iter()
    .any(|w| field.contains(w))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExclusionRule {
    pub when: Vec<(PolicyField, String)>,
    pub reason: ExclusionReason,
}

impl ExclusionRule {
    pub fn new(reason: ExclusionReason) -> Self {
        ExclusionRule {
            when: Vec::new(),
            reason,
        }
    }

    pub fn when(mut self, field: PolicyField, value: impl Into<String>) -> Self {
        let value = value.into();
        let value = if field == PolicyField::TestCode {
            normalize_test_code(&value)
        } else {
            value
        };
        self.when.push((field, value));
        self
    }

    fn matches(&self, record: &RegionRecord) -> bool {
        !self.when.is_empty() && self.when.iter().all(|(f, v)| f.value(record) == v.as_str())
    }
}

/// Ordered rules; the first matching rule decides the reason.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ExclusionPolicy {
    pub rules: Vec<ExclusionRule>,
}

#[derive(Deserialize)]
struct RawPolicy {
    #[serde(default)]
    rules: Vec<RawRule>,
}

#[derive(Deserialize)]
struct RawRule {
    when: BTreeMap<String, serde_json::Value>,
    reason: ExclusionReason,
}

impl ExclusionPolicy {
    /// Parses `{"rules": [{"when": {"quiz_id": "Q1"}, "reason": "FirstQuizPolicy"}]}`.
    pub fn from_json(text: &str) -> Result<Self, IngestError> {
        let raw: RawPolicy =
            serde_json::from_str(text).map_err(|e| IngestError::PolicyParse(e.to_string()))?;
        let mut rules = Vec::new();
        for raw_rule in raw.rules {
            let mut rule = ExclusionRule::new(raw_rule.reason);
            for (name, value) in raw_rule.when {
                let field = PolicyField::parse(&name)?;
                let value = match value {
                    serde_json::Value::String(s) => s,
                    other => {
                        return Err(IngestError::PolicyParse(format!(
                            "value for `{name}` must be a string, got {other}"
                        )))
                    }
                };
                rule = rule.when(field, value);
            }
            if rule.when.is_empty() {
                return Err(IngestError::PolicyParse(
                    "rule with an empty `when` would match nothing".into(),
                ));
            }
            rules.push(rule);
        }
        Ok(ExclusionPolicy { rules })
    }

    pub fn load(path: &Path) -> Result<Self, IngestError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_json(&text)
    }

    pub fn reason_for(&self, record: &RegionRecord) -> Option<ExclusionReason> {
        self.rules
            .iter()
            .find(|rule| rule.matches(record))
            .map(|rule| rule.reason)
    }
}

/// Splits a batch into included records and excluded ones with reasons.
/// Records already excluded (for example by linking) land on the excluded
/// side with their original reason.
pub fn apply_exclusions(
    batch: Batch,
    policy: &ExclusionPolicy,
) -> (Batch, Vec<(RegionRecord, ExclusionReason)>) {
    let Batch {
        quiz_id,
        section_id,
        questions,
        rubrics,
        records,
        image_root,
    } = batch;
    let mut included = Vec::new();
    let mut excluded = Vec::new();
    for mut record in records {
        if !record.is_excluded() {
            if let Some(reason) = policy.reason_for(&record) {
                record.exclude(reason);
            }
        }
        match (record.is_excluded(), record.exclusion) {
            (true, Some(reason)) => excluded.push((record, reason)),
            _ => included.push(record),
        }
    }
    (
        Batch {
            quiz_id,
            section_id,
            questions,
            rubrics,
            records: included,
            image_root,
        },
        excluded,
    )
}

/// One tab-separated line per excluded (test code, question, reason).
pub fn write_exclusion_ledger<'a, W: Write>(
    out: &mut W,
    excluded: impl IntoIterator<Item = (&'a RegionRecord, ExclusionReason)>,
) -> std::io::Result<()> {
    let mut written = BTreeSet::new();
    for (record, reason) in excluded {
        let line = format!(
            "{}\t{}\t{}",
            record.submission.test_code,
            record.question_id,
            reason.as_str()
        );
        if written.insert(line.clone()) {
            writeln!(out, "{line}")?;
        }
    }
    Ok(())
}
