//! Student-facing result messages and their batch export.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::Provenance;
use crate::grade::Flag;
use crate::results::ResultRecord;
use crate::score::{normalize_test_code, Score};
use crate::template::{Template, TemplateError, TemplateKind, TemplateSet};

pub const DEFAULT_NAME: &str = "Student";
pub const PENDING_POINTS: &str = "pending human review";
pub const PENDING_EVALUATION: &str = "This question has been flagged for a second look by \
course staff. Its score will be shared once the review is complete.";
pub const PROVISIONAL_NOTE: &str = "(provisional; questions pending review are not included)";

#[derive(Debug, Error)]
pub enum MessageError {
    #[error("question `{0}` appears more than once for one student")]
    DuplicateQuestion(String),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("roster line {line}: {message}")]
    Roster { line: u64, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MessagePolicy {
    pub withhold_flagged: bool,
    /// Flags (by name) that hold a question back when withholding is on.
    pub withhold_flags: BTreeSet<String>,
}

impl Default for MessagePolicy {
    fn default() -> Self {
        MessagePolicy {
            withhold_flagged: true,
            withhold_flags: [Flag::FullCreditSplit, Flag::CorrectAnswerUnderCredited]
                .iter()
                .map(|f| f.name().to_string())
                .collect(),
        }
    }
}

impl MessagePolicy {
    pub fn withholds(&self, flags: &BTreeSet<Flag>) -> bool {
        self.withhold_flagged && flags.iter().any(|f| self.withhold_flags.contains(f.name()))
    }
}

/// One question as it should appear in a message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuestionResult<'a> {
    pub question_id: &'a str,
    /// 1-based position of the question in the quiz.
    pub number: usize,
    pub score: Score,
    pub feedback: &'a str,
    pub flags: &'a BTreeSet<Flag>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MessageSection {
    pub question_id: String,
    pub number: usize,
    /// None when the question is withheld.
    pub points: Option<Score>,
    pub evaluation: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudentMessage {
    pub test_code: String,
    pub salutation_name: String,
    pub per_question: Vec<MessageSection>,
    /// Sum of the displayed points.
    pub total: Score,
    pub provisional: bool,
    pub disclaimer: String,
    pub text: String,
}

fn render_section(s: &MessageSection) -> String {
    let points = s
        .points
        .map(Score::render_compact)
        .unwrap_or_else(|| PENDING_POINTS.to_string());
    format!(
        "Question {}:\n\nPoints: {}\n\nEvaluation: {}",
        s.number,
        points,
        s.evaluation.trim()
    )
}

/// Text following the "Total Score" line of the template.
fn disclaimer_of(template: &Template) -> String {
    let source = template.source();
    source
        .find("{{total}}")
        .map(|i| source[i + "{{total}}".len()..].trim().to_string())
        .unwrap_or_default()
}

pub fn render_message(
    test_code: &str,
    questions: &[QuestionResult<'_>],
    roster_name: Option<&str>,
    policy: &MessagePolicy,
    template: &Template,
) -> Result<StudentMessage, MessageError> {
    let mut seen = BTreeSet::new();
    for q in questions {
        if !seen.insert(q.question_id) {
            return Err(MessageError::DuplicateQuestion(q.question_id.to_string()));
        }
    }
    let mut ordered: Vec<&QuestionResult<'_>> = questions.iter().collect();
    ordered.sort_by_key(|q| q.number);

    let mut total = Score::ZERO;
    let mut provisional = false;
    let mut sections = Vec::with_capacity(ordered.len());
    for q in ordered {
        let section = if policy.withholds(q.flags) {
            provisional = true;
            MessageSection {
                question_id: q.question_id.to_string(),
                number: q.number,
                points: None,
                evaluation: PENDING_EVALUATION.to_string(),
            }
        } else {
            total = total
                .checked_add(q.score)
                .expect("question totals fit in u32 tenths");
            MessageSection {
                question_id: q.question_id.to_string(),
                number: q.number,
                points: Some(q.score),
                evaluation: q.feedback.to_string(),
            }
        };
        sections.push(section);
    }

    let name = roster_name
        .map(str::trim)
        .filter(|n| !n.is_empty())
        .unwrap_or(DEFAULT_NAME)
        .to_string();
    let mut total_text = total.render_compact();
    if provisional {
        total_text.push(' ');
        total_text.push_str(PROVISIONAL_NOTE);
    }
    let body = sections
        .iter()
        .map(render_section)
        .collect::<Vec<_>>()
        .join("\n\n");
    let values = BTreeMap::from([
        ("name", name.clone()),
        ("sections", body),
        ("total", total_text),
    ]);
    let mut text = template.render(&values)?;
    if sections.is_empty() {
        // no sections: drop the blank block the placeholder leaves behind
        text = text.replacen("\n\n\n\n", "\n\n", 1);
    }
    Ok(StudentMessage {
        test_code: test_code.to_string(),
        salutation_name: name,
        per_question: sections,
        total,
        provisional,
        disclaimer: disclaimer_of(template),
        text,
    })
}

/// Reads a `test_code,name` roster keyed by normalized code.
pub fn read_roster<R: Read>(reader: R) -> Result<BTreeMap<String, String>, MessageError> {
    #[derive(Deserialize)]
    struct Row {
        test_code: String,
        name: String,
    }
    let mut csv = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut out = BTreeMap::new();
    for row in csv.deserialize::<Row>() {
        let row = row.map_err(|e| MessageError::Roster {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            message: e.to_string(),
        })?;
        out.insert(normalize_test_code(&row.test_code), row.name);
    }
    Ok(out)
}

/// Test codes are student-chosen; keep file names to a safe alphabet.
pub fn file_stem(test_code: &str) -> String {
    test_code
        .trim()
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Orders ids like P2 before P10.
fn natural_key(id: &str) -> Vec<(String, u64)> {
    let mut parts = Vec::new();
    let mut text = String::new();
    let mut digits = String::new();
    for c in id.chars() {
        if c.is_ascii_digit() {
            digits.push(c);
        } else {
            if !digits.is_empty() {
                parts.push((
                    std::mem::take(&mut text),
                    digits.parse().unwrap_or(u64::MAX),
                ));
                digits.clear();
            }
            text.push(c);
        }
    }
    parts.push((text, digits.parse().unwrap_or(0)));
    parts
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct IndexRow {
    pub test_code: String,
    pub file: String,
    pub total: String,
    pub provisional_flag: bool,
}

/// Renders one message per student into `dir` plus `index.csv`.
pub fn write_messages(
    dir: &Path,
    results: &[ResultRecord],
    roster: &BTreeMap<String, String>,
    policy: &MessagePolicy,
    templates: &TemplateSet,
) -> Result<Vec<IndexRow>, MessageError> {
    let io = |path: &Path| {
        let path = path.display().to_string();
        move |source| MessageError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;

    let mut numbering: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for r in results {
        numbering
            .entry(&r.quiz_id)
            .or_default()
            .push(&r.question_id);
    }
    let numbering: BTreeMap<&str, BTreeMap<&str, usize>> = numbering
        .into_iter()
        .map(|(quiz, mut ids)| {
            ids.sort_by_key(|id| natural_key(id));
            ids.dedup();
            let positions = ids
                .into_iter()
                .enumerate()
                .map(|(i, id)| (id, i + 1))
                .collect();
            (quiz, positions)
        })
        .collect();

    let mut by_student: BTreeMap<(String, String), Vec<&ResultRecord>> = BTreeMap::new();
    for r in results {
        by_student
            .entry((normalize_test_code(&r.test_code), r.quiz_id.clone()))
            .or_default()
            .push(r);
    }
    let multi_quiz = numbering.len() > 1;

    let template = templates.get(TemplateKind::Message);
    let mut index = Vec::new();
    for ((code, quiz), records) in &by_student {
        let questions: Vec<QuestionResult<'_>> = records
            .iter()
            .map(|r| QuestionResult {
                question_id: &r.question_id,
                number: numbering[quiz.as_str()][r.question_id.as_str()],
                score: r.selected_score,
                feedback: &r.feedback,
                flags: &r.flags,
            })
            .collect();
        let test_code = records[0].test_code.trim();
        let message = render_message(
            test_code,
            &questions,
            roster.get(code).map(String::as_str),
            policy,
            template,
        )?;
        let stem = if multi_quiz {
            format!("{}_{}", file_stem(test_code), file_stem(quiz))
        } else {
            file_stem(test_code)
        };
        let file = format!("{stem}.txt");
        let path = dir.join(&file);
        fs::write(&path, &message.text).map_err(io(&path))?;
        index.push(IndexRow {
            test_code: test_code.to_string(),
            file,
            total: message.total.render_compact(),
            provisional_flag: message.provisional,
        });
    }

    let provenance: BTreeSet<Provenance> = results.iter().map(ResultRecord::provenance).collect();
    let mut csv_text = String::new();
    for p in &provenance {
        csv_text.push_str(&format!(
            "# template_version={} config_hash={} message_template={}\n",
            p.template_version,
            p.config_hash,
            templates.version()
        ));
    }
    let mut writer = csv::Writer::from_writer(Vec::new());
    for row in &index {
        writer.serialize(row).expect("index row serializes");
    }
    if index.is_empty() {
        writer
            .write_record(["test_code", "file", "total", "provisional_flag"])
            .expect("header writes");
    }
    csv_text.push_str(&String::from_utf8(writer.into_inner().expect("in-memory")).expect("utf8"));
    let index_path: PathBuf = dir.join("index.csv");
    fs::write(&index_path, csv_text).map_err(io(&index_path))?;
    Ok(index)
}
