//! Everything that is sent to a model backend: OCR prompts, the grading
//! system message, rubric-conditioned grading prompts, and rubric drafts.
//!
//! All builders are pure. Equal inputs produce byte-identical bundles, and
//! a bundle's digest is what the replay backend keys on.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Backend, BackendError};
use crate::digest::sha256_hex;
use crate::score::{QuestionSpec, RegionKind, Score};
use crate::template::{TemplateError, TemplateKind, TemplateSet};

/// The grading principles placed after the expert-grader preamble.
pub const DEFAULT_PRINCIPLES: [&str; 5] = [
    "Distinguish between mathematically correct statements and incorrect reasoning.",
    "Avoid contradictions in feedback.",
    "Do not penalize false starts if later corrected.",
    "Provide concise, constructive explanations for point deductions.",
    "Write feedback in clear, natural language suitable for students.",
];

pub const NO_STYLE_PENALTY: &str = "No style penalties. If the mathematics and the required \
justification are correct, do not deduct points for handwriting quality, minor typos, informal \
wording, or nonstandard but clear notation.";

pub const OCR_LENIENCY: &str = "Final-answer transcription. The final-answer box is transcribed \
with little surrounding context and may contain OCR misreadings. If the final answer shows a \
small character or formatting discrepancy but the correct value is clearly supported by the \
solution steps, do not deduct points for that discrepancy.";

/// Upper bound on temperature for scored grading calls without an audit note.
pub const MAX_GRADING_TEMPERATURE: f64 = 0.1;

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("question `{0}` has an empty statement")]
    EmptyStatement(String),
    #[error("rubric `{rubric_id}` belongs to question `{rubric_question}`, not `{question}`")]
    RubricQuestionMismatch {
        rubric_id: String,
        rubric_question: String,
        question: String,
    },
    #[error("temperature {0} is outside [0, 1]")]
    TemperatureOutOfRange(f64),
    #[error("temperature {0} exceeds 0.1 for a scored bundle and no audit note was given")]
    UnauditedTemperature(f64),
    #[error("no principles given for the system message")]
    NoPrinciples,
    #[error(transparent)]
    Template(#[from] TemplateError),
}

#[derive(Debug, Error)]
pub enum DraftError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("draft rubric is malformed: {0}")]
    MalformedDraft(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum ResponseContract {
    FreeText,
    ScoredFeedback { max_points: Score },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub system_message: String,
    pub user_message: String,
    pub temperature: f64,
    pub response_contract: ResponseContract,
    /// Reason recorded when a scored bundle runs above the usual ceiling.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature_audit: Option<String>,
    /// Which repeated sample this bundle requests. Part of the digest so that
    /// repeated runs of the same prompt map to distinct replay fixtures; live
    /// backends ignore it.
    #[serde(default)]
    pub sample_index: u32,
}

impl PromptBundle {
    pub fn digest(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("bundle serializes");
        sha256_hex(&canonical)
    }

    pub fn with_sample_index(mut self, index: u32) -> Self {
        self.sample_index = index;
        self
    }

    /// Sets the temperature, enforcing the grading ceiling unless an audit
    /// note explains the override.
    pub fn with_temperature(
        mut self,
        temperature: f64,
        audit: Option<&str>,
    ) -> Result<Self, PromptError> {
        if !(0.0..=1.0).contains(&temperature) {
            return Err(PromptError::TemperatureOutOfRange(temperature));
        }
        let scored = matches!(
            self.response_contract,
            ResponseContract::ScoredFeedback { .. }
        );
        if scored && temperature > MAX_GRADING_TEMPERATURE && audit.is_none() {
            return Err(PromptError::UnauditedTemperature(temperature));
        }
        self.temperature = temperature;
        self.temperature_audit = audit.map(str::to_string);
        Ok(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RubricKind {
    Flexible,
    Fixed,
}

impl RubricKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RubricKind::Flexible => "flexible",
            RubricKind::Fixed => "fixed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RubricSpec {
    pub rubric_id: String,
    pub question_id: String,
    pub kind: RubricKind,
    pub body: String,
    #[serde(default)]
    pub guidance_blocks: Vec<String>,
    pub max_points: Score,
    /// Set on model-drafted rubrics until a person has signed off.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub review_required: bool,
}

#[derive(Debug, Error)]
pub enum RubricLoadError {
    #[error("reading rubric {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parsing rubric {path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

impl RubricSpec {
    pub fn load(path: &Path) -> Result<Self, RubricLoadError> {
        let text = fs::read_to_string(path).map_err(|source| RubricLoadError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|source| RubricLoadError::Parse {
            path: path.display().to_string(),
            source,
        })
    }
}

/// Student text for one question: the worked solution region and the
/// final-answer box, transcribed separately.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transcription {
    pub solution: String,
    pub final_answer: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradingOptions {
    pub temperature: f64,
    pub temperature_audit: Option<String>,
    /// Appends [`OCR_LENIENCY`] to the rubric guidance when not already there.
    pub ocr_leniency: bool,
}

impl Default for GradingOptions {
    fn default() -> Self {
        GradingOptions {
            temperature: 0.0,
            temperature_audit: None,
            ocr_leniency: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Prompter {
    templates: TemplateSet,
    system_message: String,
}

impl Prompter {
    pub fn new(templates: TemplateSet) -> Self {
        let system_message = build_system_message(&templates, &DEFAULT_PRINCIPLES)
            .expect("default principles are non-empty");
        Prompter {
            templates,
            system_message,
        }
    }

    pub fn with_principles<S: AsRef<str>>(
        templates: TemplateSet,
        principles: &[S],
    ) -> Result<Self, PromptError> {
        let system_message = build_system_message(&templates, principles)?;
        Ok(Prompter {
            templates,
            system_message,
        })
    }

    pub fn templates(&self) -> &TemplateSet {
        &self.templates
    }

    pub fn template_version(&self) -> &str {
        self.templates.version()
    }

    pub fn system_message(&self) -> &str {
        &self.system_message
    }

    /// OCR prompt for one region. The problem statement comes first so the
    /// transcriber can use it to resolve ambiguous handwriting.
    pub fn build_ocr_prompt(
        &self,
        question: &QuestionSpec,
        kind: RegionKind,
    ) -> Result<PromptBundle, PromptError> {
        let statement = question.statement.trim();
        if statement.is_empty() {
            return Err(PromptError::EmptyStatement(question.question_id.clone()));
        }
        let template = match kind {
            RegionKind::Solution => TemplateKind::OcrSolution,
            RegionKind::FinalAnswer => TemplateKind::OcrFinal,
        };
        let values = BTreeMap::from([("statement", statement.to_string())]);
        let user_message = self.templates.get(template).render(&values)?;
        Ok(PromptBundle {
            system_message: String::new(),
            user_message,
            temperature: 0.0,
            response_contract: ResponseContract::FreeText,
            temperature_audit: None,
            sample_index: 0,
        })
    }

    pub fn build_grading_prompt(
        &self,
        transcription: &Transcription,
        question: &QuestionSpec,
        rubric: &RubricSpec,
        options: &GradingOptions,
    ) -> Result<PromptBundle, PromptError> {
        if rubric.question_id != question.question_id {
            return Err(PromptError::RubricQuestionMismatch {
                rubric_id: rubric.rubric_id.clone(),
                rubric_question: rubric.question_id.clone(),
                question: question.question_id.clone(),
            });
        }
        let mut guidance: Vec<&str> = rubric.guidance_blocks.iter().map(String::as_str).collect();
        if options.ocr_leniency && !guidance.contains(&OCR_LENIENCY) {
            guidance.push(OCR_LENIENCY);
        }
        let final_answer = transcription.final_answer.trim();
        let values = BTreeMap::from([
            ("max_points", question.max_points.render_compact()),
            ("statement", question.statement.trim().to_string()),
            ("reference_solution", or_none(&question.reference_solution)),
            (
                "reference_final_answer",
                or_none(&question.reference_final_answer),
            ),
            ("rubric_kind", rubric.kind.as_str().to_string()),
            ("rubric_body", rubric.body.trim_end().to_string()),
            ("guidance", guidance.join("\n\n")),
            ("solution_text", transcription.solution.trim().to_string()),
            (
                "final_answer_text",
                if final_answer.is_empty() {
                    "(blank)".to_string()
                } else {
                    final_answer.to_string()
                },
            ),
        ]);
        let user_message = self.templates.get(TemplateKind::Grade).render(&values)?;
        PromptBundle {
            system_message: self.system_message.clone(),
            user_message,
            temperature: 0.0,
            response_contract: ResponseContract::ScoredFeedback {
                max_points: question.max_points,
            },
            temperature_audit: None,
            sample_index: 0,
        }
        .with_temperature(options.temperature, options.temperature_audit.as_deref())
    }

    /// Asks `backend` for a new rubric modelled on `exemplar`. The result is
    /// always marked `review_required`.
    pub fn draft_rubric(
        &self,
        question: &QuestionSpec,
        exemplar: &RubricSpec,
        backend: &dyn Backend,
    ) -> Result<RubricSpec, DraftError> {
        let values = BTreeMap::from([
            ("rubric_kind", exemplar.kind.as_str().to_string()),
            ("max_points", question.max_points.render_compact()),
            ("statement", question.statement.trim().to_string()),
            ("reference_solution", or_none(&question.reference_solution)),
            ("exemplar_body", exemplar.body.trim_end().to_string()),
        ]);
        let user_message = self
            .templates
            .get(TemplateKind::DraftRubric)
            .render(&values)
            .map_err(PromptError::from)?;
        let bundle = PromptBundle {
            system_message: String::new(),
            user_message,
            temperature: 0.0,
            response_contract: ResponseContract::FreeText,
            temperature_audit: None,
            sample_index: 0,
        };
        let text = backend.complete(&bundle)?;
        let body = text.trim().to_string();
        if body.is_empty() {
            return Err(DraftError::MalformedDraft("empty rubric text".into()));
        }
        if exemplar.kind == RubricKind::Fixed {
            let parts = point_breakdown(&body);
            if parts.is_empty() {
                return Err(DraftError::MalformedDraft(
                    "fixed rubric has no point breakdown".into(),
                ));
            }
            let total: u32 = parts.iter().map(|s| s.tenths()).sum();
            if total != question.max_points.tenths() {
                return Err(DraftError::MalformedDraft(format!(
                    "component points sum to {} but the question is worth {}",
                    Score::from_tenths(total),
                    question.max_points
                )));
            }
        }
        Ok(RubricSpec {
            rubric_id: format!("{}-{}-draft", question.question_id, exemplar.kind.as_str()),
            question_id: question.question_id.clone(),
            kind: exemplar.kind,
            body,
            guidance_blocks: exemplar.guidance_blocks.clone(),
            max_points: question.max_points,
            review_required: true,
        })
    }
}

impl Default for Prompter {
    fn default() -> Self {
        Prompter::new(TemplateSet::builtin())
    }
}

fn or_none(text: &str) -> String {
    let t = text.trim();
    if t.is_empty() {
        "(none provided)".to_string()
    } else {
        t.to_string()
    }
}

pub fn build_system_message<S: AsRef<str>>(
    templates: &TemplateSet,
    principles: &[S],
) -> Result<String, PromptError> {
    if principles.is_empty() {
        return Err(PromptError::NoPrinciples);
    }
    let numbered: Vec<String> = principles
        .iter()
        .enumerate()
        .map(|(i, p)| format!("{}. {}", i + 1, p.as_ref().trim()))
        .collect();
    let values = BTreeMap::from([("principles", numbered.join("\n"))]);
    Ok(templates.get(TemplateKind::System).render(&values)?)
}

/// Point values written as `(1.0 pt)`, `(0.5 pts)`, `(2 points)` in a rubric
/// body, in order of appearance.
pub fn point_breakdown(body: &str) -> Vec<Score> {
    let mut found = Vec::new();
    let mut rest = body;
    while let Some(open) = rest.find('(') {
        rest = &rest[open + 1..];
        let Some(close) = rest.find(')') else { break };
        let inner = rest[..close].trim();
        let mut words = inner.split_whitespace();
        if let (Some(num), Some(unit), None) = (words.next(), words.next(), words.next()) {
            if matches!(unit, "pt" | "pts" | "point" | "points" | "pt." | "pts.") {
                if let Ok(score) = Score::from_decimal(num) {
                    found.push(score);
                }
            }
        }
    }
    found
}
