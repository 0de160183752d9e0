//! Turning transcriptions into grades: single runs, the dual-rubric max
//! rule, closest-to-mean selection over repeated runs, and review flags.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{
    complete_with_retry, parse_scored_feedback, Backend, CallLog, RetryError, DEFAULT_MAX_RETRIES,
};
use crate::prompting::{
    GradingOptions, PromptError, Prompter, RubricKind, RubricSpec, Transcription,
};
use crate::score::{Grid, QuestionSpec, Score};

pub const BLANK_FEEDBACK: &str = "No work detected.";

#[derive(Debug, Error)]
pub enum GradeError {
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Backend(#[from] RetryError),
    #[error("no runs to select from")]
    EmptyRuns,
    #[error("runs mix rubrics `{0}` and `{1}`")]
    MixedRubrics(String, String),
    #[error("question `{question_id}` has no {kind:?} rubric")]
    MissingRubric {
        question_id: String,
        kind: RubricKind,
    },
    #[error("unknown grading mode `{0}` (expected single, dual, stabilized or dual+stabilized)")]
    UnknownMode(String),
    #[error("run count must be at least {min}, got {got}")]
    TooFewRuns { min: u32, got: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GradeRun {
    pub run_index: u32,
    pub rubric_id: String,
    pub model_id: String,
    pub score: Score,
    pub feedback: String,
    pub bundle_hash: String,
    pub template_version: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SelectionRule {
    SingleRun,
    MaxRule,
    ClosestToMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Flag {
    FullCreditSplit,
    CorrectAnswerUnderCredited,
    /// Largest per-rubric run spread, in tenths of a point (rounded).
    HighVariance(u32),
    OffGridScore,
    OcrSuspect,
}

impl Flag {
    pub fn name(self) -> &'static str {
        match self {
            Flag::FullCreditSplit => "FullCreditSplit",
            Flag::CorrectAnswerUnderCredited => "CorrectAnswerUnderCredited",
            Flag::HighVariance(_) => "HighVariance",
            Flag::OffGridScore => "OffGridScore",
            Flag::OcrSuspect => "OcrSuspect",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GradeOutcome {
    pub selected_score: Score,
    pub selected_feedback: String,
    pub selected_rubric_id: String,
    pub selection_rule: SelectionRule,
    pub runs: Vec<GradeRun>,
    pub flags: BTreeSet<Flag>,
}

impl GradeOutcome {
    pub fn single(run: GradeRun) -> Self {
        GradeOutcome {
            selected_score: run.score,
            selected_feedback: run.feedback.clone(),
            selected_rubric_id: run.rubric_id.clone(),
            selection_rule: SelectionRule::SingleRun,
            runs: vec![run],
            flags: BTreeSet::new(),
        }
    }

    pub fn with_flags(mut self, flags: BTreeSet<Flag>) -> Self {
        self.flags = flags;
        self
    }
}

/// How many grading calls to make per question and how to combine them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum GradeMode {
    /// One run with the first listed rubric.
    Single,
    Dual,
    Stabilized {
        runs: u32,
    },
    DualStabilized {
        runs: u32,
    },
}

impl GradeMode {
    pub const DEFAULT_RUNS: u32 = 3;

    pub fn parse(mode: &str, runs: u32) -> Result<Self, GradeError> {
        let needs_runs = |m: GradeMode| {
            if runs < 2 {
                Err(GradeError::TooFewRuns { min: 2, got: runs })
            } else {
                Ok(m)
            }
        };
        match mode {
            "single" => Ok(GradeMode::Single),
            "dual" => Ok(GradeMode::Dual),
            "stabilized" => needs_runs(GradeMode::Stabilized { runs }),
            "dual+stabilized" => needs_runs(GradeMode::DualStabilized { runs }),
            other => Err(GradeError::UnknownMode(other.to_string())),
        }
    }

    pub fn runs(self) -> u32 {
        match self {
            GradeMode::Single | GradeMode::Dual => 1,
            GradeMode::Stabilized { runs } | GradeMode::DualStabilized { runs } => runs,
        }
    }

    pub fn is_dual(self) -> bool {
        matches!(self, GradeMode::Dual | GradeMode::DualStabilized { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlagConfig {
    /// Spread at or above which HighVariance fires.
    pub high_variance_tenths: u32,
    pub grid: Grid,
    /// A final-answer box transcribed into more non-empty lines than this
    /// most likely picked up worked solution text.
    pub ocr_suspect_lines: usize,
}

impl Default for FlagConfig {
    fn default() -> Self {
        FlagConfig {
            high_variance_tenths: 5,
            grid: Grid::HALF_POINT,
            ocr_suspect_lines: 4,
        }
    }
}

/// Everything a grading call needs besides the student text.
pub struct Grader<'a> {
    pub prompter: &'a Prompter,
    pub backend: &'a dyn Backend,
    pub options: GradingOptions,
    pub max_retries: u32,
    pub log: &'a CallLog,
}

impl<'a> Grader<'a> {
    pub fn new(prompter: &'a Prompter, backend: &'a dyn Backend, log: &'a CallLog) -> Self {
        Grader {
            prompter,
            backend,
            options: GradingOptions::default(),
            max_retries: DEFAULT_MAX_RETRIES,
            log,
        }
    }

    /// One scored call. Blank work scores zero without contacting the
    /// backend.
    pub fn grade_once(
        &self,
        transcription: &Transcription,
        question: &QuestionSpec,
        rubric: &RubricSpec,
        run_index: u32,
    ) -> Result<GradeRun, GradeError> {
        let bundle = self
            .prompter
            .build_grading_prompt(transcription, question, rubric, &self.options)?
            .with_sample_index(run_index);
        let mut run = GradeRun {
            run_index,
            rubric_id: rubric.rubric_id.clone(),
            model_id: self.backend.model_id().to_string(),
            score: Score::ZERO,
            feedback: BLANK_FEEDBACK.to_string(),
            bundle_hash: bundle.digest(),
            template_version: self.prompter.template_version().to_string(),
        };
        if is_blank(transcription) {
            return Ok(run);
        }
        let text = complete_with_retry(self.backend, &bundle, self.max_retries, self.log)?;
        let parsed = parse_scored_feedback(&text, question.max_points)
            .expect("complete_with_retry validated the response");
        run.score = parsed.score;
        run.feedback = parsed.feedback;
        Ok(run)
    }

    /// Both rubrics, one call each, combined by the max rule.
    pub fn grade_dual(
        &self,
        transcription: &Transcription,
        question: &QuestionSpec,
        flexible: &RubricSpec,
        fixed: &RubricSpec,
    ) -> Result<GradeOutcome, GradeError> {
        let a = self.grade_once(transcription, question, flexible, 0)?;
        let b = self.grade_once(transcription, question, fixed, 0)?;
        Ok(max_rule(vec![
            (RubricKind::Flexible, GradeOutcome::single(a)),
            (RubricKind::Fixed, GradeOutcome::single(b)),
        ]))
    }

    /// `runs` calls with one rubric, combined by closest-to-mean.
    pub fn grade_stabilized(
        &self,
        transcription: &Transcription,
        question: &QuestionSpec,
        rubric: &RubricSpec,
        runs: u32,
    ) -> Result<GradeOutcome, GradeError> {
        let collected = (0..runs)
            .map(|i| self.grade_once(transcription, question, rubric, i))
            .collect::<Result<Vec<_>, _>>()?;
        stabilize(collected)
    }

    /// Grades one question under `mode` and attaches review flags.
    pub fn grade(
        &self,
        transcription: &Transcription,
        question: &QuestionSpec,
        rubrics: &[&RubricSpec],
        mode: GradeMode,
        flags: &FlagConfig,
    ) -> Result<GradeOutcome, GradeError> {
        let pick = |kind: RubricKind| {
            rubrics
                .iter()
                .copied()
                .find(|r| r.kind == kind)
                .ok_or_else(|| GradeError::MissingRubric {
                    question_id: question.question_id.clone(),
                    kind,
                })
        };
        let outcome = match mode {
            GradeMode::Single => {
                let rubric = rubrics.first().copied().ok_or(GradeError::MissingRubric {
                    question_id: question.question_id.clone(),
                    kind: RubricKind::Flexible,
                })?;
                GradeOutcome::single(self.grade_once(transcription, question, rubric, 0)?)
            }
            GradeMode::Dual => self.grade_dual(
                transcription,
                question,
                pick(RubricKind::Flexible)?,
                pick(RubricKind::Fixed)?,
            )?,
            GradeMode::Stabilized { runs } => {
                let rubric = rubrics.first().copied().ok_or(GradeError::MissingRubric {
                    question_id: question.question_id.clone(),
                    kind: RubricKind::Flexible,
                })?;
                self.grade_stabilized(transcription, question, rubric, runs)?
            }
            GradeMode::DualStabilized { runs } => {
                let flexible = pick(RubricKind::Flexible)?;
                let fixed = pick(RubricKind::Fixed)?;
                let a = self.grade_stabilized(transcription, question, flexible, runs)?;
                let b = self.grade_stabilized(transcription, question, fixed, runs)?;
                max_rule(vec![(RubricKind::Flexible, a), (RubricKind::Fixed, b)])
            }
        };
        let found = detect_flags(&outcome, question, &transcription.final_answer, flags);
        Ok(outcome.with_flags(found))
    }
}

fn is_blank(t: &Transcription) -> bool {
    t.solution.trim().is_empty() && t.final_answer.trim().is_empty()
}

/// Picks the highest-scoring per-rubric outcome. Equal scores go to the
/// flexible rubric, then to the earlier entry. All runs are kept.
pub fn max_rule(per_rubric: Vec<(RubricKind, GradeOutcome)>) -> GradeOutcome {
    assert!(
        !per_rubric.is_empty(),
        "max_rule needs at least one outcome"
    );
    let best = per_rubric
        .iter()
        .enumerate()
        .max_by(|(i, (ka, a)), (j, (kb, b))| {
            a.selected_score
                .cmp(&b.selected_score)
                .then_with(|| (*kb == RubricKind::Fixed).cmp(&(*ka == RubricKind::Fixed)))
                .then_with(|| j.cmp(i))
        })
        .map(|(i, _)| i)
        .expect("non-empty");
    let chosen = &per_rubric[best].1;
    let mut outcome = GradeOutcome {
        selected_score: chosen.selected_score,
        selected_feedback: chosen.selected_feedback.clone(),
        selected_rubric_id: chosen.selected_rubric_id.clone(),
        selection_rule: SelectionRule::MaxRule,
        runs: Vec::new(),
        flags: BTreeSet::new(),
    };
    for (_, o) in per_rubric {
        outcome.runs.extend(o.runs);
        outcome.flags.extend(o.flags);
    }
    outcome
}

/// Returns the run whose score is closest to the run mean; ties go to the
/// lowest run index. The mean is compared exactly as `sum / k`.
pub fn stabilize(runs: Vec<GradeRun>) -> Result<GradeOutcome, GradeError> {
    let first = runs.first().ok_or(GradeError::EmptyRuns)?;
    if let Some(other) = runs.iter().find(|r| r.rubric_id != first.rubric_id) {
        return Err(GradeError::MixedRubrics(
            first.rubric_id.clone(),
            other.rubric_id.clone(),
        ));
    }
    let k = runs.len() as i64;
    let sum: i64 = runs.iter().map(|r| r.score.tenths() as i64).sum();
    let chosen = runs
        .iter()
        .min_by_key(|r| ((k * r.score.tenths() as i64 - sum).abs(), r.run_index))
        .expect("non-empty");
    Ok(GradeOutcome {
        selected_score: chosen.score,
        selected_feedback: chosen.feedback.clone(),
        selected_rubric_id: chosen.rubric_id.clone(),
        selection_rule: SelectionRule::ClosestToMean,
        runs,
        flags: BTreeSet::new(),
    })
}

/// Trim, case-fold, collapse whitespace, drop math delimiters and trailing
/// punctuation.
pub fn normalize_answer(text: &str) -> String {
    let lowered = text.trim().to_lowercase();
    let collapsed = lowered.split_whitespace().collect::<Vec<_>>().join(" ");
    let unwrapped = collapsed.replace('$', "");
    unwrapped
        .trim()
        .trim_end_matches(['.', ',', ';', ':', '!', '?'])
        .trim()
        .to_string()
}

/// Population standard deviation numerator: k·Σs² − (Σs)², so that
/// σ² = value / k², in tenths².
fn spread_numerator(scores: &[u32]) -> u64 {
    let k = scores.len() as u64;
    let sum: u64 = scores.iter().map(|&s| s as u64).sum();
    let sq: u64 = scores.iter().map(|&s| (s as u64) * (s as u64)).sum();
    k * sq - sum * sum
}

/// Population standard deviation of scores given in tenths, in tenths.
pub fn sigma_tenths(scores: &[u32]) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    (spread_numerator(scores) as f64).sqrt() / scores.len() as f64
}

pub fn detect_flags(
    outcome: &GradeOutcome,
    question: &QuestionSpec,
    final_answer_text: &str,
    config: &FlagConfig,
) -> BTreeSet<Flag> {
    let mut flags = BTreeSet::new();
    let max = question.max_points;

    let mut groups: BTreeMap<&str, Vec<u32>> = BTreeMap::new();
    for run in &outcome.runs {
        groups
            .entry(run.rubric_id.as_str())
            .or_default()
            .push(run.score.tenths());
    }
    let mut widest: Option<u64> = None;
    for scores in groups.values().filter(|s| s.len() >= 2) {
        if scores.iter().filter(|&&s| s == max.tenths()).count() == 1 {
            flags.insert(Flag::FullCreditSplit);
        }
        let k = scores.len() as u64;
        let numerator = spread_numerator(scores);
        let threshold = config.high_variance_tenths as u64;
        if numerator >= threshold * threshold * k * k {
            // compare σ values across groups by σ² = numerator / k²
            let sigma = sigma_tenths(scores).round() as u64;
            widest = Some(widest.map_or(sigma, |w| w.max(sigma)));
        }
    }
    if let Some(sigma) = widest {
        flags.insert(Flag::HighVariance(sigma as u32));
    }

    let reference = normalize_answer(&question.reference_final_answer);
    if !reference.is_empty()
        && normalize_answer(final_answer_text) == reference
        && outcome.selected_score < max
    {
        flags.insert(Flag::CorrectAnswerUnderCredited);
    }

    if outcome
        .runs
        .iter()
        .any(|r| r.score.off_grid_for(config.grid))
    {
        flags.insert(Flag::OffGridScore);
    }

    let lines = final_answer_text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .count();
    if lines > config.ocr_suspect_lines {
        flags.insert(Flag::OcrSuspect);
    }
    flags
}
