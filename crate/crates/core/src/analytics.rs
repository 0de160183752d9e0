//! Evaluation statistics over AI and TA scores.
//!
//! Inputs are fixed-point tenths, so every counting statistic (zero spread,
//! zero delta, within-one) is exact. Floating point appears only in the
//! final division for means and spreads.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::Read;

use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

use crate::ingest::TaScoreRecord;
use crate::results::ResultRecord;
use crate::score::{normalize_test_code, score_gap, Score};

#[derive(Debug, Error, PartialEq)]
pub enum AnalyticsError {
    #[error("no records to summarize")]
    EmptyInput,
    #[error("questions do not all have the same number of runs ({0} vs {1})")]
    RaggedRuns(usize, usize),
    #[error("need at least two runs per question, got {0}")]
    TooFewRuns(usize),
    #[error("run sets cover different questions (first difference: `{0}`)")]
    KeyMismatch(String),
    #[error("histogram bin width must be positive")]
    ZeroBinWidth,
    #[error("verdict table line {line}: {message}")]
    VerdictParse { line: u64, message: String },
}

/// Points from tenths.
fn pts(tenths: f64) -> f64 {
    tenths / 10.0
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GapRecord {
    pub test_code: String,
    pub quiz_id: String,
    pub question_id: String,
    pub ai_score: Score,
    pub ta_score: Score,
    pub gap_tenths: i64,
}

impl GapRecord {
    pub fn new(
        test_code: &str,
        quiz_id: &str,
        question_id: &str,
        ai_score: Score,
        ta_score: Score,
    ) -> Self {
        GapRecord {
            test_code: test_code.to_string(),
            quiz_id: quiz_id.to_string(),
            question_id: question_id.to_string(),
            ai_score,
            ta_score,
            gap_tenths: score_gap(ai_score, ta_score),
        }
    }
}

/// Joins results with the TA export by (normalized code, quiz, question).
/// Returns the linked gaps and the results that found no TA row.
pub fn link_gaps<'a>(
    results: &'a [ResultRecord],
    ta: &[TaScoreRecord],
) -> (Vec<GapRecord>, Vec<&'a ResultRecord>) {
    let index: HashMap<(String, String, String), Score> = ta
        .iter()
        .map(|t| {
            (
                (
                    normalize_test_code(&t.test_code),
                    t.quiz_id.trim().to_string(),
                    t.question_id.trim().to_string(),
                ),
                t.ta_score,
            )
        })
        .collect();
    let mut linked = Vec::new();
    let mut unmatched = Vec::new();
    for r in results {
        let key = (
            normalize_test_code(&r.test_code),
            r.quiz_id.clone(),
            r.question_id.clone(),
        );
        match index.get(&key) {
            Some(&ta_score) => linked.push(GapRecord::new(
                &r.test_code,
                &r.quiz_id,
                &r.question_id,
                r.selected_score,
                ta_score,
            )),
            None => unmatched.push(r),
        }
    }
    (linked, unmatched)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryStats {
    pub n: usize,
    pub mean_gap: f64,
    pub std_gap: f64,
    pub mae: f64,
    pub within1_pct: f64,
}

pub const WITHIN_ONE_TENTHS: u64 = 10;

pub fn summarize_gaps(records: &[GapRecord]) -> Result<SummaryStats, AnalyticsError> {
    summarize_gaps_within(records, WITHIN_ONE_TENTHS)
}

/// Like [`summarize_gaps`] with a custom inclusive agreement bound.
pub fn summarize_gaps_within(
    records: &[GapRecord],
    bound_tenths: u64,
) -> Result<SummaryStats, AnalyticsError> {
    if records.is_empty() {
        return Err(AnalyticsError::EmptyInput);
    }
    let n = records.len() as i128;
    let mut sum: i128 = 0;
    let mut sum_sq: i128 = 0;
    let mut sum_abs: i128 = 0;
    let mut within = 0usize;
    for r in records {
        let g = r.gap_tenths as i128;
        sum += g;
        sum_sq += g * g;
        sum_abs += g.abs();
        if r.gap_tenths.unsigned_abs() <= bound_tenths {
            within += 1;
        }
    }
    // population variance in tenths²: (n·Σg² − (Σg)²) / n²
    let spread = (n * sum_sq - sum * sum) as f64;
    Ok(SummaryStats {
        n: records.len(),
        mean_gap: pts(sum as f64 / n as f64),
        std_gap: pts(spread.sqrt() / n as f64),
        mae: pts(sum_abs as f64 / n as f64),
        within1_pct: 100.0 * within as f64 / records.len() as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuizRow {
    pub quiz_id: String,
    #[serde(flatten)]
    pub stats: SummaryStats,
}

/// Per-quiz summaries sorted by quiz id.
pub fn quiz_table(records: &[GapRecord]) -> Result<Vec<QuizRow>, AnalyticsError> {
    if records.is_empty() {
        return Err(AnalyticsError::EmptyInput);
    }
    let mut groups: BTreeMap<&str, Vec<GapRecord>> = BTreeMap::new();
    for r in records {
        groups
            .entry(r.quiz_id.as_str())
            .or_default()
            .push(r.clone());
    }
    groups
        .into_iter()
        .map(|(quiz, group)| {
            Ok(QuizRow {
                quiz_id: quiz.to_string(),
                stats: summarize_gaps(&group)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityStats {
    pub model_id: String,
    pub n_questions: usize,
    pub runs_per_question: usize,
    pub mean_sigma: f64,
    pub prob_sigma_zero: f64,
}

fn check_runs<K: fmt::Display>(runs: &BTreeMap<K, Vec<Score>>) -> Result<usize, AnalyticsError> {
    let k = runs
        .values()
        .next()
        .ok_or(AnalyticsError::EmptyInput)?
        .len();
    if let Some(other) = runs.values().find(|v| v.len() != k) {
        return Err(AnalyticsError::RaggedRuns(k, other.len()));
    }
    Ok(k)
}

/// Within-model spread: per-question population σ over k runs.
pub fn stability<K: fmt::Display>(
    runs_by_question: &BTreeMap<K, Vec<Score>>,
    model_id: &str,
) -> Result<StabilityStats, AnalyticsError> {
    let k = check_runs(runs_by_question)?;
    if k < 2 {
        return Err(AnalyticsError::TooFewRuns(k));
    }
    let mut sigma_total = 0.0;
    let mut zero = 0usize;
    for scores in runs_by_question.values() {
        let tenths: Vec<u32> = scores.iter().map(|s| s.tenths()).collect();
        let sigma = crate::grade::sigma_tenths(&tenths);
        if tenths.iter().all(|&t| t == tenths[0]) {
            zero += 1;
        }
        sigma_total += sigma;
    }
    let n = runs_by_question.len();
    Ok(StabilityStats {
        model_id: model_id.to_string(),
        n_questions: n,
        runs_per_question: k,
        mean_sigma: pts(sigma_total / n as f64),
        prob_sigma_zero: zero as f64 / n as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossModelDelta {
    pub n_questions: usize,
    pub mean_delta: f64,
    pub mean_abs_delta: f64,
    pub prob_delta_zero: f64,
}

/// Compares per-question run means: Δ = mean(a) − mean(b).
pub fn cross_model<K: Ord + fmt::Display>(
    runs_a: &BTreeMap<K, Vec<Score>>,
    runs_b: &BTreeMap<K, Vec<Score>>,
) -> Result<CrossModelDelta, AnalyticsError> {
    if runs_a.is_empty() && runs_b.is_empty() {
        return Err(AnalyticsError::EmptyInput);
    }
    if let Some(k) = runs_a.keys().find(|k| !runs_b.contains_key(*k)) {
        return Err(AnalyticsError::KeyMismatch(k.to_string()));
    }
    if let Some(k) = runs_b.keys().find(|k| !runs_a.contains_key(*k)) {
        return Err(AnalyticsError::KeyMismatch(k.to_string()));
    }
    let mut total = 0.0;
    let mut total_abs = 0.0;
    let mut zero = 0usize;
    for (key, a) in runs_a {
        let b = &runs_b[key];
        if a.is_empty() || b.is_empty() {
            return Err(AnalyticsError::TooFewRuns(0));
        }
        let sum_a: i64 = a.iter().map(|s| s.tenths() as i64).sum();
        let sum_b: i64 = b.iter().map(|s| s.tenths() as i64).sum();
        let (ka, kb) = (a.len() as i64, b.len() as i64);
        // Δ·ka·kb in tenths, exact
        let scaled = sum_a * kb - sum_b * ka;
        if scaled == 0 {
            zero += 1;
        }
        let delta = scaled as f64 / (ka * kb) as f64;
        total += delta;
        total_abs += delta.abs();
    }
    let n = runs_a.len();
    Ok(CrossModelDelta {
        n_questions: n,
        mean_delta: pts(total / n as f64),
        mean_abs_delta: pts(total_abs / n as f64),
        prob_delta_zero: zero as f64 / n as f64,
    })
}

/// A percentage held in hundredths, rounded half up.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Percent(pub u32);

impl Percent {
    pub fn of(count: usize, total: usize) -> Percent {
        if total == 0 {
            return Percent(0);
        }
        let (c, n) = (count as u64, total as u64);
        Percent(((c * 20_000 + n) / (2 * n)) as u32)
    }

    pub fn hundredths(self) -> u32 {
        self.0
    }

    pub fn as_f64(self) -> f64 {
        self.0 as f64 / 100.0
    }
}

impl fmt::Display for Percent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{:02}", self.0 / 100, self.0 % 100)
    }
}

impl Serialize for Percent {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(self.as_f64())
    }
}

impl<'de> Deserialize<'de> for Percent {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = f64::deserialize(d)?;
        Ok(Percent((v * 100.0).round() as u32))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum OcrVerdict {
    Acceptable,
    Problematic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum GradingVerdict {
    Correct,
    Acceptable,
    Incorrect,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictRecord {
    pub test_code: String,
    pub question_id: String,
    pub ocr_verdict: OcrVerdict,
    pub grading_verdict: GradingVerdict,
    pub reviewer_score: Score,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct OcrSplit {
    pub acceptable: Percent,
    pub problematic: Percent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GradingSplit {
    pub correct: Percent,
    pub acceptable: Percent,
    pub incorrect: Percent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct VerdictDistribution {
    pub n: usize,
    pub ocr: OcrSplit,
    pub grading: GradingSplit,
}

impl VerdictDistribution {
    /// Counting version that accepts no input, as live dashboards need.
    pub fn from_verdicts(verdicts: impl IntoIterator<Item = (OcrVerdict, GradingVerdict)>) -> Self {
        let mut n = 0;
        let mut ocr = [0usize; 2];
        let mut grading = [0usize; 3];
        for (o, g) in verdicts {
            n += 1;
            ocr[o as usize] += 1;
            grading[g as usize] += 1;
        }
        VerdictDistribution {
            n,
            ocr: OcrSplit {
                acceptable: Percent::of(ocr[0], n),
                problematic: Percent::of(ocr[1], n),
            },
            grading: GradingSplit {
                correct: Percent::of(grading[0], n),
                acceptable: Percent::of(grading[1], n),
                incorrect: Percent::of(grading[2], n),
            },
        }
    }
}

pub fn verdict_distribution(
    verdicts: &[VerdictRecord],
) -> Result<VerdictDistribution, AnalyticsError> {
    if verdicts.is_empty() {
        return Err(AnalyticsError::EmptyInput);
    }
    Ok(VerdictDistribution::from_verdicts(
        verdicts.iter().map(|v| (v.ocr_verdict, v.grading_verdict)),
    ))
}

/// Reads `test_code,question_id,ocr_verdict,grading_verdict,reviewer_score`.
pub fn read_verdicts<R: Read>(reader: R) -> Result<Vec<VerdictRecord>, AnalyticsError> {
    let mut csv = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut out = Vec::new();
    for row in csv.deserialize::<VerdictRow>() {
        let row = row.map_err(|e| AnalyticsError::VerdictParse {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            message: e.to_string(),
        })?;
        out.push(VerdictRecord {
            test_code: row.test_code,
            question_id: row.question_id,
            ocr_verdict: row.ocr_verdict,
            grading_verdict: row.grading_verdict,
            reviewer_score: row.reviewer_score,
        });
    }
    Ok(out)
}

/// Writes the verdict table in the format [`read_verdicts`] accepts.
pub fn write_verdicts<W: std::io::Write>(out: W, verdicts: &[VerdictRecord]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "test_code",
        "question_id",
        "ocr_verdict",
        "grading_verdict",
        "reviewer_score",
    ])?;
    for v in verdicts {
        w.write_record([
            v.test_code.as_str(),
            v.question_id.as_str(),
            ocr_name(v.ocr_verdict),
            grading_name(v.grading_verdict),
            &v.reviewer_score.render_compact(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn ocr_name(v: OcrVerdict) -> &'static str {
    match v {
        OcrVerdict::Acceptable => "Acceptable",
        OcrVerdict::Problematic => "Problematic",
    }
}

fn grading_name(v: GradingVerdict) -> &'static str {
    match v {
        GradingVerdict::Correct => "Correct",
        GradingVerdict::Acceptable => "Acceptable",
        GradingVerdict::Incorrect => "Incorrect",
    }
}

#[derive(Deserialize)]
struct VerdictRow {
    test_code: String,
    question_id: String,
    ocr_verdict: OcrVerdict,
    grading_verdict: GradingVerdict,
    reviewer_score: Score,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bin {
    /// Bin centre in tenths; the bin covers [centre − w/2, centre + w − w/2).
    pub center_tenths: i64,
    pub count: usize,
}

/// Counts values into bins centred on multiples of `width`, including empty
/// bins between the smallest and largest occupied one.
pub fn histogram(values: &[i64], width_tenths: i64) -> Result<Vec<Bin>, AnalyticsError> {
    if width_tenths <= 0 {
        return Err(AnalyticsError::ZeroBinWidth);
    }
    let index = |v: i64| (v + width_tenths / 2).div_euclid(width_tenths);
    let mut counts: BTreeMap<i64, usize> = BTreeMap::new();
    for &v in values {
        *counts.entry(index(v)).or_default() += 1;
    }
    let (Some(&lo), Some(&hi)) = (counts.keys().next(), counts.keys().next_back()) else {
        return Ok(Vec::new());
    };
    Ok((lo..=hi)
        .map(|i| Bin {
            center_tenths: i * width_tenths,
            count: counts.get(&i).copied().unwrap_or(0),
        })
        .collect())
}
