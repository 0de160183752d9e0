//! Fixed-point scores and the shared identifiers every stage passes around.
//!
//! A [`Score`] is stored in tenths of a point so that equality, grid checks,
//! and difference counting are exact. Floating point only appears once a
//! value crosses into the analytics layer.

use std::fmt;
use std::str::FromStr;

use serde::de::{self, Deserializer, Visitor};
use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScoreParseError {
    #[error("empty score")]
    Empty,
    #[error("score `{0}` is not a decimal number")]
    NotNumeric(String),
    #[error("score `{0}` is negative")]
    Negative(String),
    #[error("score `{0}` has more than one fractional digit")]
    TooPrecise(String),
    #[error("score `{0}` is too large")]
    Overflow(String),
}

/// Scoring granularity in tenths of a point. The default grid is 0.5 pt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Grid(u32);

impl Grid {
    pub const HALF_POINT: Grid = Grid(5);

    pub fn from_tenths(step: u32) -> Option<Self> {
        (step > 0).then_some(Grid(step))
    }

    pub fn step_tenths(self) -> u32 {
        self.0
    }

    pub fn contains(self, score: Score) -> bool {
        score.tenths.is_multiple_of(self.0)
    }
}

impl Default for Grid {
    fn default() -> Self {
        Grid::HALF_POINT
    }
}

/// A non-negative number of points, held as tenths (2.5 pts is `25`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Score {
    tenths: u32,
}

impl Score {
    pub const ZERO: Score = Score { tenths: 0 };

    pub const fn from_tenths(tenths: u32) -> Self {
        Score { tenths }
    }

    pub fn from_points(points: u32) -> Self {
        Score {
            tenths: points * 10,
        }
    }

    /// Parses a non-negative decimal with at most one fractional digit.
    pub fn from_decimal(text: &str) -> Result<Self, ScoreParseError> {
        let text = text.trim();
        if text.is_empty() {
            return Err(ScoreParseError::Empty);
        }
        if let Some(digits) = text.strip_prefix('-') {
            // "-0" is still a negative literal as far as imports are concerned
            if !digits.is_empty() && digits.chars().all(|c| c.is_ascii_digit() || c == '.') {
                return Err(ScoreParseError::Negative(text.to_string()));
            }
            return Err(ScoreParseError::NotNumeric(text.to_string()));
        }
        let text_no_plus = text.strip_prefix('+').unwrap_or(text);
        let (whole, frac) = match text_no_plus.split_once('.') {
            Some((w, f)) => (w, Some(f)),
            None => (text_no_plus, None),
        };
        let digits_ok = |s: &str| s.chars().all(|c| c.is_ascii_digit());
        if !digits_ok(whole) || frac.is_some_and(|f| !digits_ok(f)) {
            return Err(ScoreParseError::NotNumeric(text.to_string()));
        }
        if whole.is_empty() && frac.is_none_or(str::is_empty) {
            return Err(ScoreParseError::NotNumeric(text.to_string()));
        }
        let frac_digit = match frac {
            None | Some("") => 0,
            Some(f) if f.len() == 1 => u32::from(f.as_bytes()[0] - b'0'),
            Some(_) => return Err(ScoreParseError::TooPrecise(text.to_string())),
        };
        let whole_val: u32 = if whole.is_empty() {
            0
        } else {
            whole
                .parse()
                .map_err(|_| ScoreParseError::Overflow(text.to_string()))?
        };
        whole_val
            .checked_mul(10)
            .and_then(|t| t.checked_add(frac_digit))
            .map(Score::from_tenths)
            .ok_or_else(|| ScoreParseError::Overflow(text.to_string()))
    }

    pub const fn tenths(self) -> u32 {
        self.tenths
    }

    pub fn points(self) -> f64 {
        f64::from(self.tenths) / 10.0
    }

    /// Off the default 0.5-point grid.
    pub fn off_grid(self) -> bool {
        !Grid::default().contains(self)
    }

    pub fn off_grid_for(self, grid: Grid) -> bool {
        !grid.contains(self)
    }

    pub fn checked_add(self, other: Score) -> Option<Score> {
        self.tenths
            .checked_add(other.tenths)
            .map(Score::from_tenths)
    }

    /// Decimal rendering with a trailing `.0` dropped: `5`, `2.5`.
    pub fn render_compact(self) -> String {
        if self.tenths.is_multiple_of(10) {
            (self.tenths / 10).to_string()
        } else {
            self.to_string()
        }
    }
}

/// Signed gap `ai - ta` in tenths.
pub fn score_gap(ai: Score, ta: Score) -> i64 {
    i64::from(ai.tenths) - i64::from(ta.tenths)
}

impl fmt::Display for Score {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.tenths / 10, self.tenths % 10)
    }
}

impl FromStr for Score {
    type Err = ScoreParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Score::from_decimal(s)
    }
}

// Scores travel through JSON as plain numbers (`2.5`). Decoding accepts
// integers, floats with at most one decimal, or decimal strings.
impl Serialize for Score {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        if self.tenths.is_multiple_of(10) {
            serializer.serialize_u32(self.tenths / 10)
        } else {
            serializer.serialize_f64(self.points())
        }
    }
}

impl<'de> Deserialize<'de> for Score {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct ScoreVisitor;

        impl Visitor<'_> for ScoreVisitor {
            type Value = Score;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a non-negative score with at most one decimal")
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> Result<Score, E> {
                u32::try_from(v)
                    .ok()
                    .and_then(|p| p.checked_mul(10))
                    .map(Score::from_tenths)
                    .ok_or_else(|| E::custom(format!("score {v} is too large")))
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> Result<Score, E> {
                if v < 0 {
                    return Err(E::custom(format!("score {v} is negative")));
                }
                self.visit_u64(v as u64)
            }

            fn visit_f64<E: de::Error>(self, v: f64) -> Result<Score, E> {
                score_from_f64(v).map_err(E::custom)
            }

            fn visit_str<E: de::Error>(self, v: &str) -> Result<Score, E> {
                Score::from_decimal(v).map_err(E::custom)
            }
        }

        deserializer.deserialize_any(ScoreVisitor)
    }
}

/// Converts a backend-supplied float to tenths, rejecting anything finer than
/// one decimal.
pub fn score_from_f64(v: f64) -> Result<Score, ScoreParseError> {
    let text = v.to_string();
    if !v.is_finite() {
        return Err(ScoreParseError::NotNumeric(text));
    }
    if v < 0.0 {
        return Err(ScoreParseError::Negative(text));
    }
    let scaled = v * 10.0;
    let rounded = scaled.round();
    if (scaled - rounded).abs() > 1e-6 {
        return Err(ScoreParseError::TooPrecise(text));
    }
    if rounded > f64::from(u32::MAX) {
        return Err(ScoreParseError::Overflow(text));
    }
    Ok(Score::from_tenths(rounded as u32))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RegionKind {
    Solution,
    FinalAnswer,
}

impl RegionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RegionKind::Solution => "Solution",
            RegionKind::FinalAnswer => "FinalAnswer",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SubmissionId {
    pub test_code: String,
    pub quiz_id: String,
    pub section_id: String,
}

/// Trim plus ASCII/Unicode case-fold; the only normalization applied to
/// test codes before linking.
pub fn normalize_test_code(code: &str) -> String {
    code.trim().to_lowercase()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionSpec {
    pub question_id: String,
    pub statement: String,
    #[serde(default)]
    pub reference_solution: String,
    #[serde(default)]
    pub reference_final_answer: String,
    pub max_points: Score,
    pub rubric_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum QuestionError {
    #[error("question `{0}` has non-positive max_points")]
    ZeroMaxPoints(String),
    #[error("question `{0}` lists no rubrics")]
    NoRubrics(String),
    #[error("question `{0}` lists rubric `{1}` more than once")]
    RepeatedRubric(String, String),
}

impl QuestionSpec {
    pub fn validate(&self) -> Result<(), QuestionError> {
        if self.max_points == Score::ZERO {
            return Err(QuestionError::ZeroMaxPoints(self.question_id.clone()));
        }
        if self.rubric_ids.is_empty() {
            return Err(QuestionError::NoRubrics(self.question_id.clone()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for id in &self.rubric_ids {
            if !seen.insert(id) {
                return Err(QuestionError::RepeatedRubric(
                    self.question_id.clone(),
                    id.clone(),
                ));
            }
        }
        Ok(())
    }
}
