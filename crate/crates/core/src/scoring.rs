//! Exact aggregation of sub-metric ratings into modality scores and the
//! weighted composite.
//!
//! All stored scores are rationals. Ranking half a million entries on values
//! like 2.6 must not depend on floating-point representation, so floats only
//! appear in rendered reports, never in stored records or comparisons.

use num_rational::Ratio;
use num_traits::{Signed, Zero};
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::collections::BTreeSet;
use std::fmt;
use std::ops::{Add, Div, Mul, Sub};
use std::str::FromStr;
use thiserror::Error;

use crate::rating::{ImageScores, MultimodalScores, TextScores};
use crate::taxonomy::TaskLabel;

/// Exact rational score. Serialized as a reduced fraction string
/// ("23/10", or "4" when integral) so stored values never drift.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Rational(Ratio<i64>);

impl Rational {
    pub fn new(numer: i64, denom: i64) -> Self {
        Rational(Ratio::new(numer, denom))
    }

    pub fn from_int(n: i64) -> Self {
        Rational(Ratio::from_integer(n))
    }

    pub fn zero() -> Self {
        Rational(Ratio::zero())
    }

    pub fn one() -> Self {
        Rational(Ratio::from_integer(1))
    }

    pub fn numer(&self) -> i64 {
        *self.0.numer()
    }

    pub fn denom(&self) -> i64 {
        *self.0.denom()
    }

    pub fn is_negative(&self) -> bool {
        self.0.is_negative()
    }

    pub fn to_f64(&self) -> f64 {
        *self.0.numer() as f64 / *self.0.denom() as f64
    }

    /// Nearest integer, halves rounding up (2.5 -> 3, -0.5 -> 0).
    pub fn round_half_up(&self) -> i64 {
        (self.0 + Ratio::new(1, 2)).floor().to_integer()
    }

    /// Decimal rendering with exactly two fraction digits, half-up.
    /// Used for report percentages; exact because the scaling is rational.
    pub fn to_decimal_2dp(&self) -> String {
        let scaled = (self.0 * Ratio::from_integer(100) + Ratio::new(1, 2))
            .floor()
            .to_integer();
        let sign = if scaled < 0 { "-" } else { "" };
        let abs = scaled.abs();
        format!("{sign}{}.{:02}", abs / 100, abs % 100)
    }
}

impl From<u8> for Rational {
    fn from(n: u8) -> Self {
        Rational::from_int(i64::from(n))
    }
}

impl Add for Rational {
    type Output = Rational;
    fn add(self, rhs: Rational) -> Rational {
        Rational(self.0 + rhs.0)
    }
}

impl Sub for Rational {
    type Output = Rational;
    fn sub(self, rhs: Rational) -> Rational {
        Rational(self.0 - rhs.0)
    }
}

impl Mul for Rational {
    type Output = Rational;
    fn mul(self, rhs: Rational) -> Rational {
        Rational(self.0 * rhs.0)
    }
}

impl Div for Rational {
    type Output = Rational;
    fn div(self, rhs: Rational) -> Rational {
        Rational(self.0 / rhs.0)
    }
}

impl fmt::Display for Rational {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if *self.0.denom() == 1 {
            write!(f, "{}", self.0.numer())
        } else {
            write!(f, "{}/{}", self.0.numer(), self.0.denom())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid rational literal {0:?}")]
pub struct ParseRationalError(String);

impl FromStr for Rational {
    type Err = ParseRationalError;

    /// Accepts "4", "23/10", and plain decimal notation "2.3" / "0.20".
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || ParseRationalError(s.to_string());
        let s = s.trim();
        if let Some((numer, denom)) = s.split_once('/') {
            let n: i64 = numer.trim().parse().map_err(|_| bad())?;
            let d: i64 = denom.trim().parse().map_err(|_| bad())?;
            if d == 0 {
                return Err(bad());
            }
            return Ok(Rational::new(n, d));
        }
        if let Some((int_part, frac_part)) = s.split_once('.') {
            if frac_part.is_empty() || !frac_part.bytes().all(|b| b.is_ascii_digit()) {
                return Err(bad());
            }
            let negative = int_part.trim_start().starts_with('-');
            let int: i64 = if int_part == "-" {
                0
            } else {
                int_part.parse().map_err(|_| bad())?
            };
            let frac: i64 = frac_part.parse().map_err(|_| bad())?;
            let scale = 10i64.checked_pow(frac_part.len() as u32).ok_or_else(bad)?;
            let magnitude = Rational::from_int(int.abs()) + Rational::new(frac, scale);
            return Ok(if negative || int < 0 {
                Rational::zero() - magnitude
            } else {
                magnitude
            });
        }
        let n: i64 = s.parse().map_err(|_| bad())?;
        Ok(Rational::from_int(n))
    }
}

impl Serialize for Rational {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Rational {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(D::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScoringError {
    #[error("modality sub-score list is empty")]
    EmptySubScores,
    #[error("sub-score {0} outside 0..=5")]
    SubScoreOutOfRange(u8),
    #[error("modality score {0} outside [0, 5]")]
    ModalityScoreOutOfRange(Rational),
    #[error("weights must be non-negative and sum to 1, got ({0}, {1}, {2})")]
    InvalidWeights(Rational, Rational, Rational),
    #[error("cannot build a scorecard without the {0} scores")]
    MissingGroup(&'static str),
}

/// Per-modality weights of the composite. Must sum to exactly 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Weights {
    pub w_i: Rational,
    pub w_t: Rational,
    pub w_mm: Rational,
}

impl Weights {
    pub fn new(w_i: Rational, w_t: Rational, w_mm: Rational) -> Result<Self, ScoringError> {
        let valid = !w_i.is_negative()
            && !w_t.is_negative()
            && !w_mm.is_negative()
            && w_i + w_t + w_mm == Rational::one();
        if valid {
            Ok(Weights { w_i, w_t, w_mm })
        } else {
            Err(ScoringError::InvalidWeights(w_i, w_t, w_mm))
        }
    }
}

impl Default for Weights {
    /// Image 1/5, text 1/5, multimodal 3/5.
    fn default() -> Self {
        Weights {
            w_i: Rational::new(1, 5),
            w_t: Rational::new(1, 5),
            w_mm: Rational::new(3, 5),
        }
    }
}

/// Flags carried from the rating stages into the stored card.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CardFlag {
    /// Task prediction failed; the task-specific caption fell back to the
    /// general one.
    CaptionDegraded,
    /// The multimodal judge answered with a single aggregate rating that was
    /// spread over all three sub-metrics.
    CoarseRating,
}

/// Full per-entry scoring record: the eight sub-metrics, the three modality
/// scores, and the weighted composite.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreCard {
    pub entry_id: String,
    pub text: TextScores,
    pub image: ImageScores,
    pub mm: MultimodalScores,
    pub task: TaskLabel,
    pub s_i: Rational,
    pub s_t: Rational,
    pub s_mm: Rational,
    pub composite: Rational,
    pub weights: Weights,
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub flags: BTreeSet<CardFlag>,
}

const MAX_SCORE: i64 = 5;

fn in_range(score: Rational) -> bool {
    !score.is_negative() && score <= Rational::from_int(MAX_SCORE)
}

/// Exact arithmetic mean of a modality's sub-scores.
pub fn aggregate_modality(sub_scores: &[u8]) -> Result<Rational, ScoringError> {
    if sub_scores.is_empty() {
        return Err(ScoringError::EmptySubScores);
    }
    if let Some(&bad) = sub_scores.iter().find(|&&s| i64::from(s) > MAX_SCORE) {
        return Err(ScoringError::SubScoreOutOfRange(bad));
    }
    let sum: i64 = sub_scores.iter().map(|&s| i64::from(s)).sum();
    Ok(Rational::new(sum, sub_scores.len() as i64))
}

/// Weighted composite `w_i * s_i + w_t * s_t + w_mm * s_mm`, exact.
pub fn compose(
    s_i: Rational,
    s_t: Rational,
    s_mm: Rational,
    weights: &Weights,
) -> Result<Rational, ScoringError> {
    for s in [s_i, s_t, s_mm] {
        if !in_range(s) {
            return Err(ScoringError::ModalityScoreOutOfRange(s));
        }
    }
    Ok(weights.w_i * s_i + weights.w_t * s_t + weights.w_mm * s_mm)
}

/// Assembles a [`ScoreCard`] from fully parsed stage outputs. Scoring never
/// imputes: a missing group is a refusal, not a default.
pub fn build_scorecard(
    entry_id: &str,
    text: Option<TextScores>,
    image: Option<ImageScores>,
    mm: Option<MultimodalScores>,
    task: Option<TaskLabel>,
    weights: Weights,
    flags: BTreeSet<CardFlag>,
) -> Result<ScoreCard, ScoringError> {
    let text = text.ok_or(ScoringError::MissingGroup("text"))?;
    let image = image.ok_or(ScoringError::MissingGroup("image"))?;
    let mm = mm.ok_or(ScoringError::MissingGroup("multimodal"))?;
    let task = task.ok_or(ScoringError::MissingGroup("task"))?;

    let s_t = aggregate_modality(&[text.info, text.cpxt, text.cplt])?;
    let s_i = aggregate_modality(&[image.blur, image.noise])?;
    let s_mm = aggregate_modality(&[mm.clr, mm.rel, mm.tr])?;
    let composite = compose(s_i, s_t, s_mm, &weights)?;

    Ok(ScoreCard {
        entry_id: entry_id.to_string(),
        text,
        image,
        mm,
        task,
        s_i,
        s_t,
        s_mm,
        composite,
        weights,
        flags,
    })
}
