//! Strategy descriptions shared by the generator, the evaluator and the
//! library.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Which way a score points for members.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    HigherForMembers,
    LowerForMembers,
}

impl Direction {
    pub fn flipped(self) -> Self {
        match self {
            Direction::HigherForMembers => Direction::LowerForMembers,
            Direction::LowerForMembers => Direction::HigherForMembers,
        }
    }

    /// Reads free-form `expected_behavior` text such as
    /// "lower for members (memorized text is less surprising)".
    pub fn parse_behavior(text: &str) -> Option<Self> {
        let lower = text.to_ascii_lowercase();
        if lower.contains("higher/lower") || lower.contains("lower/higher") {
            return None;
        }
        let has_lower = lower.contains("lower");
        let has_higher = lower.contains("higher");
        match (has_higher, has_lower) {
            (true, false) => Some(Direction::HigherForMembers),
            (false, true) => Some(Direction::LowerForMembers),
            (true, true) => {
                // "lower for members (members have higher confidence)": first mention wins.
                let h = lower.find("higher").unwrap_or(usize::MAX);
                let l = lower.find("lower").unwrap_or(usize::MAX);
                Some(if h < l {
                    Direction::HigherForMembers
                } else {
                    Direction::LowerForMembers
                })
            }
            (false, false) => None,
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::HigherForMembers => "higher for members",
            Direction::LowerForMembers => "lower for members",
        })
    }
}

impl Serialize for Direction {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Direction {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        Direction::parse_behavior(&text).ok_or_else(|| {
            serde::de::Error::custom(format!("cannot read a direction from {text:?}"))
        })
    }
}

/// A named scoring strategy. `code` holds the DSL program source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategySpec {
    pub name: String,
    #[serde(default)]
    pub formula: String,
    #[serde(default)]
    pub description: String,
    pub code: String,
    #[serde(rename = "expected_behavior")]
    pub direction: Direction,
}

impl StrategySpec {
    pub fn new(name: impl Into<String>, code: impl Into<String>, direction: Direction) -> Self {
        Self {
            name: name.into(),
            formula: String::new(),
            description: String::new(),
            code: code.into(),
            direction,
        }
    }

    pub fn with_formula(mut self, formula: impl Into<String>) -> Self {
        self.formula = formula.into();
        self
    }

    pub fn with_description(mut self, description: impl Into<String>) -> Self {
        self.description = description.into();
        self
    }
}

/// Result of scoring one record with one strategy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScoreOutcome {
    Value(f64),
    /// Too few positions for the program; scored as the 0.0 sentinel.
    Insufficient,
    /// The strategy needs target ids that the record does not carry.
    NotApplicable,
    /// Evaluation produced NaN or an infinity.
    NonFinite,
}

impl ScoreOutcome {
    pub fn from_value(v: f64) -> Self {
        if v.is_finite() {
            ScoreOutcome::Value(v)
        } else {
            ScoreOutcome::NonFinite
        }
    }

    /// The usable score, with the insufficient-positions sentinel mapped to 0.0.
    pub fn score(&self) -> Option<f64> {
        match *self {
            ScoreOutcome::Value(v) => Some(v),
            ScoreOutcome::Insufficient => Some(0.0),
            ScoreOutcome::NotApplicable | ScoreOutcome::NonFinite => None,
        }
    }
}
