//! The four-level ordinal traversability scale.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// The rating scheme line shown to annotators and embedded in every prompt.
pub const SCHEME_LINE: &str = "1 – smooth, 2 – rough, 3 – bumpy, 4 – non-navigable/forbidden";

/// Ordinal traversability rating. `Smooth` is the easiest terrain,
/// `NonNavigable` must not be entered.
///
/// Serialized as its integer value (1..=4).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(u8)]
pub enum TraversabilityRating {
    Smooth = 1,
    Rough = 2,
    Bumpy = 3,
    NonNavigable = 4,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("rating {0} is outside 1..=4")]
pub struct RatingOutOfRange(pub i64);

impl TraversabilityRating {
    pub const ALL: [TraversabilityRating; 4] = [
        TraversabilityRating::Smooth,
        TraversabilityRating::Rough,
        TraversabilityRating::Bumpy,
        TraversabilityRating::NonNavigable,
    ];

    pub fn value(self) -> u8 {
        self as u8
    }

    /// Zero-based position, handy for indexing 4-element tables.
    pub fn index(self) -> usize {
        self as usize - 1
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    pub fn label(self) -> &'static str {
        match self {
            TraversabilityRating::Smooth => "smooth",
            TraversabilityRating::Rough => "rough",
            TraversabilityRating::Bumpy => "bumpy",
            TraversabilityRating::NonNavigable => "non-navigable",
        }
    }

    pub fn from_label(label: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.label() == label)
    }

    pub fn new(value: i64) -> Result<Self, RatingOutOfRange> {
        match value {
            1 => Ok(TraversabilityRating::Smooth),
            2 => Ok(TraversabilityRating::Rough),
            3 => Ok(TraversabilityRating::Bumpy),
            4 => Ok(TraversabilityRating::NonNavigable),
            other => Err(RatingOutOfRange(other)),
        }
    }
}

impl TryFrom<i64> for TraversabilityRating {
    type Error = RatingOutOfRange;

    fn try_from(value: i64) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl From<TraversabilityRating> for u8 {
    fn from(r: TraversabilityRating) -> u8 {
        r.value()
    }
}

impl fmt::Display for TraversabilityRating {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({})", self.value(), self.label())
    }
}

impl Serialize for TraversabilityRating {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_u8(self.value())
    }
}

impl<'de> Deserialize<'de> for TraversabilityRating {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = i64::deserialize(deserializer)?;
        TraversabilityRating::new(raw).map_err(serde::de::Error::custom)
    }
}
