//! Domain enums shared by the model and the data pipeline.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Kind of misinformation a claim may carry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistortionType {
    Textual,
    Visual,
    CrossModal,
    Mixed,
    Unknown,
}

impl DistortionType {
    pub const ALL: [DistortionType; 5] = [
        DistortionType::Textual,
        DistortionType::Visual,
        DistortionType::CrossModal,
        DistortionType::Mixed,
        DistortionType::Unknown,
    ];

    /// The three single-signal types.
    pub const BASIC: [DistortionType; 3] = [
        DistortionType::Textual,
        DistortionType::Visual,
        DistortionType::CrossModal,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DistortionType::Textual => "textual",
            DistortionType::Visual => "visual",
            DistortionType::CrossModal => "cross_modal",
            DistortionType::Mixed => "mixed",
            DistortionType::Unknown => "unknown",
        }
    }
}

impl fmt::Display for DistortionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DistortionType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|d| d.as_str() == s)
            .ok_or_else(|| format!("unknown distortion type {s:?}"))
    }
}

/// Ground-truth or predicted veracity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Label {
    Real,
    Fake,
}

impl Label {
    /// The exact verdict token, `Real` or `Fake`.
    pub fn token(self) -> &'static str {
        match self {
            Label::Real => "Real",
            Label::Fake => "Fake",
        }
    }

    /// Lowercase dataset spelling.
    pub fn as_lower(self) -> &'static str {
        match self {
            Label::Real => "real",
            Label::Fake => "fake",
        }
    }

    pub fn parse_lower(s: &str) -> Option<Self> {
        match s {
            "real" => Some(Label::Real),
            "fake" => Some(Label::Fake),
            _ => None,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}
