use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Slide-level marker category.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InkCategory {
    Black,
    Blue,
    Green,
    Opaque,
}

impl InkCategory {
    pub const ALL: [InkCategory; 4] = [
        InkCategory::Black,
        InkCategory::Blue,
        InkCategory::Green,
        InkCategory::Opaque,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            InkCategory::Black => "black",
            InkCategory::Blue => "blue",
            InkCategory::Green => "green",
            InkCategory::Opaque => "opaque",
        }
    }
}

impl fmt::Display for InkCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for InkCategory {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "black" => Ok(InkCategory::Black),
            "blue" => Ok(InkCategory::Blue),
            "green" => Ok(InkCategory::Green),
            "opaque" => Ok(InkCategory::Opaque),
            other => Err(Error::Input(format!("unknown ink category `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchLabel {
    Marker,
    CleanTissue,
    CleanBackground,
}

impl PatchLabel {
    pub const ALL: [PatchLabel; 3] = [
        PatchLabel::Marker,
        PatchLabel::CleanTissue,
        PatchLabel::CleanBackground,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            PatchLabel::Marker => "marker",
            PatchLabel::CleanTissue => "clean_tissue",
            PatchLabel::CleanBackground => "clean_background",
        }
    }

    pub fn is_clean(&self) -> bool {
        !matches!(self, PatchLabel::Marker)
    }
}

impl fmt::Display for PatchLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Input(format!("unknown split `{other}`"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn category_names_round_trip() {
        for c in InkCategory::ALL {
            assert_eq!(c.as_str().parse::<InkCategory>().unwrap(), c);
            assert_eq!(serde_json::to_string(&c).unwrap(), format!("\"{c}\""));
        }
        assert!("purple".parse::<InkCategory>().is_err());
    }

    #[test]
    fn label_serialization_matches_display() {
        for l in PatchLabel::ALL {
            assert_eq!(serde_json::to_string(&l).unwrap(), format!("\"{l}\""));
        }
    }
}
