//! Dataset ingest: the recording manifest, WAV audio, splits and the
//! synthetic fixture generator.

mod audio;
mod manifest;
mod split;
mod synth;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use audio::{load_audio, read_wav, write_wav, Waveform};
pub use manifest::{load_manifest, DatasetManifest, RecordingMeta, SplitCounts, MANIFEST_HEADER};
pub use split::stratified_split;
pub use synth::{synth_dataset, SynthConfig};

/// Patient-level murmur class. The integer encoding is used everywhere downstream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassLabel {
    Absent = 0,
    Present = 1,
    Unknown = 2,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; 3] = [ClassLabel::Absent, ClassLabel::Present, ClassLabel::Unknown];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ClassLabel::Absent => "absent",
            ClassLabel::Present => "present",
            ClassLabel::Unknown => "unknown",
        }
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ClassLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "absent" => Ok(ClassLabel::Absent),
            "present" => Ok(ClassLabel::Present),
            "unknown" => Ok(ClassLabel::Unknown),
            other => Err(format!("unknown label token {other:?}")),
        }
    }
}

/// Auscultation location.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Location {
    AV,
    PV,
    MV,
    TV,
    Phc,
}

impl Location {
    pub const ALL: [Location; 5] = [
        Location::AV,
        Location::PV,
        Location::MV,
        Location::TV,
        Location::Phc,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Location::AV => "AV",
            Location::PV => "PV",
            Location::MV => "MV",
            Location::TV => "TV",
            Location::Phc => "Phc",
        }
    }
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Location {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Location::ALL
            .into_iter()
            .find(|l| l.as_str() == s.trim())
            .ok_or_else(|| format!("unknown location token {s:?}"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "validation" | "val" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split token {other:?}")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_encoding_is_fixed() {
        assert_eq!(ClassLabel::Absent.index(), 0);
        assert_eq!(ClassLabel::Present.index(), 1);
        assert_eq!(ClassLabel::Unknown.index(), 2);
        for l in ClassLabel::ALL {
            assert_eq!(ClassLabel::from_index(l.index()), Some(l));
            assert_eq!(l.as_str().parse::<ClassLabel>(), Ok(l));
        }
        assert_eq!(ClassLabel::from_index(3), None);
    }

    #[test]
    fn tokens_parse() {
        assert_eq!("Phc".parse::<Location>(), Ok(Location::Phc));
        assert!("XX".parse::<Location>().is_err());
        assert_eq!("val".parse::<Split>(), Ok(Split::Validation));
        assert_eq!("Present".parse::<ClassLabel>(), Ok(ClassLabel::Present));
    }
}
