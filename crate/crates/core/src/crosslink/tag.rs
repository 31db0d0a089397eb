use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TagError {
    #[error("invalid tag `{tag}`: empty segment")]
    EmptySegment { tag: String },
    #[error("invalid tag `{tag}`: expected idea-venue-stage[-suffix]")]
    TooFewSegments { tag: String },
    #[error("invalid tag `{tag}`: unknown stage `{stage}` (expected submission, accepted, internal or revision-N)")]
    UnknownStage { tag: String, stage: String },
    #[error("invalid tag `{tag}`: malformed revision number `{number}`")]
    MalformedRevision { tag: String, number: String },
    #[error("invalid tag `{tag}`: character `{ch}` not allowed")]
    InvalidCharacter { tag: String, ch: char },
}

/// Publication milestone a tag marks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    Submission,
    Accepted,
    Internal,
    /// `revision-N` with `N >= 1`.
    Revision(u32),
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Stage::Submission => f.write_str("submission"),
            Stage::Accepted => f.write_str("accepted"),
            Stage::Internal => f.write_str("internal"),
            Stage::Revision(n) => write!(f, "revision-{n}"),
        }
    }
}

/// A milestone tag `idea-venue-stage[-suffix]`, e.g. `ccs-jcp-revision-2`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TagParts {
    pub idea: String,
    pub venue: String,
    pub stage: Stage,
    pub suffix: Option<String>,
}

fn segment_char(c: char) -> bool {
    c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_' || c == '.'
}

/// Parses a milestone tag. Input is lower-cased first.
pub fn parse_tag(name: &str) -> Result<TagParts, TagError> {
    let tag = name.trim().to_ascii_lowercase();
    let err_tag = || tag.clone();
    let segments: Vec<&str> = tag.split('-').collect();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(TagError::EmptySegment { tag: err_tag() });
    }
    if let Some(ch) = tag.chars().find(|&c| c != '-' && !segment_char(c)) {
        return Err(TagError::InvalidCharacter { tag: err_tag(), ch });
    }
    if segments.len() < 3 {
        return Err(TagError::TooFewSegments { tag: err_tag() });
    }
    let (stage, rest) = match segments[2] {
        "submission" => (Stage::Submission, &segments[3..]),
        "accepted" => (Stage::Accepted, &segments[3..]),
        "internal" => (Stage::Internal, &segments[3..]),
        "revision" => {
            let number = segments.get(3).copied().unwrap_or("");
            let valid = !number.is_empty()
                && number.bytes().all(|b| b.is_ascii_digit())
                && !number.starts_with('0');
            let n = valid.then(|| number.parse::<u32>().ok()).flatten();
            match n {
                Some(n) => (Stage::Revision(n), &segments[4..]),
                None => {
                    return Err(TagError::MalformedRevision {
                        tag: err_tag(),
                        number: number.to_string(),
                    })
                }
            }
        }
        other => {
            return Err(TagError::UnknownStage {
                tag: err_tag(),
                stage: other.to_string(),
            })
        }
    };
    Ok(TagParts {
        idea: segments[0].to_string(),
        venue: segments[1].to_string(),
        stage,
        suffix: (!rest.is_empty()).then(|| rest.join("-")),
    })
}

impl fmt::Display for TagParts {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}-{}", self.idea, self.venue, self.stage)?;
        if let Some(s) = &self.suffix {
            write!(f, "-{s}")?;
        }
        Ok(())
    }
}

impl FromStr for TagParts {
    type Err = TagError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_tag(s)
    }
}

impl Serialize for TagParts {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for TagParts {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        parse_tag(&s).map_err(serde::de::Error::custom)
    }
}
