//! Digit-string labels for cells.
//!
//! A label is the face digit (`0`-`5`) followed by one child digit (`0`-`3`)
//! per level, root to leaf, with no separators: face 4, child 3, grandchild 1
//! is `"431"`. A label of length `n` names a cell at level `n - 1`, and one
//! label is a prefix of another exactly when its cell is an ancestor-or-self
//! of the other's. Decoders emit labels one digit per step.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::cellgeo::{CellId, MAX_LEVEL};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LabelError {
    #[error("empty label")]
    Empty,
    #[error("non-digit character {ch:?} at position {pos}")]
    NonDigit { pos: usize, ch: char },
    #[error("invalid face digit {0:?}: faces are 0-5")]
    InvalidFace(char),
    #[error("invalid child digit {ch:?} at position {pos}: children are 0-3")]
    InvalidChildDigit { pos: usize, ch: char },
    #[error("label of length {len} exceeds the maximum of {max}")]
    TooLong { len: usize, max: usize },
}

/// A validated label.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LabelString(String);

impl LabelString {
    /// Parses a label of any depth up to [`MAX_LEVEL`].
    pub fn parse(s: &str) -> Result<Self, LabelError> {
        Self::parse_with_max_level(s, MAX_LEVEL)
    }

    pub fn parse_with_max_level(s: &str, max_level: u8) -> Result<Self, LabelError> {
        validate(s, max_level)?;
        Ok(Self(s.to_owned()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    /// Always false; present for API symmetry with `len`.
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn level(&self) -> u8 {
        (self.0.len() - 1) as u8
    }

    pub fn cell(&self) -> CellId {
        let b = self.0.as_bytes();
        let digits: Vec<u8> = b[1..].iter().map(|c| c - b'0').collect();
        CellId::new(b[0] - b'0', &digits).expect("validated label")
    }

    /// True when `self` is a prefix of (ancestor-or-self of) `other`.
    pub fn is_prefix_of(&self, other: &LabelString) -> bool {
        other.0.starts_with(&self.0)
    }

    /// Proper prefixes, shortest first.
    pub fn ancestors(&self) -> Vec<LabelString> {
        (1..self.0.len()).map(|n| Self(self.0[..n].to_owned())).collect()
    }

    /// All prefixes including the label itself, shortest first.
    pub fn prefixes(&self) -> impl Iterator<Item = &str> {
        (1..=self.0.len()).map(move |n| &self.0[..n])
    }
}

fn validate(s: &str, max_level: u8) -> Result<(), LabelError> {
    if s.is_empty() {
        return Err(LabelError::Empty);
    }
    for (pos, ch) in s.chars().enumerate() {
        if !ch.is_ascii_digit() {
            return Err(LabelError::NonDigit { pos, ch });
        }
        if pos == 0 && ch > '5' {
            return Err(LabelError::InvalidFace(ch));
        }
        if pos > 0 && ch > '3' {
            return Err(LabelError::InvalidChildDigit { pos, ch });
        }
    }
    let max = 1 + max_level as usize;
    if s.len() > max {
        return Err(LabelError::TooLong { len: s.len(), max });
    }
    Ok(())
}

pub fn encode(cell: &CellId) -> LabelString {
    LabelString(cell.to_string())
}

pub fn decode(s: &str) -> Result<CellId, LabelError> {
    LabelString::parse(s).map(|l| l.cell())
}

pub fn decode_with_max_level(s: &str, max_level: u8) -> Result<CellId, LabelError> {
    LabelString::parse_with_max_level(s, max_level).map(|l| l.cell())
}

pub fn ancestors(label: &LabelString) -> Vec<LabelString> {
    label.ancestors()
}

impl From<CellId> for LabelString {
    fn from(cell: CellId) -> Self {
        encode(&cell)
    }
}

impl FromStr for LabelString {
    type Err = LabelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse(s)
    }
}

impl fmt::Display for LabelString {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Debug for LabelString {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

impl AsRef<str> for LabelString {
    fn as_ref(&self) -> &str {
        &self.0
    }
}

impl Serialize for LabelString {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.0)
    }
}

impl<'de> Deserialize<'de> for LabelString {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        Self::parse(&s).map_err(serde::de::Error::custom)
    }
}
