//! Replays next-symbol distributions produced by an external model.
//!
//! The scores file is line-delimited JSON, one record per `(text, prefix)`:
//!
//! ```text
//! {"text_hash":"<sha256 hex of the UTF-8 text>","prefix":"21","probs":{"0":0.7,"3":0.2,"EOS":0.1}}
//! ```
//!
//! A `text_hash` of `"*"` applies to any text without a more specific record.
//! Pairs with no record at all get a uniform distribution over the symbols
//! allowed at that position, and are counted in [`ReplayScorer::misses`].

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use super::{DecodeError, DigitDistribution, SequenceScorer, Symbol};
use crate::labelcodec::LabelString;
use crate::util::sha256_hex;

/// Sum-to-one tolerance for imported distributions.
pub const IMPORT_TOLERANCE: f64 = 1e-6;

pub const ANY_TEXT: &str = "*";

/// Hash that keys external scores: lowercase hex SHA-256 of the text bytes.
pub fn text_hash(text: &str) -> String {
    sha256_hex(text.as_bytes())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreRecord {
    pub text_hash: String,
    pub prefix: String,
    pub probs: BTreeMap<String, f64>,
}

impl ScoreRecord {
    pub fn from_distribution(text: &str, prefix: &str, dist: &DigitDistribution) -> Self {
        Self {
            text_hash: text_hash(text),
            prefix: prefix.to_owned(),
            probs: dist.support().map(|(s, p)| (s.to_string(), p)).collect(),
        }
    }
}

#[derive(Debug)]
pub struct ReplayScorer {
    table: HashMap<(String, String), DigitDistribution>,
    id: String,
    misses: AtomicU64,
}

pub fn import_external_scores(path: impl AsRef<Path>) -> Result<ReplayScorer, DecodeError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| DecodeError::Io { path: path.display().to_string(), source })?;
    ReplayScorer::from_jsonl(&text)
}

impl ReplayScorer {
    pub fn from_jsonl(text: &str) -> Result<Self, DecodeError> {
        let mut table = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let bad = |reason: String| DecodeError::MalformedScores { line: line_no, reason };
            let rec: ScoreRecord = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
            let hash_ok = rec.text_hash == ANY_TEXT
                || (rec.text_hash.len() == 64 && rec.text_hash.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f')));
            if !hash_ok {
                return Err(bad(format!("text_hash {:?} is neither \"*\" nor a sha256 hex digest", rec.text_hash)));
            }
            if !rec.prefix.is_empty() {
                LabelString::parse(&rec.prefix).map_err(|e| bad(format!("prefix {:?}: {e}", rec.prefix)))?;
            }
            let mut pairs = Vec::with_capacity(rec.probs.len());
            for (sym, p) in &rec.probs {
                pairs.push((sym.parse::<Symbol>().map_err(bad)?, *p));
            }
            let dist = DigitDistribution::from_pairs(rec.prefix.len(), pairs, IMPORT_TOLERANCE)
                .map_err(|e| bad(e.to_string()))?;
            let key = (rec.text_hash, rec.prefix);
            if table.contains_key(&key) {
                return Err(bad(format!("duplicate record for prefix {:?}", key.1)));
            }
            table.insert(key, dist);
        }
        Ok(Self {
            table,
            id: format!("replay-{}", &sha256_hex(text.as_bytes())[..12]),
            misses: AtomicU64::new(0),
        })
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    /// Lookups that fell back to the uniform distribution.
    pub fn misses(&self) -> u64 {
        self.misses.load(Ordering::Relaxed)
    }
}

impl SequenceScorer for ReplayScorer {
    fn id(&self) -> String {
        self.id.clone()
    }

    fn score_next(&self, text: &str, prefix: &str) -> Result<DigitDistribution, DecodeError> {
        let exact = (text_hash(text), prefix.to_owned());
        if let Some(d) = self.table.get(&exact) {
            return Ok(*d);
        }
        if let Some(d) = self.table.get(&(ANY_TEXT.to_owned(), exact.1)) {
            return Ok(*d);
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        Ok(DigitDistribution::uniform(prefix.len()))
    }
}
