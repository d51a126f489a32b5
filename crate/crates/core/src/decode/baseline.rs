//! Multinomial naive Bayes over partition leaves, exposed as a digit scorer.
//!
//! `P(leaf | text) ∝ prior(leaf) · Π P(token | leaf)` with
//! `prior(leaf) ∝ records(leaf)` and Laplace-style smoothing
//! `P(token | leaf) = (count(token, leaf) + α) / (tokens(leaf) + α·|V|)`.
//! Out-of-vocabulary query tokens are ignored. The next-digit probability at
//! a prefix is the posterior mass under `prefix + digit` divided by the mass
//! under `prefix`, so the product of step probabilities along a label equals
//! that leaf's posterior.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DecodeError, DigitDistribution, LabelTrie, PreparedScorer, SequenceScorer, Symbol, DISTRIBUTION_TOLERANCE};
use crate::cellgeo::CellId;
use crate::dataset::LabeledRecord;
use crate::labelcodec::LabelString;
use crate::partition::AdaptivePartition;
use crate::util::{sha256_hex, write_atomic};

/// Unicode whitespace split, lowercase, non-alphanumeric characters removed.
pub const TOKENIZER_ID: &str = "ws-lower-alnum-v1";

const MODEL_FORMAT: &str = "textgeo-baseline";
const MODEL_VERSION: u32 = 1;

pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.chars().filter(|c| c.is_alphanumeric()).flat_map(char::to_lowercase).collect::<String>())
        .filter(|t| !t.is_empty())
        .collect()
}

#[derive(Debug, Clone)]
struct LeafModel {
    cell: CellId,
    records: u64,
    tokens: u64,
    counts: HashMap<u32, u64>,
    log_prior: f64,
    log_norm: f64,
}

#[derive(Debug, Clone)]
pub struct BaselineModel {
    alpha: f64,
    partition_checksum: String,
    vocabulary: Vec<String>,
    index: HashMap<String, u32>,
    leaves: Vec<LeafModel>,
    trie: LabelTrie,
    id: String,
}

/// Counts token occurrences per leaf over labeled records.
pub fn train_baseline<I>(records: I, partition: &AdaptivePartition, alpha: f64) -> Result<BaselineModel, DecodeError>
where
    I: IntoIterator<Item = LabeledRecord>,
{
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(DecodeError::InvalidAlpha(alpha));
    }
    let mut per_leaf: BTreeMap<CellId, (u64, HashMap<String, u64>)> = BTreeMap::new();
    for rec in records {
        let cell = rec.label.cell();
        if !partition.is_leaf(&cell) {
            return Err(DecodeError::LabelNotLeaf(rec.label));
        }
        let entry = per_leaf.entry(cell).or_default();
        entry.0 += 1;
        for tok in tokenize(&rec.record.text) {
            *entry.1.entry(tok).or_default() += 1;
        }
    }
    if per_leaf.is_empty() {
        return Err(DecodeError::EmptyTraining);
    }
    let mut vocabulary: Vec<String> = per_leaf.values().flat_map(|(_, c)| c.keys().cloned()).collect();
    vocabulary.sort_unstable();
    vocabulary.dedup();
    let index: HashMap<String, u32> = vocabulary.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
    let entries = per_leaf
        .into_iter()
        .map(|(cell, (records, counts))| {
            let mut counts: Vec<(u32, u64)> = counts.into_iter().map(|(t, n)| (index[&t], n)).collect();
            counts.sort_unstable();
            LeafEntry { label: cell.into(), records, tokens: counts.iter().map(|(_, n)| n).sum(), counts }
        })
        .collect();
    let file = ModelFile {
        format: MODEL_FORMAT.into(),
        version: MODEL_VERSION,
        tokenizer: TOKENIZER_ID.into(),
        alpha,
        partition_checksum: partition.checksum(),
        vocabulary,
        leaves: entries,
    };
    BaselineModel::from_file(file, partition)
}

impl BaselineModel {
    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn partition_checksum(&self) -> &str {
        &self.partition_checksum
    }

    pub fn vocabulary_size(&self) -> usize {
        self.vocabulary.len()
    }

    /// Leaves seen in training.
    pub fn trained_leaves(&self) -> impl Iterator<Item = CellId> + '_ {
        self.leaves.iter().map(|l| l.cell)
    }

    /// Posterior over trained leaves, in label order. Leaves never seen in
    /// training have prior (and posterior) zero and are omitted.
    pub fn posterior(&self, text: &str) -> Vec<(CellId, f64)> {
        let query: Vec<u32> = tokenize(text).iter().filter_map(|t| self.index.get(t).copied()).collect();
        let scores: Vec<f64> = self
            .leaves
            .iter()
            .map(|leaf| {
                query.iter().fold(leaf.log_prior, |acc, tok| {
                    let count = leaf.counts.get(tok).copied().unwrap_or(0) as f64;
                    acc + (count + self.alpha).ln() - leaf.log_norm
                })
            })
            .collect();
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let total: f64 = weights.iter().sum();
        self.leaves.iter().zip(weights).map(|(leaf, w)| (leaf.cell, w / total)).collect()
    }

    fn from_file(file: ModelFile, partition: &AdaptivePartition) -> Result<Self, DecodeError> {
        let malformed = |m: String| DecodeError::MalformedModel(m);
        if file.format != MODEL_FORMAT || file.version != MODEL_VERSION {
            return Err(malformed(format!("unsupported format {} v{}", file.format, file.version)));
        }
        if file.tokenizer != TOKENIZER_ID {
            return Err(malformed(format!("unsupported tokenizer {}", file.tokenizer)));
        }
        if !(file.alpha > 0.0 && file.alpha.is_finite()) {
            return Err(DecodeError::InvalidAlpha(file.alpha));
        }
        let actual = partition.checksum();
        if file.partition_checksum != actual {
            return Err(DecodeError::ChecksumMismatch { expected: file.partition_checksum, actual });
        }
        if file.leaves.is_empty() {
            return Err(DecodeError::EmptyTraining);
        }
        let id = format!("baseline-{}", &sha256_hex(canonical_json(&file).as_bytes())[..12]);
        let v = file.vocabulary.len();
        let total_records: u64 = file.leaves.iter().map(|l| l.records).sum();
        let mut leaves = Vec::with_capacity(file.leaves.len());
        let mut prev: Option<CellId> = None;
        for entry in &file.leaves {
            let cell = entry.label.cell();
            if !partition.is_leaf(&cell) {
                return Err(DecodeError::LabelNotLeaf(entry.label.clone()));
            }
            if prev.is_some_and(|p| p >= cell) {
                return Err(malformed(format!("leaf {} out of order or duplicated", entry.label)));
            }
            prev = Some(cell);
            if entry.records == 0 {
                return Err(malformed(format!("leaf {} has no records", entry.label)));
            }
            if entry.counts.iter().any(|(i, _)| *i as usize >= v) {
                return Err(malformed(format!("leaf {} references a token outside the vocabulary", entry.label)));
            }
            let tokens: u64 = entry.counts.iter().map(|(_, n)| n).sum();
            if tokens != entry.tokens {
                return Err(malformed(format!("leaf {} token total {} != {}", entry.label, entry.tokens, tokens)));
            }
            leaves.push(LeafModel {
                cell,
                records: entry.records,
                tokens,
                counts: entry.counts.iter().copied().collect(),
                log_prior: (entry.records as f64 / total_records as f64).ln(),
                log_norm: (tokens as f64 + file.alpha * v as f64).ln(),
            });
        }
        let index = file.vocabulary.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Ok(Self {
            alpha: file.alpha,
            partition_checksum: file.partition_checksum,
            vocabulary: file.vocabulary,
            index,
            leaves,
            trie: LabelTrie::from_partition(partition),
            id,
        })
    }

    fn to_file(&self) -> ModelFile {
        ModelFile {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            tokenizer: TOKENIZER_ID.into(),
            alpha: self.alpha,
            partition_checksum: self.partition_checksum.clone(),
            vocabulary: self.vocabulary.clone(),
            leaves: self
                .leaves
                .iter()
                .map(|l| {
                    let mut counts: Vec<(u32, u64)> = l.counts.iter().map(|(i, n)| (*i, *n)).collect();
                    counts.sort_unstable();
                    LeafEntry { label: l.cell.into(), records: l.records, tokens: l.tokens, counts }
                })
                .collect(),
        }
    }

    pub fn to_json_string(&self) -> String {
        canonical_json(&self.to_file())
    }

    /// Parses a model file and checks it against `partition`.
    pub fn from_json_str(text: &str, partition: &AdaptivePartition) -> Result<Self, DecodeError> {
        let file: ModelFile = serde_json::from_str(text).map_err(|e| DecodeError::MalformedModel(e.to_string()))?;
        Self::from_file(file, partition)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DecodeError> {
        let path = path.as_ref();
        write_atomic(path, self.to_json_string().as_bytes())
            .map_err(|source| DecodeError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: impl AsRef<Path>, partition: &AdaptivePartition) -> Result<Self, DecodeError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| DecodeError::Io { path: path.display().to_string(), source })?;
        Self::from_json_str(&text, partition)
    }

    /// Reads only the partition checksum a model file was trained against.
    pub fn peek_partition_checksum(text: &str) -> Option<String> {
        #[derive(Deserialize)]
        struct Header {
            format: String,
            partition_checksum: String,
        }
        let header: Header = serde_json::from_str(text).ok()?;
        (header.format == MODEL_FORMAT).then_some(header.partition_checksum)
    }
}

fn canonical_json(file: &ModelFile) -> String {
    let mut s = serde_json::to_string(file).expect("model serializes");
    s.push('\n');
    s
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    format: String,
    version: u32,
    tokenizer: String,
    alpha: f64,
    partition_checksum: String,
    vocabulary: Vec<String>,
    leaves: Vec<LeafEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LeafEntry {
    label: LabelString,
    records: u64,
    tokens: u64,
    counts: Vec<(u32, u64)>,
}

impl SequenceScorer for BaselineModel {
    fn id(&self) -> String {
        self.id.clone()
    }

    fn score_next(&self, text: &str, prefix: &str) -> Result<DigitDistribution, DecodeError> {
        self.prepare(text)?.score_next(prefix)
    }

    fn prepare<'a>(&'a self, text: &'a str) -> Result<Box<dyn PreparedScorer + 'a>, DecodeError> {
        let posterior = self.posterior(text);
        let mut mass: HashMap<CellId, f64> = HashMap::new();
        for (leaf, p) in &posterior {
            for level in 0..=leaf.level() {
                *mass.entry(leaf.ancestor(level).expect("level within leaf")).or_default() += p;
            }
        }
        Ok(Box::new(PreparedBaseline { trie: &self.trie, mass, leaf_mass: posterior.into_iter().collect() }))
    }
}

struct PreparedBaseline<'a> {
    trie: &'a LabelTrie,
    mass: HashMap<CellId, f64>,
    leaf_mass: HashMap<CellId, f64>,
}

impl PreparedBaseline<'_> {
    fn mass_of(&self, cell: &CellId) -> f64 {
        self.mass.get(cell).copied().unwrap_or(0.0)
    }
}

impl PreparedScorer for PreparedBaseline<'_> {
    fn score_next(&self, prefix: &str) -> Result<DigitDistribution, DecodeError> {
        let node = self.trie.resolve(prefix)?;
        let position = prefix.len();
        let (total, pairs): (f64, Vec<(Symbol, f64)>) = match node {
            None => {
                let faces: Vec<(Symbol, f64)> =
                    CellId::faces().map(|f| (Symbol::Digit(f.face_index()), self.mass_of(&f))).collect();
                (faces.iter().map(|(_, m)| m).sum(), faces)
            }
            Some(cell) => {
                let mut pairs: Vec<(Symbol, f64)> = Vec::with_capacity(5);
                if cell.level() < crate::cellgeo::MAX_LEVEL {
                    for (d, child) in cell.children().expect("below max level").iter().enumerate() {
                        pairs.push((Symbol::Digit(d as u8), self.mass_of(child)));
                    }
                }
                pairs.push((Symbol::Eos, self.leaf_mass.get(&cell).copied().unwrap_or(0.0)));
                (self.mass_of(&cell), pairs)
            }
        };
        if total <= 0.0 {
            let allowed = self.trie.allowed(node.as_ref()).expect("resolved prefix");
            return Ok(DigitDistribution::uniform_over(position, &allowed));
        }
        DigitDistribution::from_pairs(position, pairs.into_iter().map(|(s, m)| (s, m / total)), DISTRIBUTION_TOLERANCE)
    }
}
