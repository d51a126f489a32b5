//! Free text to ranked cell predictions.
//!
//! A [`SequenceScorer`] proposes a distribution over the next label symbol
//! given the text and the label prefix decoded so far: a face digit `0`-`5`
//! first, then child digits `0`-`3` or end-of-sequence. [`beam_search`]
//! decodes against a [`LabelTrie`] of the partition's leaves, so only
//! extensions that stay on a path to some leaf are explored and a sequence
//! can only end at a leaf. Mass a scorer puts on symbols the trie forbids is
//! dropped and the remainder renormalized.

mod baseline;
mod replay;

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fmt;
use std::io;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cellgeo::{CellId, LatLon};
use crate::labelcodec::{LabelError, LabelString};
use crate::partition::AdaptivePartition;

pub use baseline::{tokenize, train_baseline, BaselineModel, TOKENIZER_ID};
pub use replay::{import_external_scores, text_hash, ReplayScorer, ScoreRecord};

pub const DEFAULT_BEAM_WIDTH: usize = 10;
pub const DEFAULT_TOP_K: usize = 5;

/// Sum-to-one tolerance of a [`DigitDistribution`].
pub const DISTRIBUTION_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("invalid distribution at position {position}: {reason}")]
    InvalidDistribution { position: usize, reason: String },
    #[error("prefix {0:?} is not a path in the label trie")]
    PrefixNotInTrie(String),
    #[error("the label space has no leaves")]
    EmptyLabelSpace,
    #[error("invalid beam configuration: {0}")]
    InvalidBeam(String),
    #[error("training data is empty")]
    EmptyTraining,
    #[error("smoothing alpha must be positive and finite, got {0}")]
    InvalidAlpha(f64),
    #[error("training label {0} is not a leaf of the partition")]
    LabelNotLeaf(LabelString),
    #[error("model was trained against partition {expected}, but partition {actual} was supplied")]
    ChecksumMismatch { expected: String, actual: String },
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("malformed model file: {0}")]
    MalformedModel(String),
    #[error("malformed scores file at line {line}: {reason}")]
    MalformedScores { line: usize, reason: String },
    #[error(transparent)]
    Label(#[from] LabelError),
}

/// One decoding step's output symbol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Symbol {
    Digit(u8),
    Eos,
}

impl Symbol {
    const COUNT: usize = 7;

    fn index(self) -> usize {
        match self {
            Symbol::Digit(d) => d as usize,
            Symbol::Eos => 6,
        }
    }

    fn from_index(i: usize) -> Self {
        if i == 6 {
            Symbol::Eos
        } else {
            Symbol::Digit(i as u8)
        }
    }

    /// Symbols that may carry mass at `position` (the prefix length).
    pub fn allowed_at(position: usize) -> &'static [Symbol] {
        const FACES: [Symbol; 6] =
            [Symbol::Digit(0), Symbol::Digit(1), Symbol::Digit(2), Symbol::Digit(3), Symbol::Digit(4), Symbol::Digit(5)];
        const CHILDREN: [Symbol; 5] =
            [Symbol::Digit(0), Symbol::Digit(1), Symbol::Digit(2), Symbol::Digit(3), Symbol::Eos];
        if position == 0 {
            &FACES
        } else {
            &CHILDREN
        }
    }

    fn is_allowed_at(self, position: usize) -> bool {
        match self {
            Symbol::Digit(d) if position == 0 => d <= 5,
            Symbol::Digit(d) => d <= 3,
            Symbol::Eos => position > 0,
        }
    }
}

impl fmt::Display for Symbol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Symbol::Digit(d) => write!(f, "{d}"),
            Symbol::Eos => f.write_str("EOS"),
        }
    }
}

impl FromStr for Symbol {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "EOS" => Ok(Symbol::Eos),
            _ if s.len() == 1 && (b'0'..=b'5').contains(&s.as_bytes()[0]) => Ok(Symbol::Digit(s.as_bytes()[0] - b'0')),
            _ => Err(format!("unknown symbol {s:?}")),
        }
    }
}

/// Next-symbol probabilities at one decoding position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DigitDistribution {
    position: usize,
    probs: [f64; Symbol::COUNT],
}

impl DigitDistribution {
    /// Validates and renormalizes `pairs`. The raw sum must be within
    /// `tolerance` of 1; repeated symbols accumulate.
    pub fn from_pairs<I>(position: usize, pairs: I, tolerance: f64) -> Result<Self, DecodeError>
    where
        I: IntoIterator<Item = (Symbol, f64)>,
    {
        let invalid = |reason: String| DecodeError::InvalidDistribution { position, reason };
        let mut probs = [0.0; Symbol::COUNT];
        for (sym, p) in pairs {
            if !p.is_finite() || p < 0.0 {
                return Err(invalid(format!("probability {p} for {sym}")));
            }
            if p > 0.0 && !sym.is_allowed_at(position) {
                return Err(invalid(format!("symbol {sym} cannot occur here")));
            }
            probs[sym.index()] += p;
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > tolerance {
            return Err(invalid(format!("probabilities sum to {sum}")));
        }
        if sum != 1.0 {
            probs.iter_mut().for_each(|p| *p /= sum);
        }
        Ok(Self { position, probs })
    }

    pub fn uniform(position: usize) -> Self {
        let allowed = Symbol::allowed_at(position);
        let mut probs = [0.0; Symbol::COUNT];
        for s in allowed {
            probs[s.index()] = 1.0 / allowed.len() as f64;
        }
        Self { position, probs }
    }

    /// Uniform over an explicit set of symbols.
    pub(crate) fn uniform_over(position: usize, symbols: &[Symbol]) -> Self {
        let mut probs = [0.0; Symbol::COUNT];
        for s in symbols {
            probs[s.index()] = 1.0 / symbols.len() as f64;
        }
        Self { position, probs }
    }

    pub fn position(&self) -> usize {
        self.position
    }

    pub fn prob(&self, sym: Symbol) -> f64 {
        self.probs[sym.index()]
    }

    /// Symbols with non-zero probability.
    pub fn support(&self) -> impl Iterator<Item = (Symbol, f64)> + '_ {
        self.probs
            .iter()
            .enumerate()
            .filter(|(_, p)| **p > 0.0)
            .map(|(i, p)| (Symbol::from_index(i), *p))
    }
}

/// A next-symbol model conditioned on free text.
///
/// Implementations must be deterministic for a fixed `(text, prefix)`.
pub trait SequenceScorer: Send + Sync {
    /// Stable identifier reported by services and recorded in outputs.
    fn id(&self) -> String;

    /// Distribution over the symbol following `prefix` (a label, or empty).
    fn score_next(&self, text: &str, prefix: &str) -> Result<DigitDistribution, DecodeError>;

    /// Whether scoring mutates internal state beyond diagnostics counters.
    fn is_stateful(&self) -> bool {
        false
    }

    /// Per-text view; scorers with expensive per-text work override this to
    /// do it once per query.
    fn prepare<'a>(&'a self, text: &'a str) -> Result<Box<dyn PreparedScorer + 'a>, DecodeError> {
        Ok(Box::new(Unprepared { scorer: self, text }))
    }
}

/// A scorer bound to one query text.
pub trait PreparedScorer {
    fn score_next(&self, prefix: &str) -> Result<DigitDistribution, DecodeError>;
}

struct Unprepared<'a, S: ?Sized> {
    scorer: &'a S,
    text: &'a str,
}

impl<S: SequenceScorer + ?Sized> PreparedScorer for Unprepared<'_, S> {
    fn score_next(&self, prefix: &str) -> Result<DigitDistribution, DecodeError> {
        self.scorer.score_next(self.text, prefix)
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct TrieNode {
    children: u8,
    leaf: bool,
}

/// Valid label prefixes of a leaf set.
#[derive(Debug, Clone, Default)]
pub struct LabelTrie {
    root_children: u8,
    nodes: HashMap<CellId, TrieNode>,
    leaves: usize,
}

impl LabelTrie {
    pub fn from_leaves<I: IntoIterator<Item = CellId>>(leaves: I) -> Self {
        let mut trie = Self::default();
        for leaf in leaves {
            let entry = trie.nodes.entry(leaf).or_default();
            if entry.leaf {
                continue;
            }
            entry.leaf = true;
            trie.leaves += 1;
            let mut cell = leaf;
            while let Ok(parent) = cell.parent() {
                let digit = cell.digit(cell.level());
                trie.nodes.entry(parent).or_default().children |= 1 << digit;
                cell = parent;
            }
            trie.root_children |= 1 << cell.face_index();
        }
        trie
    }

    pub fn from_partition(partition: &AdaptivePartition) -> Self {
        Self::from_leaves(partition.leaves().map(|(c, _)| c))
    }

    pub fn leaf_count(&self) -> usize {
        self.leaves
    }

    pub fn is_leaf(&self, cell: &CellId) -> bool {
        self.nodes.get(cell).is_some_and(|n| n.leaf)
    }

    pub fn contains_prefix(&self, cell: &CellId) -> bool {
        self.nodes.contains_key(cell)
    }

    /// Symbols that keep `prefix` on a path to a leaf; `None` when `prefix`
    /// is not in the trie.
    pub fn allowed(&self, prefix: Option<&CellId>) -> Option<Vec<Symbol>> {
        let (mask, leaf) = match prefix {
            None => (self.root_children, false),
            Some(c) => {
                let n = self.nodes.get(c)?;
                (n.children, n.leaf)
            }
        };
        let mut out: Vec<Symbol> = (0..6).filter(|d| mask & (1 << d) != 0).map(Symbol::Digit).collect();
        if leaf {
            out.push(Symbol::Eos);
        }
        Some(out)
    }

    /// Parses and checks a prefix string (empty for the root).
    pub fn resolve(&self, prefix: &str) -> Result<Option<CellId>, DecodeError> {
        if prefix.is_empty() {
            return Ok(None);
        }
        let cell = LabelString::parse(prefix)
            .map_err(|_| DecodeError::PrefixNotInTrie(prefix.to_owned()))?
            .cell();
        if !self.contains_prefix(&cell) {
            return Err(DecodeError::PrefixNotInTrie(prefix.to_owned()));
        }
        Ok(Some(cell))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BeamConfig {
    pub beam_width: usize,
    pub top_k: usize,
}

impl BeamConfig {
    pub fn new(beam_width: usize, top_k: usize) -> Result<Self, DecodeError> {
        if beam_width == 0 {
            return Err(DecodeError::InvalidBeam("beam width must be at least 1".into()));
        }
        if top_k == 0 || top_k > beam_width {
            return Err(DecodeError::InvalidBeam(format!(
                "top_k {top_k} must lie in 1..={beam_width} (the beam width)"
            )));
        }
        Ok(Self { beam_width, top_k })
    }
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self { beam_width: DEFAULT_BEAM_WIDTH, top_k: DEFAULT_TOP_K }
    }
}

/// A completed decoding with its sequence probability.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub label: LabelString,
    pub probability: f64,
}

struct Partial {
    cell: Option<CellId>,
    label: String,
    probability: f64,
}

/// Descending probability, then ascending label.
fn rank(a_prob: f64, a_label: &str, b_prob: f64, b_label: &str) -> Ordering {
    b_prob.total_cmp(&a_prob).then_with(|| a_label.cmp(b_label))
}

/// Trie-constrained beam search.
///
/// Each step expands every live prefix by the symbols the trie allows,
/// moves end-of-sequence extensions to the finished set, and keeps the
/// `beam_width` most probable remaining prefixes. Returns the `top_k`
/// finished sequences by probability (product of step probabilities).
pub fn beam_search(
    scorer: &(impl SequenceScorer + ?Sized),
    text: &str,
    trie: &LabelTrie,
    config: BeamConfig,
) -> Result<Vec<Hypothesis>, DecodeError> {
    if trie.leaf_count() == 0 {
        return Err(DecodeError::EmptyLabelSpace);
    }
    let prepared = scorer.prepare(text)?;
    let mut live = vec![Partial { cell: None, label: String::new(), probability: 1.0 }];
    let mut finished: Vec<Hypothesis> = Vec::new();

    while !live.is_empty() {
        let mut next = Vec::new();
        for hyp in &live {
            let allowed = trie
                .allowed(hyp.cell.as_ref())
                .ok_or_else(|| DecodeError::PrefixNotInTrie(hyp.label.clone()))?;
            let dist = prepared.score_next(&hyp.label)?;
            for (sym, p) in constrain(&dist, &allowed) {
                let probability = hyp.probability * p;
                match sym {
                    Symbol::Eos => finished.push(Hypothesis {
                        label: LabelString::parse(&hyp.label)?,
                        probability,
                    }),
                    Symbol::Digit(d) => {
                        let cell = match hyp.cell {
                            None => CellId::face(d).expect("allowed face"),
                            Some(c) => c.child(d).expect("allowed child"),
                        };
                        let mut label = hyp.label.clone();
                        label.push((b'0' + d) as char);
                        next.push(Partial { cell: Some(cell), label, probability });
                    }
                }
            }
        }
        next.sort_by(|a, b| rank(a.probability, &a.label, b.probability, &b.label));
        next.truncate(config.beam_width);
        live = next;
    }

    finished.sort_by(|a, b| rank(a.probability, a.label.as_str(), b.probability, b.label.as_str()));
    finished.truncate(config.top_k);
    Ok(finished)
}

/// Step probabilities restricted to `allowed`. Renormalizes only when the
/// scorer put mass elsewhere; falls back to uniform when none is left.
fn constrain(dist: &DigitDistribution, allowed: &[Symbol]) -> Vec<(Symbol, f64)> {
    let kept: f64 = allowed.iter().map(|s| dist.prob(*s)).sum();
    let dropped = dist.support().any(|(s, _)| !allowed.contains(&s));
    if kept == 0.0 {
        let u = 1.0 / allowed.len() as f64;
        return allowed.iter().map(|s| (*s, u)).collect();
    }
    allowed
        .iter()
        .map(|s| {
            let p = dist.prob(*s);
            (*s, if dropped { p / kept } else { p })
        })
        .collect()
}

/// A hypothesis with map geometry.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prediction {
    pub label: LabelString,
    pub probability: f64,
    pub center: LatLon,
    pub polygon: [LatLon; 4],
    pub ancestors: Vec<LabelString>,
}

impl From<Hypothesis> for Prediction {
    fn from(h: Hypothesis) -> Self {
        let cell = h.label.cell();
        Self {
            ancestors: h.label.ancestors(),
            center: cell.center(),
            polygon: cell.vertices(),
            label: h.label,
            probability: h.probability,
        }
    }
}

/// Decodes `text` and attaches geometry.
pub fn predict(
    scorer: &(impl SequenceScorer + ?Sized),
    text: &str,
    trie: &LabelTrie,
    config: BeamConfig,
) -> Result<Vec<Prediction>, DecodeError> {
    Ok(beam_search(scorer, text, trie, config)?.into_iter().map(Prediction::from).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredLabel {
    pub label: LabelString,
    pub prob: f64,
}

/// One line of a predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_label: Option<LabelString>,
    pub predictions: Vec<ScoredLabel>,
}

impl PredictionRecord {
    pub fn new(id: impl Into<String>, text: impl Into<String>, gold_label: Option<LabelString>, hyps: &[Hypothesis]) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            gold_label,
            predictions: hyps.iter().map(|h| ScoredLabel { label: h.label.clone(), prob: h.probability }).collect(),
        }
    }
}

/// A scorer read from disk: a baseline model file or an external scores file.
#[derive(Debug)]
pub enum LoadedScorer {
    Baseline(BaselineModel),
    Replay(ReplayScorer),
}

impl LoadedScorer {
    /// Detects the file kind from its first line. Baseline models are checked
    /// against `partition`.
    pub fn load(path: impl AsRef<std::path::Path>, partition: &AdaptivePartition) -> Result<Self, DecodeError> {
        let path = path.as_ref();
        let text =
            std::fs::read_to_string(path).map_err(|source| DecodeError::Io { path: path.display().to_string(), source })?;
        Self::from_text(&text, partition)
    }

    pub fn from_text(text: &str, partition: &AdaptivePartition) -> Result<Self, DecodeError> {
        let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
        let is_model = serde_json::from_str::<serde_json::Value>(first)
            .ok()
            .is_some_and(|v| v.get("format").is_some());
        if is_model {
            BaselineModel::from_json_str(text, partition).map(Self::Baseline)
        } else {
            ReplayScorer::from_jsonl(text).map(Self::Replay)
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::Baseline(_) => "baseline",
            Self::Replay(_) => "replay",
        }
    }
}

impl SequenceScorer for LoadedScorer {
    fn id(&self) -> String {
        match self {
            Self::Baseline(m) => m.id(),
            Self::Replay(r) => r.id(),
        }
    }

    fn score_next(&self, text: &str, prefix: &str) -> Result<DigitDistribution, DecodeError> {
        match self {
            Self::Baseline(m) => m.score_next(text, prefix),
            Self::Replay(r) => r.score_next(text, prefix),
        }
    }

    fn is_stateful(&self) -> bool {
        match self {
            Self::Baseline(m) => m.is_stateful(),
            Self::Replay(r) => r.is_stateful(),
        }
    }

    fn prepare<'a>(&'a self, text: &'a str) -> Result<Box<dyn PreparedScorer + 'a>, DecodeError> {
        match self {
            Self::Baseline(m) => m.prepare(text),
            Self::Replay(r) => r.prepare(text),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Always returns the same distribution.
    struct Fixed(Vec<(Symbol, f64)>, Vec<(Symbol, f64)>);

    impl SequenceScorer for Fixed {
        fn id(&self) -> String {
            "fixed".into()
        }

        fn score_next(&self, _text: &str, prefix: &str) -> Result<DigitDistribution, DecodeError> {
            let pairs = if prefix.is_empty() { &self.0 } else { &self.1 };
            DigitDistribution::from_pairs(prefix.len(), pairs.iter().copied(), 1e-9)
        }
    }

    fn face_trie() -> LabelTrie {
        LabelTrie::from_leaves(CellId::faces())
    }

    #[test]
    fn distribution_validation() {
        use Symbol::*;
        assert!(DigitDistribution::from_pairs(0, [(Digit(5), 1.0)], 1e-9).is_ok());
        assert!(DigitDistribution::from_pairs(0, [(Eos, 1.0)], 1e-9).is_err());
        assert!(DigitDistribution::from_pairs(1, [(Digit(4), 1.0)], 1e-9).is_err());
        assert!(DigitDistribution::from_pairs(1, [(Digit(0), 0.5), (Eos, 0.4)], 1e-9).is_err());
        assert!(DigitDistribution::from_pairs(1, [(Digit(0), -0.5), (Eos, 1.5)], 1e-9).is_err());
        let d = DigitDistribution::from_pairs(1, [(Digit(0), 0.5), (Eos, 0.5000001)], 1e-6).unwrap();
        assert!((d.prob(Digit(0)) + d.prob(Eos) - 1.0).abs() < 1e-15);
        let u = DigitDistribution::uniform(3);
        assert_eq!(u.prob(Eos), 0.2);
        assert_eq!(u.prob(Digit(4)), 0.0);
        assert_eq!("EOS".parse::<Symbol>(), Ok(Eos));
        assert!("6".parse::<Symbol>().is_err());
    }

    #[test]
    fn beam_config_validation() {
        assert!(BeamConfig::new(0, 1).is_err());
        assert!(BeamConfig::new(3, 4).is_err());
        assert!(BeamConfig::new(3, 0).is_err());
        assert_eq!(BeamConfig::default(), BeamConfig::new(10, 5).unwrap());
    }

    #[test]
    fn face_partition_yields_face_labels() {
        use Symbol::*;
        let scorer = Fixed(vec![(Digit(1), 0.7), (Digit(4), 0.3)], vec![(Digit(2), 1.0)]);
        let out = beam_search(&scorer, "x", &face_trie(), BeamConfig::new(10, 5).unwrap()).unwrap();
        let labels: Vec<&str> = out.iter().map(|h| h.label.as_str()).collect();
        // Digit mass is masked at face leaves, leaving only end-of-sequence.
        assert_eq!(labels, ["1", "4", "0", "2", "3"]);
        assert_eq!(out[0].probability, 0.7);
        assert_eq!(out[2].probability, 0.0);
    }

    #[test]
    fn trie_allowed_symbols() {
        let leaves: Vec<CellId> = CellId::new(3, &[]).unwrap().children().unwrap().to_vec();
        let trie = LabelTrie::from_leaves(leaves);
        assert_eq!(trie.allowed(None).unwrap(), [Symbol::Digit(3)]);
        let face = CellId::new(3, &[]).unwrap();
        assert_eq!(trie.allowed(Some(&face)).unwrap().len(), 4);
        let leaf = CellId::new(3, &[2]).unwrap();
        assert_eq!(trie.allowed(Some(&leaf)).unwrap(), [Symbol::Eos]);
        assert!(trie.allowed(Some(&CellId::new(2, &[]).unwrap())).is_none());
        assert!(matches!(trie.resolve("2"), Err(DecodeError::PrefixNotInTrie(_))));
        assert!(matches!(trie.resolve("x"), Err(DecodeError::PrefixNotInTrie(_))));
        assert_eq!(trie.resolve("").unwrap(), None);
    }

    #[test]
    fn empty_trie_is_an_error() {
        let scorer = Fixed(vec![(Symbol::Digit(0), 1.0)], vec![]);
        assert!(matches!(
            beam_search(&scorer, "x", &LabelTrie::default(), BeamConfig::default()),
            Err(DecodeError::EmptyLabelSpace)
        ));
    }

    #[test]
    fn forbidden_mass_is_renormalized_away() {
        use Symbol::*;
        let leaves: Vec<CellId> = CellId::new(3, &[]).unwrap().children().unwrap().to_vec();
        let trie = LabelTrie::from_leaves(leaves);
        // Root mass on face 3 only 0.5; the rest is on a face with no leaves.
        let scorer = Fixed(vec![(Digit(3), 0.5), (Digit(0), 0.5)], vec![(Digit(1), 0.6), (Digit(2), 0.2), (Eos, 0.2)]);
        let out = beam_search(&scorer, "x", &trie, BeamConfig::new(4, 4).unwrap()).unwrap();
        assert_eq!(out[0].label.as_str(), "31");
        assert!((out[0].probability - 0.75).abs() < 1e-15);
        assert!((out[1].probability - 0.25).abs() < 1e-15);
        assert_eq!(out[2].probability, 0.0);
    }
}
