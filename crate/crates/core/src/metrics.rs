//! Flat and hierarchical classification metrics over digit labels.
//!
//! For an example with predicted label `p` and gold label `g`, `P` and `T`
//! are the prefix sets of `p` and `g` (each label together with all of its
//! ancestors, down to the face). Hierarchical precision and recall are
//! micro-averaged: `hP = Σ|P ∩ T| / Σ|P|`, `hR = Σ|P ∩ T| / Σ|T|`, and
//! `hF = 2·hP·hR / (hP + hR)`.
//!
//! "Hierarchy accuracy" in reports is an alias for `hF`.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cellgeo::LatLon;
use crate::labelcodec::LabelString;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("no evaluation pairs")]
    Empty,
    #[error("pair {0} has no gold location")]
    MissingGoldLocation(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalPair {
    pub predicted: LabelString,
    pub gold: LabelString,
    pub gold_loc: Option<LatLon>,
}

impl EvalPair {
    pub fn new(predicted: LabelString, gold: LabelString) -> Self {
        Self { predicted, gold, gold_loc: None }
    }

    pub fn with_location(mut self, loc: LatLon) -> Self {
        self.gold_loc = Some(loc);
        self
    }

    /// `|P ∩ T|`: the length of the common prefix.
    pub fn overlap(&self) -> usize {
        common_prefix_len(self.predicted.as_str(), self.gold.as_str())
    }
}

fn common_prefix_len(a: &str, b: &str) -> usize {
    a.bytes().zip(b.bytes()).take_while(|(x, y)| x == y).count()
}

/// The label and all of its ancestors.
pub fn ancestor_set(label: &LabelString) -> BTreeSet<LabelString> {
    label
        .prefixes()
        .map(|p| LabelString::parse(p).expect("prefix of a valid label"))
        .collect()
}

/// Micro-averaged numerators and denominators; partial sums from shards can
/// be merged with `+`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct HierarchicalCounts {
    pub intersection: u64,
    pub predicted: u64,
    pub gold: u64,
    pub exact: u64,
    pub n: u64,
}

impl HierarchicalCounts {
    pub fn add(&mut self, pair: &EvalPair) {
        self.intersection += pair.overlap() as u64;
        self.predicted += pair.predicted.len() as u64;
        self.gold += pair.gold.len() as u64;
        self.exact += u64::from(pair.predicted == pair.gold);
        self.n += 1;
    }

    pub fn scores(&self) -> Result<HierarchicalScores, MetricsError> {
        if self.n == 0 {
            return Err(MetricsError::Empty);
        }
        let hp = self.intersection as f64 / self.predicted as f64;
        let hr = self.intersection as f64 / self.gold as f64;
        let hf = if hp + hr == 0.0 { 0.0 } else { 2.0 * hp * hr / (hp + hr) };
        Ok(HierarchicalScores { hp, hr, hf })
    }
}

impl std::ops::Add for HierarchicalCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            intersection: self.intersection + o.intersection,
            predicted: self.predicted + o.predicted,
            gold: self.gold + o.gold,
            exact: self.exact + o.exact,
            n: self.n + o.n,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HierarchicalScores {
    pub hp: f64,
    pub hr: f64,
    pub hf: f64,
}

pub fn hierarchical_scores(pairs: &[EvalPair]) -> Result<HierarchicalScores, MetricsError> {
    let mut counts = HierarchicalCounts::default();
    pairs.iter().for_each(|p| counts.add(p));
    counts.scores()
}

pub fn flat_accuracy(pairs: &[EvalPair]) -> Result<f64, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::Empty);
    }
    let exact = pairs.iter().filter(|p| p.predicted == p.gold).count();
    Ok(exact as f64 / pairs.len() as f64)
}

/// Mean great-circle distance from each predicted cell's center to the gold
/// location.
pub fn mean_distance_error(pairs: &[EvalPair]) -> Result<f64, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut total = 0.0;
    for (i, pair) in pairs.iter().enumerate() {
        let gold = pair.gold_loc.ok_or(MetricsError::MissingGoldLocation(i))?;
        total += pair.predicted.cell().center().distance_km(&gold);
    }
    Ok(total / pairs.len() as f64)
}

/// Machine-readable evaluation summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub flat_accuracy: f64,
    #[serde(rename = "hP")]
    pub hp: f64,
    #[serde(rename = "hR")]
    pub hr: f64,
    #[serde(rename = "hF")]
    pub hf: f64,
    pub mean_distance_km: Option<f64>,
    pub n: u64,
}

impl EvalReport {
    /// Distance error is included only when every pair carries a location.
    pub fn evaluate(pairs: &[EvalPair]) -> Result<Self, MetricsError> {
        let scores = hierarchical_scores(pairs)?;
        let mean_distance_km = if pairs.iter().all(|p| p.gold_loc.is_some()) {
            Some(mean_distance_error(pairs)?)
        } else {
            None
        };
        Ok(Self {
            flat_accuracy: flat_accuracy(pairs)?,
            hp: scores.hp,
            hr: scores.hr,
            hf: scores.hf,
            mean_distance_km,
            n: pairs.len() as u64,
        })
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<34} {:>12}", "metric", "value")?;
        writeln!(f, "{:<34} {:>12.5}", "flat accuracy", self.flat_accuracy)?;
        writeln!(f, "{:<34} {:>12.5}", "hierarchical precision (hP)", self.hp)?;
        writeln!(f, "{:<34} {:>12.5}", "hierarchical recall (hR)", self.hr)?;
        writeln!(f, "{:<34} {:>12.5}", "hierarchical F (hF, hier. acc.)", self.hf)?;
        match self.mean_distance_km {
            Some(d) => writeln!(f, "{:<34} {:>12.3}", "mean distance error (km)", d)?,
            None => writeln!(f, "{:<34} {:>12}", "mean distance error (km)", "n/a")?,
        }
        writeln!(f, "{:<34} {:>12}", "examples", self.n)
    }
}
