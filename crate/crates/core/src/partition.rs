//! Density-adaptive leaf cells.
//!
//! Starting from the six faces, a cell is split into its four children while
//! it holds more than `max_cell_samples` points and sits above `max_level`.
//! Every sibling produced by a split stays in the partition, including empty
//! ones, so the leaves always cover the whole sphere.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cellgeo::{CellId, LatLon, DEFAULT_MAX_LEVEL, MAX_LEVEL};
use crate::labelcodec::{LabelError, LabelString};
use crate::util::{sha256_hex, write_atomic};

pub const PARTITION_FORMAT_VERSION: u32 = 1;

/// Default split threshold, sized for corpora of several million records.
pub const DEFAULT_MAX_CELL_SAMPLES: u64 = 10_000;

#[derive(Debug, Error)]
pub enum PartitionError {
    #[error("invalid partition parameters: {0}")]
    InvalidParams(String),
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("malformed partition file at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("unsupported partition format version {0}")]
    Version(u32),
    #[error("leaves[{index}]: invalid label {label:?}: {source}")]
    Label { index: usize, label: String, source: LabelError },
    #[error("invalid partition: {0}")]
    Invariant(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionParams {
    pub max_cell_samples: u64,
    pub max_level: u8,
}

impl PartitionParams {
    pub fn new(max_cell_samples: u64, max_level: u8) -> Result<Self, PartitionError> {
        let params = Self { max_cell_samples, max_level };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<(), PartitionError> {
        if self.max_cell_samples < 1 {
            return Err(PartitionError::InvalidParams("max_cell_samples must be at least 1".into()));
        }
        if self.max_level > MAX_LEVEL {
            return Err(PartitionError::InvalidParams(format!(
                "max_level {} exceeds {MAX_LEVEL}",
                self.max_level
            )));
        }
        Ok(())
    }
}

impl Default for PartitionParams {
    fn default() -> Self {
        Self { max_cell_samples: DEFAULT_MAX_CELL_SAMPLES, max_level: DEFAULT_MAX_LEVEL }
    }
}

/// The leaf set of an adaptive subdivision, with per-leaf point counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdaptivePartition {
    params: PartitionParams,
    leaves: BTreeMap<CellId, u64>,
    total_points: u64,
}

/// Builds the partition for a multiset of point locations.
///
/// Points are counted at `max_level` resolution, then each face is split top
/// down over the sorted counts. The result depends only on the multiset of
/// locations.
pub fn build_partition<I>(points: I, params: PartitionParams) -> Result<AdaptivePartition, PartitionError>
where
    I: IntoIterator<Item = LatLon>,
{
    params.validate()?;
    let mut fine: HashMap<CellId, u64> = HashMap::new();
    for p in points {
        let cell = CellId::from_latlon(p, params.max_level).expect("validated max_level");
        *fine.entry(cell).or_default() += 1;
    }
    let mut fine: Vec<(CellId, u64)> = fine.into_iter().collect();
    fine.sort_unstable();

    let mut leaves = BTreeMap::new();
    for face in CellId::faces() {
        let lo = fine.partition_point(|(c, _)| c.face_index() < face.face_index());
        let hi = fine.partition_point(|(c, _)| c.face_index() <= face.face_index());
        subdivide(face, &fine[lo..hi], &params, &mut leaves);
    }
    let total_points = leaves.values().sum();
    Ok(AdaptivePartition { params, leaves, total_points })
}

/// `fine` holds the sorted max-level cells inside `cell`.
fn subdivide(cell: CellId, fine: &[(CellId, u64)], params: &PartitionParams, out: &mut BTreeMap<CellId, u64>) {
    let count: u64 = fine.iter().map(|(_, n)| n).sum();
    if count <= params.max_cell_samples || cell.level() >= params.max_level {
        out.insert(cell, count);
        return;
    }
    let depth = cell.level() + 1;
    let mut rest = fine;
    for (digit, child) in cell.children().expect("level below max_level").into_iter().enumerate() {
        let split = rest.partition_point(|(c, _)| c.digit(depth) as usize == digit);
        let (inside, tail) = rest.split_at(split);
        subdivide(child, inside, params, out);
        rest = tail;
    }
}

impl AdaptivePartition {
    /// Assembles a partition from explicit leaves, enforcing every invariant.
    pub fn from_leaves<I>(params: PartitionParams, leaves: I) -> Result<Self, PartitionError>
    where
        I: IntoIterator<Item = (CellId, u64)>,
    {
        params.validate()?;
        let mut map = BTreeMap::new();
        for (cell, count) in leaves {
            if cell.level() > params.max_level {
                return Err(PartitionError::Invariant(format!(
                    "leaf {cell} is deeper than max_level {}",
                    params.max_level
                )));
            }
            if map.insert(cell, count).is_some() {
                return Err(PartitionError::Invariant(format!("duplicate leaf {cell}")));
            }
        }
        let mut prev: Option<&CellId> = None;
        for cell in map.keys() {
            if let Some(p) = prev {
                if p.contains_cell(cell) {
                    return Err(PartitionError::Invariant(format!("leaf {p} overlaps leaf {cell}")));
                }
            }
            prev = Some(cell);
        }
        // Disjoint leaves cover the sphere exactly when their max-level
        // descendants add up to the full grid.
        let covered: u128 = map.keys().map(|c| 1u128 << (2 * (params.max_level - c.level()) as u32)).sum();
        let full = 6u128 << (2 * params.max_level as u32);
        if covered != full {
            return Err(PartitionError::Invariant(format!(
                "leaves cover {covered} of {full} max-level cells"
            )));
        }
        for (cell, &count) in &map {
            if cell.level() < params.max_level && count > params.max_cell_samples {
                return Err(PartitionError::Invariant(format!(
                    "leaf {cell} holds {count} points, above max_cell_samples {}",
                    params.max_cell_samples
                )));
            }
        }
        let total_points = map.values().sum();
        Ok(Self { params, leaves: map, total_points })
    }

    pub fn params(&self) -> PartitionParams {
        self.params
    }

    pub fn max_level(&self) -> u8 {
        self.params.max_level
    }

    pub fn total_points(&self) -> u64 {
        self.total_points
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }

    /// Leaves with their counts, in label order.
    pub fn leaves(&self) -> impl Iterator<Item = (CellId, u64)> + '_ {
        self.leaves.iter().map(|(c, n)| (*c, *n))
    }

    pub fn is_leaf(&self, cell: &CellId) -> bool {
        self.leaves.contains_key(cell)
    }

    pub fn count(&self, cell: &CellId) -> Option<u64> {
        self.leaves.get(cell).copied()
    }

    /// The unique leaf containing `p`.
    pub fn leaf_for(&self, p: LatLon) -> CellId {
        let deepest = CellId::from_latlon(p, self.params.max_level).expect("validated max_level");
        self.leaf_containing(&deepest).expect("leaves cover the sphere")
    }

    /// The leaf that is an ancestor-or-self of `cell`, if `cell` is not above
    /// the leaf frontier.
    pub fn leaf_containing(&self, cell: &CellId) -> Option<CellId> {
        (0..=cell.level())
            .filter_map(|level| cell.ancestor(level))
            .find(|a| self.leaves.contains_key(a))
    }

    /// SHA-256 of the canonical file encoding, lowercase hex.
    pub fn checksum(&self) -> String {
        sha256_hex(self.to_canonical_string().as_bytes())
    }

    /// Canonical file encoding: one leaf per line in label order.
    pub fn to_canonical_string(&self) -> String {
        let mut out = String::new();
        let _ = write!(
            out,
            "{{\"version\":{PARTITION_FORMAT_VERSION},\"params\":{{\"max_cell_samples\":{},\"max_level\":{}}},\"leaves\":[",
            self.params.max_cell_samples, self.params.max_level
        );
        for (i, (cell, count)) in self.leaves.iter().enumerate() {
            let sep = if i == 0 { "" } else { "," };
            let _ = write!(out, "{sep}\n{{\"label\":\"{cell}\",\"count\":{count}}}");
        }
        out.push_str("\n]}\n");
        out
    }

    pub fn from_json_str(text: &str) -> Result<Self, PartitionError> {
        let file: PartitionFile = serde_json::from_str(text).map_err(|e| PartitionError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        if file.version != PARTITION_FORMAT_VERSION {
            return Err(PartitionError::Version(file.version));
        }
        file.params.validate()?;
        let mut leaves = Vec::with_capacity(file.leaves.len());
        for (index, leaf) in file.leaves.into_iter().enumerate() {
            let label = LabelString::parse_with_max_level(&leaf.label, file.params.max_level)
                .map_err(|source| PartitionError::Label { index, label: leaf.label.clone(), source })?;
            leaves.push((label.cell(), leaf.count));
        }
        Self::from_leaves(file.params, leaves)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), PartitionError> {
        let path = path.as_ref();
        write_atomic(path, self.to_canonical_string().as_bytes())
            .map_err(|source| PartitionError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PartitionError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|source| PartitionError::Io { path: path.display().to_string(), source })?;
        Self::from_json_str(&text)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PartitionFile {
    version: u32,
    params: PartitionParams,
    leaves: Vec<LeafEntry>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LeafEntry {
    label: String,
    count: u64,
}
