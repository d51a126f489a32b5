//! Text geocoding over a density-adaptive hierarchy of cube-sphere cells.
//!
//! * [`cellgeo`]: cell geometry (point to cell, hierarchy, centers, areas).
//! * [`partition`]: adaptive subdivision defining the label space.
//! * [`labelcodec`]: digit-string labels.
//! * [`dataset`]: record parsing, labeling and splitting.
//! * [`decode`]: scorers and trie-constrained beam search.
//! * [`metrics`]: flat and hierarchical evaluation.
//! * [`geojson`]: map geometry for cells.

pub mod cellgeo;
pub mod dataset;
pub mod decode;
pub mod geojson;
pub mod labelcodec;
pub mod metrics;
pub mod partition;
pub mod util;

pub use cellgeo::{CellId, LatLon};
pub use labelcodec::LabelString;
pub use partition::{build_partition, AdaptivePartition, PartitionParams};
