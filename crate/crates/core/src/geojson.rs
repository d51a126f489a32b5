//! GeoJSON geometry for cells.
//!
//! Rings are closed, counter-clockwise and in `[lon, lat]` order. Cell edges
//! are great-circle arcs, so coarse cells are densified along each edge.
//! Cells that cross the antimeridian come out as a two-part `MultiPolygon`;
//! the two face cells that contain a pole are closed along the pole line.

use std::fmt;
use std::str::FromStr;

use serde::{Serialize, Serializer};
use thiserror::Error;

use crate::cellgeo::{CellId, LatLon};
use crate::partition::AdaptivePartition;

/// `[lon, lat]`.
pub type Position = [f64; 2];
pub type Ring = Vec<Position>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GeometryOptions {
    /// Points per edge when densifying.
    pub densify_per_edge: usize,
    /// Densify cells at this level and coarser.
    pub densify_max_level: u8,
}

impl Default for GeometryOptions {
    fn default() -> Self {
        Self { densify_per_edge: 8, densify_max_level: 3 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Geometry {
    Polygon(Vec<Ring>),
    MultiPolygon(Vec<Vec<Ring>>),
}

impl Geometry {
    /// Outer rings of every part.
    pub fn rings(&self) -> Vec<&Ring> {
        match self {
            Geometry::Polygon(p) => p.iter().take(1).collect(),
            Geometry::MultiPolygon(ps) => ps.iter().filter_map(|p| p.first()).collect(),
        }
    }
}

impl Serialize for Geometry {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct Tagged<'a, T: Serialize> {
            #[serde(rename = "type")]
            kind: &'static str,
            coordinates: &'a T,
        }
        match self {
            Geometry::Polygon(c) => Tagged { kind: "Polygon", coordinates: c }.serialize(serializer),
            Geometry::MultiPolygon(c) => Tagged { kind: "MultiPolygon", coordinates: c }.serialize(serializer),
        }
    }
}

/// Map geometry of `cell`.
pub fn cell_geometry(cell: &CellId, opts: &GeometryOptions) -> Geometry {
    let per_edge = if cell.level() <= opts.densify_max_level { opts.densify_per_edge.max(1) } else { 1 };
    let rings = planar_rings(cell, per_edge);
    if rings.len() == 1 {
        Geometry::Polygon(rings)
    } else {
        Geometry::MultiPolygon(rings.into_iter().map(|r| vec![r]).collect())
    }
}

/// Closed planar rings (one, or two when split at the antimeridian).
fn planar_rings(cell: &CellId, per_edge: usize) -> Vec<Ring> {
    let pts = cell.boundary(per_edge);
    let pole = |p: &LatLon| (p.lat().abs() - 90.0).abs() < 1e-9;

    // Unwrap longitudes along the ring; a vertex on a pole becomes two points
    // on the pole line at its neighbours' longitudes.
    let n = pts.len();
    let mut ring: Vec<Position> = Vec::with_capacity(n + 2);
    let mut last_lon: Option<f64> = None;
    let start = (0..n).find(|&k| !pole(&pts[k])).expect("a cell has non-polar vertices");
    for step in 0..n {
        let k = (start + step) % n;
        let p = &pts[k];
        if pole(p) {
            let prev = last_lon.expect("first point is not polar");
            let next_raw = pts[(k + 1) % n].lon();
            let next = prev + wrap_delta(next_raw - prev);
            ring.push([prev, p.lat().signum() * 90.0]);
            ring.push([next, p.lat().signum() * 90.0]);
            last_lon = Some(next);
            continue;
        }
        let lon = match last_lon {
            None => p.lon(),
            Some(prev) => prev + wrap_delta(p.lon() - prev),
        };
        ring.push([lon, p.lat()]);
        last_lon = Some(lon);
    }
    let winding = ring.last().unwrap()[0] + wrap_delta(ring[0][0] - ring.last().unwrap()[0]) - ring[0][0];

    if winding.abs() > 180.0 {
        return vec![pole_cap_ring(&ring, winding > 0.0)];
    }

    let (mut min, mut max) = ring.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p[0]), hi.max(p[0])));
    let shift = if min >= 180.0 {
        -360.0
    } else if max <= -180.0 {
        360.0
    } else {
        0.0
    };
    if shift != 0.0 {
        ring.iter_mut().for_each(|p| p[0] += shift);
        min += shift;
        max += shift;
    }
    let mut rings = if max > 180.0 {
        let west = clip(&ring, 180.0, true);
        let east: Ring = clip(&ring, 180.0, false).into_iter().map(|[x, y]| [x - 360.0, y]).collect();
        vec![west, east]
    } else if min < -180.0 {
        let east = clip(&ring, -180.0, false);
        let west: Ring = clip(&ring, -180.0, true).into_iter().map(|[x, y]| [x + 360.0, y]).collect();
        vec![east, west]
    } else {
        vec![ring]
    };
    for r in &mut rings {
        dedup_and_close(r);
    }
    rings.retain(|r| r.len() >= 4 && signed_area2(r).abs() > 1e-12);
    rings
}

fn wrap_delta(d: f64) -> f64 {
    let mut d = d % 360.0;
    if d > 180.0 {
        d -= 360.0;
    } else if d <= -180.0 {
        d += 360.0;
    }
    d
}

fn wrap_lon(lon: f64) -> f64 {
    let w = wrap_delta(lon);
    if w == -180.0 {
        180.0
    } else {
        w
    }
}

/// Ring around a pole: cut at the antimeridian and closed along the pole line.
/// Going east (`north`) the cap sits above the boundary, going west below it;
/// both orders are counter-clockwise in the plane.
fn pole_cap_ring(unwrapped: &[Position], north: bool) -> Ring {
    let pts: Vec<Position> = unwrapped.iter().map(|[x, y]| [wrap_lon(*x), *y]).collect();
    let n = pts.len();
    // Find the edge that crosses the antimeridian.
    let mut cut = None;
    for k in 0..n {
        let (a, b) = (pts[k], pts[(k + 1) % n]);
        let crosses = if north { b[0] < a[0] } else { b[0] > a[0] };
        if crosses && (b[0] - a[0]).abs() > 180.0 {
            cut = Some(k);
            break;
        }
    }
    let k = cut.expect("a ring around a pole crosses the antimeridian");
    let (a, b) = (pts[k], pts[(k + 1) % n]);
    let (edge_lon, b_shifted) = if north { (180.0, b[0] + 360.0) } else { (-180.0, b[0] - 360.0) };
    let t = (edge_lon - a[0]) / (b_shifted - a[0]);
    let lat_cut = a[1] + t * (b[1] - a[1]);
    let cap = if north { 90.0 } else { -90.0 };

    let mut ring = vec![[-edge_lon, lat_cut]];
    for step in 1..=n {
        ring.push(pts[(k + step) % n]);
    }
    ring.push([edge_lon, lat_cut]);
    ring.push([edge_lon, cap]);
    ring.push([-edge_lon, cap]);
    dedup_and_close(&mut ring);
    ring
}

/// Sutherland-Hodgman clip of a ring against the vertical line `x = at`,
/// keeping `x <= at` when `keep_west`.
fn clip(ring: &[Position], at: f64, keep_west: bool) -> Ring {
    let inside = |p: &Position| if keep_west { p[0] <= at } else { p[0] >= at };
    let mut out = Vec::new();
    let n = ring.len();
    for k in 0..n {
        let cur = ring[k];
        let next = ring[(k + 1) % n];
        match (inside(&cur), inside(&next)) {
            (true, true) => out.push(next),
            (true, false) => out.push(cross_at(cur, next, at)),
            (false, true) => {
                out.push(cross_at(cur, next, at));
                out.push(next);
            }
            (false, false) => {}
        }
    }
    out
}

fn cross_at(a: Position, b: Position, x: f64) -> Position {
    let t = (x - a[0]) / (b[0] - a[0]);
    [x, a[1] + t * (b[1] - a[1])]
}

fn dedup_and_close(ring: &mut Ring) {
    ring.dedup();
    if ring.len() > 1 && ring.first() == ring.last() {
        ring.pop();
    }
    if let Some(first) = ring.first().copied() {
        ring.push(first);
    }
}

/// Twice the signed planar area of a closed ring; positive when CCW.
pub fn signed_area2(ring: &[Position]) -> f64 {
    ring.windows(2).map(|w| w[0][0] * w[1][1] - w[1][0] * w[0][1]).sum()
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("malformed bbox: {0}")]
pub struct BboxError(String);

/// A longitude/latitude query box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bbox {
    pub min_lon: f64,
    pub min_lat: f64,
    pub max_lon: f64,
    pub max_lat: f64,
}

impl Bbox {
    pub const WORLD: Bbox = Bbox { min_lon: -180.0, min_lat: -90.0, max_lon: 180.0, max_lat: 90.0 };

    pub fn new(min_lon: f64, min_lat: f64, max_lon: f64, max_lat: f64) -> Result<Self, BboxError> {
        let ok_lon = |x: f64| (-180.0..=180.0).contains(&x);
        let ok_lat = |y: f64| (-90.0..=90.0).contains(&y);
        if !(ok_lon(min_lon) && ok_lon(max_lon) && ok_lat(min_lat) && ok_lat(max_lat)) {
            return Err(BboxError("coordinates out of range".into()));
        }
        if min_lon > max_lon || min_lat > max_lat {
            return Err(BboxError("minimum exceeds maximum".into()));
        }
        Ok(Self { min_lon, min_lat, max_lon, max_lat })
    }

    fn contains(&self, p: &Position) -> bool {
        (self.min_lon..=self.max_lon).contains(&p[0]) && (self.min_lat..=self.max_lat).contains(&p[1])
    }

    fn corners(&self) -> [Position; 4] {
        [
            [self.min_lon, self.min_lat],
            [self.max_lon, self.min_lat],
            [self.max_lon, self.max_lat],
            [self.min_lon, self.max_lat],
        ]
    }
}

impl FromStr for Bbox {
    type Err = BboxError;

    /// `minLon,minLat,maxLon,maxLat`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>().map_err(|_| BboxError(format!("{p:?} is not a number"))))
            .collect::<Result<_, _>>()?;
        if parts.len() != 4 {
            return Err(BboxError(format!("expected 4 values, got {}", parts.len())));
        }
        Self::new(parts[0], parts[1], parts[2], parts[3])
    }
}

impl fmt::Display for Bbox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{}", self.min_lon, self.min_lat, self.max_lon, self.max_lat)
    }
}

/// Boundary points per edge used for intersection tests.
const TEST_DENSITY: usize = 16;

/// Whether the planar footprint of `cell` meets `bbox`.
pub fn cell_intersects(cell: &CellId, bbox: &Bbox) -> bool {
    planar_rings(cell, TEST_DENSITY).iter().any(|ring| ring_intersects(ring, bbox))
}

/// Bounding-box test with a margin, for pruning whole subtrees.
fn may_intersect(cell: &CellId, bbox: &Bbox) -> bool {
    planar_rings(cell, TEST_DENSITY).iter().any(|ring| {
        let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in ring {
            x0 = x0.min(p[0]);
            x1 = x1.max(p[0]);
            y0 = y0.min(p[1]);
            y1 = y1.max(p[1]);
        }
        let mx = 0.02 * (x1 - x0) + 1e-9;
        let my = 0.02 * (y1 - y0) + 1e-9;
        x0 - mx <= bbox.max_lon && x1 + mx >= bbox.min_lon && y0 - my <= bbox.max_lat && y1 + my >= bbox.min_lat
    })
}

fn ring_intersects(ring: &[Position], bbox: &Bbox) -> bool {
    if ring.iter().any(|p| bbox.contains(p)) {
        return true;
    }
    let corners = bbox.corners();
    if corners.iter().any(|c| point_in_ring(c, ring)) {
        return true;
    }
    ring.windows(2).any(|e| {
        (0..4).any(|k| segments_cross(e[0], e[1], corners[k], corners[(k + 1) % 4]))
    })
}

/// Even-odd rule; boundary points count as inside.
fn point_in_ring(p: &Position, ring: &[Position]) -> bool {
    let mut inside = false;
    for e in ring.windows(2) {
        let (a, b) = (e[0], e[1]);
        if on_segment(p, &a, &b) {
            return true;
        }
        if (a[1] > p[1]) != (b[1] > p[1]) {
            let x = a[0] + (p[1] - a[1]) / (b[1] - a[1]) * (b[0] - a[0]);
            if p[0] < x {
                inside = !inside;
            }
        }
    }
    inside
}

fn orient(a: Position, b: Position, c: Position) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

fn on_segment(p: &Position, a: &Position, b: &Position) -> bool {
    orient(*a, *b, *p) == 0.0
        && p[0] >= a[0].min(b[0])
        && p[0] <= a[0].max(b[0])
        && p[1] >= a[1].min(b[1])
        && p[1] <= a[1].max(b[1])
}

fn segments_cross(a: Position, b: Position, c: Position, d: Position) -> bool {
    let (d1, d2) = (orient(c, d, a), orient(c, d, b));
    let (d3, d4) = (orient(a, b, c), orient(a, b, d));
    ((d1 > 0.0) != (d2 > 0.0) && (d3 > 0.0) != (d4 > 0.0))
        || on_segment(&a, &c, &d)
        || on_segment(&b, &c, &d)
        || on_segment(&c, &a, &b)
        || on_segment(&d, &a, &b)
}

/// Leaves of `partition` meeting `bbox`, in label order, each exactly once.
pub fn leaves_in_bbox(partition: &AdaptivePartition, bbox: &Bbox) -> Vec<(CellId, u64)> {
    fn visit(cell: CellId, partition: &AdaptivePartition, bbox: &Bbox, out: &mut Vec<(CellId, u64)>) {
        if let Some(count) = partition.count(&cell) {
            if cell_intersects(&cell, bbox) {
                out.push((cell, count));
            }
            return;
        }
        if !may_intersect(&cell, bbox) {
            return;
        }
        if let Ok(children) = cell.children() {
            for child in children {
                visit(child, partition, bbox, out);
            }
        }
    }
    let mut out = Vec::new();
    for face in CellId::faces() {
        visit(face, partition, bbox, &mut out);
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct Feature<P: Serialize> {
    #[serde(rename = "type")]
    kind: &'static str,
    pub properties: P,
    pub geometry: Geometry,
}

impl<P: Serialize> Feature<P> {
    pub fn new(properties: P, geometry: Geometry) -> Self {
        Self { kind: "Feature", properties, geometry }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FeatureCollection<P: Serialize> {
    #[serde(rename = "type")]
    kind: &'static str,
    pub features: Vec<Feature<P>>,
}

impl<P: Serialize> FeatureCollection<P> {
    pub fn new(features: Vec<Feature<P>>) -> Self {
        Self { kind: "FeatureCollection", features }
    }
}
