//! Hierarchical cube-sphere cells.
//!
//! The sphere is covered by the six faces of an enclosing cube, each face the
//! root of a quad-tree. Points are projected onto a face and then through an
//! area-equalizing quadratic transform from cube coordinates `(u, v)` in
//! `[-1, 1]` to tree coordinates `(s, t)` in `[0, 1]`.
//!
//! Faces are numbered `+x, +y, +z, -x, -y, -z`. Child digits use plain
//! quadrant order, `digit = 2 * v_half + u_half`, so digit 0 is the low-u /
//! low-v quadrant. This is *not* the Hilbert-curve order of Google's S2
//! library; cell ids produced here are not interchangeable with S2 ids.

use std::cmp::Ordering;
use std::f64::consts::PI;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Mean Earth radius of the spherical earth model.
pub const EARTH_RADIUS_KM: f64 = 6371.0;

/// Deepest level a [`CellId`] can represent.
pub const MAX_LEVEL: u8 = 30;

/// Default depth of partitions and labels.
pub const DEFAULT_MAX_LEVEL: u8 = 9;

pub const NUM_FACES: u8 = 6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CellError {
    #[error("latitude {0} outside [-90, 90]")]
    LatitudeOutOfRange(f64),
    #[error("longitude {0} outside [-180, 180]")]
    LongitudeOutOfRange(f64),
    #[error("level {level} outside [0, {max}]")]
    LevelOutOfRange { level: u32, max: u8 },
    #[error("face {0} outside [0, 5]")]
    InvalidFace(u8),
    #[error("child digit {0} outside [0, 3]")]
    InvalidDigit(u8),
    #[error("cell {0} is a face and has no parent")]
    NoParent(CellId),
    #[error("cell {0} is at the maximum level and has no children")]
    MaxDepth(CellId),
}

/// A geographic position in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawLatLon")]
pub struct LatLon {
    lat: f64,
    lon: f64,
}

#[derive(Deserialize)]
struct RawLatLon {
    lat: f64,
    lon: f64,
}

impl TryFrom<RawLatLon> for LatLon {
    type Error = CellError;

    fn try_from(raw: RawLatLon) -> Result<Self, Self::Error> {
        LatLon::new(raw.lat, raw.lon)
    }
}

impl LatLon {
    pub fn new(lat: f64, lon: f64) -> Result<Self, CellError> {
        if !(-90.0..=90.0).contains(&lat) {
            return Err(CellError::LatitudeOutOfRange(lat));
        }
        if !(-180.0..=180.0).contains(&lon) {
            return Err(CellError::LongitudeOutOfRange(lon));
        }
        Ok(Self { lat, lon })
    }

    pub fn lat(&self) -> f64 {
        self.lat
    }

    pub fn lon(&self) -> f64 {
        self.lon
    }

    pub fn to_unit_vec(self) -> UnitVec {
        let (lat, lon) = (self.lat.to_radians(), self.lon.to_radians());
        UnitVec {
            x: lat.cos() * lon.cos(),
            y: lat.cos() * lon.sin(),
            z: lat.sin(),
        }
    }

    /// Great-circle distance (haversine) on the spherical earth model.
    pub fn distance_km(&self, other: &LatLon) -> f64 {
        let (lat1, lat2) = (self.lat.to_radians(), other.lat.to_radians());
        let dlat = lat2 - lat1;
        let dlon = (other.lon - self.lon).to_radians();
        let a = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
        2.0 * EARTH_RADIUS_KM * a.sqrt().min(1.0).asin()
    }
}

impl fmt::Display for LatLon {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({:.6}, {:.6})", self.lat, self.lon)
    }
}

/// A point on the unit sphere.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitVec {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl UnitVec {
    /// Normalizes an arbitrary non-zero vector.
    pub fn normalized(x: f64, y: f64, z: f64) -> Self {
        let n = (x * x + y * y + z * z).sqrt();
        Self { x: x / n, y: y / n, z: z / n }
    }

    pub fn to_latlon(self) -> LatLon {
        let lat = self.z.atan2((self.x * self.x + self.y * self.y).sqrt()).to_degrees();
        // `+ 0.0` turns a negative zero into a positive one, so the poles get
        // longitude 0 rather than -180.
        let lon = (self.y + 0.0).atan2(self.x + 0.0).to_degrees();
        LatLon {
            lat: lat.clamp(-90.0, 90.0) + 0.0,
            lon: lon.clamp(-180.0, 180.0) + 0.0,
        }
    }

    fn as_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

/// Face of a point: the axis of largest magnitude, ties broken by the lowest
/// face index.
pub fn face_of(p: UnitVec) -> u8 {
    let c = p.as_array();
    let m = c[0].abs().max(c[1].abs()).max(c[2].abs());
    (0..3)
        .filter(|&axis| c[axis].abs() == m)
        .map(|axis| if c[axis] >= 0.0 { axis as u8 } else { axis as u8 + 3 })
        .min()
        .expect("a non-zero vector has a largest component")
}

/// Projects `p` onto `face`, returning cube coordinates `(u, v)`.
fn face_xyz_to_uv(face: u8, p: [f64; 3]) -> (f64, f64) {
    let [x, y, z] = p;
    match face {
        0 => (y / x, z / x),
        1 => (-x / y, z / y),
        2 => (-x / z, -y / z),
        3 => (z / x, y / x),
        4 => (z / y, -x / y),
        _ => (-y / z, -x / z),
    }
}

/// Unnormalized point on the cube surface for face coordinates `(u, v)`.
/// Every face frame is right-handed, so increasing `u` then `v` runs
/// counter-clockwise seen from outside the sphere.
fn face_uv_to_xyz(face: u8, u: f64, v: f64) -> [f64; 3] {
    match face {
        0 => [1.0, u, v],
        1 => [-u, 1.0, v],
        2 => [-u, -v, 1.0],
        3 => [-1.0, -v, -u],
        4 => [v, -1.0, -u],
        _ => [v, u, -1.0],
    }
}

/// Quadratic area-equalizing transform from tree to cube coordinates.
pub fn st_to_uv(s: f64) -> f64 {
    if s >= 0.5 {
        (4.0 * s * s - 1.0) / 3.0
    } else {
        (1.0 - 4.0 * (1.0 - s) * (1.0 - s)) / 3.0
    }
}

/// Inverse of [`st_to_uv`].
pub fn uv_to_st(u: f64) -> f64 {
    if u >= 0.0 {
        0.5 * (1.0 + 3.0 * u).sqrt()
    } else {
        1.0 - 0.5 * (1.0 - 3.0 * u).sqrt()
    }
}

/// `st_to_uv(s1) - st_to_uv(s0)` without cancellation for cells that do not
/// straddle `s = 0.5`.
fn uv_span(s0: f64, s1: f64) -> f64 {
    let ds = s1 - s0;
    if s0 >= 0.5 {
        4.0 / 3.0 * ds * (s0 + s1)
    } else if s1 <= 0.5 {
        4.0 / 3.0 * ds * (2.0 - s0 - s1)
    } else {
        st_to_uv(s1) - st_to_uv(s0)
    }
}

/// A node in one of the six face quad-trees.
///
/// The path is packed two bits per level, first digit most significant.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct CellId {
    face: u8,
    level: u8,
    path: u64,
}

impl CellId {
    pub fn new(face: u8, digits: &[u8]) -> Result<Self, CellError> {
        let mut cell = Self::face(face)?;
        if digits.len() > MAX_LEVEL as usize {
            return Err(CellError::LevelOutOfRange { level: digits.len() as u32, max: MAX_LEVEL });
        }
        for &d in digits {
            cell = cell.child(d)?;
        }
        Ok(cell)
    }

    pub fn face(face: u8) -> Result<Self, CellError> {
        if face >= NUM_FACES {
            return Err(CellError::InvalidFace(face));
        }
        Ok(Self { face, level: 0, path: 0 })
    }

    pub fn faces() -> impl Iterator<Item = CellId> {
        (0..NUM_FACES).map(|face| Self { face, level: 0, path: 0 })
    }

    /// The cell at `level` containing `p`.
    pub fn from_latlon(p: LatLon, level: u8) -> Result<Self, CellError> {
        check_level(level, MAX_LEVEL)?;
        let v = p.to_unit_vec();
        let face = face_of(v);
        let (u, w) = face_xyz_to_uv(face, v.as_array());
        let n = 1u64 << level;
        let i = cell_index(uv_to_st(u), n);
        let j = cell_index(uv_to_st(w), n);
        let mut path = 0u64;
        for bit in (0..level).rev() {
            let digit = 2 * ((j >> bit) & 1) + ((i >> bit) & 1);
            path = (path << 2) | digit;
        }
        Ok(Self { face, level, path })
    }

    pub fn face_index(&self) -> u8 {
        self.face
    }

    pub fn level(&self) -> u8 {
        self.level
    }

    /// Child digit taken at depth `k` (1-based, `1..=level`).
    pub fn digit(&self, k: u8) -> u8 {
        debug_assert!(k >= 1 && k <= self.level);
        ((self.path >> (2 * (self.level - k))) & 3) as u8
    }

    pub fn digits(&self) -> impl Iterator<Item = u8> + '_ {
        (1..=self.level).map(move |k| self.digit(k))
    }

    pub fn is_face(&self) -> bool {
        self.level == 0
    }

    pub fn parent(&self) -> Result<Self, CellError> {
        if self.level == 0 {
            return Err(CellError::NoParent(*self));
        }
        Ok(Self { face: self.face, level: self.level - 1, path: self.path >> 2 })
    }

    /// Ancestor at `level`, or the cell itself when `level` equals its own.
    pub fn ancestor(&self, level: u8) -> Option<Self> {
        (level <= self.level).then(|| Self {
            face: self.face,
            level,
            path: self.path >> (2 * (self.level - level)),
        })
    }

    pub fn child(&self, digit: u8) -> Result<Self, CellError> {
        if digit > 3 {
            return Err(CellError::InvalidDigit(digit));
        }
        if self.level >= MAX_LEVEL {
            return Err(CellError::MaxDepth(*self));
        }
        Ok(Self { face: self.face, level: self.level + 1, path: (self.path << 2) | digit as u64 })
    }

    /// The four children in digit order.
    pub fn children(&self) -> Result<[Self; 4], CellError> {
        Ok([self.child(0)?, self.child(1)?, self.child(2)?, self.child(3)?])
    }

    /// True when `self` is `other` or one of its ancestors.
    pub fn contains_cell(&self, other: &CellId) -> bool {
        self.face == other.face
            && self.level <= other.level
            && other.path >> (2 * (other.level - self.level)) == self.path
    }

    /// Geometric containment under the half-open `[lo, hi)` convention, with
    /// the upper face edge closed.
    pub fn contains(&self, p: LatLon) -> bool {
        let v = p.to_unit_vec();
        if face_of(v) != self.face {
            return false;
        }
        let (u, w) = face_xyz_to_uv(self.face, v.as_array());
        let [(s0, s1), (t0, t1)] = self.st_bounds();
        in_half_open(uv_to_st(u), s0, s1) && in_half_open(uv_to_st(w), t0, t1)
    }

    /// Quad-tree indices `(i, j)` of the cell at its own level.
    fn ij(&self) -> (u64, u64) {
        let (mut i, mut j) = (0u64, 0u64);
        for k in 1..=self.level {
            let d = self.digit(k) as u64;
            i = (i << 1) | (d & 1);
            j = (j << 1) | (d >> 1);
        }
        (i, j)
    }

    /// `[(s_lo, s_hi), (t_lo, t_hi)]`.
    pub fn st_bounds(&self) -> [(f64, f64); 2] {
        let (i, j) = self.ij();
        let size = 1.0 / (1u64 << self.level) as f64;
        [
            (i as f64 * size, (i + 1) as f64 * size),
            (j as f64 * size, (j + 1) as f64 * size),
        ]
    }

    fn point_at_st(&self, s: f64, t: f64) -> UnitVec {
        let [x, y, z] = face_uv_to_xyz(self.face, st_to_uv(s), st_to_uv(t));
        UnitVec::normalized(x, y, z)
    }

    /// Inverse projection of the midpoint of the cell's tree rectangle.
    pub fn center(&self) -> LatLon {
        let [(s0, s1), (t0, t1)] = self.st_bounds();
        self.point_at_st(0.5 * (s0 + s1), 0.5 * (t0 + t1)).to_latlon()
    }

    /// Corners counter-clockwise as seen from outside the sphere, starting at
    /// the low-u / low-v corner.
    pub fn vertices(&self) -> [LatLon; 4] {
        let [(s0, s1), (t0, t1)] = self.st_bounds();
        [(s0, t0), (s1, t0), (s1, t1), (s0, t1)].map(|(s, t)| self.point_at_st(s, t).to_latlon())
    }

    /// Points along the boundary, `per_edge` segments per edge, counter-clockwise.
    /// Edges are great-circle arcs, so the points are spaced in `(s, t)`.
    pub fn boundary(&self, per_edge: usize) -> Vec<LatLon> {
        let per_edge = per_edge.max(1);
        let [(s0, s1), (t0, t1)] = self.st_bounds();
        let corners = [(s0, t0), (s1, t0), (s1, t1), (s0, t1)];
        let mut out = Vec::with_capacity(4 * per_edge);
        for k in 0..4 {
            let (a, b) = (corners[k], corners[(k + 1) % 4]);
            for step in 0..per_edge {
                let f = step as f64 / per_edge as f64;
                let s = a.0 + (b.0 - a.0) * f;
                let t = a.1 + (b.1 - a.1) * f;
                out.push(self.point_at_st(s, t).to_latlon());
            }
        }
        out
    }

    /// Solid angle of the cell in steradians.
    ///
    /// Cell edges are great-circle arcs, so the cell is a spherical
    /// quadrilateral. Its area is the spherical excess of two triangles,
    /// evaluated in face-local coordinates where the triple product of each
    /// triangle reduces to `du * dv`.
    pub fn solid_angle(&self) -> f64 {
        let [(s0, s1), (t0, t1)] = self.st_bounds();
        let (u0, u1) = (st_to_uv(s0), st_to_uv(s1));
        let (v0, v1) = (st_to_uv(t0), st_to_uv(t1));
        let triple = uv_span(s0, s1) * uv_span(t0, t1);
        let a = [1.0, u0, v0];
        let b = [1.0, u1, v0];
        let c = [1.0, u1, v1];
        let d = [1.0, u0, v1];
        triangle_excess(a, b, c, triple) + triangle_excess(a, c, d, triple)
    }

    pub fn area_km2(&self) -> f64 {
        self.solid_angle() * EARTH_RADIUS_KM * EARTH_RADIUS_KM
    }
}

fn triangle_excess(a: [f64; 3], b: [f64; 3], c: [f64; 3], triple: f64) -> f64 {
    let dot = |p: [f64; 3], q: [f64; 3]| p[0] * q[0] + p[1] * q[1] + p[2] * q[2];
    let (la, lb, lc) = (dot(a, a).sqrt(), dot(b, b).sqrt(), dot(c, c).sqrt());
    let denom = la * lb * lc + dot(a, b) * lc + dot(b, c) * la + dot(c, a) * lb;
    2.0 * triple.atan2(denom)
}

fn cell_index(s: f64, n: u64) -> u64 {
    let i = (s.clamp(0.0, 1.0) * n as f64).floor() as u64;
    i.min(n - 1)
}

fn in_half_open(x: f64, lo: f64, hi: f64) -> bool {
    x >= lo && (x < hi || (hi == 1.0 && x <= hi))
}

fn check_level(level: u8, max: u8) -> Result<(), CellError> {
    if level > max {
        return Err(CellError::LevelOutOfRange { level: level as u32, max });
    }
    Ok(())
}

/// Lexicographic order of the label strings: face first, then digits, with a
/// prefix sorting before its extensions. Descendants of a cell are therefore
/// contiguous and follow it directly.
impl Ord for CellId {
    fn cmp(&self, other: &Self) -> Ordering {
        let common = self.level.min(other.level);
        let a = self.path >> (2 * (self.level - common));
        let b = other.path >> (2 * (other.level - common));
        self.face
            .cmp(&other.face)
            .then(a.cmp(&b))
            .then(self.level.cmp(&other.level))
    }
}

impl PartialOrd for CellId {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for CellId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.face)?;
        for d in self.digits() {
            write!(f, "{d}")?;
        }
        Ok(())
    }
}

impl fmt::Debug for CellId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CellId({self})")
    }
}

/// Uniform-grid statistics for one level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LevelStats {
    pub level: u8,
    pub avg_area_km2: f64,
    pub cell_count: u64,
}

pub fn sphere_area_km2() -> f64 {
    4.0 * PI * EARTH_RADIUS_KM * EARTH_RADIUS_KM
}

pub fn level_stats(level: u8) -> Result<LevelStats, CellError> {
    check_level(level, MAX_LEVEL)?;
    let cell_count = 6u64 << (2 * level as u32);
    Ok(LevelStats {
        level,
        avg_area_km2: sphere_area_km2() / cell_count as f64,
        cell_count,
    })
}
