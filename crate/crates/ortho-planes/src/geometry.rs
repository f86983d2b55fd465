//! Fundamental geometric types and closed-form primitives: oriented points,
//! planes with a canonical sign convention, simplified point pair features,
//! intersection lines and three-plane corners.
//!
//! All operations here are pure and total unless stated otherwise; types are
//! immutable after construction and safe to share across threads.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Components below this magnitude are treated as zero when picking the
/// canonical sign of a plane normal.
const SIGN_EPS: f64 = 1e-12;

/// Rejection threshold for near-parallel plane intersection: `|n1·n2| > 1 - EPS_PARALLEL`.
pub const EPS_PARALLEL: f64 = 1e-6;

/// Deterministic sign representative for an unoriented direction: flips `v`
/// so its first component with magnitude above `SIGN_EPS` is positive.
pub(crate) fn canonical_sign(v: Vec3) -> Vec3 {
    for k in 0..3 {
        if v[k].abs() > SIGN_EPS {
            return if v[k] < 0.0 { -v } else { v };
        }
    }
    v
}

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("planes are near-parallel, no stable intersection line")]
    NearParallel,
    #[error("matrix is singular or near-singular")]
    Singular,
}

/// A 3D point with a unit normal. Normal signs are not assumed consistent
/// across a cloud; everything downstream is sign-insensitive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrientedPoint {
    pub position: Vec3,
    pub normal: Vec3,
}

impl OrientedPoint {
    pub fn new(position: Vec3, normal: Vec3) -> Self {
        Self { position, normal }
    }
}

/// An ordered collection of oriented points. `has_normals` is false for
/// clouds loaded without normals; callers must run normal estimation before
/// any normal-dependent stage.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<OrientedPoint>,
    pub has_normals: bool,
}

impl PointCloud {
    pub fn new(points: Vec<OrientedPoint>, has_normals: bool) -> Self {
        Self {
            points,
            has_normals,
        }
    }

    pub fn from_positions(positions: Vec<Vec3>) -> Self {
        Self {
            points: positions
                .into_iter()
                .map(|p| OrientedPoint::new(p, Vec3::zeros()))
                .collect(),
            has_normals: false,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn positions(&self) -> impl Iterator<Item = &Vec3> {
        self.points.iter().map(|p| &p.position)
    }

    /// Axis-aligned bounding box as (min, max). `None` for an empty cloud.
    pub fn bounding_box(&self) -> Option<(Vec3, Vec3)> {
        let first = self.points.first()?.position;
        let mut lo = first;
        let mut hi = first;
        for p in &self.points {
            for k in 0..3 {
                lo[k] = lo[k].min(p.position[k]);
                hi[k] = hi[k].max(p.position[k]);
            }
        }
        Some((lo, hi))
    }

    /// Length of the bounding-box diagonal; 0 for empty clouds.
    pub fn bbox_diagonal(&self) -> f64 {
        self.bounding_box()
            .map(|(lo, hi)| (hi - lo).norm())
            .unwrap_or(0.0)
    }
}

/// An infinite plane `{x : n·x + d = 0}` with unit normal `n` and offset `d`.
///
/// `(n, d)` and `(-n, -d)` denote the same plane; construction canonicalizes
/// the sign so that the first nonzero normal component is positive. All
/// comparisons between planes are therefore sign-insensitive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Plane {
    pub normal: Vec3,
    pub offset: f64,
}

impl Plane {
    /// Normalizes the normal and applies the canonical sign convention.
    pub fn new(normal: Vec3, offset: f64) -> Self {
        let norm = normal.norm();
        debug_assert!(norm > SIGN_EPS, "plane normal must be nonzero");
        let mut n = normal / norm;
        let mut d = offset / norm;
        for k in 0..3 {
            if n[k].abs() > SIGN_EPS {
                if n[k] < 0.0 {
                    n = -n;
                    d = -d;
                }
                break;
            }
        }
        Self { normal: n, offset: d }
    }

    /// Plane through `point` with the given normal direction.
    pub fn from_point_normal(point: Vec3, normal: Vec3) -> Self {
        let n = normal.normalize();
        Self::new(n, -n.dot(&point))
    }

    /// Signed point-to-plane distance `r(x, P) = n·x + d`.
    #[inline]
    pub fn signed_distance(&self, x: &Vec3) -> f64 {
        self.normal.dot(x) + self.offset
    }

    /// Flips normal and offset together (same geometric plane).
    pub fn flipped(&self) -> Self {
        Self {
            normal: -self.normal,
            offset: -self.offset,
        }
    }

    /// Sign-insensitive angle between the normals of two planes, in radians.
    pub fn normal_angle_to(&self, other: &Plane) -> f64 {
        self.normal.dot(&other.normal).abs().clamp(0.0, 1.0).acos()
    }
}

/// The simplified pair feature `(n1·n2, n1·d, n2·d, ‖d‖)` with `d = x1 - x2`.
/// No trigonometry is involved; classification thresholds compare against
/// `sin` and `cos` of the tolerance instead.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairFeature {
    pub f1: f64,
    pub f2: f64,
    pub f3: f64,
    pub f4: f64,
}

/// Outcome of classifying a point pair against the detection thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairClass {
    /// Normals perpendicular within `delta_n` and points within `tau_d`.
    Orthogonal,
    /// Normals parallel within `delta_n` and the joining vector lies in-plane.
    Coplanar,
    Neither,
}

/// Computes the pair feature of two oriented points, `d = x1 - x2`.
pub fn compute_ppf(p1: &OrientedPoint, p2: &OrientedPoint) -> PairFeature {
    let d = p1.position - p2.position;
    PairFeature {
        f1: p1.normal.dot(&p2.normal),
        f2: p1.normal.dot(&d),
        f3: p2.normal.dot(&d),
        f4: d.norm(),
    }
}

/// Classifies a pair feature as orthogonal, coplanar or neither.
///
/// Orthogonal: `|f1| < sin(delta_n)` and `f4 < tau_d`.
/// Coplanar:   `|f1| > cos(delta_n)` and `|f2|, |f3| < f4·sin(delta_n)`.
/// The two regions are disjoint for `delta_n < 45°`.
pub fn classify_pair(f: &PairFeature, params: &DetectionParams) -> PairClass {
    let sin_d = params.delta_n.sin();
    let cos_d = params.delta_n.cos();
    classify_pair_with(f, sin_d, cos_d, params.tau_d)
}

/// Same as [`classify_pair`] with precomputed `sin`/`cos` thresholds, for
/// use in voting loops.
#[inline]
pub(crate) fn classify_pair_with(f: &PairFeature, sin_d: f64, cos_d: f64, tau_d: f64) -> PairClass {
    if f.f1.abs() < sin_d && f.f4 < tau_d {
        PairClass::Orthogonal
    } else if f.f1.abs() > cos_d && f.f2.abs() < f.f4 * sin_d && f.f3.abs() < f.f4 * sin_d {
        PairClass::Coplanar
    } else {
        PairClass::Neither
    }
}

/// A 3D line stored as a unit direction plus the line point closest to the
/// origin (so the anchor is perpendicular to the direction).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Line3D {
    pub direction: Vec3,
    pub anchor: Vec3,
}

impl Line3D {
    /// Canonicalizes: unit direction, anchor projected perpendicular to it.
    pub fn new(direction: Vec3, point_on_line: Vec3) -> Self {
        let dir = direction.normalize();
        let anchor = point_on_line - dir * point_on_line.dot(&dir);
        Self {
            direction: dir,
            anchor,
        }
    }

    /// Sign-insensitive angle between two line directions, in radians.
    pub fn direction_angle_to(&self, other: &Line3D) -> f64 {
        self.direction
            .dot(&other.direction)
            .abs()
            .clamp(0.0, 1.0)
            .acos()
    }

    /// Perpendicular distance of a point from the line.
    pub fn distance_to_point(&self, x: &Vec3) -> f64 {
        let v = x - self.anchor;
        (v - self.direction * v.dot(&self.direction)).norm()
    }
}

/// Intersection line of two non-parallel planes.
///
/// Returns `NearParallel` when `|n1·n2| > 1 - EPS_PARALLEL`.
pub fn intersect_two_planes(p1: &Plane, p2: &Plane) -> Result<Line3D, GeometryError> {
    let c = p1.normal.dot(&p2.normal);
    if c.abs() > 1.0 - EPS_PARALLEL {
        return Err(GeometryError::NearParallel);
    }
    let direction = p1.normal.cross(&p2.normal).normalize();
    // The line point closest to the origin lies in span(n1, n2):
    // x = a·n1 + b·n2 with n1·x = -d1, n2·x = -d2.
    let det = 1.0 - c * c;
    let a = (-p1.offset + c * p2.offset) / det;
    let b = (-p2.offset + c * p1.offset) / det;
    let anchor = p1.normal * a + p2.normal * b;
    Ok(Line3D {
        direction,
        anchor,
    })
}

/// Intersection point of the three planes of an orthonormal frame:
/// rows of `frame` are the plane normals, `offsets` their offsets.
/// Returns `-frameᵀ·offsets`.
pub fn intersect_three_planes(frame: &Mat3, offsets: &Vec3) -> Vec3 {
    -(frame.transpose() * offsets)
}

/// A corner at the mutual intersection of three orthogonal planes: an
/// orthonormal frame whose rows are the plane normals, the three plane
/// offsets, and the derived 3D position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Corner {
    /// Rows are the three plane normals; orthonormal with determinant +1.
    pub frame: Mat3,
    pub offsets: Vec3,
    pub position: Vec3,
}

impl Corner {
    pub fn new(frame: Mat3, offsets: Vec3) -> Self {
        let position = intersect_three_planes(&frame, &offsets);
        Self {
            frame,
            offsets,
            position,
        }
    }

    /// The k-th plane of the corner (k in 0..3).
    pub fn plane(&self, k: usize) -> Plane {
        Plane::new(self.frame.row(k).transpose(), self.offsets[k])
    }
}

/// Detection-stage parameters. Defaults follow the reference configuration:
/// 20° normal tolerance, 1 m pairing radius, 1000 reference points paired
/// with up to 250 neighbors, 10° x 8 cm voting bins and a strict vote
/// threshold of 4.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionParams {
    /// Normal tolerance δn in radians (< 45°).
    pub delta_n: f64,
    /// Pairing radius τd in meters.
    pub tau_d: f64,
    /// Number of reference points to sample.
    pub n_refs: usize,
    /// Maximum partners per reference point.
    pub k_pairs: usize,
    /// Angular bin width of the accumulator, radians.
    pub theta_bin: f64,
    /// Distance bin width of the accumulator, meters.
    pub rho_bin: f64,
    /// Strict vote-count threshold: a bin wins only with more than this
    /// many votes, and the coplanar tally must also exceed it.
    pub c_max: usize,
}

impl Default for DetectionParams {
    fn default() -> Self {
        Self {
            delta_n: 20f64.to_radians(),
            tau_d: 1.0,
            n_refs: 1000,
            k_pairs: 250,
            theta_bin: 10f64.to_radians(),
            rho_bin: 0.08,
            c_max: 4,
        }
    }
}
