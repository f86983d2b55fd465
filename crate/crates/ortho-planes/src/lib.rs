//! Joint detection and refinement of orthogonality primitives in unorganized
//! oriented point clouds: orthogonal plane pairs found by local Hough voting
//! over simplified point pair features, a plane relation graph with parallel
//! reduction, 6-DoF corners at graph triangles, constrained least-squares
//! refinement on SO(3) and S², and corner-assisted reduced-DoF registration.
//!
//! The pipeline stages map onto the modules below:
//!
//! - [`geometry`]: planes, pair features, intersection primitives
//! - [`io`]: PLY I/O, normal estimation, downsampling, synthetic scenes
//! - [`detect`]: per-reference local voting for orthogonal plane pairs
//! - [`graph`]: hypothesis clustering, relation graph, parallel bundles
//! - [`refine`]: corner refinement on SO(3)xR³ and joint graph refinement
//! - [`register`]: corner matching and constrained ICP
//! - [`eval`]: precision/recall reports and point labeling
//! - [`export`]: JSON schemas shared by the CLI and test fixtures

pub mod detect;
pub mod eval;
pub mod export;
pub mod geometry;
pub mod graph;
pub mod io;
pub mod refine;
pub mod register;
pub mod spatial;

pub use geometry::{
    classify_pair, compute_ppf, intersect_three_planes, intersect_two_planes, Corner,
    DetectionParams, GeometryError, Line3D, Mat3, OrientedPoint, PairClass, PairFeature, Plane,
    PointCloud, Vec3,
};
