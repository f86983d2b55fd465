//! Synthetic desk-scale scenes with exact ground truth, used as test
//! fixtures throughout the crate.

use super::{estimate_normals, DEFAULT_NORMAL_K};
use crate::geometry::{
    intersect_two_planes, Corner, Line3D, Mat3, OrientedPoint, Plane, PointCloud, Vec3,
};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};

/// Scene layouts. All walls/floors are axis-aligned rectangles of side
/// `extent` anchored at the origin.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    /// Three mutually orthogonal faces meeting at one corner.
    CornerRoom,
    /// One wall plus the floor: a single orthogonal pair, no corner.
    TwoWalls,
    /// Open box: floor plus four walls (8 crease lines, 4 bottom corners).
    Box,
    /// A lone floor patch: nothing orthogonal to find.
    SinglePlane,
    /// Unstructured ball of points with random normals: pure clutter.
    NoiseBall,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub layout: Layout,
    /// Side length of each face, meters.
    pub extent: f64,
    /// Surface sampling density, points per square meter.
    pub points_per_m2: f64,
    /// Std-dev of Gaussian displacement along the face normal, meters.
    pub noise_sigma: f64,
    /// Extra uniform points in the inflated bounding box, as a fraction of
    /// the surface point count.
    pub outlier_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            layout: Layout::CornerRoom,
            extent: 2.0,
            points_per_m2: 2000.0,
            noise_sigma: 0.003,
            outlier_fraction: 0.0,
            seed: 0,
        }
    }
}

/// Exact primitives of a synthetic scene: planes, their orthogonality edges
/// (index pairs into `planes`), the crease lines of those edges, and corners.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub planes: Vec<Plane>,
    pub edges: Vec<(usize, usize)>,
    pub lines: Vec<Line3D>,
    pub corners: Vec<Corner>,
}

impl GroundTruth {
    fn empty() -> Self {
        Self {
            planes: Vec::new(),
            edges: Vec::new(),
            lines: Vec::new(),
            corners: Vec::new(),
        }
    }
}

/// An axis-aligned rectangular face: origin corner, two edge vectors and the
/// unit normal.
struct Face {
    origin: Vec3,
    e1: Vec3,
    e2: Vec3,
    normal: Vec3,
}

fn faces_for(layout: Layout, e: f64) -> Vec<Face> {
    let x = Vec3::x();
    let y = Vec3::y();
    let z = Vec3::z();
    let o = Vec3::zeros();
    let floor = Face {
        origin: o,
        e1: x * e,
        e2: y * e,
        normal: z,
    };
    let wall_x0 = Face {
        origin: o,
        e1: y * e,
        e2: z * e,
        normal: x,
    };
    let wall_y0 = Face {
        origin: o,
        e1: x * e,
        e2: z * e,
        normal: y,
    };
    match layout {
        Layout::CornerRoom => vec![wall_x0, wall_y0, floor],
        Layout::TwoWalls => vec![wall_x0, floor],
        Layout::Box => vec![
            wall_x0,
            Face {
                origin: x * e,
                e1: y * e,
                e2: z * e,
                normal: x,
            },
            wall_y0,
            Face {
                origin: y * e,
                e1: x * e,
                e2: z * e,
                normal: y,
            },
            floor,
        ],
        Layout::SinglePlane => vec![floor],
        Layout::NoiseBall => vec![],
    }
}

fn ground_truth_for(layout: Layout, e: f64) -> GroundTruth {
    let mut gt = GroundTruth::empty();
    match layout {
        Layout::CornerRoom => {
            gt.planes = vec![
                Plane::new(Vec3::x(), 0.0),
                Plane::new(Vec3::y(), 0.0),
                Plane::new(Vec3::z(), 0.0),
            ];
            gt.edges = vec![(0, 1), (0, 2), (1, 2)];
            gt.corners = vec![Corner::new(Mat3::identity(), Vec3::zeros())];
        }
        Layout::TwoWalls => {
            gt.planes = vec![Plane::new(Vec3::x(), 0.0), Plane::new(Vec3::z(), 0.0)];
            gt.edges = vec![(0, 1)];
        }
        Layout::Box => {
            gt.planes = vec![
                Plane::new(Vec3::x(), 0.0),
                Plane::new(Vec3::x(), -e),
                Plane::new(Vec3::y(), 0.0),
                Plane::new(Vec3::y(), -e),
                Plane::new(Vec3::z(), 0.0),
            ];
            gt.edges = vec![
                (0, 2),
                (0, 3),
                (1, 2),
                (1, 3),
                (0, 4),
                (1, 4),
                (2, 4),
                (3, 4),
            ];
            for &(i, j) in &[(0usize, 2usize), (0, 3), (1, 2), (1, 3)] {
                let offsets = Vec3::new(gt.planes[i].offset, gt.planes[j].offset, 0.0);
                gt.corners.push(Corner::new(Mat3::identity(), offsets));
            }
        }
        Layout::SinglePlane => {
            gt.planes = vec![Plane::new(Vec3::z(), 0.0)];
        }
        Layout::NoiseBall => {}
    }
    gt.lines = gt
        .edges
        .iter()
        .map(|&(i, j)| {
            intersect_two_planes(&gt.planes[i], &gt.planes[j])
                .expect("orthogonal ground-truth planes always intersect")
        })
        .collect();
    gt
}

/// Generates a synthetic scene: uniform samples on each face displaced along
/// the face normal by Gaussian noise, optional uniform outliers in the
/// inflated bounding box, plus exact ground-truth primitives. Deterministic
/// per seed. Normals are analytic face normals with random sign when
/// `noise_sigma == 0` and are re-estimated from the noisy geometry otherwise.
pub fn generate_synthetic_scene(spec: &SyntheticSpec) -> (PointCloud, GroundTruth) {
    assert!(spec.points_per_m2 > 0.0, "density must be positive");
    assert!(spec.noise_sigma >= 0.0, "noise sigma must be non-negative");
    assert!(
        (0.0..=1.0).contains(&spec.outlier_fraction),
        "outlier fraction must lie in [0, 1]"
    );

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let gauss = Normal::new(0.0, spec.noise_sigma).expect("sigma validated above");
    let mut points: Vec<OrientedPoint> = Vec::new();

    if spec.layout == Layout::NoiseBall {
        let n = (spec.points_per_m2 * spec.extent * spec.extent).round() as usize;
        let radius = spec.extent / 2.0;
        for _ in 0..n {
            let dir: [f64; 3] = UnitSphere.sample(&mut rng);
            let r = radius * rng.random::<f64>().cbrt();
            let normal: [f64; 3] = UnitSphere.sample(&mut rng);
            points.push(OrientedPoint::new(
                Vec3::from(dir) * r,
                Vec3::from(normal),
            ));
        }
        return (PointCloud::new(points, true), GroundTruth::empty());
    }

    for face in faces_for(spec.layout, spec.extent) {
        let area = face.e1.norm() * face.e2.norm();
        let n = (area * spec.points_per_m2).round() as usize;
        for _ in 0..n {
            let u: f64 = rng.random();
            let v: f64 = rng.random();
            let displacement = gauss.sample(&mut rng);
            let position = face.origin + face.e1 * u + face.e2 * v + face.normal * displacement;
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            points.push(OrientedPoint::new(position, face.normal * sign));
        }
    }

    let n_surface = points.len();
    let n_outliers = (spec.outlier_fraction * n_surface as f64).round() as usize;
    if n_outliers > 0 && n_surface > 0 {
        let surface = PointCloud::new(points.clone(), true);
        let (lo, hi) = surface.bounding_box().expect("surface is non-empty");
        let pad = 0.1 * spec.extent;
        for _ in 0..n_outliers {
            let p = Vec3::new(
                lo.x - pad + (hi.x - lo.x + 2.0 * pad) * rng.random::<f64>(),
                lo.y - pad + (hi.y - lo.y + 2.0 * pad) * rng.random::<f64>(),
                lo.z - pad + (hi.z - lo.z + 2.0 * pad) * rng.random::<f64>(),
            );
            let normal: [f64; 3] = UnitSphere.sample(&mut rng);
            points.push(OrientedPoint::new(p, Vec3::from(normal)));
        }
    }

    let mut cloud = PointCloud::new(points, true);
    if spec.noise_sigma > 0.0 && cloud.len() >= DEFAULT_NORMAL_K {
        cloud = estimate_normals(&cloud, DEFAULT_NORMAL_K)
            .expect("length checked against the neighbor count");
    }
    (cloud, ground_truth_for(spec.layout, spec.extent))
}
