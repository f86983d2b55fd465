//! Point-cloud ingestion and preparation: PLY reading/writing, covariance
//! normal estimation, voxel-average downsampling and the coarse-to-fine
//! sampling hierarchy, plus synthetic scenes used as test fixtures.

mod ply;
pub mod synth;

pub use ply::{load_point_cloud, save_labeled_point_cloud, save_point_cloud, PlyFormat};
pub use synth::{generate_synthetic_scene, GroundTruth, Layout, SyntheticSpec};

use crate::geometry::{OrientedPoint, PointCloud, Vec3};
use crate::spatial::SpatialGrid;
use nalgebra::Matrix3;
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("malformed input: {0}")]
    Malformed(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("too few points: need at least {needed}, got {got}")]
    TooFewPoints { needed: usize, got: usize },
}

/// Downsampling parameters. When `d_min` is `None` the cell size adapts to
/// the input as bounding-box diagonal / 200.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingParams {
    pub d_min: Option<f64>,
    pub hierarchy_levels: usize,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self {
            d_min: None,
            hierarchy_levels: 3,
        }
    }
}

impl SamplingParams {
    pub fn resolve_d_min(&self, cloud: &PointCloud) -> f64 {
        match self.d_min {
            Some(d) => d,
            None => (cloud.bbox_diagonal() / 200.0).max(1e-9),
        }
    }
}

/// Number of neighbors used for normal estimation unless overridden.
pub const DEFAULT_NORMAL_K: usize = 20;

/// Estimates a unit normal per point as the smallest-eigenvalue direction of
/// the covariance of its `k` nearest neighbors (the point itself included).
/// Signs are left arbitrary; nothing downstream assumes consistent
/// orientation.
pub fn estimate_normals(cloud: &PointCloud, k: usize) -> Result<PointCloud, IoError> {
    if k < 3 || cloud.len() < k {
        return Err(IoError::TooFewPoints {
            needed: k.max(3),
            got: cloud.len(),
        });
    }
    let positions: Vec<Vec3> = cloud.positions().copied().collect();
    let diag = cloud.bbox_diagonal().max(1e-9);
    // Sized for surface-like data: a few points per cell at typical spacing.
    let cell = (2.0 * diag / (cloud.len() as f64).sqrt()).max(1e-9);
    let grid = SpatialGrid::build(&positions, cell);

    let mut out = Vec::with_capacity(cloud.len());
    for p in &positions {
        let neighbors = grid.k_nearest(p, k);
        let mut centroid = Vec3::zeros();
        for &i in &neighbors {
            centroid += positions[i as usize];
        }
        centroid /= neighbors.len() as f64;
        let mut cov = Matrix3::zeros();
        for &i in &neighbors {
            let d = positions[i as usize] - centroid;
            cov += d * d.transpose();
        }
        let eig = nalgebra::SymmetricEigen::new(cov);
        let mut min_k = 0;
        for i in 1..3 {
            if eig.eigenvalues[i] < eig.eigenvalues[min_k] {
                min_k = i;
            }
        }
        let n = eig.eigenvectors.column(min_k).normalize();
        out.push(OrientedPoint::new(*p, n));
    }
    Ok(PointCloud::new(out, true))
}

/// Voxel-average downsampling at the resolved `d_min` cell size: one output
/// point per occupied cell, positioned at the member average, with the
/// sign-aligned average normal re-normalized. Output order follows the voxel
/// key order and is deterministic.
pub fn downsample(cloud: &PointCloud, params: &SamplingParams) -> PointCloud {
    downsample_at(cloud, params.resolve_d_min(cloud))
}

/// Downsampling at an explicit cell size.
pub fn downsample_at(cloud: &PointCloud, cell: f64) -> PointCloud {
    assert!(cell > 0.0, "cell size must be positive");
    struct Accum {
        pos_sum: Vec3,
        normal_sum: Vec3,
        seed_normal: Vec3,
        count: usize,
    }
    let mut cells: BTreeMap<(i64, i64, i64), Accum> = BTreeMap::new();
    for p in &cloud.points {
        let key = (
            (p.position.x / cell).floor() as i64,
            (p.position.y / cell).floor() as i64,
            (p.position.z / cell).floor() as i64,
        );
        let acc = cells.entry(key).or_insert_with(|| Accum {
            pos_sum: Vec3::zeros(),
            normal_sum: Vec3::zeros(),
            seed_normal: p.normal,
            count: 0,
        });
        acc.pos_sum += p.position;
        // Normals are unoriented: align each member to the cell seed before
        // averaging so opposite signs do not cancel.
        if cloud.has_normals {
            let n = if p.normal.dot(&acc.seed_normal) < 0.0 {
                -p.normal
            } else {
                p.normal
            };
            acc.normal_sum += n;
        }
        acc.count += 1;
    }
    let points = cells
        .into_values()
        .map(|acc| {
            let pos = acc.pos_sum / acc.count as f64;
            let normal = if cloud.has_normals && acc.normal_sum.norm() > 1e-12 {
                acc.normal_sum.normalize()
            } else if cloud.has_normals {
                acc.seed_normal
            } else {
                Vec3::zeros()
            };
            OrientedPoint::new(pos, normal)
        })
        .collect();
    PointCloud::new(points, cloud.has_normals)
}

/// Coarse-to-fine sequence of downsamplings: level `l` of `L` uses cell size
/// `d_min · 2^(L-1-l)`, so the last entry is the finest (plain `d_min`).
pub fn build_hierarchy(cloud: &PointCloud, params: &SamplingParams) -> Vec<PointCloud> {
    let levels = params.hierarchy_levels.max(1);
    let d_min = params.resolve_d_min(cloud);
    (0..levels)
        .map(|l| downsample_at(cloud, d_min * (1u64 << (levels - 1 - l)) as f64))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Mat3;
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn planar_patch(n_side: usize, spacing: f64) -> PointCloud {
        let mut pts = Vec::new();
        for i in 0..n_side {
            for j in 0..n_side {
                pts.push(OrientedPoint::new(
                    Vec3::new(i as f64 * spacing, j as f64 * spacing, 0.0),
                    Vec3::zeros(),
                ));
            }
        }
        PointCloud::new(pts, false)
    }

    #[test]
    fn normals_on_planar_patch_are_vertical() {
        let cloud = planar_patch(20, 0.01);
        let with_normals = estimate_normals(&cloud, 10).unwrap();
        for p in &with_normals.points {
            let angle = p.normal.dot(&Vec3::z()).abs().clamp(0.0, 1.0).acos();
            assert!(angle < 1f64.to_radians(), "normal off by {angle} rad");
        }
    }

    #[test]
    fn normals_too_few_points() {
        let cloud = planar_patch(1, 0.01); // 1 point
        assert!(matches!(
            estimate_normals(&cloud, 10),
            Err(IoError::TooFewPoints { .. })
        ));
    }

    #[test]
    fn normals_are_rotation_equivariant_up_to_sign() {
        let cloud = planar_patch(15, 0.02);
        let rot = nalgebra::Rotation3::from_euler_angles(0.4, -0.2, 0.9).into_inner();
        let rotated = PointCloud::new(
            cloud
                .points
                .iter()
                .map(|p| OrientedPoint::new(rot * p.position, Vec3::zeros()))
                .collect(),
            false,
        );
        let a = estimate_normals(&cloud, 12).unwrap();
        let b = estimate_normals(&rotated, 12).unwrap();
        for (pa, pb) in a.points.iter().zip(b.points.iter()) {
            let expected = rot * pa.normal;
            let angle = expected.dot(&pb.normal).abs().clamp(0.0, 1.0).acos();
            assert!(angle < 1e-6, "equivariance violated: {angle}");
        }
    }

    #[test]
    fn normals_on_two_perpendicular_patches() {
        // Interior points (away from the crease) recover a face normal.
        let spacing = 0.01;
        let mut pts = Vec::new();
        for i in 0..30 {
            for j in 0..30 {
                pts.push(OrientedPoint::new(
                    Vec3::new(i as f64 * spacing, j as f64 * spacing, 0.0),
                    Vec3::zeros(),
                ));
                pts.push(OrientedPoint::new(
                    Vec3::new(0.0, j as f64 * spacing, i as f64 * spacing + spacing),
                    Vec3::zeros(),
                ));
            }
        }
        let cloud = PointCloud::new(pts, false);
        let k = 10;
        let est = estimate_normals(&cloud, k).unwrap();
        // k-neighborhood radius is about sqrt(k)/2 cells; stay well clear.
        let margin = spacing * (k as f64).sqrt() * 1.5;
        for p in &est.points {
            let on_floor = p.position.z == 0.0;
            let dist_to_crease = if on_floor { p.position.x } else { p.position.z };
            if dist_to_crease < margin {
                continue;
            }
            let gt = if on_floor { Vec3::z() } else { Vec3::x() };
            let angle = p.normal.dot(&gt).abs().clamp(0.0, 1.0).acos();
            assert!(angle < 2f64.to_radians(), "interior normal off by {angle}");
        }
    }

    #[test]
    fn downsample_grid_shrinks_by_expected_factor() {
        // 1 cm grid, 5 cm cells: 5x5 input points merge per cell in 2D.
        let cloud = planar_patch(50, 0.01);
        let out = downsample_at(&cloud, 0.05);
        assert_eq!(out.len(), 100); // 2500 / 25
    }

    #[test]
    fn downsample_identity_when_cells_separate_all_points() {
        let cloud = planar_patch(10, 0.1);
        let out = downsample_at(&cloud, 0.05);
        assert_eq!(out.len(), cloud.len());
        let mut got: Vec<_> = out.positions().map(|p| (p.x, p.y)).collect();
        let mut expected: Vec<_> = cloud.positions().map(|p| (p.x, p.y)).collect();
        got.sort_by(|a, b| a.partial_cmp(b).unwrap());
        expected.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(got, expected);
    }

    #[test]
    fn downsample_averages_noisy_repeats() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sigma = 0.01;
        let true_point = Vec3::new(0.3, -0.2, 0.7);
        let n = 1000;
        let pts: Vec<OrientedPoint> = (0..n)
            .map(|_| {
                let gauss = |rng: &mut ChaCha8Rng| {
                    // Box-Muller
                    let u1: f64 = rng.random::<f64>().max(1e-12);
                    let u2: f64 = rng.random();
                    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
                };
                OrientedPoint::new(
                    true_point + Vec3::new(gauss(&mut rng), gauss(&mut rng), gauss(&mut rng)) * sigma,
                    Vec3::zeros(),
                )
            })
            .collect();
        let cloud = PointCloud::new(pts, false);
        let out = downsample_at(&cloud, 100.0);
        assert_eq!(out.len(), 1);
        let err = (out.points[0].position - true_point).norm();
        assert!(
            err < 3.0 * sigma / (n as f64).sqrt() * 3.0,
            "averaged point off by {err}"
        );
    }

    #[test]
    fn downsample_output_size_non_increasing_under_doubling() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pts: Vec<OrientedPoint> = (0..500)
            .map(|_| {
                OrientedPoint::new(
                    Vec3::new(rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()),
                    Vec3::zeros(),
                )
            })
            .collect();
        let cloud = PointCloud::new(pts, false);
        let mut cell = 0.01;
        let mut prev = downsample_at(&cloud, cell).len();
        for _ in 0..6 {
            cell *= 2.0;
            let cur = downsample_at(&cloud, cell).len();
            assert!(cur <= prev, "size increased: {prev} -> {cur} at cell {cell}");
            prev = cur;
        }
    }

    #[test]
    fn downsample_keeps_non_adjacent_cells_dmin_apart() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pts: Vec<OrientedPoint> = (0..400)
            .map(|_| {
                OrientedPoint::new(
                    Vec3::new(rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()),
                    Vec3::zeros(),
                )
            })
            .collect();
        let cell = 0.21;
        let out = downsample_at(&PointCloud::new(pts, false), cell);
        let keys: Vec<(i64, i64, i64)> = out
            .positions()
            .map(|p| {
                (
                    (p.x / cell).floor() as i64,
                    (p.y / cell).floor() as i64,
                    (p.z / cell).floor() as i64,
                )
            })
            .collect();
        for i in 0..out.len() {
            for j in (i + 1)..out.len() {
                let adjacent = (keys[i].0 - keys[j].0).abs() <= 1
                    && (keys[i].1 - keys[j].1).abs() <= 1
                    && (keys[i].2 - keys[j].2).abs() <= 1;
                if !adjacent {
                    let d = (out.points[i].position - out.points[j].position).norm();
                    assert!(d >= cell, "non-adjacent outputs only {d} apart");
                }
            }
        }
    }

    #[test]
    fn downsample_aligns_normal_signs_before_averaging() {
        let pts = vec![
            OrientedPoint::new(Vec3::new(0.0, 0.0, 0.0), Vec3::z()),
            OrientedPoint::new(Vec3::new(0.001, 0.0, 0.0), -Vec3::z()),
            OrientedPoint::new(Vec3::new(0.0, 0.001, 0.0), Vec3::z()),
        ];
        let out = downsample_at(&PointCloud::new(pts, true), 1.0);
        assert_eq!(out.len(), 1);
        assert_abs_diff_eq!(out.points[0].normal.z.abs(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn hierarchy_sizes_non_decreasing() {
        let cloud = planar_patch(40, 0.01);
        let params = SamplingParams {
            d_min: Some(0.02),
            hierarchy_levels: 3,
        };
        let levels = build_hierarchy(&cloud, &params);
        assert_eq!(levels.len(), 3);
        for w in levels.windows(2) {
            assert!(w[0].len() <= w[1].len());
        }
        let single = build_hierarchy(
            &cloud,
            &SamplingParams {
                d_min: Some(0.02),
                hierarchy_levels: 1,
            },
        );
        assert_eq!(single.len(), 1);
        assert_eq!(single[0].len(), downsample_at(&cloud, 0.02).len());
    }

    #[test]
    fn adaptive_d_min_uses_bbox_diagonal() {
        let cloud = planar_patch(10, 1.0); // 9x9 m patch
        let params = SamplingParams::default();
        let expected = cloud.bbox_diagonal() / 200.0;
        assert_abs_diff_eq!(params.resolve_d_min(&cloud), expected);
    }

    #[test]
    fn normals_smallest_eigenvector_is_stable_under_frame_permutation() {
        // sanity: covariance of a rotated patch has its small axis rotated too
        let rot: Mat3 = nalgebra::Rotation3::from_euler_angles(1.0, 0.3, -0.5).into_inner();
        let cloud = planar_patch(12, 0.05);
        let moved = PointCloud::new(
            cloud
                .points
                .iter()
                .map(|p| OrientedPoint::new(rot * p.position, Vec3::zeros()))
                .collect(),
            false,
        );
        let est = estimate_normals(&moved, 8).unwrap();
        let expected = rot * Vec3::z();
        for p in &est.points {
            assert!(p.normal.dot(&expected).abs() > 0.999);
        }
    }
}
