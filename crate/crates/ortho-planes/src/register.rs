//! Corner-constrained rigid registration.
//!
//! Matched corners pin down degrees of freedom before any iterative
//! alignment starts: three or more non-collinear corner pairs determine the
//! motion in closed form (no ICP at all), two pairs leave a single rotation
//! angle about the corner axis, one pair leaves a 3-DoF rotation about the
//! corner, and with no corners a standard 6-DoF point-to-plane ICP runs.
//! Each reduced mode enforces its corner constraints exactly at every
//! iteration by construction.

use crate::geometry::{Mat3, PointCloud, Vec3};
use crate::refine::pairwise_sum;
use crate::spatial::SpatialGrid;
use nalgebra::{Rotation3, SMatrix, SVector, Unit};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RegisterError {
    #[error("need at least 3 corner correspondences, got {0}")]
    TooFewCorners(usize),
    #[error("corner correspondences are collinear")]
    Collinear,
    #[error("no point correspondences within the search radius")]
    NoOverlap,
}

/// A rigid motion `x ↦ R·x + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidMotion {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl RigidMotion {
    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: Mat3, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// Row-major 4×4 homogeneous matrix.
    pub fn to_matrix(&self) -> [[f64; 4]; 4] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            [r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x],
            [r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y],
            [r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z],
            [0.0, 0.0, 0.0, 1.0],
        ]
    }
}

/// Constraint mode the registration ran under, with the corner-position
/// pairs (source, destination) that pinned the motion down.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ConstraintClass {
    Full6DoF,
    OneCorner3DoF { anchor: (Vec3, Vec3) },
    TwoCorner1DoF { anchors: [(Vec3, Vec3); 2] },
    MultiCorner0DoF { anchors: Vec<(Vec3, Vec3)> },
}

impl ConstraintClass {
    pub fn name(&self) -> &'static str {
        match self {
            ConstraintClass::Full6DoF => "full-6dof",
            ConstraintClass::OneCorner3DoF { .. } => "one-corner-3dof",
            ConstraintClass::TwoCorner1DoF { .. } => "two-corner-1dof",
            ConstraintClass::MultiCorner0DoF { .. } => "multi-corner-0dof",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IcpParams {
    pub max_iterations: usize,
    /// Nearest-neighbor search radius, meters.
    pub correspondence_radius: f64,
    pub convergence_tol: f64,
    /// Corner sets spanning less than this angle off a line count as
    /// collinear, radians.
    pub collinearity_tol: f64,
}

impl Default for IcpParams {
    fn default() -> Self {
        Self {
            max_iterations: 30,
            correspondence_radius: 0.1,
            convergence_tol: 1e-8,
            collinearity_tol: 2f64.to_radians(),
        }
    }
}

/// Registration outcome: the estimated motion, the constraint mode, the
/// number of ICP iterations run (zero in the closed-form mode), the
/// point-to-plane cost after the last iteration, its per-iteration history,
/// and the fraction of source points with a correspondence at the end.
#[derive(Debug, Clone)]
pub struct IcpResult {
    pub motion: RigidMotion,
    pub class: ConstraintClass,
    pub iterations: usize,
    pub final_cost: f64,
    pub cost_history: Vec<f64>,
    pub overlap_fraction: f64,
}

/// Angle of the spread of `points` off their best-fit line: zero for
/// perfectly collinear sets.
fn off_line_angle(points: &[Vec3]) -> f64 {
    let n = points.len() as f64;
    let centroid: Vec3 = points.iter().fold(Vec3::zeros(), |acc, p| acc + p) / n;
    let mut cov = Mat3::zeros();
    for p in points {
        let v = p - centroid;
        cov += v * v.transpose();
    }
    let mut eig = nalgebra::SymmetricEigen::new(cov).eigenvalues;
    eig.as_mut_slice().sort_by(|a, b| b.partial_cmp(a).unwrap());
    let major = eig[0].max(0.0).sqrt();
    let minor = eig[1].max(0.0).sqrt();
    minor.atan2(major)
}

fn kabsch_with_tol(
    src: &[Vec3],
    dst: &[Vec3],
    collinearity_tol: f64,
) -> Result<RigidMotion, RegisterError> {
    assert_eq!(src.len(), dst.len(), "correspondence lists must pair up");
    if src.len() < 3 {
        return Err(RegisterError::TooFewCorners(src.len()));
    }
    if off_line_angle(src) < collinearity_tol {
        return Err(RegisterError::Collinear);
    }
    let n = src.len() as f64;
    let cs: Vec3 = src.iter().fold(Vec3::zeros(), |acc, p| acc + p) / n;
    let cd: Vec3 = dst.iter().fold(Vec3::zeros(), |acc, p| acc + p) / n;
    let mut h = Mat3::zeros();
    for (p, q) in src.iter().zip(dst) {
        h += (p - cs) * (q - cd).transpose();
    }
    let svd = h.svd(true, true);
    let u = svd.u.expect("requested");
    let v_t = svd.v_t.expect("requested");
    let d = (v_t.transpose() * u.transpose()).determinant();
    let correction = Mat3::from_diagonal(&Vec3::new(1.0, 1.0, d.signum()));
    let rotation = v_t.transpose() * correction * u.transpose();
    let translation = cd - rotation * cs;
    Ok(RigidMotion::new(rotation, translation))
}

/// Least-squares rigid motion mapping `src` onto `dst` in closed form:
/// minimizes `Σ ‖R·src_k + t − dst_k‖²` with the reflection excluded by a
/// determinant correction. Requires at least three correspondences that are
/// not all on one line.
pub fn kabsch_align(src: &[Vec3], dst: &[Vec3]) -> Result<RigidMotion, RegisterError> {
    kabsch_with_tol(src, dst, IcpParams::default().collinearity_tol)
}

/// True when some row permutation of `a` agrees with the rows of `b` up to
/// sign, every pair within `delta_n`.
fn frames_agree(a: &Mat3, b: &Mat3, delta_n: f64) -> bool {
    let cos_gate = delta_n.cos();
    const PERMS: [[usize; 3]; 6] = [
        [0, 1, 2],
        [0, 2, 1],
        [1, 0, 2],
        [1, 2, 0],
        [2, 0, 1],
        [2, 1, 0],
    ];
    PERMS.iter().any(|perm| {
        (0..3).all(|k| {
            let ra = a.row(perm[k]).transpose();
            let rb = b.row(k).transpose();
            ra.dot(&rb).abs() >= cos_gate
        })
    })
}

/// Greedily matches corners across two sets by position (closest pairs
/// first, each corner used at most once), applying `coarse` to the source
/// side first. A pair is accepted only if it is closer than `max_distance`
/// and the two local frames agree within `delta_n` under some axis
/// permutation and sign assignment.
pub fn match_corners(
    src: &[crate::geometry::Corner],
    dst: &[crate::geometry::Corner],
    coarse: Option<&RigidMotion>,
    delta_n: f64,
    max_distance: f64,
) -> Vec<(usize, usize)> {
    let identity = RigidMotion::identity();
    let m = coarse.unwrap_or(&identity);
    let src_pos: Vec<Vec3> = src.iter().map(|c| m.apply(&c.position)).collect();
    // Rows of the frame are plane normals: they transform by R, so the
    // frame maps to frame·Rᵀ.
    let src_frames: Vec<Mat3> = src.iter().map(|c| c.frame * m.rotation.transpose()).collect();

    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (i, p) in src_pos.iter().enumerate() {
        for (j, d) in dst.iter().enumerate() {
            let dist = (p - d.position).norm();
            if dist <= max_distance && frames_agree(&src_frames[i], &d.frame, delta_n) {
                pairs.push((dist, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut used_src = vec![false; src.len()];
    let mut used_dst = vec![false; dst.len()];
    let mut matches = Vec::new();
    for (_, i, j) in pairs {
        if !used_src[i] && !used_dst[j] {
            used_src[i] = true;
            used_dst[j] = true;
            matches.push((i, j));
        }
    }
    matches.sort_unstable();
    matches
}

/// Source cloud transformed by `motion` (normals rotate, positions move).
pub fn transform_cloud(cloud: &PointCloud, motion: &RigidMotion) -> PointCloud {
    let points = cloud
        .points
        .iter()
        .map(|p| crate::geometry::OrientedPoint::new(motion.apply(&p.position), motion.rotation * p.normal))
        .collect();
    PointCloud::new(points, cloud.has_normals)
}

/// One correspondence: transformed source position, destination position,
/// destination normal.
type Corr = (Vec3, Vec3, Vec3);

fn gather_correspondences(
    src: &PointCloud,
    dst: &PointCloud,
    grid: &SpatialGrid,
    motion: &RigidMotion,
    radius: f64,
    out: &mut Vec<Corr>,
) {
    out.clear();
    for p in &src.points {
        let world = motion.apply(&p.position);
        if let Some((j, _)) = grid.nearest_within(&world, radius) {
            let q = &dst.points[j as usize];
            out.push((world, q.position, q.normal));
        }
    }
}

fn corr_cost(corr: &[Corr]) -> f64 {
    let mut terms: Vec<f64> = corr
        .iter()
        .map(|(p, q, n)| {
            let r = (p - q).dot(n);
            r * r
        })
        .collect();
    pairwise_sum(&mut terms)
}

/// Point-to-plane cost of `src` against `dst` under `motion`, plus the
/// number of source points with a correspondence within `radius`.
pub fn alignment_cost(
    src: &PointCloud,
    dst: &PointCloud,
    motion: &RigidMotion,
    radius: f64,
) -> (f64, usize) {
    let positions: Vec<Vec3> = dst.positions().copied().collect();
    let grid = SpatialGrid::build_for_radius(&positions, radius);
    let mut corr = Vec::new();
    gather_correspondences(src, dst, &grid, motion, radius, &mut corr);
    (corr_cost(&corr), corr.len())
}

/// Generic damped Gauss-Newton ICP loop over a `D`-parameter motion model.
///
/// `motion_at` maps a parameter step (applied to the current state) to a
/// candidate motion; after acceptance the step becomes the new state. The
/// Jacobian row of a correspondence is supplied by `jac_row` evaluated at
/// the current motion.
fn icp_loop<const D: usize>(
    src: &PointCloud,
    dst: &PointCloud,
    grid: &SpatialGrid,
    params: &IcpParams,
    mut motion: RigidMotion,
    mut motion_at: impl FnMut(&RigidMotion, &SVector<f64, D>) -> RigidMotion,
    jac_row: impl Fn(&RigidMotion, &Corr) -> SVector<f64, D>,
    require_overlap: bool,
) -> Result<(RigidMotion, usize, f64, Vec<f64>, usize), RegisterError> {
    let mut corr = Vec::new();
    let mut cost_history = Vec::new();
    let mut iterations = 0;
    let mut mu = 1e-8;
    let mut last_count = 0usize;
    let mut final_cost = 0.0;

    for _ in 0..params.max_iterations {
        gather_correspondences(src, dst, grid, &motion, params.correspondence_radius, &mut corr);
        last_count = corr.len();
        if corr.is_empty() {
            if require_overlap && iterations == 0 {
                return Err(RegisterError::NoOverlap);
            }
            break;
        }
        iterations += 1;

        let mut h = SMatrix::<f64, D, D>::zeros();
        let mut g = SVector::<f64, D>::zeros();
        for c in &corr {
            let row = jac_row(&motion, c);
            let r = (c.0 - c.1).dot(&c.2);
            h.ger(1.0, &row, &row, 1.0);
            g += row * r;
        }
        let cost = corr_cost(&corr);

        let mut accepted = false;
        let mut step_norm = 0.0;
        for _ in 0..10 {
            let mut damped = h;
            for i in 0..D {
                damped[(i, i)] += mu * h[(i, i)].max(1e-12);
            }
            if let Some(chol) = damped.cholesky() {
                let delta = chol.solve(&(-g));
                let cand = motion_at(&motion, &delta);
                // Fixed-set acceptance keeps the recorded cost monotone.
                let cand_cost: f64 = {
                    let mut terms: Vec<f64> = corr
                        .iter()
                        .map(|(p, q, n)| {
                            let local = motion.inverse().apply(p);
                            let r = (cand.apply(&local) - q).dot(n);
                            r * r
                        })
                        .collect();
                    pairwise_sum(&mut terms)
                };
                if cand_cost <= cost {
                    motion = cand;
                    final_cost = cand_cost;
                    step_norm = delta.amax();
                    mu = (mu * 0.3).max(1e-12);
                    accepted = true;
                    break;
                }
            }
            mu *= 10.0;
            if mu > 1e12 {
                break;
            }
        }
        if !accepted {
            final_cost = cost;
            cost_history.push(cost);
            break;
        }
        cost_history.push(final_cost);
        if step_norm < params.convergence_tol {
            break;
        }
    }

    Ok((motion, iterations, final_cost, cost_history, last_count))
}

/// Registers `src` onto `dst` using matched corner anchors to reduce the
/// degrees of freedom:
///
/// * ≥3 non-collinear anchors: closed-form Kabsch alignment, zero ICP
///   iterations.
/// * exactly 2, or ≥3 collinear: the anchors are aligned exactly and a
///   single rotation angle about their axis is optimized.
/// * exactly 1: the anchor is pinned (`t = c − R·c'`) and the rotation
///   about it is optimized.
/// * none: full 6-DoF point-to-plane ICP from the identity.
///
/// Correspondences are nearest neighbors within `correspondence_radius`,
/// rebuilt every iteration.
pub fn constrained_icp(
    src: &PointCloud,
    dst: &PointCloud,
    matches: &[(Vec3, Vec3)],
    params: &IcpParams,
) -> Result<IcpResult, RegisterError> {
    assert!(
        dst.has_normals,
        "point-to-plane registration needs destination normals"
    );
    assert!(!src.is_empty() && !dst.is_empty(), "clouds must be nonempty");
    let positions: Vec<Vec3> = dst.positions().copied().collect();
    let grid = SpatialGrid::build_for_radius(&positions, params.correspondence_radius);

    if matches.len() >= 3 {
        let src_pts: Vec<Vec3> = matches.iter().map(|m| m.0).collect();
        let dst_pts: Vec<Vec3> = matches.iter().map(|m| m.1).collect();
        match kabsch_with_tol(&src_pts, &dst_pts, params.collinearity_tol) {
            Ok(motion) => {
                let mut corr = Vec::new();
                gather_correspondences(src, dst, &grid, &motion, params.correspondence_radius, &mut corr);
                return Ok(IcpResult {
                    motion,
                    class: ConstraintClass::MultiCorner0DoF {
                        anchors: matches.to_vec(),
                    },
                    iterations: 0,
                    final_cost: corr_cost(&corr),
                    cost_history: Vec::new(),
                    overlap_fraction: corr.len() as f64 / src.len() as f64,
                });
            }
            // Collinear corner sets keep one rotational degree of freedom:
            // fall through to the axis-constrained mode on the two most
            // distant anchors.
            Err(RegisterError::Collinear) => {}
            Err(e) => return Err(e),
        }
    }

    if matches.len() >= 2 {
        let (mut a, mut b) = (matches[0], matches[1]);
        let mut best = (a.0 - b.0).norm();
        for i in 0..matches.len() {
            for j in i + 1..matches.len() {
                let d = (matches[i].0 - matches[j].0).norm();
                if d > best {
                    best = d;
                    a = matches[i];
                    b = matches[j];
                }
            }
        }
        return two_corner_icp(src, dst, &grid, a, b, params);
    }

    if matches.len() == 1 {
        return one_corner_icp(src, dst, &grid, matches[0], params);
    }

    // Unconstrained: full 6-DoF (ω, δt), x ↦ exp([ω]×)·(R x + t) + δt.
    let (motion, iterations, final_cost, cost_history, count) = icp_loop::<6>(
        src,
        dst,
        &grid,
        params,
        RigidMotion::identity(),
        |m, delta| {
            let omega = Vec3::new(delta[0], delta[1], delta[2]);
            let dt = Vec3::new(delta[3], delta[4], delta[5]);
            let rot = Rotation3::from_scaled_axis(omega).into_inner();
            RigidMotion::new(rot * m.rotation, rot * m.translation + dt)
        },
        |_, (p, _, n)| {
            let pxn = p.cross(n);
            SVector::<f64, 6>::from_column_slice(&[pxn.x, pxn.y, pxn.z, n.x, n.y, n.z])
        },
        true,
    )?;
    Ok(IcpResult {
        motion,
        class: ConstraintClass::Full6DoF,
        iterations,
        final_cost,
        cost_history,
        overlap_fraction: count as f64 / src.len() as f64,
    })
}

fn one_corner_icp(
    src: &PointCloud,
    dst: &PointCloud,
    grid: &SpatialGrid,
    anchor: (Vec3, Vec3),
    params: &IcpParams,
) -> Result<IcpResult, RegisterError> {
    let (c_src, c_dst) = anchor;
    // t is always c_dst − R·c_src, so the anchor residual is exactly zero.
    let init = RigidMotion::new(Mat3::identity(), c_dst - c_src);
    let (motion, iterations, final_cost, cost_history, count) = icp_loop::<3>(
        src,
        dst,
        grid,
        params,
        init,
        |m, delta| {
            let omega = Vec3::new(delta[0], delta[1], delta[2]);
            let rot = Rotation3::from_scaled_axis(omega).into_inner() * m.rotation;
            RigidMotion::new(rot, c_dst - rot * c_src)
        },
        |_, (p, _, n)| {
            // Rotation about the pinned corner: ∂r/∂ω = ((p − c)×n).
            let arm = (p - c_dst).cross(n);
            SVector::<f64, 3>::from_column_slice(&[arm.x, arm.y, arm.z])
        },
        false,
    )?;
    Ok(IcpResult {
        motion,
        class: ConstraintClass::OneCorner3DoF { anchor },
        iterations,
        final_cost,
        cost_history,
        overlap_fraction: count as f64 / src.len() as f64,
    })
}

fn two_corner_icp(
    src: &PointCloud,
    dst: &PointCloud,
    grid: &SpatialGrid,
    a: (Vec3, Vec3),
    b: (Vec3, Vec3),
    params: &IcpParams,
) -> Result<IcpResult, RegisterError> {
    // Pre-align: midpoints coincide, corner axis rotated onto its
    // counterpart by the shortest arc.
    let m_src = 0.5 * (a.0 + b.0);
    let m_dst = 0.5 * (a.1 + b.1);
    let u_src = (b.0 - a.0).normalize();
    let u_dst = (b.1 - a.1).normalize();
    let r0 = Rotation3::rotation_between(&u_src, &u_dst)
        .unwrap_or_else(|| {
            // Antiparallel: turn 180° about any axis orthogonal to u_src.
            let helper = if u_src.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
            let axis = Unit::new_normalize(u_src.cross(&helper));
            Rotation3::from_axis_angle(&axis, std::f64::consts::PI)
        })
        .into_inner();
    let init = RigidMotion::new(r0, m_dst - r0 * m_src);
    let axis = Unit::new_normalize(u_dst);

    // One parameter: the angle α about the line (m_dst, u_dst). Rotating
    // about that line keeps both mapped anchors fixed.
    let (motion, iterations, final_cost, cost_history, count) = icp_loop::<1>(
        src,
        dst,
        grid,
        params,
        init,
        |m, delta| {
            let rot = Rotation3::from_axis_angle(&axis, delta[0]).into_inner();
            RigidMotion::new(rot * m.rotation, rot * (m.translation - m_dst) + m_dst)
        },
        |_, (p, _, n)| {
            let arm = axis.cross(&(p - m_dst)).dot(n);
            SVector::<f64, 1>::from_column_slice(&[arm])
        },
        false,
    )?;
    Ok(IcpResult {
        motion,
        class: ConstraintClass::TwoCorner1DoF { anchors: [a, b] },
        iterations,
        final_cost,
        cost_history,
        overlap_fraction: count as f64 / src.len() as f64,
    })
}

/// Relative pose error: the angle of `gt.rotationᵀ·est.rotation` and the
/// translation difference norm.
pub fn compute_rpe(estimate: &RigidMotion, ground_truth: &RigidMotion) -> (f64, f64) {
    let r_err = ground_truth.rotation.transpose() * estimate.rotation;
    let cos_angle = ((r_err.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let angle = cos_angle.acos();
    let trans = (estimate.translation - ground_truth.translation).norm();
    (angle, trans)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Corner, OrientedPoint};
    use crate::io::synth::{generate_synthetic_scene, Layout, SyntheticSpec};
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_points(n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec3> {
        (0..n)
            .map(|_| {
                Vec3::new(
                    rng.random::<f64>() * 2.0 - 1.0,
                    rng.random::<f64>() * 2.0 - 1.0,
                    rng.random::<f64>() * 2.0 - 1.0,
                )
            })
            .collect()
    }

    #[test]
    fn kabsch_pure_translation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let src = random_points(5, &mut rng);
        let t = Vec3::new(1.0, 2.0, 3.0);
        let dst: Vec<Vec3> = src.iter().map(|p| p + t).collect();
        let motion = kabsch_align(&src, &dst).unwrap();
        assert!((motion.rotation - Mat3::identity()).norm() < 1e-12);
        assert!((motion.translation - t).norm() < 1e-12);
    }

    #[test]
    fn kabsch_recovers_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let src = random_points(4, &mut rng);
        let rot = Rotation3::from_axis_angle(&Vec3::z_axis(), 30f64.to_radians()).into_inner();
        let dst: Vec<Vec3> = src.iter().map(|p| rot * p).collect();
        let motion = kabsch_align(&src, &dst).unwrap();
        assert!((motion.rotation - rot).norm() < 1e-9);
        assert!(motion.translation.norm() < 1e-9);
        assert_abs_diff_eq!(motion.rotation.determinant(), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn kabsch_rejects_degenerate_input() {
        let src = vec![
            Vec3::zeros(),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(2.0, 0.0, 0.0),
        ];
        let dst = src.clone();
        assert!(matches!(
            kabsch_align(&src, &dst),
            Err(RegisterError::Collinear)
        ));
        assert!(matches!(
            kabsch_align(&src[..2], &dst[..2]),
            Err(RegisterError::TooFewCorners(2))
        ));
    }

    #[test]
    fn kabsch_matches_brute_force_minimizer() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let src = random_points(3, &mut rng);
        let gt_rot = Rotation3::from_euler_angles(0.3, -0.2, 0.5).into_inner();
        let gt_t = Vec3::new(0.2, -0.1, 0.4);
        let dst: Vec<Vec3> = src.iter().map(|p| gt_rot * p + gt_t).collect();
        let motion = kabsch_align(&src, &dst).unwrap();

        // Brute force: coarse axis-angle grid, then Gauss-Newton polish on
        // the rotation with the optimal translation substituted.
        let cs: Vec3 = src.iter().fold(Vec3::zeros(), |acc, p| acc + p) / 3.0;
        let cd: Vec3 = dst.iter().fold(Vec3::zeros(), |acc, p| acc + p) / 3.0;
        let cost_of = |r: &Mat3| -> f64 {
            src.iter()
                .zip(&dst)
                .map(|(p, q)| (r * (p - cs) - (q - cd)).norm_squared())
                .sum()
        };
        let mut best_rot = Mat3::identity();
        let mut best_cost = cost_of(&best_rot);
        let steps = 24;
        for i in 0..steps {
            for j in 0..steps {
                for k in 0..steps {
                    let r = Rotation3::from_euler_angles(
                        (i as f64 / steps as f64 - 0.5) * std::f64::consts::TAU,
                        (j as f64 / steps as f64 - 0.5) * std::f64::consts::PI,
                        (k as f64 / steps as f64 - 0.5) * std::f64::consts::TAU,
                    )
                    .into_inner();
                    let c = cost_of(&r);
                    if c < best_cost {
                        best_cost = c;
                        best_rot = r;
                    }
                }
            }
        }
        for _ in 0..60 {
            let mut h = Mat3::zeros();
            let mut g = Vec3::zeros();
            for (p, q) in src.iter().zip(&dst) {
                let y = best_rot * (p - cs);
                // ∂(exp([ω]×)·y)/∂ω at 0 is −[y]×.
                let jac = Mat3::new(0.0, y.z, -y.y, -y.z, 0.0, y.x, y.y, -y.x, 0.0);
                let r = y - (q - cd);
                h += jac.transpose() * jac;
                g += jac.transpose() * r;
            }
            let delta = h.lu().solve(&(-g)).unwrap_or_else(Vec3::zeros);
            let cand = Rotation3::from_scaled_axis(delta).into_inner() * best_rot;
            if cost_of(&cand) < cost_of(&best_rot) {
                best_rot = cand;
            } else {
                break;
            }
        }
        let (angle, _) = compute_rpe(
            &motion,
            &RigidMotion::new(best_rot, cd - best_rot * cs),
        );
        assert!(angle < 1e-3, "kabsch differs from brute force by {angle}");
    }

    fn corner_at(position: Vec3) -> Corner {
        Corner::new(Mat3::identity(), -position)
    }

    #[test]
    fn match_corners_identical_sets() {
        let corners: Vec<Corner> = [
            Vec3::zeros(),
            Vec3::new(2.0, 0.0, 0.0),
            Vec3::new(0.0, 2.0, 0.0),
        ]
        .iter()
        .map(|p| corner_at(*p))
        .collect();
        let matches = match_corners(&corners, &corners, None, 20f64.to_radians(), 0.5);
        assert_eq!(matches, vec![(0, 0), (1, 1), (2, 2)]);
    }

    #[test]
    fn match_corners_tolerates_lrf_permutation() {
        let p = Vec3::new(1.0, 1.0, 0.0);
        let a = corner_at(p);
        // Same position, frame rotated 90° about its own z-axis: rows become
        // a signed permutation of the original rows.
        let rot = Rotation3::from_axis_angle(&Vec3::z_axis(), 90f64.to_radians()).into_inner();
        let frame_b = rot * a.frame;
        let b = Corner::new(frame_b, -(frame_b * p));
        assert!((b.position - p).norm() < 1e-12);
        let matches = match_corners(&[a], &[b], None, 20f64.to_radians(), 0.5);
        assert_eq!(matches.len(), 1);
    }

    #[test]
    fn match_corners_rejects_frame_mismatch_and_distance() {
        let a = corner_at(Vec3::zeros());
        // 45° twist cannot be explained by permutation/sign within 20°.
        let rot = Rotation3::from_axis_angle(&Vec3::z_axis(), 45f64.to_radians()).into_inner();
        let twisted = Corner::new(rot * a.frame, a.offsets);
        assert!(match_corners(&[a], &[twisted], None, 20f64.to_radians(), 0.5).is_empty());

        let far = corner_at(Vec3::new(10.0, 0.0, 0.0));
        assert!(match_corners(&[a], &[far], None, 20f64.to_radians(), 0.5).is_empty());
    }

    #[test]
    fn match_corners_uses_coarse_motion() {
        let a = corner_at(Vec3::new(1.0, 0.0, 0.0));
        let shift = RigidMotion::new(Mat3::identity(), Vec3::new(0.0, 3.0, 0.0));
        let b = Corner::new(a.frame, a.offsets - a.frame * shift.translation);
        assert!((b.position - (a.position + shift.translation)).norm() < 1e-12);
        assert!(match_corners(&[a], &[b], None, 20f64.to_radians(), 0.5).is_empty());
        let matches = match_corners(&[a], &[b], Some(&shift), 20f64.to_radians(), 0.5);
        assert_eq!(matches, vec![(0, 0)]);
    }

    fn box_scene(seed: u64) -> (PointCloud, crate::io::synth::GroundTruth) {
        generate_synthetic_scene(&SyntheticSpec {
            layout: Layout::Box,
            extent: 2.0,
            points_per_m2: 600.0,
            noise_sigma: 0.002,
            outlier_fraction: 0.0,
            seed,
        })
    }

    fn gt_motion() -> RigidMotion {
        let rot = Rotation3::from_axis_angle(&Vec3::z_axis(), 5f64.to_radians()).into_inner();
        RigidMotion::new(rot, Vec3::new(0.1, -0.05, 0.02))
    }

    /// Small enough that every point keeps a correspondence from the first
    /// iteration on at radius 0.25.
    fn gentle_motion() -> RigidMotion {
        let rot = Rotation3::from_axis_angle(&Vec3::z_axis(), 2f64.to_radians()).into_inner();
        RigidMotion::new(rot, Vec3::new(0.03, -0.02, 0.01))
    }

    /// dst = gt(src): registering src onto dst must recover gt.
    fn scene_pair(seed: u64, motion: RigidMotion) -> (PointCloud, PointCloud, RigidMotion, Vec<(Vec3, Vec3)>) {
        let (dst_before, gt) = box_scene(seed);
        let inv = motion.inverse();
        let src = transform_cloud(&dst_before, &inv);
        let dst = dst_before;
        let anchors: Vec<(Vec3, Vec3)> = gt
            .corners
            .iter()
            .map(|c| (inv.apply(&c.position), c.position))
            .collect();
        (src, dst, motion, anchors)
    }

    #[test]
    fn multi_corner_closed_form_zero_iterations() {
        let (src, dst, gt, anchors) = scene_pair(7, gt_motion());
        let result = constrained_icp(&src, &dst, &anchors[..3], &IcpParams::default()).unwrap();
        assert!(matches!(result.class, ConstraintClass::MultiCorner0DoF { .. }));
        assert_eq!(result.iterations, 0);
        let (rot_err, trans_err) = compute_rpe(&result.motion, &gt);
        assert!(rot_err < 0.1f64.to_radians(), "rotation error {rot_err}");
        assert!(trans_err < 1e-3, "translation error {trans_err}");
        assert!(result.overlap_fraction > 0.9);
    }

    #[test]
    fn one_corner_mode_converges_and_pins_anchor() {
        let (src, dst, gt, anchors) = scene_pair(8, gt_motion());
        let result = constrained_icp(&src, &dst, &anchors[..1], &IcpParams::default()).unwrap();
        assert!(matches!(result.class, ConstraintClass::OneCorner3DoF { .. }));
        let (rot_err, trans_err) = compute_rpe(&result.motion, &gt);
        assert!(rot_err < 0.5f64.to_radians(), "rotation error {rot_err}");
        assert!(trans_err < 5e-3, "translation error {trans_err}");
        // Hard constraint: the anchor maps exactly.
        let (c_src, c_dst) = anchors[0];
        assert!((result.motion.apply(&c_src) - c_dst).norm() < 1e-12);
    }

    #[test]
    fn two_corner_mode_pins_both_anchors() {
        let (src, dst, gt, anchors) = scene_pair(9, gt_motion());
        let result = constrained_icp(&src, &dst, &anchors[..2], &IcpParams::default()).unwrap();
        assert!(matches!(result.class, ConstraintClass::TwoCorner1DoF { .. }));
        let (rot_err, trans_err) = compute_rpe(&result.motion, &gt);
        assert!(rot_err < 0.5f64.to_radians(), "rotation error {rot_err}");
        assert!(trans_err < 5e-3, "translation error {trans_err}");
        for (c_src, c_dst) in &anchors[..2] {
            assert!((result.motion.apply(c_src) - c_dst).norm() < 1e-12);
        }
    }

    #[test]
    fn collinear_corners_demote_to_one_dof() {
        let (src, dst, _, _) = scene_pair(10, gt_motion());
        // Three anchors on one line along x at z = 0.
        let line: Vec<(Vec3, Vec3)> = (0..3)
            .map(|i| {
                let p = Vec3::new(0.3 + 0.5 * i as f64, 0.2, 0.0);
                let inv = gt_motion().inverse();
                (inv.apply(&p), p)
            })
            .collect();
        let result = constrained_icp(&src, &dst, &line, &IcpParams::default()).unwrap();
        assert!(matches!(result.class, ConstraintClass::TwoCorner1DoF { .. }));
    }

    #[test]
    fn full_6dof_identity_copy_converges_immediately() {
        let (cloud, _) = box_scene(11);
        let result = constrained_icp(&cloud, &cloud, &[], &IcpParams::default()).unwrap();
        assert!(matches!(result.class, ConstraintClass::Full6DoF));
        let (rot_err, trans_err) = compute_rpe(&result.motion, &RigidMotion::identity());
        assert!(rot_err < 1e-6 && trans_err < 1e-6);
        assert_eq!(result.iterations, 1);
    }

    #[test]
    fn full_6dof_recovers_small_motion_with_monotone_cost() {
        let (src, dst, gt, _) = scene_pair(12, gentle_motion());
        let params = IcpParams {
            max_iterations: 60,
            correspondence_radius: 0.25,
            ..IcpParams::default()
        };
        let result = constrained_icp(&src, &dst, &[], &params).unwrap();
        let (rot_err, trans_err) = compute_rpe(&result.motion, &gt);
        assert!(rot_err < 0.5f64.to_radians(), "rotation error {rot_err}");
        assert!(trans_err < 1e-2, "translation error {trans_err}");
        for w in result.cost_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-15, "cost increased: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn no_overlap_is_an_error_only_without_corners() {
        let near = PointCloud::new(
            (0..100)
                .map(|i| OrientedPoint::new(Vec3::new(i as f64 * 0.01, 0.0, 0.0), Vec3::z()))
                .collect(),
            true,
        );
        let far = transform_cloud(
            &near,
            &RigidMotion::new(Mat3::identity(), Vec3::new(100.0, 0.0, 0.0)),
        );
        assert!(matches!(
            constrained_icp(&near, &far, &[], &IcpParams::default()),
            Err(RegisterError::NoOverlap)
        ));
        // With a corner anchor the constraint still defines a result.
        let anchor = [(Vec3::zeros(), Vec3::new(100.0, 0.0, 0.0))];
        let result = constrained_icp(&near, &far, &anchor, &IcpParams::default()).unwrap();
        assert!(matches!(result.class, ConstraintClass::OneCorner3DoF { .. }));
    }

    #[test]
    fn reduced_modes_cost_at_least_full_minimum() {
        // Restriction property: the constrained minimizers cannot beat the
        // unconstrained one on the same scene. Different noise realizations
        // keep the converged cost well above the rounding floor.
        let motion = gentle_motion();
        let (dst, gt) = box_scene(13);
        let (src_scene, _) = box_scene(14);
        let inv = motion.inverse();
        let src = transform_cloud(&src_scene, &inv);
        let anchors: Vec<(Vec3, Vec3)> = gt
            .corners
            .iter()
            .map(|c| (inv.apply(&c.position), c.position))
            .collect();
        let params = IcpParams {
            max_iterations: 80,
            correspondence_radius: 0.25,
            ..IcpParams::default()
        };
        let full = constrained_icp(&src, &dst, &[], &params).unwrap();
        let one = constrained_icp(&src, &dst, &anchors[..1], &params).unwrap();
        let two = constrained_icp(&src, &dst, &anchors[..2], &params).unwrap();
        let radius = params.correspondence_radius;
        let (full_cost, n_full) = alignment_cost(&src, &dst, &full.motion, radius);
        let (one_cost, n_one) = alignment_cost(&src, &dst, &one.motion, radius);
        let (two_cost, n_two) = alignment_cost(&src, &dst, &two.motion, radius);
        // Normalize per correspondence to compare across slightly different
        // correspondence counts.
        let full_avg = full_cost / n_full as f64;
        assert!(one_cost / n_one as f64 >= full_avg * 0.99);
        assert!(two_cost / n_two as f64 >= full_avg * 0.99);
    }

    #[test]
    fn reduced_dof_converges_in_no_more_iterations() {
        let mut full_iters = Vec::new();
        let mut one_iters = Vec::new();
        let mut two_iters = Vec::new();
        for seed in 20..25 {
            let (src, dst, _, anchors) = scene_pair(seed, gt_motion());
            let params = IcpParams {
                max_iterations: 80,
                correspondence_radius: 0.25,
                ..IcpParams::default()
            };
            full_iters.push(constrained_icp(&src, &dst, &[], &params).unwrap().iterations);
            one_iters.push(
                constrained_icp(&src, &dst, &anchors[..1], &params)
                    .unwrap()
                    .iterations,
            );
            two_iters.push(
                constrained_icp(&src, &dst, &anchors[..2], &params)
                    .unwrap()
                    .iterations,
            );
        }
        let median = |v: &mut Vec<usize>| {
            v.sort_unstable();
            v[v.len() / 2]
        };
        let full_med = median(&mut full_iters);
        assert!(median(&mut one_iters) <= full_med);
        assert!(median(&mut two_iters) <= full_med);
    }

    #[test]
    fn rpe_examples() {
        let gt = gt_motion();
        assert_eq!(compute_rpe(&gt, &gt), (0.0, 0.0));
        let extra = Rotation3::from_axis_angle(&Vec3::z_axis(), 10f64.to_radians()).into_inner();
        let est = RigidMotion::new(extra * gt.rotation, gt.translation);
        let (angle, trans) = compute_rpe(&est, &gt);
        assert_abs_diff_eq!(angle, 10f64.to_radians(), epsilon = 1e-12);
        assert_abs_diff_eq!(trans, 0.0, epsilon = 1e-12);
        let est2 = RigidMotion::new(gt.rotation, gt.translation + Vec3::new(0.03, 0.0, 0.0));
        let (angle2, trans2) = compute_rpe(&est2, &gt);
        assert_abs_diff_eq!(angle2, 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(trans2, 0.03, epsilon = 1e-12);
    }

    #[test]
    fn motion_algebra_roundtrip() {
        let m = gt_motion();
        let inv = m.inverse();
        let composed = m.compose(&inv);
        let (angle, trans) = compute_rpe(&composed, &RigidMotion::identity());
        assert!(angle < 1e-12 && trans < 1e-12);
        let p = Vec3::new(0.3, -0.7, 1.1);
        assert!((inv.apply(&m.apply(&p)) - p).norm() < 1e-12);
        let mat = m.to_matrix();
        assert_eq!(mat[3], [0.0, 0.0, 0.0, 1.0]);
        assert_abs_diff_eq!(mat[0][3], m.translation.x, epsilon = 1e-15);
    }
}
