//! Constrained nonlinear least-squares refinement.
//!
//! Two optimizers live here. [`refine_corner`] polishes a single corner —
//! a rotation (whose rows are the three plane normals) plus three offsets —
//! against the points in a frozen support ball, minimizing the squared
//! distance of every point to its closest corner plane. [`refine_graph`]
//! jointly refines all plane bundles of a scene: normals on the unit sphere,
//! one offset per parallel plane, a robustified point-to-plane data term and
//! a quadratic penalty on the dot product of every orthogonality edge.
//!
//! Both keep their variables on-manifold by construction: rotations are
//! updated multiplicatively from a 3-parameter twist, normals through a
//! 2-parameter tangent-plane step followed by re-normalization. Point
//! assignments are recomputed every accepted iteration, and damped
//! Gauss-Newton steps are only accepted when the true (re-assigned) cost
//! decreases, so the reported cost history is monotone.

use crate::geometry::{Corner, GeometryError, Mat3, Plane, PointCloud, Vec3};
use crate::graph::ParallelBundle;
use crate::io::{downsample_at, SamplingParams};
use nalgebra::{DMatrix, DVector, Matrix6, Rotation3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RefineError {
    #[error("insufficient corner support: {0}")]
    InsufficientSupport(String),
    #[error("no point matched any bundle")]
    EmptyAssignment,
}

/// Robust loss applied to the data residuals of the graph refinement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum RobustLoss {
    /// Plain least squares.
    None,
    /// Quadratic below `scale`, linear above.
    Huber { scale: f64 },
}

impl RobustLoss {
    /// ρ(r): the per-residual cost.
    pub fn rho(&self, r: f64) -> f64 {
        match *self {
            RobustLoss::None => 0.5 * r * r,
            RobustLoss::Huber { scale } => {
                let a = r.abs();
                if a <= scale {
                    0.5 * r * r
                } else {
                    scale * (a - 0.5 * scale)
                }
            }
        }
    }

    /// Iteratively-reweighted least-squares weight ρ'(r)/r.
    pub fn weight(&self, r: f64) -> f64 {
        match *self {
            RobustLoss::None => 1.0,
            RobustLoss::Huber { scale } => {
                let a = r.abs();
                if a <= scale {
                    1.0
                } else {
                    scale / a
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefinementParams {
    /// Corner support ball radius, meters.
    pub epsilon: f64,
    /// Weight of the orthogonality penalty.
    pub lambda: f64,
    /// Normal-agreement gate for point-to-bundle assignment, radians.
    pub eps_n: f64,
    /// Loss on the graph data term.
    pub loss: RobustLoss,
    /// Iteration cap for each descent phase of the solvers.
    pub max_iterations: usize,
    /// Relative cost-decrease threshold that counts as converged.
    pub convergence_tol: f64,
    /// Coarse-to-fine levels for the graph refinement.
    pub hierarchy_levels: usize,
}

impl Default for RefinementParams {
    fn default() -> Self {
        Self {
            epsilon: 0.15,
            lambda: 1e4,
            eps_n: 30f64.to_radians(),
            loss: RobustLoss::Huber { scale: 0.02 },
            max_iterations: 50,
            convergence_tol: 1e-8,
            hierarchy_levels: 3,
        }
    }
}

/// Sums a scratch buffer by pairwise halving: deterministic and far more
/// accurate than a running sum for large residual stacks.
pub(crate) fn pairwise_sum(xs: &mut [f64]) -> f64 {
    let mut n = xs.len();
    if n == 0 {
        return 0.0;
    }
    while n > 1 {
        let half = n / 2;
        for i in 0..half {
            xs[i] = xs[2 * i] + xs[2 * i + 1];
        }
        if n % 2 == 1 {
            xs[half] = xs[n - 1];
            n = half + 1;
        } else {
            n = half;
        }
    }
    xs[0]
}

/// Projects a nonsingular matrix to the nearest rotation (Frobenius norm).
/// If the straight projection lands on determinant −1, rows 2 and 3 of the
/// input are swapped and the projection repeated, so inputs whose rows are a
/// left-handed plane ordering come out right-handed.
pub fn project_to_rotation(m: &Mat3) -> Result<Mat3, GeometryError> {
    let project = |m: &Mat3| -> Result<Mat3, GeometryError> {
        let svd = m.svd(true, true);
        let min_sv = svd.singular_values.min();
        if min_sv < 1e-9 {
            return Err(GeometryError::Singular);
        }
        let u = svd.u.expect("requested");
        let v_t = svd.v_t.expect("requested");
        Ok(u * v_t)
    };
    let r = project(m)?;
    if r.determinant() > 0.0 {
        return Ok(r);
    }
    let mut swapped = *m;
    swapped.swap_rows(1, 2);
    project(&swapped)
}

/// The points within the open ε-ball of the corner position. The subset is
/// intended to stay frozen for the whole corner optimization.
pub fn select_corner_support(cloud: &PointCloud, corner: &Corner, epsilon: f64) -> PointCloud {
    let points = cloud
        .points
        .iter()
        .filter(|p| (p.position - corner.position).norm() < epsilon)
        .copied()
        .collect();
    PointCloud::new(points, cloud.has_normals)
}

/// Builds an initial corner from three planes: their stacked normals are
/// projected to a right-handed rotation (reordering rows 2 and 3 when the
/// stack is left-handed) and the plane offsets follow their rows, with signs
/// aligned to the projected normals.
pub fn corner_from_planes(p0: &Plane, p1: &Plane, p2: &Plane) -> Result<Corner, GeometryError> {
    let stack = |a: &Plane, b: &Plane, c: &Plane| {
        Mat3::from_rows(&[
            a.normal.transpose(),
            b.normal.transpose(),
            c.normal.transpose(),
        ])
    };
    let (a, b, c) = if stack(p0, p1, p2).determinant() < 0.0 {
        (p0, p2, p1)
    } else {
        (p0, p1, p2)
    };
    let frame = project_to_rotation(&stack(a, b, c))?;
    let offset_along = |p: &Plane, k: usize| {
        if p.normal.dot(&frame.row(k).transpose()) >= 0.0 {
            p.offset
        } else {
            -p.offset
        }
    };
    let offsets = Vec3::new(offset_along(a, 0), offset_along(b, 1), offset_along(c, 2));
    Ok(Corner::new(frame, offsets))
}

/// Re-fits each corner offset as the median of `−n_k·x` over the support
/// points currently assigned to plane `k` (argmin of the absolute signed
/// distances). Planes with no assigned points keep their offset.
pub fn refit_corner_offsets(corner: &Corner, support: &PointCloud) -> Corner {
    let mut samples: [Vec<f64>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for p in &support.points {
        let r = corner.frame * p.position + corner.offsets;
        let mut k = 0;
        for j in 1..3 {
            if r[j].abs() < r[k].abs() {
                k = j;
            }
        }
        samples[k].push(-(corner.frame * p.position)[k]);
    }
    let mut offsets = corner.offsets;
    for k in 0..3 {
        if samples[k].is_empty() {
            continue;
        }
        samples[k].sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = samples[k].len();
        offsets[k] = if n % 2 == 1 {
            samples[k][n / 2]
        } else {
            0.5 * (samples[k][n / 2 - 1] + samples[k][n / 2])
        };
    }
    Corner::new(corner.frame, offsets)
}

/// Corner energy at a fixed point-to-plane assignment, exposed so the
/// analytic Jacobian can be verified against finite differences.
///
/// Parameters are a 6-vector `(ω, δd)`: the rotation becomes
/// `exp([ω]×)·R` and the offsets `d + δd`. The assignment (each point's
/// closest plane) is frozen at construction.
pub struct CornerProblem<'a> {
    support: &'a PointCloud,
    pub rotation: Mat3,
    pub offsets: Vec3,
    assignment: Vec<u8>,
}

impl<'a> CornerProblem<'a> {
    pub fn new(support: &'a PointCloud, rotation: Mat3, offsets: Vec3) -> Self {
        let assignment = support
            .points
            .iter()
            .map(|p| {
                let r = rotation * p.position + offsets;
                let mut k = 0u8;
                for j in 1..3 {
                    if r[j].abs() < r[k as usize].abs() {
                        k = j as u8;
                    }
                }
                k
            })
            .collect();
        Self {
            support,
            rotation,
            offsets,
            assignment,
        }
    }

    pub fn residual_count(&self) -> usize {
        self.support.len()
    }

    /// Points currently assigned to each of the three planes.
    pub fn plane_counts(&self) -> [usize; 3] {
        let mut counts = [0usize; 3];
        for &k in &self.assignment {
            counts[k as usize] += 1;
        }
        counts
    }

    /// Residual stack at the parameter increment `delta`, frozen assignment.
    pub fn residuals(&self, delta: &Vector6<f64>) -> DVector<f64> {
        let omega = Vec3::new(delta[0], delta[1], delta[2]);
        let dd = Vec3::new(delta[3], delta[4], delta[5]);
        let rot = Rotation3::from_scaled_axis(omega).into_inner() * self.rotation;
        let off = self.offsets + dd;
        DVector::from_iterator(
            self.support.len(),
            self.support
                .points
                .iter()
                .zip(&self.assignment)
                .map(|(p, &k)| (rot * p.position + off)[k as usize]),
        )
    }

    /// Analytic Jacobian of [`Self::residuals`] at `delta = 0`.
    pub fn jacobian(&self) -> DMatrix<f64> {
        let mut jac = DMatrix::zeros(self.support.len(), 6);
        for (i, (p, &k)) in self.support.points.iter().zip(&self.assignment).enumerate() {
            let row = self.jacobian_row(p.position, k as usize);
            for c in 0..6 {
                jac[(i, c)] = row[c];
            }
        }
        jac
    }

    fn jacobian_row(&self, x: Vec3, k: usize) -> Vector6<f64> {
        let y = self.rotation * x;
        // ∂(exp([ω]×)y)_k/∂ω at ω = 0 is row k of −[y]×.
        let d_omega = match k {
            0 => Vec3::new(0.0, y.z, -y.y),
            1 => Vec3::new(-y.z, 0.0, y.x),
            _ => Vec3::new(y.y, -y.x, 0.0),
        };
        let mut row = Vector6::zeros();
        row[0] = d_omega.x;
        row[1] = d_omega.y;
        row[2] = d_omega.z;
        row[3 + k] = 1.0;
        row
    }

    /// Squared-residual cost at `delta = 0` (pairwise-summed).
    pub fn cost(&self) -> f64 {
        let mut terms: Vec<f64> = self
            .support
            .points
            .iter()
            .zip(&self.assignment)
            .map(|(p, &k)| {
                let r = (self.rotation * p.position + self.offsets)[k as usize];
                r * r
            })
            .collect();
        pairwise_sum(&mut terms)
    }
}

/// Result of a corner refinement. `converged` is false when the iteration
/// budget ran out while the cost was still falling; the corner is returned
/// either way.
#[derive(Debug, Clone)]
pub struct CornerRefinement {
    pub corner: Corner,
    pub converged: bool,
    pub iterations: usize,
    /// Cost after every accepted iteration, starting with the initial cost.
    pub cost_history: Vec<f64>,
}

/// Minimizes the sum of squared distances of each support point to its
/// closest corner plane over the corner pose, by damped Gauss-Newton with
/// multiplicative twist updates. Assignments refresh each iteration and a
/// step counts only if it lowers the re-assigned cost, so the cost history
/// is strictly decreasing.
pub fn refine_corner(
    support: &PointCloud,
    init: &Corner,
    params: &RefinementParams,
) -> Result<CornerRefinement, RefineError> {
    if support.len() < 6 {
        return Err(RefineError::InsufficientSupport(format!(
            "{} points, need at least 6",
            support.len()
        )));
    }
    let mut rotation = init.frame;
    let mut offsets = init.offsets;
    let mut problem = CornerProblem::new(support, rotation, offsets);
    let counts = problem.plane_counts();
    if let Some(k) = (0..3).find(|&k| counts[k] < 3) {
        return Err(RefineError::InsufficientSupport(format!(
            "plane {k} has {} inliers, need at least 3",
            counts[k]
        )));
    }

    let mut cost = problem.cost();
    let mut cost_history = vec![cost];
    let mut mu = 1e-6;
    let mut converged = false;
    let mut iterations = 0;

    for _ in 0..params.max_iterations {
        iterations += 1;
        // Normal equations, assignment frozen within the linearization.
        let mut h = Matrix6::<f64>::zeros();
        let mut g = Vector6::<f64>::zeros();
        for (p, &k) in support.points.iter().zip(&problem.assignment) {
            let row = problem.jacobian_row(p.position, k as usize);
            let r = (rotation * p.position + offsets)[k as usize];
            h.ger(1.0, &row, &row, 1.0);
            g += row * r;
        }
        if g.amax() < 1e-12 {
            converged = true;
            break;
        }

        let mut accepted = false;
        for _ in 0..12 {
            let mut damped = h;
            for i in 0..6 {
                damped[(i, i)] += mu * h[(i, i)].max(1e-12);
            }
            if let Some(chol) = damped.cholesky() {
                let delta = chol.solve(&(-g));
                let omega = Vec3::new(delta[0], delta[1], delta[2]);
                let cand_rot = Rotation3::from_scaled_axis(omega).into_inner() * rotation;
                let cand_off = offsets + Vec3::new(delta[3], delta[4], delta[5]);
                let cand = CornerProblem::new(support, cand_rot, cand_off);
                let cand_cost = cand.cost();
                if cand_cost < cost {
                    rotation = cand_rot;
                    offsets = cand_off;
                    problem = cand;
                    cost = cand_cost;
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
            // No descent step exists: local minimum.
            converged = true;
            break;
        }
        let prev = cost_history[cost_history.len() - 1];
        cost_history.push(cost);
        if cost < 1e-24 || prev - cost <= params.convergence_tol * prev {
            converged = true;
            break;
        }
    }

    Ok(CornerRefinement {
        corner: Corner::new(rotation, offsets),
        converged,
        iterations,
        cost_history,
    })
}

/// Per-point assignment: `Some((bundle, distance index))` or `None`.
pub type BundleAssignment = Vec<Option<(usize, usize)>>;

fn assign_impl(
    cloud: &PointCloud,
    normals: &[Vec3],
    distances: &[Vec<f64>],
    eps_n: f64,
) -> BundleAssignment {
    let cos_eps = eps_n.cos();
    cloud
        .points
        .iter()
        .map(|p| {
            let mut best: Option<(usize, usize, f64)> = None;
            for (k, (n, ds)) in normals.iter().zip(distances).enumerate() {
                if ds.is_empty() || p.normal.dot(n).abs() < cos_eps {
                    continue;
                }
                let v = n.dot(&p.position);
                // Closest offset to −v via binary search in the sorted list.
                let idx = ds.partition_point(|&d| d < -v);
                for l in [idx.wrapping_sub(1), idx] {
                    if l >= ds.len() {
                        continue;
                    }
                    let r = (v + ds[l]).abs();
                    if best.map_or(true, |(_, _, b)| r < b) {
                        best = Some((k, l, r));
                    }
                }
            }
            best.map(|(k, l, _)| (k, l))
        })
        .collect()
}

/// Assigns every point to the bundle plane minimizing the absolute
/// point-to-plane distance, considering only bundles whose normal agrees
/// with the point normal within `eps_n` (sign-insensitive). The inner
/// distance argmin uses binary search over each bundle's sorted offsets.
pub fn assign_points_to_bundles(
    cloud: &PointCloud,
    bundles: &[ParallelBundle],
    eps_n: f64,
) -> BundleAssignment {
    let normals: Vec<Vec3> = bundles.iter().map(|b| b.normal).collect();
    let distances: Vec<Vec<f64>> = bundles.iter().map(|b| b.distances.clone()).collect();
    assign_impl(cloud, &normals, &distances, eps_n)
}

/// Graph energy at a fixed assignment, exposed for Jacobian verification.
///
/// Parameters: per bundle two tangent coordinates of its unit normal,
/// followed by one parameter per bundle distance. Residuals: one per
/// assigned point (`n_k·x + d_kl`), then one per orthogonality edge
/// (`√λ·(n_k·n_k')`).
pub struct GraphProblem<'a> {
    cloud: &'a PointCloud,
    pub normals: Vec<Vec3>,
    pub distances: Vec<Vec<f64>>,
    tangents: Vec<(Vec3, Vec3)>,
    pub assignment: BundleAssignment,
    assigned: Vec<(u32, usize, usize)>,
    edges: Vec<(usize, usize)>,
    lambda: f64,
    offset_param: Vec<usize>,
    n_params: usize,
}

fn tangent_basis(n: &Vec3) -> (Vec3, Vec3) {
    let axis = if n.x.abs() <= n.y.abs() && n.x.abs() <= n.z.abs() {
        Vec3::x()
    } else if n.y.abs() <= n.z.abs() {
        Vec3::y()
    } else {
        Vec3::z()
    };
    let b1 = n.cross(&axis).normalize();
    let b2 = n.cross(&b1);
    (b1, b2)
}

/// Bundle orthogonality edges as sorted index pairs.
fn bundle_edges(bundles: &[ParallelBundle]) -> Vec<(usize, usize)> {
    let mut edges = Vec::new();
    for (k, b) in bundles.iter().enumerate() {
        for &n in &b.neighbors {
            if n > k {
                edges.push((k, n));
            }
        }
    }
    edges.sort_unstable();
    edges.dedup();
    edges
}

impl<'a> GraphProblem<'a> {
    pub fn from_bundles(
        cloud: &'a PointCloud,
        bundles: &[ParallelBundle],
        eps_n: f64,
        lambda: f64,
    ) -> Self {
        let normals: Vec<Vec3> = bundles.iter().map(|b| b.normal).collect();
        let distances: Vec<Vec<f64>> = bundles.iter().map(|b| b.distances.clone()).collect();
        let edges = bundle_edges(bundles);
        Self::new(cloud, normals, distances, edges, eps_n, lambda)
    }

    fn new(
        cloud: &'a PointCloud,
        normals: Vec<Vec3>,
        distances: Vec<Vec<f64>>,
        edges: Vec<(usize, usize)>,
        eps_n: f64,
        lambda: f64,
    ) -> Self {
        let assignment = assign_impl(cloud, &normals, &distances, eps_n);
        let assigned: Vec<(u32, usize, usize)> = assignment
            .iter()
            .enumerate()
            .filter_map(|(i, a)| a.map(|(k, l)| (i as u32, k, l)))
            .collect();
        let tangents = normals.iter().map(tangent_basis).collect();
        let mut offset_param = Vec::with_capacity(normals.len());
        let mut next = 2 * normals.len();
        for ds in &distances {
            offset_param.push(next);
            next += ds.len();
        }
        Self {
            cloud,
            normals,
            distances,
            tangents,
            assignment,
            assigned,
            edges,
            lambda,
            offset_param,
            n_params: next,
        }
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    pub fn residual_count(&self) -> usize {
        self.assigned.len() + self.edges.len()
    }

    pub fn assigned_count(&self) -> usize {
        self.assigned.len()
    }

    /// State (normals, distances) displaced by a parameter vector: tangent
    /// steps re-normalized onto the sphere, offsets shifted.
    fn state_at(&self, delta: &DVector<f64>) -> (Vec<Vec3>, Vec<Vec<f64>>) {
        assert_eq!(delta.len(), self.n_params);
        let normals: Vec<Vec3> = self
            .normals
            .iter()
            .zip(&self.tangents)
            .enumerate()
            .map(|(k, (n, (b1, b2)))| {
                (n + b1 * delta[2 * k] + b2 * delta[2 * k + 1]).normalize()
            })
            .collect();
        let distances: Vec<Vec<f64>> = self
            .distances
            .iter()
            .enumerate()
            .map(|(k, ds)| {
                ds.iter()
                    .enumerate()
                    .map(|(l, d)| d + delta[self.offset_param[k] + l])
                    .collect()
            })
            .collect();
        (normals, distances)
    }

    /// Residual stack at `delta`, frozen assignment: data rows then edges.
    pub fn residuals(&self, delta: &DVector<f64>) -> DVector<f64> {
        let (normals, distances) = self.state_at(delta);
        let sqrt_lambda = self.lambda.sqrt();
        let mut out = DVector::zeros(self.residual_count());
        for (row, &(i, k, l)) in self.assigned.iter().enumerate() {
            let p = &self.cloud.points[i as usize];
            out[row] = normals[k].dot(&p.position) + distances[k][l];
        }
        for (e, &(a, b)) in self.edges.iter().enumerate() {
            out[self.assigned.len() + e] = sqrt_lambda * normals[a].dot(&normals[b]);
        }
        out
    }

    /// Analytic Jacobian of [`Self::residuals`] at `delta = 0`.
    pub fn jacobian(&self) -> DMatrix<f64> {
        let mut jac = DMatrix::zeros(self.residual_count(), self.n_params);
        let mut row = 0;
        self.for_each_row(|entries, _| {
            for &(col, v) in entries {
                jac[(row, col)] = v;
            }
            row += 1;
        });
        jac
    }

    /// Walks all residual rows in order, yielding the sparse Jacobian
    /// entries and the residual value at `delta = 0`.
    fn for_each_row<F: FnMut(&[(usize, f64)], f64)>(&self, mut f: F) {
        let sqrt_lambda = self.lambda.sqrt();
        for &(i, k, l) in &self.assigned {
            let x = self.cloud.points[i as usize].position;
            let (b1, b2) = self.tangents[k];
            let r = self.normals[k].dot(&x) + self.distances[k][l];
            let entries = [
                (2 * k, b1.dot(&x)),
                (2 * k + 1, b2.dot(&x)),
                (self.offset_param[k] + l, 1.0),
            ];
            f(&entries, r);
        }
        for &(a, b) in &self.edges {
            let (na, nb) = (self.normals[a], self.normals[b]);
            let (a1, a2) = self.tangents[a];
            let (b1, b2) = self.tangents[b];
            let r = sqrt_lambda * na.dot(&nb);
            let entries = [
                (2 * a, sqrt_lambda * a1.dot(&nb)),
                (2 * a + 1, sqrt_lambda * a2.dot(&nb)),
                (2 * b, sqrt_lambda * b1.dot(&na)),
                (2 * b + 1, sqrt_lambda * b2.dot(&na)),
            ];
            f(&entries, r);
        }
    }

    /// The same problem (cloud, frozen assignment, edges) carried to a
    /// displaced state; tangent bases are re-derived at the new normals.
    fn with_state(&self, normals: Vec<Vec3>, distances: Vec<Vec<f64>>) -> Self {
        Self {
            cloud: self.cloud,
            tangents: normals.iter().map(tangent_basis).collect(),
            normals,
            distances,
            assignment: self.assignment.clone(),
            assigned: self.assigned.clone(),
            edges: self.edges.clone(),
            lambda: self.lambda,
            offset_param: self.offset_param.clone(),
            n_params: self.n_params,
        }
    }

    /// Robustified total cost of the state displaced by `delta`, evaluated
    /// under this problem's frozen assignment.
    pub fn cost_at(&self, delta: &DVector<f64>, loss: &RobustLoss) -> f64 {
        let r = self.residuals(delta);
        let data = self.assigned.len();
        let mut terms: Vec<f64> = (0..data).map(|i| loss.rho(r[i])).collect();
        terms.extend((data..r.len()).map(|e| 0.5 * r[e] * r[e]));
        pairwise_sum(&mut terms)
    }

    /// Robustified total cost at `delta = 0`: Σ ρ(data) + ½·Σ edge², the
    /// exact objective whose gradient the solver accumulates.
    pub fn cost(&self, loss: &RobustLoss) -> f64 {
        let sqrt_lambda = self.lambda.sqrt();
        let mut terms: Vec<f64> = self
            .assigned
            .iter()
            .map(|&(i, k, l)| {
                let p = &self.cloud.points[i as usize];
                loss.rho(self.normals[k].dot(&p.position) + self.distances[k][l])
            })
            .collect();
        terms.extend(self.edges.iter().map(|&(a, b)| {
            let r = sqrt_lambda * self.normals[a].dot(&self.normals[b]);
            0.5 * r * r
        }));
        pairwise_sum(&mut terms)
    }
}

/// Result of the graph refinement: updated bundles (same member/neighbor
/// structure), convergence flag, iteration count across all hierarchy
/// levels, the monotone cost history of the finest level, and the largest
/// |n_k·n_k'| over all edges after refinement.
#[derive(Debug, Clone)]
pub struct GraphRefinement {
    pub bundles: Vec<ParallelBundle>,
    pub converged: bool,
    pub iterations: usize,
    pub cost_history: Vec<f64>,
    pub max_edge_dot: f64,
}

/// Maximum |n_k·n_k'| over the orthogonality edges after refinement must
/// stay below this bound for the result to count as converged.
pub const EDGE_ORTHOGONALITY_BOUND: f64 = 1e-4;

struct LevelOutcome {
    converged: bool,
    iterations: usize,
    cost_history: Vec<f64>,
}

/// Robust-weighted Gauss-Newton normal equations of a graph problem at its
/// current state.
fn graph_normal_equations(
    problem: &GraphProblem,
    loss: &RobustLoss,
) -> (DMatrix<f64>, DVector<f64>) {
    let n = problem.n_params();
    let mut h = DMatrix::<f64>::zeros(n, n);
    let mut g = DVector::<f64>::zeros(n);
    let mut row_idx = 0usize;
    let data_rows = problem.assigned_count();
    problem.for_each_row(|entries, r| {
        let w = if row_idx < data_rows { loss.weight(r) } else { 1.0 };
        for &(ci, vi) in entries {
            g[ci] += w * vi * r;
            for &(cj, vj) in entries {
                h[(ci, cj)] += w * vi * vj;
            }
        }
        row_idx += 1;
    });
    (h, g)
}

fn refine_graph_level(
    cloud: &PointCloud,
    normals: &mut Vec<Vec3>,
    distances: &mut Vec<Vec<f64>>,
    edges: &[(usize, usize)],
    params: &RefinementParams,
) -> Result<LevelOutcome, RefineError> {
    let mut problem = GraphProblem::new(
        cloud,
        normals.clone(),
        distances.clone(),
        edges.to_vec(),
        params.eps_n,
        params.lambda,
    );
    if problem.assigned_count() == 0 {
        return Err(RefineError::EmptyAssignment);
    }
    let n = problem.n_params();
    let mut cost = problem.cost(&params.loss);
    let mut cost_history = vec![cost];
    let mut mu = 1e-6;
    let mut iterations = 0;

    for _ in 0..params.max_iterations {
        iterations += 1;
        let (h, g) = graph_normal_equations(&problem, &params.loss);
        if g.amax() < 1e-12 {
            break;
        }

        let mut accepted = false;
        for _ in 0..12 {
            let mut damped = h.clone();
            for i in 0..n {
                damped[(i, i)] += mu * h[(i, i)].max(1e-12);
            }
            if let Some(chol) = damped.cholesky() {
                let delta = chol.solve(&(-&g));
                let (cand_normals, mut cand_distances) = problem.state_at(&delta);
                // Keep each bundle's offsets sorted so assignment's binary
                // search stays valid next iteration.
                for ds in &mut cand_distances {
                    ds.sort_by(|a, b| a.partial_cmp(b).unwrap());
                }
                let cand = GraphProblem::new(
                    cloud,
                    cand_normals,
                    cand_distances,
                    edges.to_vec(),
                    params.eps_n,
                    params.lambda,
                );
                if cand.assigned_count() > 0 {
                    let cand_cost = cand.cost(&params.loss);
                    if cand_cost < cost {
                        problem = cand;
                        cost = cand_cost;
                        mu = (mu * 0.3).max(1e-12);
                        accepted = true;
                        break;
                    }
                }
            }
            mu *= 10.0;
            if mu > 1e12 {
                break;
            }
        }
        if !accepted {
            break;
        }
        let prev = cost_history[cost_history.len() - 1];
        cost_history.push(cost);
        if cost < 1e-24 || prev - cost <= params.convergence_tol * prev {
            break;
        }
    }

    // The loop above judges each step on the re-assigned cost, which can
    // reject every damped retry once gate-boundary points start flipping
    // between planes. Finish on the frozen assignment: a plain damped
    // descent on a smooth objective that runs to stationarity, so edges
    // settle at their penalty equilibrium instead of a stall point.
    cost = problem.cost(&params.loss);
    let mut converged = false;
    mu = 1e-6;
    for _ in 0..params.max_iterations {
        iterations += 1;
        let (h, g) = graph_normal_equations(&problem, &params.loss);
        if g.amax() < 1e-12 {
            converged = true;
            break;
        }
        let mut accepted = false;
        for _ in 0..12 {
            let mut damped = h.clone();
            for i in 0..n {
                damped[(i, i)] += mu * h[(i, i)].max(1e-12);
            }
            if let Some(chol) = damped.cholesky() {
                let delta = chol.solve(&(-&g));
                let cand_cost = problem.cost_at(&delta, &params.loss);
                if cand_cost < cost {
                    // Offsets keep their slots here: sorting would scramble
                    // the frozen point-to-offset pairing.
                    let (cand_normals, cand_distances) = problem.state_at(&delta);
                    problem = problem.with_state(cand_normals, cand_distances);
                    cost = cand_cost;
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
            converged = true;
            break;
        }
        let prev = cost_history[cost_history.len() - 1];
        cost_history.push(cost);
        if cost < 1e-24 || prev - cost <= params.convergence_tol * prev {
            converged = true;
            break;
        }
    }

    *normals = problem.normals.clone();
    *distances = problem.distances.clone();
    // Re-sort what the frozen phase left unsorted; the next level's
    // assignment relies on ascending offsets.
    for ds in distances.iter_mut() {
        ds.sort_by(|a, b| a.partial_cmp(b).unwrap());
    }
    Ok(LevelOutcome {
        converged,
        iterations,
        cost_history,
    })
}

/// Jointly refines all bundles against the cloud: a robustified
/// point-to-plane data term plus `lambda · Σ (n_k·n_k')²` over the
/// orthogonality edges, minimized coarse-to-fine over a sampling hierarchy
/// whose finest level is the input cloud itself. Normals stay unit
/// throughout; assignments refresh every accepted step, and each level
/// finishes with a frozen-assignment polish that runs the damped steps
/// to stationarity.
pub fn refine_graph(
    cloud: &PointCloud,
    bundles: &[ParallelBundle],
    params: &RefinementParams,
) -> Result<GraphRefinement, RefineError> {
    assert!(
        cloud.has_normals,
        "graph refinement requires normals for the assignment gate"
    );
    if bundles.is_empty() {
        return Err(RefineError::EmptyAssignment);
    }
    let mut normals: Vec<Vec3> = bundles.iter().map(|b| b.normal).collect();
    let mut distances: Vec<Vec<f64>> = bundles.iter().map(|b| b.distances.clone()).collect();
    let edges = bundle_edges(bundles);

    // Coarse-to-fine: coarser levels are voxel-averaged copies, the finest
    // level is the input itself.
    let levels = params.hierarchy_levels.max(1);
    let d_min = SamplingParams::default().resolve_d_min(cloud);
    let mut clouds: Vec<PointCloud> = Vec::with_capacity(levels);
    for l in 0..levels.saturating_sub(1) {
        clouds.push(downsample_at(cloud, d_min * (1u64 << (levels - 1 - l)) as f64));
    }

    let mut iterations = 0;
    let mut converged = true;
    let mut cost_history = Vec::new();
    for level in &clouds {
        let outcome = refine_graph_level(level, &mut normals, &mut distances, &edges, params)?;
        iterations += outcome.iterations;
        converged &= outcome.converged;
    }
    let outcome = refine_graph_level(cloud, &mut normals, &mut distances, &edges, params)?;
    iterations += outcome.iterations;
    converged &= outcome.converged;
    cost_history.extend(outcome.cost_history);

    let max_edge_dot = edges
        .iter()
        .map(|&(a, b)| normals[a].dot(&normals[b]).abs())
        .fold(0.0_f64, f64::max);

    let out_bundles = bundles
        .iter()
        .enumerate()
        .map(|(k, b)| {
            // Canonicalize the sign and keep the offsets sorted, flipping
            // them with the normal.
            let n = crate::geometry::canonical_sign(normals[k]);
            let flip = n.dot(&normals[k]) < 0.0;
            let mut ds: Vec<f64> = distances[k]
                .iter()
                .map(|&d| if flip { -d } else { d })
                .collect();
            ds.sort_by(|a, b| a.partial_cmp(b).unwrap());
            ParallelBundle {
                normal: n,
                distances: ds,
                members: b.members.clone(),
                neighbors: b.neighbors.clone(),
            }
        })
        .collect();

    Ok(GraphRefinement {
        bundles: out_bundles,
        converged: converged && max_edge_dot < EDGE_ORTHOGONALITY_BOUND,
        iterations,
        cost_history,
        max_edge_dot,
    })
}
