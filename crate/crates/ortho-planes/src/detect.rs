//! Orthogonal-plane-pair detection by local Hough voting.
//!
//! Each sampled reference point owns a small 2D accumulator over the
//! parameters of a hypothetical plane orthogonal to its own tangent plane:
//! an angle θ around the reference normal and a signed distance ρ along the
//! partner normal. Every partner point within the pairing radius whose pair
//! feature classifies as orthogonal casts one vote; coplanar partners are
//! tallied separately as evidence that the reference itself lies on a plane.
//! A reference emits a candidate pair only when both tallies clear the vote
//! threshold, which suppresses clutter without any explicit segmentation.

use crate::geometry::{
    canonical_sign, classify_pair_with, compute_ppf, DetectionParams, OrientedPoint, PairClass,
    Plane, PointCloud, Vec3,
};
use crate::spatial::SpatialGrid;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::f64::consts::{PI, TAU};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DetectError {
    #[error("point cloud is empty")]
    EmptyCloud,
}

/// The voting frame of one reference point: its canonical-sign normal and a
/// rotation taking that normal to `e_z`, so partner normals can be binned by
/// their azimuth θ.
#[derive(Debug, Clone, Copy)]
pub struct LocalFrame {
    /// Reference point with the canonical-sign unit normal.
    pub reference: OrientedPoint,
    /// Rotation with `rot_to_z · reference.normal = e_z`.
    pub rot_to_z: crate::geometry::Mat3,
}

impl LocalFrame {
    /// Builds the frame for a reference point. The normal sign is
    /// canonicalized first so the frame does not depend on the arbitrary
    /// orientation of the input normal. Uses the shortest-arc rotation, or a
    /// fixed 180° rotation about `e_x` when the normal opposes `e_z`.
    pub fn new(reference: &OrientedPoint) -> Self {
        let n = canonical_sign(reference.normal.normalize());
        let rot_to_z = match nalgebra::Rotation3::rotation_between(&n, &Vec3::z()) {
            Some(r) => r.into_inner(),
            None => nalgebra::Rotation3::from_axis_angle(&Vec3::x_axis(), PI).into_inner(),
        };
        Self {
            reference: OrientedPoint::new(reference.position, n),
            rot_to_z,
        }
    }
}

/// 2D vote histogram over (θ, ρ) plus the coplanar tally.
///
/// Votes are canonicalized to ρ ≥ 0 by flipping θ through 180° (an
/// unoriented partner normal makes (θ, ρ) and (θ+180°, −ρ) the same plane),
/// so the grid spans θ ∈ [0, 2π) × ρ ∈ [0, τ_d].
#[derive(Debug, Clone)]
pub struct Accumulator2D {
    theta_bins: usize,
    rho_bins: usize,
    theta_step: f64,
    rho_step: f64,
    counts: Vec<u32>,
    pub coplanar_count: u32,
}

impl Accumulator2D {
    pub fn new(params: &DetectionParams) -> Self {
        assert!(params.theta_bin > 0.0 && params.rho_bin > 0.0 && params.tau_d > 0.0);
        let theta_bins = ((TAU / params.theta_bin).ceil() as usize).max(1);
        let rho_bins = ((params.tau_d / params.rho_bin).ceil() as usize).max(1);
        Self {
            theta_bins,
            rho_bins,
            theta_step: params.theta_bin,
            rho_step: params.rho_bin,
            counts: vec![0; theta_bins * rho_bins],
            coplanar_count: 0,
        }
    }

    pub fn theta_bins(&self) -> usize {
        self.theta_bins
    }

    pub fn rho_bins(&self) -> usize {
        self.rho_bins
    }

    /// Canonicalizes (θ, ρ) and increments its bin.
    pub fn vote(&mut self, theta: f64, rho: f64) {
        let (ti, ri) = self.bin_of(theta, rho);
        self.counts[ti * self.rho_bins + ri] += 1;
    }

    /// Bin indices a (θ, ρ) vote falls into, after sign canonicalization.
    pub fn bin_of(&self, theta: f64, rho: f64) -> (usize, usize) {
        let mut th = theta;
        let mut r = rho;
        if r < 0.0 {
            r = -r;
            th += PI;
        }
        th = th.rem_euclid(TAU);
        // ρ = 0 keeps θ in [0, π) so both normal signs land identically.
        if r == 0.0 && th >= PI {
            th -= PI;
        }
        let ti = ((th / self.theta_step) as usize).min(self.theta_bins - 1);
        let ri = ((r / self.rho_step) as usize).min(self.rho_bins - 1);
        (ti, ri)
    }

    pub fn votes_at(&self, ti: usize, ri: usize) -> u32 {
        self.counts[ti * self.rho_bins + ri]
    }

    /// Highest-vote bin; ties go to the lowest (θ, ρ) bin index. `None` when
    /// no votes were cast.
    pub fn argmax(&self) -> Option<(usize, usize, u32)> {
        let mut best: Option<(usize, usize, u32)> = None;
        for ti in 0..self.theta_bins {
            for ri in 0..self.rho_bins {
                let v = self.counts[ti * self.rho_bins + ri];
                if v > 0 && best.map_or(true, |(_, _, b)| v > b) {
                    best = Some((ti, ri, v));
                }
            }
        }
        best
    }

    /// Center of a bin, used to reconstruct the winning plane.
    pub fn bin_center(&self, ti: usize, ri: usize) -> (f64, f64) {
        (
            (ti as f64 + 0.5) * self.theta_step,
            (ri as f64 + 0.5) * self.rho_step,
        )
    }
}

/// A detected orthogonal plane pair: the plane through the reference point
/// and the partner plane reconstructed from the winning accumulator bin.
/// Carries the reference position so later clustering can anchor both
/// hypotheses without going back to the cloud.
#[derive(Debug, Clone, Copy)]
pub struct OppCandidate {
    pub plane_ref: Plane,
    pub plane_other: Plane,
    pub votes: u32,
    pub reference_index: usize,
    pub reference: Vec3,
}

/// Draws `min(n_refs, |cloud|)` distinct reference indices, deterministic
/// per seed, returned in ascending order.
pub fn sample_reference_points(
    cloud: &PointCloud,
    params: &DetectionParams,
    seed: u64,
) -> Result<Vec<usize>, DetectError> {
    if cloud.is_empty() {
        return Err(DetectError::EmptyCloud);
    }
    let n = params.n_refs.min(cloud.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices = rand::seq::index::sample(&mut rng, cloud.len(), n).into_vec();
    indices.sort_unstable();
    Ok(indices)
}

/// Per-reference RNG: one stream per reference index so voting is
/// reproducible point by point under a single top-level seed.
fn reference_rng(seed: u64, ref_index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(ref_index as u64);
    rng
}

/// Runs the local vote for one reference point and returns its best
/// orthogonal-pair candidate, if any.
///
/// The reference is paired with at most `k_pairs` points of its τ_d-ball
/// (all of them when the ball is no larger, otherwise a uniform subsample
/// drawn deterministically from `seed` and the reference index). A candidate
/// is emitted only when the winning bin and the coplanar tally both strictly
/// exceed `c_max`.
pub fn vote_local(
    cloud: &PointCloud,
    ref_index: usize,
    params: &DetectionParams,
    seed: u64,
) -> Option<OppCandidate> {
    let positions: Vec<Vec3> = cloud.positions().copied().collect();
    let grid = SpatialGrid::build_for_radius(&positions, params.tau_d);
    vote_local_on_grid(cloud, &grid, ref_index, params, seed)
}

fn vote_local_on_grid(
    cloud: &PointCloud,
    grid: &SpatialGrid,
    ref_index: usize,
    params: &DetectionParams,
    seed: u64,
) -> Option<OppCandidate> {
    let raw = &cloud.points[ref_index];
    if raw.normal.norm() < 1e-9 {
        return None;
    }
    let frame = LocalFrame::new(raw);
    let reference = frame.reference;

    let mut rng = reference_rng(seed, ref_index);
    let partners = select_partners(grid, &reference.position, ref_index as u32, params, &mut rng);
    if partners.is_empty() {
        return None;
    }

    let sin_d = params.delta_n.sin();
    let cos_d = params.delta_n.cos();
    let mut acc = Accumulator2D::new(params);
    for &j in &partners {
        let other = &cloud.points[j as usize];
        let f = compute_ppf(&reference, other);
        match classify_pair_with(&f, sin_d, cos_d, params.tau_d) {
            PairClass::Orthogonal => {
                let n_local = frame.rot_to_z * other.normal;
                let theta = n_local.y.atan2(n_local.x);
                acc.vote(theta, f.f3);
            }
            PairClass::Coplanar => acc.coplanar_count += 1,
            PairClass::Neither => {}
        }
    }

    let (ti, ri, votes) = acc.argmax()?;
    if votes as usize <= params.c_max || acc.coplanar_count as usize <= params.c_max {
        return None;
    }
    let (theta_c, rho_c) = acc.bin_center(ti, ri);
    let n_other = frame.rot_to_z.transpose() * Vec3::new(theta_c.cos(), theta_c.sin(), 0.0);
    // ρ = n2·(x_ref − x2) for x2 on the partner plane, so n2·x2 + (ρ − n2·x_ref) = 0.
    let plane_other = Plane::new(n_other, rho_c - n_other.dot(&reference.position));
    let plane_ref = Plane::from_point_normal(reference.position, reference.normal);
    Some(OppCandidate {
        plane_ref,
        plane_other,
        votes,
        reference_index: ref_index,
        reference: reference.position,
    })
}

/// Partner selection within the τ_d-ball of the reference.
///
/// When the candidate block holds at most `k_pairs` points the ball is
/// enumerated exactly (no randomness). Otherwise distinct candidates are
/// rejection-sampled uniformly from the block until `k_pairs` ball members
/// are found, falling back to exact enumeration plus a uniform draw if the
/// acceptance rate is too poor.
fn select_partners(
    grid: &SpatialGrid,
    q: &Vec3,
    ref_index: u32,
    params: &DetectionParams,
    rng: &mut ChaCha8Rng,
) -> Vec<u32> {
    let tau2 = params.tau_d * params.tau_d;
    let k = params.k_pairs;

    let mut blocks: Vec<&[u32]> = Vec::with_capacity(27);
    let mut total = 0usize;
    grid.for_each_cell_overlapping(q, params.tau_d, |indices| {
        total += indices.len();
        blocks.push(indices);
    });

    let enumerate_ball = |out: &mut Vec<u32>| {
        for block in &blocks {
            for &j in *block {
                if j != ref_index && (grid.position(j) - q).norm_squared() <= tau2 {
                    out.push(j);
                }
            }
        }
    };

    let mut partners = Vec::with_capacity(k.min(total));
    if total <= k {
        enumerate_ball(&mut partners);
        return partners;
    }

    let mut accepted: Vec<u32> = Vec::with_capacity(k);
    let mut seen: std::collections::HashSet<u32> = std::collections::HashSet::with_capacity(2 * k);
    seen.insert(ref_index);
    let max_attempts = 10 * k + 100;
    let mut attempts = 0;
    while accepted.len() < k && attempts < max_attempts {
        attempts += 1;
        let mut flat = rng.random_range(0..total);
        let mut j = None;
        for block in &blocks {
            if flat < block.len() {
                j = Some(block[flat]);
                break;
            }
            flat -= block.len();
        }
        let j = j.expect("flat index within total candidate count");
        if !seen.insert(j) {
            continue;
        }
        if (grid.position(j) - q).norm_squared() <= tau2 {
            accepted.push(j);
        }
    }
    if accepted.len() == k {
        return accepted;
    }
    // Acceptance too poor (tiny ball in a crowded block): enumerate exactly.
    partners.clear();
    enumerate_ball(&mut partners);
    if partners.len() > k {
        let chosen = rand::seq::index::sample(rng, partners.len(), k);
        return chosen.iter().map(|i| partners[i]).collect();
    }
    partners
}

/// Runs the local vote for every sampled reference point. The result is the
/// concatenation of [`vote_local`] outcomes in ascending reference order and
/// is deterministic per seed.
pub fn detect_opps(
    cloud: &PointCloud,
    params: &DetectionParams,
    seed: u64,
) -> Result<Vec<OppCandidate>, DetectError> {
    assert!(
        cloud.has_normals,
        "detection requires normals; run normal estimation first"
    );
    let refs = sample_reference_points(cloud, params, seed)?;
    let positions: Vec<Vec3> = cloud.positions().copied().collect();
    let grid = SpatialGrid::build_for_radius(&positions, params.tau_d);
    Ok(refs
        .into_iter()
        .filter_map(|i| vote_local_on_grid(cloud, &grid, i, params, seed))
        .collect())
}
