//! Detection quality evaluation: plane and line precision/recall against a
//! known scene, and per-point plane labeling.
//!
//! Matching is greedy best-score-first and one-to-one: among all
//! (detected, reference) pairs passing the tolerance gates, the pair with
//! the smallest normalized error is matched first, and both sides are
//! removed from further consideration. Unmatched detections count as noise,
//! unmatched references as misses.

use crate::geometry::{Line3D, Plane, PointCloud};
use crate::graph::ParallelBundle;
use crate::refine::assign_points_to_bundles;
use serde::{Deserialize, Serialize};

/// Fixed angular gate for line matching, radians (10°).
pub const LINE_ANGLE_TOL: f64 = 10.0 * std::f64::consts::PI / 180.0;

/// One accepted detection-to-reference pairing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchRecord {
    pub detected: usize,
    pub ground_truth: usize,
    /// Normalized error (0 = perfect), the greedy ordering key.
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub correct: usize,
    /// Unmatched detections (false positives).
    pub noise: usize,
    /// Unmatched references (false negatives).
    pub miss: usize,
    /// `correct / |detected|`; `None` when nothing was detected.
    pub precision: Option<f64>,
    /// `correct / |reference|`; `None` when the reference set is empty.
    pub recall: Option<f64>,
    pub matches: Vec<MatchRecord>,
}

impl DetectionReport {
    /// Human-readable table row mirroring the usual Pr/Rec/#Cor/Noise/Miss
    /// column layout.
    pub fn table_row(&self, name: &str) -> String {
        let fmt = |v: Option<f64>| match v {
            Some(x) => format!("{x:.3}"),
            None => "n/a".to_string(),
        };
        format!(
            "{name}\t{}\t{}\t{}\t{}\t{}",
            fmt(self.precision),
            fmt(self.recall),
            self.correct,
            self.noise,
            self.miss
        )
    }

    pub fn table_header(label: &str) -> String {
        format!("{label}\tPr\tRec\t#Cor\tNoise\tMiss")
    }
}

/// Greedy one-to-one matching over pre-gated candidate pairs
/// `(score, detected, reference)`: smaller score matches first.
pub(crate) fn greedy_match(
    n_detected: usize,
    n_reference: usize,
    mut pairs: Vec<(f64, usize, usize)>,
) -> DetectionReport {
    pairs.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .unwrap()
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let mut used_detected = vec![false; n_detected];
    let mut used_reference = vec![false; n_reference];
    let mut matches = Vec::new();
    for (score, i, j) in pairs {
        if !used_detected[i] && !used_reference[j] {
            used_detected[i] = true;
            used_reference[j] = true;
            matches.push(MatchRecord {
                detected: i,
                ground_truth: j,
                score,
            });
        }
    }
    let correct = matches.len();
    DetectionReport {
        correct,
        noise: n_detected - correct,
        miss: n_reference - correct,
        precision: (n_detected > 0).then(|| correct as f64 / n_detected as f64),
        recall: (n_reference > 0).then(|| correct as f64 / n_reference as f64),
        matches,
    }
}

/// Plane detection report: a detected plane may match a reference plane
/// when the normals agree within `angle_tol` (sign-insensitive) and the
/// offsets, after aligning the detected sign to the reference normal,
/// differ by less than `dist_tol`.
pub fn evaluate_planes(
    detected: &[Plane],
    reference: &[Plane],
    angle_tol: f64,
    dist_tol: f64,
) -> DetectionReport {
    assert!(angle_tol > 0.0 && dist_tol > 0.0, "tolerances must be positive");
    let mut pairs = Vec::new();
    for (i, d) in detected.iter().enumerate() {
        for (j, g) in reference.iter().enumerate() {
            let angle = d.normal_angle_to(g);
            let offset = if d.normal.dot(&g.normal) >= 0.0 {
                d.offset
            } else {
                -d.offset
            };
            let dist = (offset - g.offset).abs();
            if angle < angle_tol && dist < dist_tol {
                pairs.push((angle / angle_tol + dist / dist_tol, i, j));
            }
        }
    }
    greedy_match(detected.len(), reference.len(), pairs)
}

/// Line detection report: the direction gate is fixed at 10°
/// (sign-insensitive) and the perpendicular offset between the lines must
/// stay below `dist_tol`.
pub fn evaluate_lines(detected: &[Line3D], reference: &[Line3D], dist_tol: f64) -> DetectionReport {
    assert!(dist_tol > 0.0, "distance tolerance must be positive");
    let mut pairs = Vec::new();
    for (i, d) in detected.iter().enumerate() {
        for (j, g) in reference.iter().enumerate() {
            let angle = d.direction_angle_to(g);
            let dist = d.distance_to_point(&g.anchor);
            if angle < LINE_ANGLE_TOL && dist < dist_tol {
                pairs.push((angle / LINE_ANGLE_TOL + dist / dist_tol, i, j));
            }
        }
    }
    greedy_match(detected.len(), reference.len(), pairs)
}

/// Flat integer label of bundle `k`, distance `l`: bundles are laid out
/// consecutively, so labels stay stable for a fixed bundle list.
pub fn flat_label(bundles: &[ParallelBundle], k: usize, l: usize) -> i32 {
    let base: usize = bundles[..k].iter().map(|b| b.distances.len()).sum();
    (base + l) as i32
}

/// Labels every point with the flat index of its assigned bundle plane, or
/// -1 when no bundle matches within `eps_n` (normal gate) and `dist_tol`
/// (residual gate).
pub fn label_points(
    cloud: &PointCloud,
    bundles: &[ParallelBundle],
    dist_tol: f64,
    eps_n: f64,
) -> Vec<i32> {
    let assignment = assign_points_to_bundles(cloud, bundles, eps_n);
    cloud
        .points
        .iter()
        .zip(&assignment)
        .map(|(p, a)| match a {
            Some((k, l)) => {
                let residual =
                    (bundles[*k].normal.dot(&p.position) + bundles[*k].distances[*l]).abs();
                if residual < dist_tol {
                    flat_label(bundles, *k, *l)
                } else {
                    -1
                }
            }
            None => -1,
        })
        .collect()
}
