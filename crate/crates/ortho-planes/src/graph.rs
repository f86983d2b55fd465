//! Plane relation graph: clustering of per-reference plane-pair hypotheses
//! into distinct planes, the orthogonality graph over those planes, its
//! corner triangles, and the reduction of parallel planes into bundles.

use crate::detect::OppCandidate;
use crate::geometry::{DetectionParams, Plane, Vec3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("planes joined by an orthogonality edge cannot be parallel")]
    ConflictingStructure,
}

/// Clustering thresholds. Two hypotheses merge when their normals agree
/// within `merge_angle` and each anchor point lies within `merge_dist` of
/// the other plane; `parallel_angle` governs the later bundle reduction.
/// A cluster becomes a graph vertex only when at least `min_support`
/// hypotheses corroborate it: isolated hypotheses are typically artifacts
/// of blended normals near crease lines, while genuine planes collect
/// hypotheses from many reference points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterParams {
    pub merge_dist: f64,
    pub merge_angle: f64,
    pub parallel_angle: f64,
    pub min_support: usize,
}

impl Default for ClusterParams {
    fn default() -> Self {
        Self {
            merge_dist: 0.05,
            merge_angle: 20f64.to_radians(),
            parallel_angle: 20f64.to_radians(),
            min_support: 3,
        }
    }
}

/// Undirected graph whose vertices are clustered planes and whose edges mark
/// detected orthogonality between them. Edges are stored as `(i, j)` with
/// `i < j`, sorted, without duplicates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlaneGraph {
    pub vertices: Vec<Plane>,
    pub edges: Vec<(usize, usize)>,
}

impl PlaneGraph {
    pub fn contains_edge(&self, i: usize, j: usize) -> bool {
        let e = (i.min(j), i.max(j));
        self.edges.binary_search(&e).is_ok()
    }

    /// Neighbor lists, ascending, one per vertex.
    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.vertices.len()];
        for &(i, j) in &self.edges {
            adj[i].push(j);
            adj[j].push(i);
        }
        adj
    }
}

/// A 3-clique of the plane graph: three mutually orthogonal planes meeting
/// in a corner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CornerTriangle {
    pub plane_indices: [usize; 3],
}

/// Parallel planes collapsed into one node: a shared unit normal and the
/// sorted offsets of the member planes along it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParallelBundle {
    pub normal: Vec3,
    /// Member plane offsets against `normal`, strictly ascending.
    pub distances: Vec<f64>,
    /// Graph vertices merged into this bundle.
    pub members: Vec<usize>,
    /// Indices of bundles connected by at least one orthogonality edge.
    pub neighbors: Vec<usize>,
}

struct UnionFind {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            rank: vec![0; n],
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn unite(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        match self.rank[ra].cmp(&self.rank[rb]) {
            std::cmp::Ordering::Less => self.parent[ra] = rb,
            std::cmp::Ordering::Greater => self.parent[rb] = ra,
            std::cmp::Ordering::Equal => {
                self.parent[rb] = ra;
                self.rank[ra] += 1;
            }
        }
    }
}

/// One plane hypothesis: a plane, an anchor point on it, and its vote weight.
#[derive(Debug, Clone, Copy)]
struct Hypothesis {
    plane: Plane,
    anchor: Vec3,
    weight: f64,
}

fn hypotheses_of(candidates: &[OppCandidate]) -> Vec<Hypothesis> {
    let mut hyps = Vec::with_capacity(2 * candidates.len());
    for c in candidates {
        let w = c.votes.max(1) as f64;
        hyps.push(Hypothesis {
            plane: c.plane_ref,
            anchor: c.reference,
            weight: w,
        });
        // Anchor the partner hypothesis at the projection of the reference
        // onto the partner plane.
        let r = c.plane_other.signed_distance(&c.reference);
        hyps.push(Hypothesis {
            plane: c.plane_other,
            anchor: c.reference - c.plane_other.normal * r,
            weight: w,
        });
    }
    hyps
}

fn mergeable(a: &Hypothesis, b: &Hypothesis, merge_dist: f64, merge_angle: f64) -> bool {
    a.plane.normal_angle_to(&b.plane) < merge_angle
        && b.plane.signed_distance(&a.anchor).abs() < merge_dist
        && a.plane.signed_distance(&b.anchor).abs() < merge_dist
}

/// Union-find clustering plus per-hypothesis cluster ids; cluster order
/// follows the first member hypothesis.
fn cluster_hypotheses(
    hyps: &[Hypothesis],
    merge_dist: f64,
    merge_angle: f64,
) -> (Vec<Plane>, Vec<usize>) {
    let mut uf = UnionFind::new(hyps.len());
    for i in 0..hyps.len() {
        for j in (i + 1)..hyps.len() {
            if mergeable(&hyps[i], &hyps[j], merge_dist, merge_angle) {
                uf.unite(i, j);
            }
        }
    }
    // Root -> dense cluster id, in first-appearance order.
    let mut cluster_of_root: std::collections::HashMap<usize, usize> =
        std::collections::HashMap::new();
    let mut assignment = Vec::with_capacity(hyps.len());
    let mut clusters: Vec<Vec<usize>> = Vec::new();
    for i in 0..hyps.len() {
        let root = uf.find(i);
        let id = *cluster_of_root.entry(root).or_insert_with(|| {
            clusters.push(Vec::new());
            clusters.len() - 1
        });
        clusters[id].push(i);
        assignment.push(id);
    }
    // Vote-weighted representative per cluster, signs aligned to the first
    // member before averaging.
    let planes = clusters
        .iter()
        .map(|members| {
            let seed_n = hyps[members[0]].plane.normal;
            let mut n_sum = Vec3::zeros();
            let mut d_sum = 0.0;
            let mut w_sum = 0.0;
            for &m in members {
                let h = &hyps[m];
                let aligned = h.plane.normal.dot(&seed_n) >= 0.0;
                let (n, d) = if aligned {
                    (h.plane.normal, h.plane.offset)
                } else {
                    (-h.plane.normal, -h.plane.offset)
                };
                n_sum += n * h.weight;
                d_sum += d * h.weight;
                w_sum += h.weight;
            }
            Plane::new(n_sum.normalize(), d_sum / w_sum)
        })
        .collect();
    (planes, assignment)
}

/// Merges the `2·|candidates|` plane hypotheses into distinct planes. Two
/// hypotheses join one cluster when their normals agree within `merge_angle`
/// and each hypothesis anchor lies within `merge_dist` of the other plane;
/// clusters are transitive. Each cluster yields one vote-weighted average
/// plane.
pub fn cluster_candidates(
    candidates: &[OppCandidate],
    merge_dist: f64,
    merge_angle: f64,
) -> Vec<Plane> {
    let hyps = hypotheses_of(candidates);
    cluster_hypotheses(&hyps, merge_dist, merge_angle).0
}

/// Clusters the candidates, drops clusters with fewer than
/// `cluster.min_support` member hypotheses, and connects two surviving
/// clusters whenever some candidate pairs them and the representative
/// normals are still orthogonal within `det.delta_n`.
pub fn build_graph(
    candidates: &[OppCandidate],
    det: &DetectionParams,
    cluster: &ClusterParams,
) -> PlaneGraph {
    let hyps = hypotheses_of(candidates);
    let (all_vertices, assignment) =
        cluster_hypotheses(&hyps, cluster.merge_dist, cluster.merge_angle);

    let mut support = vec![0usize; all_vertices.len()];
    for &a in &assignment {
        support[a] += 1;
    }
    // Dense reindexing of the surviving clusters.
    let mut remap = vec![usize::MAX; all_vertices.len()];
    let mut vertices = Vec::new();
    for (k, plane) in all_vertices.into_iter().enumerate() {
        if support[k] >= cluster.min_support.max(1) {
            remap[k] = vertices.len();
            vertices.push(plane);
        }
    }

    let sin_d = det.delta_n.sin();
    let mut edges: Vec<(usize, usize)> = Vec::new();
    for c in 0..candidates.len() {
        let (a, b) = (remap[assignment[2 * c]], remap[assignment[2 * c + 1]]);
        if a == b || a == usize::MAX || b == usize::MAX {
            continue;
        }
        let (i, j) = (a.min(b), a.max(b));
        if vertices[i].normal.dot(&vertices[j].normal).abs() < sin_d {
            edges.push((i, j));
        }
    }
    edges.sort_unstable();
    edges.dedup();
    PlaneGraph { vertices, edges }
}

/// Every 3-clique of the graph exactly once, lexicographically ordered.
pub fn enumerate_triangles(g: &PlaneGraph) -> Vec<CornerTriangle> {
    let adj = g.adjacency();
    let mut out = Vec::new();
    for &(i, j) in &g.edges {
        // Both lists are ascending: intersect, keeping members above j so
        // each triangle appears once.
        let (mut a, mut b) = (adj[i].iter().peekable(), adj[j].iter().peekable());
        while let (Some(&&x), Some(&&y)) = (a.peek(), b.peek()) {
            match x.cmp(&y) {
                std::cmp::Ordering::Less => {
                    a.next();
                }
                std::cmp::Ordering::Greater => {
                    b.next();
                }
                std::cmp::Ordering::Equal => {
                    if x > j {
                        out.push(CornerTriangle {
                            plane_indices: [i, j, x],
                        });
                    }
                    a.next();
                    b.next();
                }
            }
        }
    }
    out.sort_unstable_by_key(|t| t.plane_indices);
    out
}

/// Collapses vertices whose normals agree within `parallel_angle` into
/// bundles: a shared averaged normal plus the sorted member offsets along
/// it. Fails when two merged planes are joined by an orthogonality edge,
/// since a pair of planes cannot be both parallel and orthogonal.
pub fn reduce_parallel(
    g: &PlaneGraph,
    parallel_angle: f64,
) -> Result<Vec<ParallelBundle>, GraphError> {
    let n = g.vertices.len();
    let mut uf = UnionFind::new(n);
    for i in 0..n {
        for j in (i + 1)..n {
            if g.vertices[i].normal_angle_to(&g.vertices[j]) < parallel_angle {
                uf.unite(i, j);
            }
        }
    }
    for &(i, j) in &g.edges {
        if uf.find(i) == uf.find(j) {
            return Err(GraphError::ConflictingStructure);
        }
    }

    let mut bundle_of_root: std::collections::HashMap<usize, usize> =
        std::collections::HashMap::new();
    let mut members: Vec<Vec<usize>> = Vec::new();
    let mut bundle_of_vertex = vec![0usize; n];
    for v in 0..n {
        let root = uf.find(v);
        let id = *bundle_of_root.entry(root).or_insert_with(|| {
            members.push(Vec::new());
            members.len() - 1
        });
        members[id].push(v);
        bundle_of_vertex[v] = id;
    }

    let mut bundles: Vec<ParallelBundle> = members
        .iter()
        .map(|mem| {
            let seed_n = g.vertices[mem[0]].normal;
            let mut n_sum = Vec3::zeros();
            for &v in mem {
                let nv = g.vertices[v].normal;
                n_sum += if nv.dot(&seed_n) >= 0.0 { nv } else { -nv };
            }
            let normal = crate::geometry::canonical_sign(n_sum.normalize());
            let mut distances: Vec<f64> = mem
                .iter()
                .map(|&v| {
                    let p = &g.vertices[v];
                    // Offset of the member plane re-expressed against the
                    // bundle normal (flip with the normal sign).
                    if p.normal.dot(&normal) >= 0.0 {
                        p.offset
                    } else {
                        -p.offset
                    }
                })
                .collect();
            distances.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
            // Collapse numerical duplicates only; genuinely distinct planes
            // keep one distance each.
            distances.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
            ParallelBundle {
                normal,
                distances,
                members: mem.clone(),
                neighbors: Vec::new(),
            }
        })
        .collect();

    let mut neighbor_sets: Vec<Vec<usize>> = vec![Vec::new(); bundles.len()];
    for &(i, j) in &g.edges {
        let (a, b) = (bundle_of_vertex[i], bundle_of_vertex[j]);
        neighbor_sets[a].push(b);
        neighbor_sets[b].push(a);
    }
    for (bundle, mut neigh) in bundles.iter_mut().zip(neighbor_sets.into_iter()) {
        neigh.sort_unstable();
        neigh.dedup();
        bundle.neighbors = neigh;
    }
    Ok(bundles)
}
