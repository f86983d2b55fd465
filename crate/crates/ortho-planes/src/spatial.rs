//! Uniform-grid spatial index over point positions.
//!
//! Used for τd-neighborhood gathering during voting, k-nearest-neighbor
//! queries for normal estimation, and radius correspondence search in ICP.
//! The index is immutable after construction and safe to query concurrently.

use crate::geometry::Vec3;
use std::collections::HashMap;

#[derive(Debug, Clone)]
pub struct SpatialGrid {
    cell_size: f64,
    cells: HashMap<(i64, i64, i64), Vec<u32>>,
    positions: Vec<Vec3>,
}

impl SpatialGrid {
    pub fn build(positions: &[Vec3], cell_size: f64) -> Self {
        assert!(cell_size > 0.0, "cell size must be positive");
        let mut cells: HashMap<(i64, i64, i64), Vec<u32>> = HashMap::new();
        for (i, p) in positions.iter().enumerate() {
            cells
                .entry(Self::key_for(p, cell_size))
                .or_default()
                .push(i as u32);
        }
        Self {
            cell_size,
            cells,
            positions: positions.to_vec(),
        }
    }

    /// Grid sized so the whole radius-`r` ball fits in the 3x3x3 block
    /// around the query cell.
    pub fn build_for_radius(positions: &[Vec3], radius: f64) -> Self {
        Self::build(positions, radius.max(1e-9))
    }

    fn key_for(p: &Vec3, cell: f64) -> (i64, i64, i64) {
        (
            (p.x / cell).floor() as i64,
            (p.y / cell).floor() as i64,
            (p.z / cell).floor() as i64,
        )
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn position(&self, i: u32) -> &Vec3 {
        &self.positions[i as usize]
    }

    /// Indices of all points with `‖p - q‖ <= r`, appended to `out`.
    pub fn within_radius_into(&self, q: &Vec3, r: f64, out: &mut Vec<u32>) {
        let r2 = r * r;
        self.for_each_cell_overlapping(q, r, |indices| {
            for &i in indices {
                if (self.positions[i as usize] - q).norm_squared() <= r2 {
                    out.push(i);
                }
            }
        });
    }

    pub fn within_radius(&self, q: &Vec3, r: f64) -> Vec<u32> {
        let mut out = Vec::new();
        self.within_radius_into(q, r, &mut out);
        out
    }

    /// Visits the index slice of every grid cell that may contain points
    /// within distance `r` of `q`. Candidates still require a distance check.
    /// Slices borrow from the grid, so callers may keep them.
    pub fn for_each_cell_overlapping<'a, F: FnMut(&'a [u32])>(&'a self, q: &Vec3, r: f64, mut f: F) {
        let span = (r / self.cell_size).ceil() as i64;
        let (cx, cy, cz) = Self::key_for(q, self.cell_size);
        for dx in -span..=span {
            for dy in -span..=span {
                for dz in -span..=span {
                    if let Some(v) = self.cells.get(&(cx + dx, cy + dy, cz + dz)) {
                        f(v);
                    }
                }
            }
        }
    }

    /// Nearest point to `q` within `r`, or `None`.
    pub fn nearest_within(&self, q: &Vec3, r: f64) -> Option<(u32, f64)> {
        let mut best: Option<(u32, f64)> = None;
        let r2 = r * r;
        self.for_each_cell_overlapping(q, r, |indices| {
            for &i in indices {
                let d2 = (self.positions[i as usize] - q).norm_squared();
                if d2 <= r2 && best.map_or(true, |(_, b)| d2 < b) {
                    best = Some((i, d2));
                }
            }
        });
        best.map(|(i, d2)| (i, d2.sqrt()))
    }

    /// The `k` nearest points to `q` (including a point at `q` itself if one
    /// is indexed), ordered by increasing distance. Returns fewer than `k`
    /// only when the whole index is smaller.
    pub fn k_nearest(&self, q: &Vec3, k: usize) -> Vec<u32> {
        if k == 0 || self.positions.is_empty() {
            return Vec::new();
        }
        let k = k.min(self.positions.len());
        let (cx, cy, cz) = Self::key_for(q, self.cell_size);
        // (distance², index) of current candidates, worst kept at the end.
        let mut best: Vec<(f64, u32)> = Vec::with_capacity(k + 1);
        let mut ring = 0i64;
        loop {
            let mut visited_any = false;
            for dx in -ring..=ring {
                for dy in -ring..=ring {
                    for dz in -ring..=ring {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != ring {
                            continue;
                        }
                        let Some(indices) = self.cells.get(&(cx + dx, cy + dy, cz + dz)) else {
                            continue;
                        };
                        visited_any = true;
                        for &i in indices {
                            let d2 = (self.positions[i as usize] - q).norm_squared();
                            if best.len() < k {
                                best.push((d2, i));
                                best.sort_by(|a, b| a.0.total_cmp(&b.0));
                            } else if d2 < best[k - 1].0 {
                                best[k - 1] = (d2, i);
                                best.sort_by(|a, b| a.0.total_cmp(&b.0));
                            }
                        }
                    }
                }
            }
            // Cells beyond this ring are at least ring·cell away from q.
            let ring_bound = ring as f64 * self.cell_size;
            if best.len() == k && best[k - 1].0 <= ring_bound * ring_bound {
                break;
            }
            if !visited_any && best.len() == k && ring > 1 {
                // Heuristic escape for sparse grids: keep expanding until a
                // full empty shell beyond an already-satisfied radius.
                let safe = (ring - 1) as f64 * self.cell_size;
                if best[k - 1].0 <= safe * safe {
                    break;
                }
            }
            ring += 1;
            if ring > 4096 {
                break; // degenerate input; return what we have
            }
        }
        best.into_iter().map(|(_, i)| i).collect()
    }
}
