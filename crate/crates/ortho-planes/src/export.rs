//! JSON and text serialization of detection artifacts.
//!
//! Two schemas cover everything the pipeline produces or consumes:
//! [`SceneJson`] holds primitive sets (planes, orthogonality edges, lines,
//! corners) and is shared between synthetic ground truth and detection
//! output, so the evaluator reads both sides with the same code.
//! [`GraphJson`] additionally carries parallel bundles and corner triangles
//! for the refinement stage. Rigid motions are exchanged as 16-float
//! row-major text. All float formatting uses the shortest round-trip
//! representation, so writes are byte-reproducible.

use crate::geometry::{Corner, Line3D, Mat3, Plane, Vec3};
use crate::graph::{CornerTriangle, ParallelBundle, PlaneGraph};
use crate::io::synth::GroundTruth;
use crate::io::IoError;
use crate::register::RigidMotion;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

fn vec3(v: &Vec3) -> [f64; 3] {
    [v.x, v.y, v.z]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineJson {
    pub direction: [f64; 3],
    pub anchor: [f64; 3],
}

impl LineJson {
    pub fn from_line(line: &Line3D) -> Self {
        Self {
            direction: vec3(&line.direction),
            anchor: vec3(&line.anchor),
        }
    }

    pub fn to_line(&self) -> Line3D {
        Line3D::new(Vec3::from(self.direction), Vec3::from(self.anchor))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CornerJson {
    /// Row-major 3×3 frame; rows are the plane normals.
    pub frame: [f64; 9],
    pub offsets: [f64; 3],
    pub position: [f64; 3],
}

impl CornerJson {
    pub fn from_corner(corner: &Corner) -> Self {
        let f = &corner.frame;
        Self {
            frame: [
                f[(0, 0)],
                f[(0, 1)],
                f[(0, 2)],
                f[(1, 0)],
                f[(1, 1)],
                f[(1, 2)],
                f[(2, 0)],
                f[(2, 1)],
                f[(2, 2)],
            ],
            offsets: vec3(&corner.offsets),
            position: vec3(&corner.position),
        }
    }

    pub fn to_corner(&self) -> Corner {
        let f = &self.frame;
        let frame = Mat3::new(f[0], f[1], f[2], f[3], f[4], f[5], f[6], f[7], f[8]);
        Corner::new(frame, Vec3::from(self.offsets))
    }
}

/// Primitive set: planes as `[nx, ny, nz, d]`, orthogonality edges as plane
/// index pairs, plus lines and corners. Serves as both ground-truth and
/// detection-output schema.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SceneJson {
    pub planes: Vec<[f64; 4]>,
    #[serde(default)]
    pub edges: Vec<[usize; 2]>,
    #[serde(default)]
    pub lines: Vec<LineJson>,
    #[serde(default)]
    pub corners: Vec<CornerJson>,
}

impl SceneJson {
    pub fn from_parts(
        planes: &[Plane],
        edges: &[(usize, usize)],
        lines: &[Line3D],
        corners: &[Corner],
    ) -> Self {
        Self {
            planes: planes
                .iter()
                .map(|p| [p.normal.x, p.normal.y, p.normal.z, p.offset])
                .collect(),
            edges: edges.iter().map(|&(i, j)| [i, j]).collect(),
            lines: lines.iter().map(LineJson::from_line).collect(),
            corners: corners.iter().map(CornerJson::from_corner).collect(),
        }
    }

    pub fn from_ground_truth(gt: &GroundTruth) -> Self {
        Self::from_parts(&gt.planes, &gt.edges, &gt.lines, &gt.corners)
    }

    pub fn planes(&self) -> Vec<Plane> {
        self.planes
            .iter()
            .map(|p| Plane::new(Vec3::new(p[0], p[1], p[2]), p[3]))
            .collect()
    }

    pub fn lines(&self) -> Vec<Line3D> {
        self.lines.iter().map(LineJson::to_line).collect()
    }

    pub fn corners(&self) -> Vec<Corner> {
        self.corners.iter().map(CornerJson::to_corner).collect()
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.edges.iter().map(|e| (e[0], e[1])).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleJson {
    pub normal: [f64; 3],
    pub distances: Vec<f64>,
    pub members: Vec<usize>,
    pub neighbors: Vec<usize>,
}

impl BundleJson {
    pub fn from_bundle(b: &ParallelBundle) -> Self {
        Self {
            normal: vec3(&b.normal),
            distances: b.distances.clone(),
            members: b.members.clone(),
            neighbors: b.neighbors.clone(),
        }
    }

    pub fn to_bundle(&self) -> ParallelBundle {
        ParallelBundle {
            normal: Vec3::from(self.normal),
            distances: self.distances.clone(),
            members: self.members.clone(),
            neighbors: self.neighbors.clone(),
        }
    }
}

/// Plane relation graph with its derived structures: vertices as
/// `[nx, ny, nz, d]`, orthogonality edges, corner triangles, and parallel
/// bundles.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GraphJson {
    pub vertices: Vec<[f64; 4]>,
    pub edges: Vec<[usize; 2]>,
    #[serde(default)]
    pub triangles: Vec<[usize; 3]>,
    #[serde(default)]
    pub bundles: Vec<BundleJson>,
}

impl GraphJson {
    pub fn from_parts(
        graph: &PlaneGraph,
        triangles: &[CornerTriangle],
        bundles: &[ParallelBundle],
    ) -> Self {
        Self {
            vertices: graph
                .vertices
                .iter()
                .map(|p| [p.normal.x, p.normal.y, p.normal.z, p.offset])
                .collect(),
            edges: graph.edges.iter().map(|&(i, j)| [i, j]).collect(),
            triangles: triangles.iter().map(|t| t.plane_indices).collect(),
            bundles: bundles.iter().map(BundleJson::from_bundle).collect(),
        }
    }

    pub fn graph(&self) -> PlaneGraph {
        PlaneGraph {
            vertices: self
                .vertices
                .iter()
                .map(|p| Plane::new(Vec3::new(p[0], p[1], p[2]), p[3]))
                .collect(),
            edges: self.edges.iter().map(|e| (e[0], e[1])).collect(),
        }
    }

    pub fn triangles(&self) -> Vec<CornerTriangle> {
        self.triangles
            .iter()
            .map(|t| CornerTriangle { plane_indices: *t })
            .collect()
    }

    pub fn bundles(&self) -> Vec<ParallelBundle> {
        self.bundles.iter().map(BundleJson::to_bundle).collect()
    }
}

/// Writes a value as pretty-printed JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| IoError::Malformed(e.to_string()))?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    let r = BufReader::new(File::open(path)?);
    serde_json::from_reader(r).map_err(|e| IoError::Malformed(e.to_string()))
}

/// 16-float row-major homogeneous transform, one row per line.
pub fn format_transform(motion: &RigidMotion) -> String {
    let m = motion.to_matrix();
    let mut out = String::new();
    for row in &m {
        let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        out.push_str(&cells.join(" "));
        out.push('\n');
    }
    out
}

pub fn parse_transform(text: &str) -> Result<RigidMotion, IoError> {
    let values: Vec<f64> = text
        .split_whitespace()
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| IoError::Malformed(format!("bad float in transform: {t:?}")))
        })
        .collect::<Result<_, _>>()?;
    if values.len() != 16 {
        return Err(IoError::Malformed(format!(
            "transform needs 16 floats, got {}",
            values.len()
        )));
    }
    if values[12] != 0.0 || values[13] != 0.0 || values[14] != 0.0 || values[15] != 1.0 {
        return Err(IoError::Malformed(
            "last transform row must be 0 0 0 1".to_string(),
        ));
    }
    let rotation = Mat3::new(
        values[0], values[1], values[2], values[4], values[5], values[6], values[8], values[9],
        values[10],
    );
    let translation = Vec3::new(values[3], values[7], values[11]);
    Ok(RigidMotion::new(rotation, translation))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::synth::{generate_synthetic_scene, Layout, SyntheticSpec};
    use nalgebra::Rotation3;

    fn temp_path(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("ortho-planes-export-tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    fn box_gt() -> GroundTruth {
        generate_synthetic_scene(&SyntheticSpec {
            layout: Layout::Box,
            extent: 2.0,
            points_per_m2: 100.0,
            noise_sigma: 0.0,
            outlier_fraction: 0.0,
            seed: 1,
        })
        .1
    }

    #[test]
    fn scene_json_round_trip_is_exact() {
        let gt = box_gt();
        let scene = SceneJson::from_ground_truth(&gt);
        let text = serde_json::to_string_pretty(&scene).unwrap();
        let back: SceneJson = serde_json::from_str(&text).unwrap();
        assert_eq!(back, scene);

        let planes = back.planes();
        assert_eq!(planes.len(), gt.planes.len());
        for (a, b) in planes.iter().zip(&gt.planes) {
            assert_eq!(a.normal, b.normal);
            assert_eq!(a.offset, b.offset);
        }
        let corners = back.corners();
        for (a, b) in corners.iter().zip(&gt.corners) {
            assert_eq!(a.frame, b.frame);
            assert_eq!(a.position, b.position);
        }
        let lines = back.lines();
        for (a, b) in lines.iter().zip(&gt.lines) {
            assert!((a.direction - b.direction).norm() < 1e-15);
            assert!((a.anchor - b.anchor).norm() < 1e-15);
        }
        assert_eq!(back.edges(), gt.edges);
    }

    #[test]
    fn graph_json_round_trip() {
        let graph = PlaneGraph {
            vertices: vec![
                Plane::new(Vec3::x(), 0.5),
                Plane::new(Vec3::y(), -0.25),
                Plane::new(Vec3::z(), 0.0),
            ],
            edges: vec![(0, 1), (0, 2), (1, 2)],
        };
        let triangles = vec![CornerTriangle {
            plane_indices: [0, 1, 2],
        }];
        let bundles = vec![ParallelBundle {
            normal: Vec3::z(),
            distances: vec![-1.0, 0.0],
            members: vec![2],
            neighbors: vec![0, 1],
        }];
        let json = GraphJson::from_parts(&graph, &triangles, &bundles);
        let text = serde_json::to_string(&json).unwrap();
        let back: GraphJson = serde_json::from_str(&text).unwrap();
        assert_eq!(back, json);
        assert_eq!(back.graph().edges, graph.edges);
        assert_eq!(back.graph().vertices[1].offset, -0.25);
        assert_eq!(back.triangles()[0].plane_indices, [0, 1, 2]);
        assert_eq!(back.bundles()[0].distances, vec![-1.0, 0.0]);
    }

    #[test]
    fn file_round_trip_and_byte_reproducibility() {
        let scene = SceneJson::from_ground_truth(&box_gt());
        let p1 = temp_path("scene1.json");
        let p2 = temp_path("scene2.json");
        write_json(&p1, &scene).unwrap();
        let loaded: SceneJson = read_json(&p1).unwrap();
        write_json(&p2, &loaded).unwrap();
        let b1 = std::fs::read(&p1).unwrap();
        let b2 = std::fs::read(&p2).unwrap();
        assert_eq!(b1, b2, "JSON write is not byte-reproducible");
    }

    #[test]
    fn read_json_missing_file_is_io_error() {
        let missing = temp_path("nope.json");
        let _ = std::fs::remove_file(&missing);
        match read_json::<SceneJson>(&missing) {
            Err(IoError::Io(_)) => {}
            other => panic!("expected Io error, got {other:?}"),
        }
    }

    #[test]
    fn transform_text_round_trip() {
        let motion = RigidMotion::new(
            Rotation3::from_euler_angles(0.1, -0.2, 0.3).into_inner(),
            Vec3::new(0.5, -1.5, 2.25),
        );
        let text = format_transform(&motion);
        assert_eq!(text.lines().count(), 4);
        let back = parse_transform(&text).unwrap();
        assert_eq!(back.rotation, motion.rotation);
        assert_eq!(back.translation, motion.translation);
    }

    #[test]
    fn transform_parser_rejects_malformed_input() {
        assert!(matches!(
            parse_transform("1 0 0 0"),
            Err(IoError::Malformed(_))
        ));
        assert!(matches!(
            parse_transform("1 0 0 0 0 1 0 0 0 0 1 0 0 0 0 2"),
            Err(IoError::Malformed(_))
        ));
        assert!(matches!(
            parse_transform("1 0 0 0 0 1 0 0 0 0 1 0 0 0 x 1"),
            Err(IoError::Malformed(_))
        ));
    }
}
