//! Minimal PLY reader/writer for oriented point clouds.
//!
//! Supports `ascii` and `binary_little_endian` version 1.0 files. Positions
//! are written as `double` so save/load round-trips are bit-exact; normals
//! (`nx`, `ny`, `nz`) are optional. Unknown vertex properties are skipped on
//! read, as are other elements (in binary files only when they carry no list
//! properties, since list rows have no fixed stride).

use super::IoError;
use crate::geometry::{OrientedPoint, PointCloud, Vec3};
use std::fs;
use std::io::Write as _;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(name: &str) -> Option<Self> {
        match name {
            "char" | "int8" => Some(Scalar::I8),
            "uchar" | "uint8" => Some(Scalar::U8),
            "short" | "int16" => Some(Scalar::I16),
            "ushort" | "uint16" => Some(Scalar::U16),
            "int" | "int32" => Some(Scalar::I32),
            "uint" | "uint32" => Some(Scalar::U32),
            "float" | "float32" => Some(Scalar::F32),
            "double" | "float64" => Some(Scalar::F64),
            _ => None,
        }
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn read_f64(self, bytes: &[u8]) -> f64 {
        match self {
            Scalar::I8 => bytes[0] as i8 as f64,
            Scalar::U8 => bytes[0] as f64,
            Scalar::I16 => i16::from_le_bytes([bytes[0], bytes[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([bytes[0], bytes[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) as f64,
            Scalar::U32 => u32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) as f64,
            Scalar::F32 => f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) as f64,
            Scalar::F64 => f64::from_le_bytes([
                bytes[0], bytes[1], bytes[2], bytes[3], bytes[4], bytes[5], bytes[6], bytes[7],
            ]),
        }
    }
}

#[derive(Debug, Clone)]
enum Property {
    Scalar { name: String, ty: Scalar },
    List,
}

#[derive(Debug, Clone)]
struct Element {
    name: String,
    count: usize,
    properties: Vec<Property>,
}

impl Element {
    fn fixed_stride(&self) -> Option<usize> {
        let mut total = 0;
        for p in &self.properties {
            match p {
                Property::Scalar { ty, .. } => total += ty.size(),
                Property::List => return None,
            }
        }
        Some(total)
    }
}

struct Header {
    format: PlyFormat,
    elements: Vec<Element>,
    body_offset: usize,
}

fn parse_header(data: &[u8]) -> Result<Header, IoError> {
    let end_marker: &[u8] = b"end_header\n";
    let end = data
        .windows(end_marker.len())
        .position(|w| w == end_marker)
        .ok_or_else(|| IoError::Malformed("missing end_header".into()))?;
    let body_offset = end + end_marker.len();
    let text = std::str::from_utf8(&data[..end])
        .map_err(|_| IoError::Malformed("header is not valid utf-8".into()))?;

    let mut lines = text.lines().map(|l| l.trim_end_matches('\r'));
    if lines.next() != Some("ply") {
        return Err(IoError::Malformed("missing ply magic".into()));
    }
    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    for line in lines {
        let mut tok = line.split_whitespace();
        match tok.next() {
            Some("format") => {
                format = Some(match tok.next() {
                    Some("ascii") => PlyFormat::Ascii,
                    Some("binary_little_endian") => PlyFormat::BinaryLittleEndian,
                    other => {
                        return Err(IoError::Malformed(format!(
                            "unsupported format {:?}",
                            other
                        )))
                    }
                });
            }
            Some("comment") | Some("obj_info") => {}
            Some("element") => {
                let name = tok
                    .next()
                    .ok_or_else(|| IoError::Malformed("element without name".into()))?;
                let count: usize = tok
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| IoError::Malformed("element without count".into()))?;
                elements.push(Element {
                    name: name.to_string(),
                    count,
                    properties: Vec::new(),
                });
            }
            Some("property") => {
                let element = elements
                    .last_mut()
                    .ok_or_else(|| IoError::Malformed("property before any element".into()))?;
                let ty_name = tok
                    .next()
                    .ok_or_else(|| IoError::Malformed("property without type".into()))?;
                if ty_name == "list" {
                    tok.next()
                        .and_then(Scalar::parse)
                        .ok_or_else(|| IoError::Malformed("bad list index type".into()))?;
                    // Lists are only tolerated, never decoded: ascii rows are
                    // skipped whole and binary list elements are rejected.
                    element.properties.push(Property::List);
                } else {
                    let ty = Scalar::parse(ty_name).ok_or_else(|| {
                        IoError::Malformed(format!("unknown property type {ty_name}"))
                    })?;
                    let name = tok
                        .next()
                        .ok_or_else(|| IoError::Malformed("property without name".into()))?;
                    element.properties.push(Property::Scalar {
                        name: name.to_string(),
                        ty,
                    });
                }
            }
            Some(other) => {
                return Err(IoError::Malformed(format!("unknown header line {other}")));
            }
            None => {}
        }
    }
    Ok(Header {
        format: format.ok_or_else(|| IoError::Malformed("missing format line".into()))?,
        elements,
        body_offset,
    })
}

struct VertexLayout {
    x: usize,
    y: usize,
    z: usize,
    normals: Option<(usize, usize, usize)>,
}

fn vertex_layout(element: &Element) -> Result<VertexLayout, IoError> {
    let find = |name: &str| {
        element.properties.iter().position(|p| match p {
            Property::Scalar { name: n, .. } => n == name,
            Property::List => false,
        })
    };
    let (x, y, z) = match (find("x"), find("y"), find("z")) {
        (Some(x), Some(y), Some(z)) => (x, y, z),
        _ => {
            return Err(IoError::Malformed(
                "vertex element lacks x/y/z properties".into(),
            ))
        }
    };
    let normals = match (find("nx"), find("ny"), find("nz")) {
        (Some(a), Some(b), Some(c)) => Some((a, b, c)),
        _ => None,
    };
    Ok(VertexLayout { x, y, z, normals })
}

/// Loads a point cloud from an `ascii` or `binary_little_endian` PLY file.
/// `has_normals` on the result reflects whether the vertex element declares
/// `nx`, `ny`, `nz`.
pub fn load_point_cloud(path: &Path) -> Result<PointCloud, IoError> {
    let data = fs::read(path)?;
    let header = parse_header(&data)?;
    let vertex_idx = header
        .elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| IoError::Malformed("no vertex element".into()))?;
    let vertex = &header.elements[vertex_idx];
    let layout = vertex_layout(vertex)?;

    match header.format {
        PlyFormat::Ascii => {
            let body = std::str::from_utf8(&data[header.body_offset..])
                .map_err(|_| IoError::Malformed("ascii body is not valid utf-8".into()))?;
            let mut lines = body.lines();
            // Skip rows of any elements that precede the vertex element; in
            // ascii each row is one line regardless of list properties.
            for e in &header.elements[..vertex_idx] {
                for _ in 0..e.count {
                    lines
                        .next()
                        .ok_or_else(|| IoError::Malformed("truncated body".into()))?;
                }
            }
            let mut points = Vec::with_capacity(vertex.count);
            for _ in 0..vertex.count {
                let line = lines
                    .next()
                    .ok_or_else(|| IoError::Malformed("truncated vertex data".into()))?;
                let values: Vec<f64> = line
                    .split_whitespace()
                    .map(|t| {
                        t.parse::<f64>()
                            .map_err(|_| IoError::Malformed(format!("bad number {t:?}")))
                    })
                    .collect::<Result<_, _>>()?;
                if values.len() < vertex.properties.len() {
                    return Err(IoError::Malformed("short vertex row".into()));
                }
                let position = Vec3::new(values[layout.x], values[layout.y], values[layout.z]);
                let normal = match layout.normals {
                    Some((a, b, c)) => Vec3::new(values[a], values[b], values[c]),
                    None => Vec3::zeros(),
                };
                points.push(OrientedPoint::new(position, normal));
            }
            Ok(PointCloud::new(points, layout.normals.is_some()))
        }
        PlyFormat::BinaryLittleEndian => {
            let mut offset = header.body_offset;
            for e in &header.elements[..vertex_idx] {
                let stride = e.fixed_stride().ok_or_else(|| {
                    IoError::Malformed(format!(
                        "cannot skip binary element {:?} with list properties",
                        e.name
                    ))
                })?;
                offset += stride * e.count;
            }
            let stride = vertex.fixed_stride().ok_or_else(|| {
                IoError::Malformed("vertex element with list properties".into())
            })?;
            if data.len() < offset + stride * vertex.count {
                return Err(IoError::Malformed("truncated binary vertex data".into()));
            }
            // Per-property byte offsets within a row.
            let mut prop_offsets = Vec::with_capacity(vertex.properties.len());
            let mut acc = 0;
            let mut prop_types = Vec::with_capacity(vertex.properties.len());
            for p in &vertex.properties {
                match p {
                    Property::Scalar { ty, .. } => {
                        prop_offsets.push(acc);
                        prop_types.push(*ty);
                        acc += ty.size();
                    }
                    Property::List => unreachable!("stride check rejects lists"),
                }
            }
            let read_at = |row: &[u8], idx: usize| -> f64 {
                prop_types[idx].read_f64(&row[prop_offsets[idx]..])
            };
            let mut points = Vec::with_capacity(vertex.count);
            for r in 0..vertex.count {
                let row = &data[offset + r * stride..offset + (r + 1) * stride];
                let position = Vec3::new(
                    read_at(row, layout.x),
                    read_at(row, layout.y),
                    read_at(row, layout.z),
                );
                let normal = match layout.normals {
                    Some((a, b, c)) => {
                        Vec3::new(read_at(row, a), read_at(row, b), read_at(row, c))
                    }
                    None => Vec3::zeros(),
                };
                points.push(OrientedPoint::new(position, normal));
            }
            Ok(PointCloud::new(points, layout.normals.is_some()))
        }
    }
}

fn write_header(
    out: &mut Vec<u8>,
    format: PlyFormat,
    count: usize,
    with_normals: bool,
    with_label: bool,
) {
    let fmt = match format {
        PlyFormat::Ascii => "ascii",
        PlyFormat::BinaryLittleEndian => "binary_little_endian",
    };
    let _ = write!(out, "ply\nformat {fmt} 1.0\nelement vertex {count}\n");
    let _ = write!(out, "property double x\nproperty double y\nproperty double z\n");
    if with_normals {
        let _ = write!(
            out,
            "property double nx\nproperty double ny\nproperty double nz\n"
        );
    }
    if with_label {
        let _ = write!(out, "property int label\n");
    }
    let _ = write!(out, "end_header\n");
}

fn encode_cloud(
    cloud: &PointCloud,
    labels: Option<&[i32]>,
    format: PlyFormat,
) -> Result<Vec<u8>, IoError> {
    if let Some(labels) = labels {
        if labels.len() != cloud.len() {
            return Err(IoError::Malformed(format!(
                "label count {} does not match point count {}",
                labels.len(),
                cloud.len()
            )));
        }
    }
    let mut out = Vec::new();
    write_header(
        &mut out,
        format,
        cloud.len(),
        cloud.has_normals,
        labels.is_some(),
    );
    match format {
        PlyFormat::Ascii => {
            for (i, p) in cloud.points.iter().enumerate() {
                // `{}` on f64 picks the shortest digits that round-trip, so a
                // load/save cycle reproduces the file byte for byte.
                let _ = write!(out, "{} {} {}", p.position.x, p.position.y, p.position.z);
                if cloud.has_normals {
                    let _ = write!(out, " {} {} {}", p.normal.x, p.normal.y, p.normal.z);
                }
                if let Some(labels) = labels {
                    let _ = write!(out, " {}", labels[i]);
                }
                out.push(b'\n');
            }
        }
        PlyFormat::BinaryLittleEndian => {
            for (i, p) in cloud.points.iter().enumerate() {
                for v in [p.position.x, p.position.y, p.position.z] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                if cloud.has_normals {
                    for v in [p.normal.x, p.normal.y, p.normal.z] {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                if let Some(labels) = labels {
                    out.extend_from_slice(&labels[i].to_le_bytes());
                }
            }
        }
    }
    Ok(out)
}

/// Saves a point cloud (positions as `double`, normals included when
/// present).
pub fn save_point_cloud(path: &Path, cloud: &PointCloud, format: PlyFormat) -> Result<(), IoError> {
    let bytes = encode_cloud(cloud, None, format)?;
    fs::write(path, bytes)?;
    Ok(())
}

/// Saves a point cloud with one integer label per point (e.g. primitive
/// assignments; -1 conventionally marks unassigned points).
pub fn save_labeled_point_cloud(
    path: &Path,
    cloud: &PointCloud,
    labels: &[i32],
    format: PlyFormat,
) -> Result<(), IoError> {
    let bytes = encode_cloud(cloud, Some(labels), format)?;
    fs::write(path, bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("ortho-planes-ply-tests");
        fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    fn random_cloud(n: usize, seed: u64, with_normals: bool) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points = (0..n)
            .map(|_| {
                let p = Vec3::new(
                    rng.random::<f64>() * 10.0 - 5.0,
                    rng.random::<f64>() * 10.0 - 5.0,
                    rng.random::<f64>() * 10.0 - 5.0,
                );
                let n = if with_normals {
                    Vec3::new(
                        rng.random::<f64>() - 0.5,
                        rng.random::<f64>() - 0.5,
                        rng.random::<f64>() - 0.5,
                    )
                    .normalize()
                } else {
                    Vec3::zeros()
                };
                OrientedPoint::new(p, n)
            })
            .collect();
        PointCloud::new(points, with_normals)
    }

    #[test]
    fn ascii_round_trip_is_bit_exact() {
        let cloud = random_cloud(64, 1, true);
        let path = tmp("ascii_rt.ply");
        save_point_cloud(&path, &cloud, PlyFormat::Ascii).unwrap();
        let loaded = load_point_cloud(&path).unwrap();
        assert_eq!(loaded.len(), cloud.len());
        assert!(loaded.has_normals);
        for (a, b) in cloud.points.iter().zip(loaded.points.iter()) {
            assert_eq!(a.position, b.position);
            assert_eq!(a.normal, b.normal);
        }
    }

    #[test]
    fn binary_round_trip_is_bit_exact() {
        let cloud = random_cloud(64, 2, true);
        let path = tmp("bin_rt.ply");
        save_point_cloud(&path, &cloud, PlyFormat::BinaryLittleEndian).unwrap();
        let loaded = load_point_cloud(&path).unwrap();
        for (a, b) in cloud.points.iter().zip(loaded.points.iter()) {
            assert_eq!(a.position, b.position);
            assert_eq!(a.normal, b.normal);
        }
    }

    #[test]
    fn save_load_save_reproduces_bytes() {
        for (fmt, name) in [
            (PlyFormat::Ascii, "stable_a.ply"),
            (PlyFormat::BinaryLittleEndian, "stable_b.ply"),
        ] {
            let cloud = random_cloud(50, 3, true);
            let p1 = tmp(name);
            let p2 = tmp(&format!("again_{name}"));
            save_point_cloud(&p1, &cloud, fmt).unwrap();
            let loaded = load_point_cloud(&p1).unwrap();
            save_point_cloud(&p2, &loaded, fmt).unwrap();
            assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
        }
    }

    #[test]
    fn loads_without_normals() {
        let cloud = random_cloud(10, 4, false);
        let path = tmp("no_normals.ply");
        save_point_cloud(&path, &cloud, PlyFormat::Ascii).unwrap();
        let loaded = load_point_cloud(&path).unwrap();
        assert!(!loaded.has_normals);
        assert_eq!(loaded.len(), 10);
    }

    #[test]
    fn labels_round_trip() {
        let cloud = random_cloud(8, 5, true);
        let labels: Vec<i32> = (0..8).map(|i| if i % 3 == 0 { -1 } else { i }).collect();
        let path = tmp("labeled.ply");
        save_labeled_point_cloud(&path, &cloud, &labels, PlyFormat::Ascii).unwrap();
        // Loader ignores the label column but must still parse positions.
        let loaded = load_point_cloud(&path).unwrap();
        assert_eq!(loaded.len(), 8);
        assert_eq!(loaded.points[3].position, cloud.points[3].position);
        let text = String::from_utf8(fs::read(&path).unwrap()).unwrap();
        assert!(text.contains("property int label"));
    }

    #[test]
    fn label_count_mismatch_is_rejected() {
        let cloud = random_cloud(8, 6, false);
        let err = save_labeled_point_cloud(
            &tmp("mismatch.ply"),
            &cloud,
            &[0, 1],
            PlyFormat::Ascii,
        )
        .unwrap_err();
        assert!(matches!(err, IoError::Malformed(_)));
    }

    #[test]
    fn reads_float32_positions_and_extra_properties() {
        let text = "ply\nformat ascii 1.0\ncomment from another tool\n\
                    element vertex 2\n\
                    property float x\nproperty float y\nproperty float z\n\
                    property uchar red\nproperty uchar green\nproperty uchar blue\n\
                    end_header\n\
                    1.5 0 -2 255 0 0\n0 3.25 1 0 255 0\n";
        let path = tmp("float_rgb.ply");
        fs::write(&path, text).unwrap();
        let cloud = load_point_cloud(&path).unwrap();
        assert_eq!(cloud.len(), 2);
        assert!(!cloud.has_normals);
        assert_eq!(cloud.points[0].position, Vec3::new(1.5, 0.0, -2.0));
        assert_eq!(cloud.points[1].position, Vec3::new(0.0, 3.25, 1.0));
    }

    #[test]
    fn skips_leading_elements_in_ascii() {
        let text = "ply\nformat ascii 1.0\n\
                    element camera 1\nproperty float fx\nproperty float fy\n\
                    element vertex 1\n\
                    property double x\nproperty double y\nproperty double z\n\
                    end_header\n\
                    500 500\n\
                    1 2 3\n";
        let path = tmp("leading.ply");
        fs::write(&path, text).unwrap();
        let cloud = load_point_cloud(&path).unwrap();
        assert_eq!(cloud.points[0].position, Vec3::new(1.0, 2.0, 3.0));
    }

    #[test]
    fn rejects_garbage() {
        let path = tmp("garbage.ply");
        fs::write(&path, b"not a ply file").unwrap();
        assert!(matches!(
            load_point_cloud(&path),
            Err(IoError::Malformed(_))
        ));

        let path2 = tmp("no_vertex.ply");
        fs::write(
            &path2,
            "ply\nformat ascii 1.0\nelement face 0\nproperty list uchar int vertex_indices\nend_header\n",
        )
        .unwrap();
        assert!(matches!(
            load_point_cloud(&path2),
            Err(IoError::Malformed(_))
        ));

        let path3 = tmp("truncated.ply");
        fs::write(
            &path3,
            "ply\nformat ascii 1.0\nelement vertex 5\nproperty double x\nproperty double y\nproperty double z\nend_header\n1 2 3\n",
        )
        .unwrap();
        assert!(matches!(
            load_point_cloud(&path3),
            Err(IoError::Malformed(_))
        ));
    }

    #[test]
    fn rejects_big_endian() {
        let path = tmp("be.ply");
        fs::write(
            &path,
            "ply\nformat binary_big_endian 1.0\nelement vertex 0\nproperty double x\nproperty double y\nproperty double z\nend_header\n",
        )
        .unwrap();
        assert!(matches!(
            load_point_cloud(&path),
            Err(IoError::Malformed(_))
        ));
    }
}
