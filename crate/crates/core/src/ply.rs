//! PLY mesh I/O. Writing always produces binary little-endian files with
//! float positions and normals, uchar colors and uchar/int face lists.
//! Reading accepts ASCII or binary little-endian files with any scalar
//! vertex properties; missing normals are recomputed from the faces.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{TriangleMesh, Vec3};

pub fn write_ply(path: &Path, mesh: &TriangleMesh) -> Result<()> {
    fs::write(path, encode_ply(mesh))?;
    Ok(())
}

pub fn encode_ply(mesh: &TriangleMesh) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + mesh.vertices.len() * 27 + mesh.triangles.len() * 13);
    write!(
        out,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\n\
         property float x\nproperty float y\nproperty float z\n\
         property float nx\nproperty float ny\nproperty float nz\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\n\
         element face {}\nproperty list uchar int vertex_indices\nend_header\n",
        mesh.vertices.len(),
        mesh.triangles.len()
    )
    .expect("writing to a Vec cannot fail");
    for ((v, n), c) in mesh.vertices.iter().zip(&mesh.normals).zip(&mesh.colors) {
        for x in v.iter().chain(n.iter()) {
            out.extend_from_slice(&(*x as f32).to_le_bytes());
        }
        out.extend_from_slice(c);
    }
    for t in &mesh.triangles {
        out.push(3);
        for &i in t {
            out.extend_from_slice(&(i as i32).to_le_bytes());
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
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
        Some(match name {
            "char" | "int8" => Self::I8,
            "uchar" | "uint8" => Self::U8,
            "short" | "int16" => Self::I16,
            "ushort" | "uint16" => Self::U16,
            "int" | "int32" => Self::I32,
            "uint" | "uint32" => Self::U32,
            "float" | "float32" => Self::F32,
            "double" | "float64" => Self::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Self::I8 | Self::U8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }

    fn decode(self, b: &[u8]) -> f64 {
        match self {
            Self::I8 => b[0] as i8 as f64,
            Self::U8 => b[0] as f64,
            Self::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Self::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Self::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

#[derive(Debug)]
enum Property {
    Scalar(String, Scalar),
    List(String, Scalar, Scalar),
}

#[derive(Debug)]
struct Element {
    name: String,
    count: usize,
    properties: Vec<Property>,
}

/// Reads values either from whitespace-separated text or packed little-endian bytes.
enum Cursor<'a> {
    Ascii(std::str::SplitAsciiWhitespace<'a>),
    Binary(&'a [u8]),
}

impl Cursor<'_> {
    fn next(&mut self, ty: Scalar) -> std::result::Result<f64, String> {
        match self {
            Cursor::Ascii(it) => {
                let tok = it.next().ok_or("unexpected end of data")?;
                tok.parse::<f64>()
                    .map_err(|e| format!("bad number {tok:?}: {e}"))
            }
            Cursor::Binary(bytes) => {
                let n = ty.size();
                if bytes.len() < n {
                    return Err("unexpected end of data".into());
                }
                let v = ty.decode(&bytes[..n]);
                *bytes = &bytes[n..];
                Ok(v)
            }
        }
    }
}

pub fn read_ply(path: &Path) -> Result<TriangleMesh> {
    let bytes = fs::read(path)?;
    decode_ply(&bytes).map_err(|message| Error::Parse {
        path: path.to_path_buf(),
        message,
    })
}

fn decode_ply(bytes: &[u8]) -> std::result::Result<TriangleMesh, String> {
    const END: &[u8] = b"end_header";
    let end = bytes
        .windows(END.len())
        .position(|w| w == END)
        .ok_or("missing end_header")?;
    let body_start = bytes[end..]
        .iter()
        .position(|&b| b == b'\n')
        .map(|p| end + p + 1)
        .ok_or("truncated header")?;
    let header = std::str::from_utf8(&bytes[..end]).map_err(|_| "header is not UTF-8")?;

    let mut lines = header.lines().map(str::trim);
    if lines.next() != Some("ply") {
        return Err("missing ply magic".into());
    }
    let mut binary = None;
    let mut elements: Vec<Element> = Vec::new();
    for line in lines {
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["format", "ascii", _] => binary = Some(false),
            ["format", "binary_little_endian", _] => binary = Some(true),
            ["format", other, _] => return Err(format!("unsupported format {other}")),
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count
                    .parse()
                    .map_err(|_| format!("bad element count {count:?}"))?,
                properties: Vec::new(),
            }),
            ["property", "list", count_ty, item_ty, name] => {
                let el = elements.last_mut().ok_or("property before element")?;
                let c = Scalar::parse(count_ty).ok_or(format!("unknown type {count_ty}"))?;
                let i = Scalar::parse(item_ty).ok_or(format!("unknown type {item_ty}"))?;
                el.properties.push(Property::List(name.to_string(), c, i));
            }
            ["property", ty, name] => {
                let el = elements.last_mut().ok_or("property before element")?;
                let t = Scalar::parse(ty).ok_or(format!("unknown type {ty}"))?;
                el.properties.push(Property::Scalar(name.to_string(), t));
            }
            ["comment", ..] | ["obj_info", ..] | [] => {}
            _ => return Err(format!("unrecognized header line {line:?}")),
        }
    }
    let binary = binary.ok_or("missing format line")?;
    let body = &bytes[body_start..];
    let mut cursor = if binary {
        Cursor::Binary(body)
    } else {
        Cursor::Ascii(
            std::str::from_utf8(body)
                .map_err(|_| "ASCII body is not UTF-8")?
                .split_ascii_whitespace(),
        )
    };

    let mut mesh = TriangleMesh::default();
    let mut normals = Vec::new();
    let mut has_normals = false;
    for el in &elements {
        for _ in 0..el.count {
            let mut pos = [0.0; 3];
            let mut nrm = [0.0; 3];
            let mut rgb = [200u8; 3];
            for prop in &el.properties {
                match prop {
                    Property::Scalar(name, ty) => {
                        let v = cursor.next(*ty)?;
                        match name.as_str() {
                            "x" => pos[0] = v,
                            "y" => pos[1] = v,
                            "z" => pos[2] = v,
                            "nx" => nrm[0] = v,
                            "ny" => nrm[1] = v,
                            "nz" => nrm[2] = v,
                            "red" => rgb[0] = v as u8,
                            "green" => rgb[1] = v as u8,
                            "blue" => rgb[2] = v as u8,
                            _ => {}
                        }
                        if el.name == "vertex" {
                            has_normals |= name == "nx";
                        }
                    }
                    Property::List(name, count_ty, item_ty) => {
                        let n = cursor.next(*count_ty)? as usize;
                        let mut idx = Vec::with_capacity(n);
                        for _ in 0..n {
                            idx.push(cursor.next(*item_ty)?);
                        }
                        if el.name == "face" && (name == "vertex_indices" || name == "vertex_index")
                        {
                            if idx.iter().any(|&i| i < 0.0) {
                                return Err("negative vertex index".into());
                            }
                            // fan-triangulate polygons
                            for k in 1..idx.len().saturating_sub(1) {
                                mesh.triangles.push([
                                    idx[0] as u32,
                                    idx[k] as u32,
                                    idx[k + 1] as u32,
                                ]);
                            }
                        }
                    }
                }
            }
            if el.name == "vertex" {
                mesh.vertices.push(Vec3::from(pos));
                normals.push(Vec3::from(nrm));
                mesh.colors.push(rgb);
            }
        }
    }
    mesh.normals = if has_normals {
        normals
            .into_iter()
            .map(|n| {
                if n.norm() > 0.0 {
                    n.normalize()
                } else {
                    Vec3::z()
                }
            })
            .collect()
    } else {
        face_normals(&mesh)
    };
    mesh.validate().map_err(|e| e.to_string())?;
    Ok(mesh)
}

/// Area-weighted vertex normals from the triangle winding.
pub fn face_normals(mesh: &TriangleMesh) -> Vec<Vec3> {
    let mut acc = vec![Vec3::zeros(); mesh.vertices.len()];
    for t in &mesh.triangles {
        if t.iter().any(|&i| i as usize >= mesh.vertices.len()) {
            continue;
        }
        let [a, b, c] = t.map(|i| mesh.vertices[i as usize]);
        let n = (b - a).cross(&(c - a));
        for &i in t {
            acc[i as usize] += n;
        }
    }
    acc.into_iter()
        .map(|n| {
            if n.norm() > 0.0 {
                n.normalize()
            } else {
                Vec3::z()
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tetra() -> TriangleMesh {
        let v = vec![
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
            Vec3::new(0.0, 0.0, 1.0),
        ];
        let mut m = TriangleMesh {
            vertices: v,
            normals: vec![],
            colors: vec![[255, 0, 0], [0, 255, 0], [0, 0, 255], [1, 2, 3]],
            triangles: vec![[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]],
        };
        m.normals = face_normals(&m);
        m
    }

    #[test]
    fn binary_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ply");
        let m = tetra();
        write_ply(&path, &m).unwrap();
        let back = read_ply(&path).unwrap();
        assert_eq!(back.triangles, m.triangles);
        assert_eq!(back.colors, m.colors);
        for (a, b) in back.vertices.iter().zip(&m.vertices) {
            assert!((a - b).norm() < 1e-7);
        }
        for (a, b) in back.normals.iter().zip(&m.normals) {
            assert!((a - b).norm() < 1e-6);
        }
    }

    #[test]
    fn empty_mesh_round_trip() {
        let bytes = encode_ply(&TriangleMesh::default());
        assert_eq!(decode_ply(&bytes).unwrap(), TriangleMesh::default());
    }

    #[test]
    fn ascii_quads_without_normals() {
        let text = "ply\nformat ascii 1.0\nelement vertex 4\nproperty double x\nproperty double y\nproperty double z\n\
                    element face 1\nproperty list uchar uint vertex_indices\nend_header\n\
                    0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n";
        let m = decode_ply(text.as_bytes()).unwrap();
        assert_eq!(m.triangles, vec![[0, 1, 2], [0, 2, 3]]);
        assert!(m.normals.iter().all(|n| (n - Vec3::z()).norm() < 1e-12));
    }

    #[test]
    fn malformed_files_are_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ply");
        fs::write(
            &path,
            "ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nend_header\n1\n",
        )
        .unwrap();
        assert!(matches!(read_ply(&path), Err(Error::Parse { .. })));
        assert!(decode_ply(b"not a ply").is_err());
        let out_of_range = "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\n\
                            element face 1\nproperty list uchar int vertex_indices\nend_header\n0 0 0\n3 0 1 2\n";
        assert!(decode_ply(out_of_range.as_bytes()).is_err());
    }
}
