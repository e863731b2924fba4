//! OBJ and PLY readers/writers with per-vertex color.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::math::Vec3;

use super::mesh::Mesh;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn color_to_u8(c: f64) -> u8 {
    (c.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn load_mesh(path: &Path) -> Result<Mesh> {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("obj") => read_obj(path),
        Some("ply") => read_ply(path),
        _ => Err(Error::format(path, "unsupported mesh extension (expected .obj or .ply)")),
    }
}

pub fn save_mesh(mesh: &Mesh, path: &Path) -> Result<()> {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("obj") => write_obj(mesh, path),
        Some("ply") => write_ply(mesh, path, PlyFormat::BinaryLittleEndian),
        _ => Err(Error::format(path, "unsupported mesh extension (expected .obj or .ply)")),
    }
}

pub fn obj_string(mesh: &Mesh) -> String {
    let mut s = String::new();
    for (i, v) in mesh.vertices.iter().enumerate() {
        match &mesh.colors {
            Some(c) => {
                let c = c[i];
                let _ = writeln!(s, "v {} {} {} {} {} {}", v.x, v.y, v.z, c.x, c.y, c.z);
            }
            None => {
                let _ = writeln!(s, "v {} {} {}", v.x, v.y, v.z);
            }
        }
    }
    if let Some(ns) = &mesh.normals {
        for n in ns {
            let _ = writeln!(s, "vn {} {} {}", n.x, n.y, n.z);
        }
    }
    for f in &mesh.faces {
        let (a, b, c) = (f[0] + 1, f[1] + 1, f[2] + 1);
        if mesh.normals.is_some() {
            let _ = writeln!(s, "f {a}//{a} {b}//{b} {c}//{c}");
        } else {
            let _ = writeln!(s, "f {a} {b} {c}");
        }
    }
    s
}

pub fn write_obj(mesh: &Mesh, path: &Path) -> Result<()> {
    write_bytes(path, obj_string(mesh).as_bytes())
}

pub fn parse_obj(text: &str, path: &Path) -> Result<Mesh> {
    let mut vertices = Vec::new();
    let mut colors = Vec::new();
    let mut normals = Vec::new();
    let mut faces = Vec::new();
    let bad = |line: usize, what: &str| Error::format(path, format!("line {}: {what}", line + 1));
    for (ln, line) in text.lines().enumerate() {
        let mut it = line.split_whitespace();
        match it.next() {
            Some("v") => {
                let nums: Vec<f64> = it
                    .map(|t| t.parse::<f64>().map_err(|_| bad(ln, "bad number")))
                    .collect::<Result<_>>()?;
                if nums.len() < 3 {
                    return Err(bad(ln, "vertex needs 3 coordinates"));
                }
                vertices.push(Vec3::new(nums[0], nums[1], nums[2]));
                if nums.len() >= 6 {
                    colors.push(Vec3::new(nums[3], nums[4], nums[5]));
                }
            }
            Some("vn") => {
                let nums: Vec<f64> = it
                    .map(|t| t.parse::<f64>().map_err(|_| bad(ln, "bad number")))
                    .collect::<Result<_>>()?;
                if nums.len() < 3 {
                    return Err(bad(ln, "normal needs 3 components"));
                }
                normals.push(Vec3::new(nums[0], nums[1], nums[2]));
            }
            Some("f") => {
                let idx: Vec<u32> = it
                    .map(|t| {
                        let first = t.split('/').next().unwrap_or("");
                        let i: i64 = first.parse().map_err(|_| bad(ln, "bad face index"))?;
                        let n = vertices.len() as i64;
                        let i = if i < 0 { n + i } else { i - 1 };
                        if i < 0 {
                            return Err(bad(ln, "face index out of range"));
                        }
                        Ok(i as u32)
                    })
                    .collect::<Result<_>>()?;
                if idx.len() < 3 {
                    return Err(bad(ln, "face needs at least 3 vertices"));
                }
                for k in 1..idx.len() - 1 {
                    faces.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            _ => {}
        }
    }
    let mut mesh = Mesh::new(vertices, faces);
    if !colors.is_empty() {
        if colors.len() != mesh.vertices.len() {
            return Err(Error::format(path, "only some vertices carry colors"));
        }
        mesh.colors = Some(colors);
    }
    mesh.normals = if normals.len() == mesh.vertices.len() {
        Some(normals)
    } else {
        Some(mesh.compute_vertex_normals())
    };
    mesh.validate().map_err(|e| Error::format(path, e.to_string()))?;
    Ok(mesh)
}

pub fn read_obj(path: &Path) -> Result<Mesh> {
    let bytes = read_bytes(path)?;
    let text = String::from_utf8(bytes).map_err(|_| Error::format(path, "not UTF-8"))?;
    parse_obj(&text, path)
}

pub fn ply_bytes(mesh: &Mesh, format: PlyFormat) -> Vec<u8> {
    let mut header = String::from("ply\n");
    header.push_str(match format {
        PlyFormat::Ascii => "format ascii 1.0\n",
        PlyFormat::BinaryLittleEndian => "format binary_little_endian 1.0\n",
    });
    let _ = writeln!(header, "element vertex {}", mesh.vertices.len());
    header.push_str("property double x\nproperty double y\nproperty double z\n");
    if mesh.normals.is_some() {
        header.push_str("property double nx\nproperty double ny\nproperty double nz\n");
    }
    if mesh.colors.is_some() {
        header.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    }
    let _ = writeln!(header, "element face {}", mesh.faces.len());
    header.push_str("property list uchar int vertex_indices\nend_header\n");
    let mut out = header.into_bytes();
    match format {
        PlyFormat::Ascii => {
            let mut s = String::new();
            for i in 0..mesh.vertices.len() {
                let v = mesh.vertices[i];
                let _ = write!(s, "{} {} {}", v.x, v.y, v.z);
                if let Some(n) = &mesh.normals {
                    let _ = write!(s, " {} {} {}", n[i].x, n[i].y, n[i].z);
                }
                if let Some(c) = &mesh.colors {
                    let _ = write!(s, " {} {} {}", color_to_u8(c[i].x), color_to_u8(c[i].y), color_to_u8(c[i].z));
                }
                s.push('\n');
            }
            for f in &mesh.faces {
                let _ = writeln!(s, "3 {} {} {}", f[0], f[1], f[2]);
            }
            out.extend_from_slice(s.as_bytes());
        }
        PlyFormat::BinaryLittleEndian => {
            for i in 0..mesh.vertices.len() {
                for k in 0..3 {
                    out.extend_from_slice(&mesh.vertices[i][k].to_le_bytes());
                }
                if let Some(n) = &mesh.normals {
                    for k in 0..3 {
                        out.extend_from_slice(&n[i][k].to_le_bytes());
                    }
                }
                if let Some(c) = &mesh.colors {
                    for k in 0..3 {
                        out.push(color_to_u8(c[i][k]));
                    }
                }
            }
            for f in &mesh.faces {
                out.push(3);
                for k in 0..3 {
                    out.extend_from_slice(&(f[k] as i32).to_le_bytes());
                }
            }
        }
    }
    out
}

pub fn write_ply(mesh: &Mesh, path: &Path, format: PlyFormat) -> Result<()> {
    write_bytes(path, &ply_bytes(mesh, format))
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
    fn parse(s: &str) -> Option<Scalar> {
        Some(match s {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn read_le(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

#[derive(Clone, Debug)]
enum Property {
    Scalar(String, Scalar),
    List(String, Scalar, Scalar),
}

#[derive(Clone, Debug)]
struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
}

/// Streams values out of either an ASCII token list or a binary buffer.
enum Cursor<'a> {
    Ascii(std::str::SplitAsciiWhitespace<'a>),
    Binary(&'a [u8], usize),
}

impl Cursor<'_> {
    fn next(&mut self, ty: Scalar) -> Option<f64> {
        match self {
            Cursor::Ascii(it) => it.next()?.parse().ok(),
            Cursor::Binary(buf, pos) => {
                let n = ty.size();
                let v = ty.read_le(buf.get(*pos..*pos + n)?);
                *pos += n;
                Some(v)
            }
        }
    }
}

pub fn parse_ply(bytes: &[u8], path: &Path) -> Result<Mesh> {
    let marker = b"end_header";
    let hpos = bytes
        .windows(marker.len())
        .position(|w| w == marker)
        .ok_or_else(|| Error::format(path, "missing end_header"))?;
    let mut body_start = hpos + marker.len();
    if bytes.get(body_start) == Some(&b'\r') {
        body_start += 1;
    }
    if bytes.get(body_start) == Some(&b'\n') {
        body_start += 1;
    }
    let header = std::str::from_utf8(&bytes[..hpos]).map_err(|_| Error::format(path, "header is not UTF-8"))?;
    let mut lines = header.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err(Error::format(path, "missing ply magic"));
    }
    let mut binary = None;
    let mut elements: Vec<Element> = Vec::new();
    for line in lines {
        let t: Vec<&str> = line.split_whitespace().collect();
        match t.first().copied() {
            Some("format") => {
                binary = Some(match t.get(1).copied() {
                    Some("ascii") => false,
                    Some("binary_little_endian") => true,
                    other => {
                        return Err(Error::format(path, format!("unsupported PLY format {other:?}")))
                    }
                })
            }
            Some("element") if t.len() >= 3 => elements.push(Element {
                name: t[1].to_string(),
                count: t[2].parse().map_err(|_| Error::format(path, "bad element count"))?,
                props: Vec::new(),
            }),
            Some("property") => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| Error::format(path, "property before element"))?;
                let bad_ty = || Error::format(path, format!("bad property line: {line}"));
                if t.get(1) == Some(&"list") && t.len() >= 5 {
                    let c = Scalar::parse(t[2]).ok_or_else(bad_ty)?;
                    let v = Scalar::parse(t[3]).ok_or_else(bad_ty)?;
                    el.props.push(Property::List(t[4].to_string(), c, v));
                } else if t.len() >= 3 {
                    let s = Scalar::parse(t[1]).ok_or_else(bad_ty)?;
                    el.props.push(Property::Scalar(t[2].to_string(), s));
                } else {
                    return Err(bad_ty());
                }
            }
            _ => {}
        }
    }
    let binary = binary.ok_or_else(|| Error::format(path, "missing format line"))?;
    let body = &bytes[body_start..];
    let mut cur = if binary {
        Cursor::Binary(body, 0)
    } else {
        let text = std::str::from_utf8(body).map_err(|_| Error::format(path, "ASCII body is not UTF-8"))?;
        Cursor::Ascii(text.split_ascii_whitespace())
    };
    let truncated = || Error::format(path, "unexpected end of data");

    let mut vertices = Vec::new();
    let mut normals = Vec::new();
    let mut colors = Vec::new();
    let mut faces = Vec::new();
    for el in &elements {
        for _ in 0..el.count {
            let mut p = [0.0; 3];
            let mut n = [f64::NAN; 3];
            let mut c = [f64::NAN; 3];
            let mut color_scale = 1.0;
            for prop in &el.props {
                match prop {
                    Property::Scalar(name, ty) => {
                        let v = cur.next(*ty).ok_or_else(truncated)?;
                        match name.as_str() {
                            "x" => p[0] = v,
                            "y" => p[1] = v,
                            "z" => p[2] = v,
                            "nx" => n[0] = v,
                            "ny" => n[1] = v,
                            "nz" => n[2] = v,
                            "red" | "green" | "blue" => {
                                let k = ["red", "green", "blue"].iter().position(|s| s == name).unwrap();
                                if matches!(ty, Scalar::U8) {
                                    color_scale = 255.0;
                                }
                                c[k] = v;
                            }
                            _ => {}
                        }
                    }
                    Property::List(name, cty, vty) => {
                        let len = cur.next(*cty).ok_or_else(truncated)? as usize;
                        let mut idx = Vec::with_capacity(len);
                        for _ in 0..len {
                            idx.push(cur.next(*vty).ok_or_else(truncated)?);
                        }
                        if el.name == "face" && (name == "vertex_indices" || name == "vertex_index") {
                            if len < 3 {
                                return Err(Error::format(path, "face with fewer than 3 vertices"));
                            }
                            for k in 1..len - 1 {
                                faces.push([idx[0] as u32, idx[k] as u32, idx[k + 1] as u32]);
                            }
                        }
                    }
                }
            }
            if el.name == "vertex" {
                vertices.push(Vec3::new(p[0], p[1], p[2]));
                if n.iter().all(|v| !v.is_nan()) {
                    normals.push(Vec3::new(n[0], n[1], n[2]));
                }
                if c.iter().all(|v| !v.is_nan()) {
                    colors.push(Vec3::new(c[0], c[1], c[2]) / color_scale);
                }
            }
        }
    }
    let mut mesh = Mesh::new(vertices, faces);
    let nv = mesh.vertices.len();
    mesh.normals = Some(if normals.len() == nv { normals } else { mesh.compute_vertex_normals() });
    if colors.len() == nv && nv > 0 {
        mesh.colors = Some(colors);
    }
    mesh.validate().map_err(|e| Error::format(path, e.to_string()))?;
    Ok(mesh)
}

pub fn read_ply(path: &Path) -> Result<Mesh> {
    parse_ply(&read_bytes(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geomio::mesh::unit_cube;

    fn colored_cube() -> Mesh {
        let mut m = unit_cube().with_vertex_normals();
        m.colors = Some((0..8).map(|i| Vec3::new(i as f64 / 7.0, 0.25, 1.0)).collect());
        m
    }

    #[test]
    fn binary_ply_is_bit_exact_after_reload() {
        let m = colored_cube();
        let bytes = ply_bytes(&m, PlyFormat::BinaryLittleEndian);
        let back = parse_ply(&bytes, Path::new("mem.ply")).unwrap();
        assert_eq!(back.vertices, m.vertices);
        assert_eq!(back.faces, m.faces);
        assert_eq!(ply_bytes(&back, PlyFormat::BinaryLittleEndian), bytes);
    }

    #[test]
    fn ascii_ply_and_obj_preserve_geometry() {
        let m = colored_cube();
        let back = parse_ply(&ply_bytes(&m, PlyFormat::Ascii), Path::new("mem.ply")).unwrap();
        assert_eq!(back.vertices, m.vertices);
        assert_eq!(back.faces, m.faces);
        let obj = parse_obj(&obj_string(&m), Path::new("mem.obj")).unwrap();
        assert_eq!(obj.vertices, m.vertices);
        assert_eq!(obj.colors, m.colors);
        assert_eq!(obj.faces, m.faces);
    }

    #[test]
    fn missing_normals_are_recomputed() {
        let m = unit_cube();
        let back = parse_obj(&obj_string(&m), Path::new("mem.obj")).unwrap();
        assert_eq!(back.normals.unwrap(), m.compute_vertex_normals());
    }

    #[test]
    fn float32_ply_with_quads_loads() {
        let mut bytes = b"ply\nformat binary_little_endian 1.0\nelement vertex 4\nproperty float x\nproperty float y\nproperty float z\nelement face 1\nproperty list uchar uint vertex_indices\nend_header\n".to_vec();
        for p in [[0f32, 0., 0.], [1., 0., 0.], [1., 1., 0.], [0., 1., 0.]] {
            for v in p {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        bytes.push(4);
        for i in 0u32..4 {
            bytes.extend_from_slice(&i.to_le_bytes());
        }
        let m = parse_ply(&bytes, Path::new("q.ply")).unwrap();
        assert_eq!(m.faces, vec![[0, 1, 2], [0, 2, 3]]);
    }

    #[test]
    fn truncated_binary_is_a_format_error() {
        let bytes = ply_bytes(&colored_cube(), PlyFormat::BinaryLittleEndian);
        let err = parse_ply(&bytes[..bytes.len() - 5], Path::new("t.ply")).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
    }
}
