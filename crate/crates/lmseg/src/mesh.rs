//! Triangle meshes: loading, validation, and per-face derivations.
//!
//! OBJ input supports `v x y z [r g b]` and plain `f` triplets (1-based);
//! PLY input supports ascii and binary-little-endian with optional per-face
//! `red green blue` uchar colors and an optional integer `label` property.
//! Colors are converted to HSV on load. Degenerate faces (area below 1e-12)
//! are dropped with a count; polygons are rejected, not triangulated.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Squared-area threshold below which a face counts as degenerate.
pub const DEGENERATE_AREA_SQ: f64 = 1e-12;

/// Indexed triangle mesh with optional per-face HSV color and class label.
#[derive(Debug, Clone, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<[f64; 3]>,
    pub faces: Vec<[u32; 3]>,
    /// Per-face HSV triplets in [0,1]^3, aligned with `faces`.
    pub face_colors: Option<Vec<[f64; 3]>>,
    /// Per-face class ids (training data only).
    pub face_labels: Option<Vec<u16>>,
    /// Faces dropped at load time for being degenerate.
    pub dropped_degenerate: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeshFormat {
    Obj,
    Ply,
    Auto,
}

impl MeshFormat {
    pub fn detect(path: &Path) -> Result<MeshFormat> {
        match path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .as_deref()
        {
            Some("obj") => Ok(MeshFormat::Obj),
            Some("ply") => Ok(MeshFormat::Ply),
            other => Err(Error::UnsupportedFormat(
                other.unwrap_or("<none>").to_string(),
            )),
        }
    }
}

impl TriMesh {
    pub fn new(vertices: Vec<[f64; 3]>, faces: Vec<[u32; 3]>) -> Result<Self> {
        let mesh = Self {
            vertices,
            faces,
            face_colors: None,
            face_labels: None,
            dropped_degenerate: 0,
        };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len() as u32;
        for (fi, f) in self.faces.iter().enumerate() {
            if f[0] >= n || f[1] >= n || f[2] >= n {
                return Err(Error::Parse {
                    path: "<mesh>".into(),
                    line: 0,
                    msg: format!("face {} references vertex beyond {}", fi, n),
                });
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(Error::Parse {
                    path: "<mesh>".into(),
                    line: 0,
                    msg: format!("face {} repeats a vertex index", fi),
                });
            }
        }
        if let Some(colors) = &self.face_colors {
            if colors.len() != self.faces.len() {
                return Err(Error::LengthMismatch {
                    left: colors.len(),
                    right: self.faces.len(),
                });
            }
        }
        if let Some(labels) = &self.face_labels {
            if labels.len() != self.faces.len() {
                return Err(Error::LengthMismatch {
                    left: labels.len(),
                    right: self.faces.len(),
                });
            }
        }
        Ok(())
    }

    pub fn face_count(&self) -> usize {
        self.faces.len()
    }

    fn corner(&self, face: usize, i: usize) -> [f64; 3] {
        self.vertices[self.faces[face][i] as usize]
    }

    /// Twice-area cross product of the face's edge vectors.
    fn face_cross(&self, face: usize) -> [f64; 3] {
        let a = self.corner(face, 0);
        let b = self.corner(face, 1);
        let c = self.corner(face, 2);
        let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
        let v = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
        [
            u[1] * v[2] - u[2] * v[1],
            u[2] * v[0] - u[0] * v[2],
            u[0] * v[1] - u[1] * v[0],
        ]
    }

    pub fn face_area_sq(&self, face: usize) -> f64 {
        let c = self.face_cross(face);
        (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]) / 4.0
    }

    /// Unit normal by the counter-clockwise winding convention.
    pub fn face_normal(&self, face: usize) -> Result<[f64; 3]> {
        let c = self.face_cross(face);
        let norm_sq = c[0] * c[0] + c[1] * c[1] + c[2] * c[2];
        if norm_sq / 4.0 < DEGENERATE_AREA_SQ {
            return Err(Error::DegenerateFace {
                face,
                area: norm_sq.sqrt() / 2.0,
            });
        }
        let inv = 1.0 / norm_sq.sqrt();
        Ok([c[0] * inv, c[1] * inv, c[2] * inv])
    }

    /// Arithmetic mean of the three vertex positions.
    pub fn face_barycenter(&self, face: usize) -> [f64; 3] {
        let a = self.corner(face, 0);
        let b = self.corner(face, 1);
        let c = self.corner(face, 2);
        [
            (a[0] + b[0] + c[0]) / 3.0,
            (a[1] + b[1] + c[1]) / 3.0,
            (a[2] + b[2] + c[2]) / 3.0,
        ]
    }

    /// Drop degenerate faces in place, keeping aligned attributes.
    fn drop_degenerate(&mut self) {
        let keep: Vec<bool> = (0..self.faces.len())
            .map(|f| self.face_area_sq(f) >= DEGENERATE_AREA_SQ)
            .collect();
        let dropped = keep.iter().filter(|&&k| !k).count();
        if dropped == 0 {
            return;
        }
        let filter_in_place = |faces: &mut Vec<[u32; 3]>| {
            let mut i = 0;
            faces.retain(|_| {
                let k = keep[i];
                i += 1;
                k
            });
        };
        filter_in_place(&mut self.faces);
        if let Some(colors) = &mut self.face_colors {
            let mut i = 0;
            colors.retain(|_| {
                let k = keep[i];
                i += 1;
                k
            });
        }
        if let Some(labels) = &mut self.face_labels {
            let mut i = 0;
            labels.retain(|_| {
                let k = keep[i];
                i += 1;
                k
            });
        }
        self.dropped_degenerate = dropped;
    }
}

/// Standard hexcone conversion; H scaled to [0,1]; undefined hue fixed to 0.
pub fn rgb_to_hsv(rgb: [f64; 3]) -> Result<[f64; 3]> {
    for &v in &rgb {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::OutOfRange(format!("rgb component {}", v)));
        }
    }
    let [r, g, b] = rgb;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let v = max;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    let h = if delta <= 0.0 {
        0.0
    } else if max == r {
        (((g - b) / delta).rem_euclid(6.0)) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    Ok([h, s, v])
}

/// Inverse hexcone conversion, used when writing PLY colors back out.
pub fn hsv_to_rgb(hsv: [f64; 3]) -> [f64; 3] {
    let [h, s, v] = hsv;
    let h6 = (h * 6.0).rem_euclid(6.0);
    let i = h6.floor() as i32 % 6;
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Load a mesh, dropping degenerate faces. Colors come back as HSV.
pub fn load_mesh(path: &Path, format: MeshFormat) -> Result<TriMesh> {
    let format = match format {
        MeshFormat::Auto => MeshFormat::detect(path)?,
        f => f,
    };
    let mut mesh = match format {
        MeshFormat::Obj => load_obj(path)?,
        MeshFormat::Ply => load_ply(path)?,
        MeshFormat::Auto => unreachable!(),
    };
    mesh.drop_degenerate();
    if mesh.dropped_degenerate > 0 {
        log::warn!(
            "{}: dropped {} degenerate faces",
            path.display(),
            mesh.dropped_degenerate
        );
    }
    if mesh.faces.is_empty() {
        return Err(Error::EmptyMesh);
    }
    mesh.validate()?;
    Ok(mesh)
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

fn load_obj(path: &Path) -> Result<TriMesh> {
    let file = File::open(path)?;
    let reader = BufReader::new(file);
    let mut vertices: Vec<[f64; 3]> = Vec::new();
    let mut vertex_colors: Vec<Option<[f64; 3]>> = Vec::new();
    let mut faces: Vec<[u32; 3]> = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = lineno + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut parts = trimmed.split_whitespace();
        match parts.next() {
            Some("v") => {
                let nums: Vec<f64> = parts
                    .map(|p| {
                        p.parse::<f64>()
                            .map_err(|_| parse_err(path, lineno, format!("bad number '{}'", p)))
                    })
                    .collect::<Result<_>>()?;
                match nums.len() {
                    3 => {
                        vertices.push([nums[0], nums[1], nums[2]]);
                        vertex_colors.push(None);
                    }
                    6 => {
                        vertices.push([nums[0], nums[1], nums[2]]);
                        vertex_colors.push(Some([nums[3], nums[4], nums[5]]));
                    }
                    n => {
                        return Err(parse_err(
                            path,
                            lineno,
                            format!("vertex needs 3 or 6 numbers, got {}", n),
                        ))
                    }
                }
            }
            Some("f") => {
                let idx: Vec<u32> = parts
                    .map(|p| {
                        // accept v, v/vt, v/vt/vn, v//vn; only the vertex index is used
                        let v = p.split('/').next().unwrap_or(p);
                        let i = v.parse::<i64>().map_err(|_| {
                            parse_err(path, lineno, format!("bad face index '{}'", p))
                        })?;
                        if i < 1 {
                            return Err(parse_err(
                                path,
                                lineno,
                                format!("face index {} must be >= 1", i),
                            ));
                        }
                        Ok((i - 1) as u32)
                    })
                    .collect::<Result<_>>()?;
                if idx.len() != 3 {
                    return Err(parse_err(
                        path,
                        lineno,
                        format!("only triangles supported, face has {} vertices", idx.len()),
                    ));
                }
                for &i in &idx {
                    if i as usize >= vertices.len() {
                        return Err(parse_err(
                            path,
                            lineno,
                            format!("face references vertex {} of {}", i + 1, vertices.len()),
                        ));
                    }
                }
                if idx[0] == idx[1] || idx[1] == idx[2] || idx[0] == idx[2] {
                    return Err(parse_err(path, lineno, "face repeats a vertex"));
                }
                faces.push([idx[0], idx[1], idx[2]]);
            }
            _ => {} // ignore normals, texcoords, groups, materials
        }
    }
    let any_colors = vertex_colors.iter().any(|c| c.is_some());
    let face_colors = if any_colors {
        let mut colors = Vec::with_capacity(faces.len());
        for f in &faces {
            let mut rgb = [0.0f64; 3];
            for &vi in f {
                let c = vertex_colors[vi as usize].unwrap_or([0.0; 3]);
                rgb[0] += c[0];
                rgb[1] += c[1];
                rgb[2] += c[2];
            }
            for v in rgb.iter_mut() {
                *v = (*v / 3.0).clamp(0.0, 1.0);
            }
            colors.push(rgb_to_hsv(rgb)?);
        }
        Some(colors)
    } else {
        None
    };
    Ok(TriMesh {
        vertices,
        faces,
        face_colors,
        face_labels: None,
        dropped_degenerate: 0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PlyType {
    Char,
    UChar,
    Short,
    UShort,
    Int,
    UInt,
    Float,
    Double,
}

impl PlyType {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => PlyType::Char,
            "uchar" | "uint8" => PlyType::UChar,
            "short" | "int16" => PlyType::Short,
            "ushort" | "uint16" => PlyType::UShort,
            "int" | "int32" => PlyType::Int,
            "uint" | "uint32" => PlyType::UInt,
            "float" | "float32" => PlyType::Float,
            "double" | "float64" => PlyType::Double,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            PlyType::Char | PlyType::UChar => 1,
            PlyType::Short | PlyType::UShort => 2,
            PlyType::Int | PlyType::UInt | PlyType::Float => 4,
            PlyType::Double => 8,
        }
    }
}

#[derive(Debug, Clone)]
enum PlyProp {
    Scalar(String, PlyType),
    List(String, PlyType, PlyType),
}

#[derive(Debug, Clone)]
struct PlyElement {
    name: String,
    count: usize,
    props: Vec<PlyProp>,
}

fn read_binary_scalar(buf: &[u8], pos: &mut usize, ty: PlyType) -> Result<f64> {
    let size = ty.size();
    if *pos + size > buf.len() {
        return Err(Error::Parse {
            path: "<ply>".into(),
            line: 0,
            msg: "unexpected end of binary payload".into(),
        });
    }
    let bytes = &buf[*pos..*pos + size];
    *pos += size;
    Ok(match ty {
        PlyType::Char => bytes[0] as i8 as f64,
        PlyType::UChar => bytes[0] as f64,
        PlyType::Short => i16::from_le_bytes([bytes[0], bytes[1]]) as f64,
        PlyType::UShort => u16::from_le_bytes([bytes[0], bytes[1]]) as f64,
        PlyType::Int => i32::from_le_bytes(bytes.try_into().unwrap()) as f64,
        PlyType::UInt => u32::from_le_bytes(bytes.try_into().unwrap()) as f64,
        PlyType::Float => f32::from_le_bytes(bytes.try_into().unwrap()) as f64,
        PlyType::Double => f64::from_le_bytes(bytes.try_into().unwrap()),
    })
}

fn load_ply(path: &Path) -> Result<TriMesh> {
    let mut raw = Vec::new();
    File::open(path)?.read_to_end(&mut raw)?;
    // header is ascii lines terminated by end_header
    let header_end = {
        let needle = b"end_header\n";
        raw.windows(needle.len())
            .position(|w| w == needle)
            .map(|p| p + needle.len())
            .ok_or_else(|| parse_err(path, 0, "missing end_header"))?
    };
    let header = std::str::from_utf8(&raw[..header_end])
        .map_err(|_| parse_err(path, 0, "header is not utf-8"))?;
    let mut lines = header.lines().enumerate();
    match lines.next() {
        Some((_, "ply")) => {}
        _ => return Err(parse_err(path, 1, "not a PLY file")),
    }
    let mut binary = false;
    let mut elements: Vec<PlyElement> = Vec::new();
    for (lineno, line) in lines {
        let lineno = lineno + 1;
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("format") => match parts.next() {
                Some("ascii") => binary = false,
                Some("binary_little_endian") => binary = true,
                other => {
                    return Err(Error::UnsupportedFormat(format!(
                        "ply format {:?}",
                        other.unwrap_or("<missing>")
                    )))
                }
            },
            Some("comment") | Some("obj_info") => {}
            Some("element") => {
                let name = parts
                    .next()
                    .ok_or_else(|| parse_err(path, lineno, "element needs a name"))?;
                let count: usize = parts
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| parse_err(path, lineno, "element needs a count"))?;
                elements.push(PlyElement {
                    name: name.to_string(),
                    count,
                    props: Vec::new(),
                });
            }
            Some("property") => {
                let element = elements
                    .last_mut()
                    .ok_or_else(|| parse_err(path, lineno, "property before element"))?;
                let first = parts
                    .next()
                    .ok_or_else(|| parse_err(path, lineno, "property needs a type"))?;
                if first == "list" {
                    let count_ty = parts
                        .next()
                        .and_then(PlyType::parse)
                        .ok_or_else(|| parse_err(path, lineno, "bad list count type"))?;
                    let item_ty = parts
                        .next()
                        .and_then(PlyType::parse)
                        .ok_or_else(|| parse_err(path, lineno, "bad list item type"))?;
                    let name = parts
                        .next()
                        .ok_or_else(|| parse_err(path, lineno, "list needs a name"))?;
                    element
                        .props
                        .push(PlyProp::List(name.to_string(), count_ty, item_ty));
                } else {
                    let ty = PlyType::parse(first)
                        .ok_or_else(|| parse_err(path, lineno, format!("bad type '{}'", first)))?;
                    let name = parts
                        .next()
                        .ok_or_else(|| parse_err(path, lineno, "property needs a name"))?;
                    element.props.push(PlyProp::Scalar(name.to_string(), ty));
                }
            }
            Some("end_header") => break,
            Some(other) => {
                return Err(parse_err(path, lineno, format!("unknown keyword '{}'", other)))
            }
            None => {}
        }
    }

    // Parse element payloads into named scalar streams; face lists are kept
    // separately. Values are f64 for uniformity.
    let body = &raw[header_end..];
    let mut pos = 0usize;
    let mut ascii_tokens: Vec<&str> = Vec::new();
    let mut token_idx = 0usize;
    if !binary {
        let text = std::str::from_utf8(body)
            .map_err(|_| parse_err(path, 0, "ascii payload is not utf-8"))?;
        ascii_tokens = text.split_whitespace().collect();
    }
    let mut next_value = |ty: PlyType| -> Result<f64> {
        if binary {
            read_binary_scalar(body, &mut pos, ty)
        } else {
            let tok = ascii_tokens
                .get(token_idx)
                .ok_or_else(|| parse_err(path, 0, "unexpected end of ascii payload"))?;
            token_idx += 1;
            tok.parse::<f64>()
                .map_err(|_| parse_err(path, 0, format!("bad number '{}'", tok)))
        }
    };

    let mut vertices: Vec<[f64; 3]> = Vec::new();
    let mut faces: Vec<[u32; 3]> = Vec::new();
    let mut face_rgb: Vec<[f64; 3]> = Vec::new();
    let mut face_labels: Vec<u16> = Vec::new();
    let mut has_face_color = false;
    let mut has_face_label = false;

    for element in &elements {
        match element.name.as_str() {
            "vertex" => {
                for _ in 0..element.count {
                    let mut xyz = [f64::NAN; 3];
                    for prop in &element.props {
                        match prop {
                            PlyProp::Scalar(name, ty) => {
                                let v = next_value(*ty)?;
                                match name.as_str() {
                                    "x" => xyz[0] = v,
                                    "y" => xyz[1] = v,
                                    "z" => xyz[2] = v,
                                    _ => {}
                                }
                            }
                            PlyProp::List(_, count_ty, item_ty) => {
                                let n = next_value(*count_ty)? as usize;
                                for _ in 0..n {
                                    next_value(*item_ty)?;
                                }
                            }
                        }
                    }
                    if xyz.iter().any(|v| v.is_nan()) {
                        return Err(parse_err(path, 0, "vertex missing x/y/z"));
                    }
                    vertices.push(xyz);
                }
            }
            "face" => {
                has_face_color = element.props.iter().any(
                    |p| matches!(p, PlyProp::Scalar(name, _) if name == "red"),
                );
                has_face_label = element.props.iter().any(
                    |p| matches!(p, PlyProp::Scalar(name, _) if name == "label"),
                );
                for _ in 0..element.count {
                    let mut idx: Option<Vec<u32>> = None;
                    let mut rgb = [0.0f64; 3];
                    let mut label = 0u16;
                    for prop in &element.props {
                        match prop {
                            PlyProp::List(name, count_ty, item_ty) => {
                                let n = next_value(*count_ty)? as usize;
                                let mut items = Vec::with_capacity(n);
                                for _ in 0..n {
                                    items.push(next_value(*item_ty)? as i64);
                                }
                                if name == "vertex_indices" || name == "vertex_index" {
                                    if items.len() != 3 {
                                        return Err(parse_err(
                                            path,
                                            0,
                                            format!(
                                                "only triangles supported, face has {} vertices",
                                                items.len()
                                            ),
                                        ));
                                    }
                                    let v: Vec<u32> = items
                                        .iter()
                                        .map(|&i| {
                                            if i < 0 || i as usize >= vertices.len() {
                                                Err(parse_err(
                                                    path,
                                                    0,
                                                    format!("face index {} out of range", i),
                                                ))
                                            } else {
                                                Ok(i as u32)
                                            }
                                        })
                                        .collect::<Result<_>>()?;
                                    idx = Some(v);
                                }
                            }
                            PlyProp::Scalar(name, ty) => {
                                let v = next_value(*ty)?;
                                match name.as_str() {
                                    "red" => rgb[0] = v / 255.0,
                                    "green" => rgb[1] = v / 255.0,
                                    "blue" => rgb[2] = v / 255.0,
                                    "label" => label = v as u16,
                                    _ => {}
                                }
                            }
                        }
                    }
                    let idx =
                        idx.ok_or_else(|| parse_err(path, 0, "face missing vertex_indices"))?;
                    if idx[0] == idx[1] || idx[1] == idx[2] || idx[0] == idx[2] {
                        return Err(parse_err(path, 0, "face repeats a vertex"));
                    }
                    faces.push([idx[0], idx[1], idx[2]]);
                    if has_face_color {
                        face_rgb.push(rgb);
                    }
                    if has_face_label {
                        face_labels.push(label);
                    }
                }
            }
            _ => {
                // skip unknown elements
                for _ in 0..element.count {
                    for prop in &element.props {
                        match prop {
                            PlyProp::Scalar(_, ty) => {
                                next_value(*ty)?;
                            }
                            PlyProp::List(_, count_ty, item_ty) => {
                                let n = next_value(*count_ty)? as usize;
                                for _ in 0..n {
                                    next_value(*item_ty)?;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    let face_colors = if has_face_color {
        Some(
            face_rgb
                .into_iter()
                .map(|rgb| rgb_to_hsv([rgb[0].clamp(0.0, 1.0), rgb[1].clamp(0.0, 1.0), rgb[2].clamp(0.0, 1.0)]))
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };
    Ok(TriMesh {
        vertices,
        faces,
        face_colors,
        face_labels: if has_face_label { Some(face_labels) } else { None },
        dropped_degenerate: 0,
    })
}

/// Write a mesh as binary-little-endian PLY. Positions are stored as
/// doubles; HSV colors are converted back to RGB uchar; labels as ushort.
pub fn save_ply(mesh: &TriMesh, path: &Path) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    let mut header = String::new();
    header.push_str("ply\nformat binary_little_endian 1.0\n");
    header.push_str(&format!("element vertex {}\n", mesh.vertices.len()));
    header.push_str("property double x\nproperty double y\nproperty double z\n");
    header.push_str(&format!("element face {}\n", mesh.faces.len()));
    header.push_str("property list uchar uint vertex_indices\n");
    if mesh.face_colors.is_some() {
        header.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    }
    if mesh.face_labels.is_some() {
        header.push_str("property ushort label\n");
    }
    header.push_str("end_header\n");
    w.write_all(header.as_bytes())?;
    for v in &mesh.vertices {
        for &c in v {
            w.write_all(&c.to_le_bytes())?;
        }
    }
    for (fi, f) in mesh.faces.iter().enumerate() {
        w.write_all(&[3u8])?;
        for &i in f {
            w.write_all(&i.to_le_bytes())?;
        }
        if let Some(colors) = &mesh.face_colors {
            let rgb = hsv_to_rgb(colors[fi]);
            for &c in &rgb {
                w.write_all(&[(c.clamp(0.0, 1.0) * 255.0).round() as u8])?;
            }
        }
        if let Some(labels) = &mesh.face_labels {
            w.write_all(&labels[fi].to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}
