//! Barycentric dual graph construction and the `.bdg` binary format.
//!
//! Nodes sit at face barycenters and carry face features (HSV color and/or
//! unit normal, in that column order); an edge connects two faces exactly
//! when they share one primal edge. Primal edges shared by more than two
//! faces emit all pairwise adjacencies and are counted, not rejected.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::TriMesh;

/// Which feature blocks populate the node feature matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub use_hsv: bool,
    pub use_normals: bool,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        Self {
            use_hsv: true,
            use_normals: true,
        }
    }
}

impl FeatureSpec {
    pub fn feature_dim(&self) -> usize {
        (if self.use_hsv { 3 } else { 0 }) + (if self.use_normals { 3 } else { 0 })
    }

    pub fn bits(&self) -> u8 {
        (self.use_hsv as u8) | ((self.use_normals as u8) << 1)
    }

    pub fn from_bits(bits: u8) -> Self {
        Self {
            use_hsv: bits & 1 != 0,
            use_normals: bits & 2 != 0,
        }
    }

    /// Column offset of the normal block, when present.
    pub fn normal_offset(&self) -> Option<usize> {
        self.use_normals.then(|| if self.use_hsv { 3 } else { 0 })
    }
}

impl std::fmt::Display for FeatureSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mut parts = Vec::new();
        if self.use_hsv {
            parts.push("hsv");
        }
        if self.use_normals {
            parts.push("normals");
        }
        write!(f, "{}", parts.join("+"))
    }
}

/// Barycentric dual graph of a triangle mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct DualGraph {
    /// Node positions (face barycenters), N x 3.
    pub positions: Vec<[f64; 3]>,
    /// Row-major N x C node feature matrix.
    pub features: Vec<f64>,
    pub feature_dim: usize,
    /// Canonical undirected edges (i < j), sorted, deduplicated.
    pub edges: Vec<(u32, u32)>,
    pub labels: Option<Vec<u16>>,
    pub feature_spec: FeatureSpec,
    /// HSV block was zero-filled because the mesh had no colors.
    pub color_zero_filled: bool,
    /// Primal edges shared by more than two faces.
    pub non_manifold_edges: usize,
}

impl DualGraph {
    pub fn node_count(&self) -> usize {
        self.positions.len()
    }

    pub fn feature_row(&self, i: usize) -> &[f64] {
        &self.features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    pub fn degree_histogram(&self) -> Vec<usize> {
        let mut degree = vec![0usize; self.node_count()];
        for &(a, b) in &self.edges {
            degree[a as usize] += 1;
            degree[b as usize] += 1;
        }
        let max = degree.iter().copied().max().unwrap_or(0);
        let mut hist = vec![0usize; max + 1];
        for d in degree {
            hist[d] += 1;
        }
        hist
    }

    /// Expand canonical pairs to both directions for message passing.
    pub fn directed_edges(&self) -> Vec<(u32, u32)> {
        let mut out = Vec::with_capacity(self.edges.len() * 2);
        for &(a, b) in &self.edges {
            out.push((a, b));
            out.push((b, a));
        }
        out
    }
}

/// Pairs of faces sharing exactly one primal edge, canonical and sorted,
/// plus the count of non-manifold primal edges encountered.
pub fn face_adjacency(mesh: &TriMesh) -> (Vec<(u32, u32)>, usize) {
    let mut edge_faces: BTreeMap<(u32, u32), Vec<u32>> = BTreeMap::new();
    for (fi, f) in mesh.faces.iter().enumerate() {
        for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[0], f[2])] {
            let key = (a.min(b), a.max(b));
            edge_faces.entry(key).or_default().push(fi as u32);
        }
    }
    let mut non_manifold = 0usize;
    let mut pair_counts: BTreeMap<(u32, u32), u32> = BTreeMap::new();
    for faces in edge_faces.values() {
        if faces.len() > 2 {
            non_manifold += 1;
        }
        for i in 0..faces.len() {
            for j in (i + 1)..faces.len() {
                let (a, b) = (faces[i].min(faces[j]), faces[i].max(faces[j]));
                *pair_counts.entry((a, b)).or_insert(0) += 1;
            }
        }
    }
    let pairs = pair_counts
        .into_iter()
        .filter(|&(_, count)| count == 1)
        .map(|(pair, _)| pair)
        .collect();
    (pairs, non_manifold)
}

/// Build the dual graph; features are the enabled blocks in [HSV, normal]
/// column order. Faces must be non-degenerate (normals are taken).
pub fn build_dual(mesh: &TriMesh, spec: FeatureSpec) -> Result<DualGraph> {
    if mesh.faces.is_empty() {
        return Err(Error::EmptyMesh);
    }
    if spec.feature_dim() == 0 {
        return Err(Error::InvalidFeatureSpec);
    }
    let n = mesh.face_count();
    let c = spec.feature_dim();
    let mut positions = Vec::with_capacity(n);
    let mut features = vec![0.0f64; n * c];
    let color_zero_filled = spec.use_hsv && mesh.face_colors.is_none();
    if color_zero_filled {
        log::warn!("mesh has no colors; HSV feature block zero-filled");
    }
    for fi in 0..n {
        positions.push(mesh.face_barycenter(fi));
        let row = &mut features[fi * c..(fi + 1) * c];
        let mut offset = 0;
        if spec.use_hsv {
            if let Some(colors) = &mesh.face_colors {
                row[..3].copy_from_slice(&colors[fi]);
            }
            offset = 3;
        }
        if spec.use_normals {
            let normal = mesh.face_normal(fi)?;
            row[offset..offset + 3].copy_from_slice(&normal);
        }
    }
    let (edges, non_manifold_edges) = face_adjacency(mesh);
    Ok(DualGraph {
        positions,
        features,
        feature_dim: c,
        edges,
        labels: mesh.face_labels.clone(),
        feature_spec: spec,
        color_zero_filled,
        non_manifold_edges,
    })
}

/// Translate by the centroid and scale uniformly by the largest absolute
/// coordinate so every component lands in [-1, 1]. Features untouched.
pub fn normalize_scale(graph: &DualGraph) -> DualGraph {
    let n = graph.node_count();
    let mut centroid = [0.0f64; 3];
    for p in &graph.positions {
        for (c, &v) in centroid.iter_mut().zip(p) {
            *c += v;
        }
    }
    for c in centroid.iter_mut() {
        *c /= n.max(1) as f64;
    }
    let mut max_abs = 0.0f64;
    for p in &graph.positions {
        for (i, &v) in p.iter().enumerate() {
            max_abs = max_abs.max((v - centroid[i]).abs());
        }
    }
    let scale = if max_abs > 0.0 { 1.0 / max_abs } else { 1.0 };
    let positions = graph
        .positions
        .iter()
        .map(|p| {
            [
                (p[0] - centroid[0]) * scale,
                (p[1] - centroid[1]) * scale,
                (p[2] - centroid[2]) * scale,
            ]
        })
        .collect();
    DualGraph {
        positions,
        ..graph.clone()
    }
}

const BDG_MAGIC: &[u8; 4] = b"BDG1";
const FLAG_HAS_LABELS: u8 = 1 << 2;
const FLAG_COLOR_ZERO_FILLED: u8 = 1 << 3;

/// Write the binary graph format: magic "BDG1", little-endian header
/// (N, C, edge count, flags), then positions (f32), features (f32),
/// edges (u32 pairs), optional labels (u16).
pub fn save_bdg(graph: &DualGraph, path: &Path) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(BDG_MAGIC)?;
    w.write_all(&(graph.node_count() as u32).to_le_bytes())?;
    w.write_all(&(graph.feature_dim as u32).to_le_bytes())?;
    w.write_all(&(graph.edges.len() as u32).to_le_bytes())?;
    let mut flags = graph.feature_spec.bits();
    if graph.labels.is_some() {
        flags |= FLAG_HAS_LABELS;
    }
    if graph.color_zero_filled {
        flags |= FLAG_COLOR_ZERO_FILLED;
    }
    w.write_all(&[flags])?;
    for p in &graph.positions {
        for &v in p {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    for &v in &graph.features {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    for &(a, b) in &graph.edges {
        w.write_all(&a.to_le_bytes())?;
        w.write_all(&b.to_le_bytes())?;
    }
    if let Some(labels) = &graph.labels {
        for &l in labels {
            w.write_all(&l.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_bdg(path: &Path) -> Result<DualGraph> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != BDG_MAGIC {
        return Err(Error::Parse {
            path: path.display().to_string(),
            line: 0,
            msg: "bad magic, not a .bdg file".into(),
        });
    }
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4)?;
    let n = u32::from_le_bytes(buf4) as usize;
    r.read_exact(&mut buf4)?;
    let c = u32::from_le_bytes(buf4) as usize;
    r.read_exact(&mut buf4)?;
    let e = u32::from_le_bytes(buf4) as usize;
    let mut flag_byte = [0u8; 1];
    r.read_exact(&mut flag_byte)?;
    let spec = FeatureSpec::from_bits(flag_byte[0]);
    if spec.feature_dim() != c {
        return Err(Error::Parse {
            path: path.display().to_string(),
            line: 0,
            msg: format!("feature dim {} disagrees with spec {}", c, spec),
        });
    }
    let read_f32 = |r: &mut BufReader<File>| -> Result<f64> {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        Ok(f32::from_le_bytes(b) as f64)
    };
    let mut positions = Vec::with_capacity(n);
    for _ in 0..n {
        positions.push([read_f32(&mut r)?, read_f32(&mut r)?, read_f32(&mut r)?]);
    }
    let mut features = Vec::with_capacity(n * c);
    for _ in 0..n * c {
        features.push(read_f32(&mut r)?);
    }
    let mut edges = Vec::with_capacity(e);
    for _ in 0..e {
        let mut a = [0u8; 4];
        let mut b = [0u8; 4];
        r.read_exact(&mut a)?;
        r.read_exact(&mut b)?;
        edges.push((u32::from_le_bytes(a), u32::from_le_bytes(b)));
    }
    let labels = if flag_byte[0] & FLAG_HAS_LABELS != 0 {
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let mut b = [0u8; 2];
            r.read_exact(&mut b)?;
            labels.push(u16::from_le_bytes(b));
        }
        Some(labels)
    } else {
        None
    };
    Ok(DualGraph {
        positions,
        features,
        feature_dim: c,
        edges,
        labels,
        feature_spec: spec,
        color_zero_filled: flag_byte[0] & FLAG_COLOR_ZERO_FILLED != 0,
        non_manifold_edges: 0,
    })
}
