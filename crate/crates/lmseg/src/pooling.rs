//! Pooling hierarchy: random node sub-sampling, exact k-NN over a kd-tree,
//! edge similarity pooling, hierarchical edges, and the FPS baseline kept
//! for the sampling benchmark.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

/// One level of the pooling hierarchy.
#[derive(Debug, Clone)]
pub struct LevelGraph {
    /// Positions of the surviving nodes, S x 3.
    pub positions: Vec<[f64; 3]>,
    /// For each survivor, its index in the parent level. Distinct, ascending.
    pub parent_index: Vec<u32>,
    /// Parent edges with both endpoints surviving, re-indexed, canonical.
    pub edges_sparse: Vec<(u32, u32)>,
    /// Sparse edges plus similarity-filtered k-NN edges, canonical.
    pub edges_local: Vec<(u32, u32)>,
    /// Directed survivor -> parent-level k-NN links.
    pub edges_hier: Vec<(u32, u32)>,
    pub level: u32,
    /// Survivors left without any local edge after pooling.
    pub isolated: usize,
}

impl LevelGraph {
    pub fn node_count(&self) -> usize {
        self.positions.len()
    }

    pub fn directed_local_edges(&self) -> Vec<(u32, u32)> {
        let mut out = Vec::with_capacity(self.edges_local.len() * 2);
        for &(a, b) in &self.edges_local {
            out.push((a, b));
            out.push((b, a));
        }
        out
    }
}

fn dist_sq(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Uniform sub-sample of `max(1, floor(ratio * n))` nodes without
/// replacement via partial Fisher-Yates; parent edges touching removed
/// nodes are collapsed, surviving ones re-indexed. O(N + E).
pub fn random_subsample(
    positions: &[[f64; 3]],
    edges: &[(u32, u32)],
    ratio: f64,
    seed: u64,
    level: u32,
) -> LevelGraph {
    let n = positions.len();
    assert!(n >= 1, "subsample needs at least one node");
    assert!(ratio > 0.0 && ratio <= 1.0, "ratio must be in (0, 1]");
    // the small nudge absorbs representation error in ratios like 1/3
    let s = ((ratio * n as f64 + 1e-9).floor() as usize).clamp(1, n);
    let mut pool: Vec<u32> = (0..n as u32).collect();
    let mut rng = rng_from_seed(seed);
    for i in 0..s {
        let j = i + rng.gen_range(0..n - i);
        pool.swap(i, j);
    }
    let mut parent_index: Vec<u32> = pool[..s].to_vec();
    parent_index.sort_unstable();
    // old index -> new index lookup
    let mut remap = vec![u32::MAX; n];
    for (new, &old) in parent_index.iter().enumerate() {
        remap[old as usize] = new as u32;
    }
    let mut edges_sparse = Vec::new();
    for &(a, b) in edges {
        let (ra, rb) = (remap[a as usize], remap[b as usize]);
        if ra != u32::MAX && rb != u32::MAX {
            edges_sparse.push((ra.min(rb), ra.max(rb)));
        }
    }
    edges_sparse.sort_unstable();
    edges_sparse.dedup();
    let new_positions = parent_index
        .iter()
        .map(|&i| positions[i as usize])
        .collect();
    LevelGraph {
        positions: new_positions,
        parent_index,
        edges_sparse,
        edges_local: Vec::new(),
        edges_hier: Vec::new(),
        level,
        isolated: 0,
    }
}

/// Greedy farthest-point sampling from a seeded random start; O(count * N).
/// Kept as the benchmark foil for the complexity comparison.
pub fn fps_subsample(positions: &[[f64; 3]], count: usize, seed: u64) -> Vec<u32> {
    let n = positions.len();
    assert!(count <= n, "count must not exceed point count");
    if count == 0 {
        return Vec::new();
    }
    let mut rng = rng_from_seed(seed);
    let first = rng.gen_range(0..n);
    let mut chosen = Vec::with_capacity(count);
    chosen.push(first as u32);
    let mut min_dist: Vec<f64> = positions
        .iter()
        .map(|p| dist_sq(p, &positions[first]))
        .collect();
    while chosen.len() < count {
        let mut best = 0usize;
        let mut best_d = -1.0;
        for (i, &d) in min_dist.iter().enumerate() {
            if d > best_d {
                best_d = d;
                best = i;
            }
        }
        chosen.push(best as u32);
        let bp = positions[best];
        for (i, d) in min_dist.iter_mut().enumerate() {
            let nd = dist_sq(&positions[i], &bp);
            if nd < *d {
                *d = nd;
            }
        }
    }
    chosen
}

/// kd-tree over 3D points with exact (distance, index) ordering, so results
/// match a brute-force scan bit for bit, ties included.
struct KdTree<'a> {
    points: &'a [[f64; 3]],
    /// point indices, partitioned recursively
    order: Vec<u32>,
    nodes: Vec<KdNode>,
}

struct KdNode {
    /// range into `order`
    start: usize,
    end: usize,
    axis: usize,
    split: f64,
    left: usize,
    right: usize,
    leaf: bool,
}

const KD_LEAF: usize = 16;

impl<'a> KdTree<'a> {
    fn build(points: &'a [[f64; 3]]) -> Self {
        let mut order: Vec<u32> = (0..points.len() as u32).collect();
        let mut nodes = Vec::new();
        if !points.is_empty() {
            Self::build_node(points, &mut order, 0, points.len(), &mut nodes);
        }
        Self {
            points,
            order,
            nodes,
        }
    }

    fn build_node(
        points: &[[f64; 3]],
        order: &mut [u32],
        start: usize,
        end: usize,
        nodes: &mut Vec<KdNode>,
    ) -> usize {
        let id = nodes.len();
        nodes.push(KdNode {
            start,
            end,
            axis: 0,
            split: 0.0,
            left: usize::MAX,
            right: usize::MAX,
            leaf: true,
        });
        if end - start <= KD_LEAF {
            return id;
        }
        // split on the axis with largest extent
        let slice = &order[start..end];
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &i in slice {
            let p = &points[i as usize];
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let axis = (0..3)
            .max_by(|&a, &b| (hi[a] - lo[a]).partial_cmp(&(hi[b] - lo[b])).unwrap())
            .unwrap();
        if hi[axis] - lo[axis] <= 0.0 {
            return id; // all points coincide; stay a leaf
        }
        let mid = (end - start) / 2;
        order[start..end].select_nth_unstable_by(mid, |&a, &b| {
            points[a as usize][axis]
                .partial_cmp(&points[b as usize][axis])
                .unwrap()
                .then(a.cmp(&b))
        });
        let split = points[order[start + mid] as usize][axis];
        let left = Self::build_node(points, order, start, start + mid, nodes);
        let right = Self::build_node(points, order, start + mid, end, nodes);
        let node = &mut nodes[id];
        node.axis = axis;
        node.split = split;
        node.left = left;
        node.right = right;
        node.leaf = false;
        id
    }

    /// k nearest to `query`, ordered by (distance^2, index); `exclude` skips
    /// the query's own index for self-set searches.
    fn nearest(&self, query: &[f64; 3], k: usize, exclude: Option<u32>) -> Vec<(f64, u32)> {
        let mut best: Vec<(f64, u32)> = Vec::with_capacity(k + 1);
        if self.nodes.is_empty() || k == 0 {
            return best;
        }
        self.search(0, query, k, exclude, &mut best);
        best
    }

    fn consider(best: &mut Vec<(f64, u32)>, k: usize, cand: (f64, u32)) {
        let pos = best.partition_point(|&(d, i)| (d, i) < cand);
        if pos < k {
            best.insert(pos, cand);
            if best.len() > k {
                best.pop();
            }
        }
    }

    fn search(
        &self,
        node_id: usize,
        query: &[f64; 3],
        k: usize,
        exclude: Option<u32>,
        best: &mut Vec<(f64, u32)>,
    ) {
        let node = &self.nodes[node_id];
        if node.leaf {
            for &i in &self.order[node.start..node.end] {
                if exclude == Some(i) {
                    continue;
                }
                let d = dist_sq(query, &self.points[i as usize]);
                if best.len() < k || (d, i) < *best.last().unwrap() {
                    Self::consider(best, k, (d, i));
                }
            }
            return;
        }
        let delta = query[node.axis] - node.split;
        let (near, far) = if delta < 0.0 {
            (node.left, node.right)
        } else {
            (node.right, node.left)
        };
        self.search(near, query, k, exclude, best);
        // explore the far side unless it provably cannot improve; equality
        // must still be explored so ties resolve to the lower index
        let plane_d = delta * delta;
        if best.len() < k || plane_d <= best.last().unwrap().0 {
            self.search(far, query, k, exclude, best);
        }
    }
}

/// Directed k-NN edges from each query to its k nearest references
/// (Euclidean; ties to the lower reference index). When `self_set` is true
/// the query set is the reference set and self matches are excluded.
pub fn knn_edges(
    query_positions: &[[f64; 3]],
    ref_positions: &[[f64; 3]],
    k: usize,
    self_set: bool,
) -> Result<Vec<(u32, u32)>> {
    let capacity = if self_set {
        ref_positions.len().saturating_sub(1)
    } else {
        ref_positions.len()
    };
    if k > capacity {
        return Err(Error::KTooLarge {
            k,
            n: capacity,
        });
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let tree = KdTree::build(ref_positions);
    let mut edges = Vec::with_capacity(query_positions.len() * k);
    for (qi, q) in query_positions.iter().enumerate() {
        let exclude = self_set.then_some(qi as u32);
        for (_, ri) in tree.nearest(q, k, exclude) {
            edges.push((qi as u32, ri));
        }
    }
    Ok(edges)
}

/// Cosine similarity with a norm floor; zero vectors compare as 0.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    dot / (na.sqrt() * nb.sqrt()).max(1e-12)
}

/// Append symmetrized k-NN edges to the sparse edges, then drop appended
/// edges whose endpoint features fall below the similarity threshold.
/// Surviving parent edges are never dropped. Updates `edges_local` and the
/// isolated-survivor counter.
pub fn edge_similarity_pool(
    level: &mut LevelGraph,
    node_features: &[f64],
    feature_dim: usize,
    k: usize,
    threshold: f64,
) -> Result<()> {
    let s = level.node_count();
    if node_features.len() != s * feature_dim {
        return Err(Error::LengthMismatch {
            left: node_features.len(),
            right: s * feature_dim,
        });
    }
    let k_eff = k.min(s.saturating_sub(1));
    let mut local: Vec<(u32, u32)> = level.edges_sparse.clone();
    if k_eff > 0 {
        let knn = knn_edges(&level.positions, &level.positions, k_eff, true)?;
        let sparse_set: std::collections::BTreeSet<(u32, u32)> =
            level.edges_sparse.iter().copied().collect();
        for (a, b) in knn {
            let pair = (a.min(b), a.max(b));
            if sparse_set.contains(&pair) {
                continue;
            }
            let fa = &node_features[a as usize * feature_dim..(a as usize + 1) * feature_dim];
            let fb = &node_features[b as usize * feature_dim..(b as usize + 1) * feature_dim];
            if cosine_similarity(fa, fb) >= threshold {
                local.push(pair);
            }
        }
    }
    local.sort_unstable();
    local.dedup();
    let mut has_edge = vec![false; s];
    for &(a, b) in &local {
        has_edge[a as usize] = true;
        has_edge[b as usize] = true;
    }
    level.isolated = has_edge.iter().filter(|&&h| !h).count();
    level.edges_local = local;
    Ok(())
}

/// Directed edges from each survivor to its k nearest parent-level nodes.
/// The survivor's own parent instance is a legitimate neighbor at
/// distance 0, so self matches are not excluded.
pub fn hierarchical_edges(
    level: &mut LevelGraph,
    parent_positions: &[[f64; 3]],
    k: usize,
) -> Result<()> {
    if k > parent_positions.len() {
        return Err(Error::KTooLarge {
            k,
            n: parent_positions.len(),
        });
    }
    level.edges_hier = knn_edges(&level.positions, parent_positions, k, false)?;
    Ok(())
}
