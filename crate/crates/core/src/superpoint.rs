//! Superpoint over-segmentation, label transfer onto voxels and k-NN over
//! superpoint centroids.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::scene::{PointCloud, Scene};
use crate::spatial::{dist2, KdTree};

/// Dense per-point superpoint labels in `[0, count)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SuperpointPartition {
    pub point_labels: Vec<usize>,
    pub count: usize,
}

impl SuperpointPartition {
    /// Relabels arbitrary ids to `[0, L)` preserving their numeric order.
    pub fn from_raw_labels<T: Copy + Ord>(raw: &[T]) -> Self {
        let mut unique: Vec<T> = raw.to_vec();
        unique.sort_unstable();
        unique.dedup();
        let point_labels = raw
            .iter()
            .map(|v| unique.binary_search(v).expect("value came from the same list"))
            .collect();
        Self {
            point_labels,
            count: unique.len(),
        }
    }

    /// Member count per superpoint.
    pub fn sizes(&self) -> Vec<usize> {
        let mut out = vec![0; self.count];
        for &l in &self.point_labels {
            out[l] += 1;
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegmentConfig {
    /// Neighbours per point in the similarity graph.
    pub graph_k: usize,
    /// Merge constant: a component of size `n` tolerates edges up to
    /// `internal difference + merge_threshold / n`.
    pub merge_threshold: f64,
    /// Edge weight per meter of distance, added to the color distance.
    pub beta_pos: f64,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        Self {
            graph_k: 10,
            merge_threshold: 2.0,
            beta_pos: 1.0,
        }
    }
}

struct UnionFind {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            size: vec![1; n],
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    /// Joins two roots; the larger set (then the smaller id) stays root.
    fn union(&mut self, a: usize, b: usize) -> usize {
        let (keep, drop) = match self.size[a].cmp(&self.size[b]) {
            std::cmp::Ordering::Greater => (a, b),
            std::cmp::Ordering::Less => (b, a),
            std::cmp::Ordering::Equal => (a.min(b), a.max(b)),
        };
        self.parent[drop] = keep;
        self.size[keep] += self.size[drop];
        keep
    }

    fn dense_labels(&mut self) -> (Vec<usize>, usize) {
        let n = self.parent.len();
        let mut id = HashMap::new();
        let labels = (0..n)
            .map(|i| {
                let r = self.find(i);
                let next = id.len();
                *id.entry(r).or_insert(next)
            })
            .collect();
        (labels, id.len())
    }
}

#[derive(Clone, Copy, Debug)]
struct Edge {
    w: f64,
    i: usize,
    j: usize,
}

fn edge(cloud: &PointCloud, beta_pos: f64, a: usize, b: usize) -> Edge {
    let (i, j) = (a.min(b), a.max(b));
    let dc = dist2(cloud.color(i), cloud.color(j)).sqrt();
    let dp = dist2(cloud.position(i), cloud.position(j)).sqrt();
    Edge { w: dc + beta_pos * dp, i, j }
}

/// Adds the shortest (by position) bridge out of every component until the
/// graph is connected.
fn bridge_components(cloud: &PointCloud, beta_pos: f64, edges: &mut Vec<Edge>) {
    let n = cloud.len();
    let mut uf = UnionFind::new(n);
    for e in edges.iter() {
        let (a, b) = (uf.find(e.i), uf.find(e.j));
        if a != b {
            uf.union(a, b);
        }
    }
    loop {
        let roots: Vec<usize> = (0..n).map(|i| uf.find(i)).collect();
        let mut best: HashMap<usize, (f64, usize, usize)> = HashMap::new();
        for i in 0..n {
            for j in (i + 1)..n {
                if roots[i] == roots[j] {
                    continue;
                }
                let d = dist2(cloud.position(i), cloud.position(j));
                for r in [roots[i], roots[j]] {
                    let cand = (d, i, j);
                    let slot = best.entry(r).or_insert(cand);
                    if d.total_cmp(&slot.0).then((i, j).cmp(&(slot.1, slot.2))).is_lt() {
                        *slot = cand;
                    }
                }
            }
        }
        if best.is_empty() {
            return;
        }
        let mut bridges: Vec<(f64, usize, usize)> = best.into_values().collect();
        bridges.sort_by(|a, b| a.0.total_cmp(&b.0).then((a.1, a.2).cmp(&(b.1, b.2))));
        bridges.dedup_by(|a, b| (a.1, a.2) == (b.1, b.2));
        for (_, i, j) in bridges {
            let (a, b) = (uf.find(i), uf.find(j));
            if a != b {
                uf.union(a, b);
            }
            edges.push(edge(cloud, beta_pos, i, j));
        }
    }
}

/// Felzenszwalb–Huttenlocher merging on the `graph_k`-NN graph of the
/// points, with edge weight `‖Δcolor‖ + β_pos·‖Δposition‖`.
pub fn segment_points(cloud: &PointCloud, config: &SegmentConfig) -> Result<SuperpointPartition> {
    let n = cloud.len();
    if n == 0 {
        return Err(Error::Empty { op: "segment_points" });
    }
    if config.graph_k == 0 {
        return Err(Error::InvalidArgument {
            arg: "graph_k",
            reason: "must be at least 1".into(),
        });
    }
    if config.merge_threshold.is_nan() || config.merge_threshold <= 0.0 {
        return Err(Error::InvalidArgument {
            arg: "merge_threshold",
            reason: format!("must be positive, got {}", config.merge_threshold),
        });
    }
    let positions: Vec<[f64; 3]> = (0..n).map(|i| cloud.position(i)).collect();
    let tree = KdTree::new(positions.clone());
    let mut pairs: Vec<(usize, usize)> = Vec::with_capacity(n * config.graph_k);
    for (i, &p) in positions.iter().enumerate() {
        for (j, _) in tree.nearest(p, config.graph_k, Some(i)) {
            pairs.push((i.min(j), i.max(j)));
        }
    }
    pairs.sort_unstable();
    pairs.dedup();
    let mut edges: Vec<Edge> = pairs.into_iter().map(|(i, j)| edge(cloud, config.beta_pos, i, j)).collect();
    bridge_components(cloud, config.beta_pos, &mut edges);
    edges.sort_by(|a, b| a.w.total_cmp(&b.w).then((a.i, a.j).cmp(&(b.i, b.j))));

    let mut uf = UnionFind::new(n);
    let mut internal = vec![0.0f64; n];
    for e in edges {
        let (a, b) = (uf.find(e.i), uf.find(e.j));
        if a == b {
            continue;
        }
        let tol_a = internal[a] + config.merge_threshold / uf.size[a] as f64;
        let tol_b = internal[b] + config.merge_threshold / uf.size[b] as f64;
        if e.w <= tol_a.min(tol_b) {
            let r = uf.union(a, b);
            internal[r] = e.w;
        }
    }
    let (point_labels, count) = uf.dense_labels();
    Ok(SuperpointPartition { point_labels, count })
}

/// Reads the scene's stored labels, relabeled densely.
pub fn load_partition(scene: &Scene) -> Result<SuperpointPartition> {
    let raw = scene.superpoint_labels.as_ref().ok_or(Error::InvalidArgument {
        arg: "superpoint_labels",
        reason: "scene sidecar has no superpoint labels".into(),
    })?;
    if raw.len() != scene.cloud.len() {
        return Err(Error::shape("load_partition", scene.cloud.len(), raw.len()));
    }
    Ok(SuperpointPartition::from_raw_labels(raw))
}

/// Majority point label per voxel; ties go to the smaller label.
pub fn transfer_to_voxels(point_labels: &[usize], point_to_voxel: &[usize], voxel_count: usize) -> Result<Vec<usize>> {
    if point_labels.len() != point_to_voxel.len() {
        return Err(Error::shape("transfer_to_voxels", point_labels.len(), point_to_voxel.len()));
    }
    let mut pairs: Vec<(usize, usize)> = point_to_voxel.iter().copied().zip(point_labels.iter().copied()).collect();
    if let Some(&(v, _)) = pairs.iter().find(|&&(v, _)| v >= voxel_count) {
        return Err(Error::LabelOutOfRange {
            op: "transfer_to_voxels",
            label: v,
            count: voxel_count,
        });
    }
    pairs.sort_unstable();
    let mut out = vec![usize::MAX; voxel_count];
    let mut best = vec![0usize; voxel_count];
    let mut k = 0;
    while k < pairs.len() {
        let mut end = k;
        while end < pairs.len() && pairs[end] == pairs[k] {
            end += 1;
        }
        let (v, l) = pairs[k];
        // Labels arrive ascending within a voxel, so strict `>` keeps the smaller on ties.
        if end - k > best[v] {
            best[v] = end - k;
            out[v] = l;
        }
        k = end;
    }
    if let Some(v) = out.iter().position(|&l| l == usize::MAX) {
        return Err(Error::InvalidArgument {
            arg: "point_to_voxel",
            reason: format!("voxel {v} has no member points"),
        });
    }
    Ok(out)
}

/// `k` neighbour ids per superpoint, nearest first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighbourTable {
    pub indices: Vec<usize>,
    pub k: usize,
}

impl NeighbourTable {
    pub fn rows(&self) -> usize {
        self.indices.len() / self.k.max(1)
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }
}

/// Euclidean k-NN over centroids excluding self. Rows with fewer than `k`
/// other superpoints are padded with their nearest neighbour, or with self
/// when `L = 1`.
pub fn knn_superpoints(centroids: &[[f64; 3]], k: usize) -> Result<NeighbourTable> {
    if centroids.is_empty() {
        return Err(Error::Empty { op: "knn_superpoints" });
    }
    if k == 0 {
        return Err(Error::InvalidArgument {
            arg: "k",
            reason: "must be at least 1".into(),
        });
    }
    let tree = KdTree::new(centroids.to_vec());
    let mut indices = Vec::with_capacity(centroids.len() * k);
    for (i, &c) in centroids.iter().enumerate() {
        let found: Vec<usize> = tree.nearest(c, k, Some(i)).into_iter().map(|(j, _)| j).collect();
        let pad = found.first().copied().unwrap_or(i);
        indices.extend_from_slice(&found);
        indices.extend(std::iter::repeat(pad).take(k - found.len()));
    }
    Ok(NeighbourTable { indices, k })
}
