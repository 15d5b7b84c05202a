//! Static 3D kd-tree for exact k-nearest-neighbour queries.
//!
//! Candidates are ordered by `(squared distance, index)`, so equidistant
//! points resolve to the smaller index and results never depend on the
//! tree layout.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

const LEAF_SIZE: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq)]
struct Candidate {
    dist2: f64,
    index: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist2.total_cmp(&other.dist2).then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: Box<Node>, right: Box<Node> },
}

#[derive(Debug)]
pub struct KdTree {
    points: Vec<[f64; 3]>,
    order: Vec<usize>,
    root: Node,
}

#[inline]
pub fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]) * (a[i] - b[i])).sum()
}

impl KdTree {
    pub fn new(points: Vec<[f64; 3]>) -> Self {
        let mut order: Vec<usize> = (0..points.len()).collect();
        let root = Self::build(&points, &mut order, 0);
        Self { points, order, root }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn build(points: &[[f64; 3]], order: &mut [usize], offset: usize) -> Node {
        let n = order.len();
        if n <= LEAF_SIZE {
            return Node::Leaf { start: offset, end: offset + n };
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &i in order.iter() {
            for a in 0..3 {
                lo[a] = lo[a].min(points[i][a]);
                hi[a] = hi[a].max(points[i][a]);
            }
        }
        let axis = (0..3).max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b]))).unwrap_or(0);
        let mid = n / 2;
        order.select_nth_unstable_by(mid, |&a, &b| points[a][axis].total_cmp(&points[b][axis]).then(a.cmp(&b)));
        let value = points[order[mid]][axis];
        let (l, r) = order.split_at_mut(mid);
        Node::Split {
            axis,
            value,
            left: Box::new(Self::build(points, l, offset)),
            right: Box::new(Self::build(points, r, offset + mid)),
        }
    }

    /// The `k` nearest points to `query`, nearest first, skipping `exclude`.
    pub fn nearest(&self, query: [f64; 3], k: usize, exclude: Option<usize>) -> Vec<(usize, f64)> {
        if k == 0 {
            return Vec::new();
        }
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.search(&self.root, query, k, exclude, &mut heap);
        let mut out: Vec<Candidate> = heap.into_vec();
        out.sort();
        out.into_iter().map(|c| (c.index, c.dist2)).collect()
    }

    fn search(&self, node: &Node, q: [f64; 3], k: usize, exclude: Option<usize>, heap: &mut BinaryHeap<Candidate>) {
        match node {
            Node::Leaf { start, end } => {
                for &i in &self.order[*start..*end] {
                    if Some(i) == exclude {
                        continue;
                    }
                    let c = Candidate { dist2: dist2(q, self.points[i]), index: i };
                    if heap.len() < k {
                        heap.push(c);
                    } else if c < *heap.peek().expect("heap is full") {
                        heap.pop();
                        heap.push(c);
                    }
                }
            }
            Node::Split { axis, value, left, right } => {
                let delta = q[*axis] - value;
                let (near, far) = if delta < 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, k, exclude, heap);
                if heap.len() < k || delta * delta <= heap.peek().expect("heap is full").dist2 {
                    self.search(far, q, k, exclude, heap);
                }
            }
        }
    }
}

/// Exhaustive reference with the same ordering rule.
pub fn brute_force_nearest(points: &[[f64; 3]], query: [f64; 3], k: usize, exclude: Option<usize>) -> Vec<(usize, f64)> {
    let mut all: Vec<Candidate> = points
        .iter()
        .enumerate()
        .filter(|&(i, _)| Some(i) != exclude)
        .map(|(i, &p)| Candidate { dist2: dist2(query, p), index: i })
        .collect();
    all.sort();
    all.truncate(k);
    all.into_iter().map(|c| (c.index, c.dist2)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn agrees_with_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for n in [1, 5, 9, 40, 300] {
            // Coarse grid coordinates force many exact distance ties.
            let pts: Vec<[f64; 3]> = (0..n)
                .map(|_| [0, 1, 2].map(|_| rng.gen_range(0..6) as f64 * 0.5))
                .collect();
            let tree = KdTree::new(pts.clone());
            for q in 0..n {
                for k in [1, 3, 8] {
                    assert_eq!(
                        tree.nearest(pts[q], k, Some(q)),
                        brute_force_nearest(&pts, pts[q], k, Some(q)),
                        "n={n} q={q} k={k}"
                    );
                }
            }
        }
    }

    #[test]
    fn empty_tree_and_zero_k() {
        let tree = KdTree::new(Vec::new());
        assert!(tree.nearest([0.0; 3], 3, None).is_empty());
        let tree = KdTree::new(vec![[0.0; 3]]);
        assert!(tree.nearest([0.0; 3], 0, None).is_empty());
        assert!(tree.nearest([0.0; 3], 2, Some(0)).is_empty());
    }
}
