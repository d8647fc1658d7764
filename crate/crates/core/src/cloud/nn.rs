//! Exact nearest-neighbor queries with a k-d tree backend and a brute-force
//! reference. Both order candidates by `(squared distance, index)`, so they
//! return identical results, ties included.

use rayon::prelude::*;

use super::{sq_dist, Point};
use crate::autodiff::Matrix;

/// Neighbor search strategy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum NnBackend {
    BruteForce,
    KdTree,
    /// Brute force for small inputs, k-d tree otherwise.
    #[default]
    Auto,
}

const AUTO_BRUTE_LIMIT: usize = 64 * 64;
const LEAF_SIZE: usize = 8;
const PAR_MIN_QUERIES: usize = 512;

/// Static k-d tree over a borrowed point slice.
pub struct KdTree<'a> {
    points: &'a [Point],
    order: Vec<usize>,
    nodes: Vec<KdNode>,
}

enum KdNode {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        dim: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

impl<'a> KdTree<'a> {
    pub fn build(points: &'a [Point]) -> Self {
        let mut tree = KdTree {
            points,
            order: (0..points.len()).collect(),
            nodes: Vec::new(),
        };
        if !points.is_empty() {
            tree.build_node(0, points.len());
        }
        tree
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(KdNode::Leaf { start, end });
            return id;
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &i in &self.order[start..end] {
            for k in 0..3 {
                lo[k] = lo[k].min(self.points[i][k]);
                hi[k] = hi[k].max(self.points[i][k]);
            }
        }
        let dim = (0..3)
            .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
            .unwrap_or(0);
        if hi[dim] - lo[dim] == 0.0 {
            self.nodes.push(KdNode::Leaf { start, end });
            return id;
        }
        let mid = start + (end - start) / 2;
        let pts = self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            pts[a][dim].total_cmp(&pts[b][dim]).then(a.cmp(&b))
        });
        let value = pts[self.order[mid]][dim];
        self.nodes.push(KdNode::Leaf { start: 0, end: 0 });
        let left = self.build_node(start, mid);
        let right = self.build_node(mid, end);
        self.nodes[id] = KdNode::Split {
            dim,
            value,
            left,
            right,
        };
        id
    }

    /// The `k` nearest points to `q`, ascending by `(distance², index)`.
    pub fn knn(&self, q: &Point, k: usize) -> Vec<(usize, f64)> {
        let mut best: Vec<(usize, f64)> = Vec::with_capacity(k + 1);
        if k > 0 && !self.nodes.is_empty() {
            self.search(0, q, k, &mut best);
        }
        best
    }

    pub fn nearest(&self, q: &Point) -> (usize, f64) {
        self.knn(q, 1)[0]
    }

    fn search(&self, node: usize, q: &Point, k: usize, best: &mut Vec<(usize, f64)>) {
        match self.nodes[node] {
            KdNode::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    insert_candidate(best, k, (i, sq_dist(q, &self.points[i])));
                }
            }
            KdNode::Split {
                dim,
                value,
                left,
                right,
            } => {
                let diff = q[dim] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, k, best);
                // Points on the far side are at least diff² away; equality must
                // still be explored so index tie-breaking stays exact.
                if best.len() < k || diff * diff <= best[best.len() - 1].1 {
                    self.search(far, q, k, best);
                }
            }
        }
    }
}

#[inline]
fn better(a: (usize, f64), b: (usize, f64)) -> bool {
    a.1 < b.1 || (a.1 == b.1 && a.0 < b.0)
}

fn insert_candidate(best: &mut Vec<(usize, f64)>, k: usize, cand: (usize, f64)) {
    if best.len() == k && !better(cand, best[k - 1]) {
        return;
    }
    let pos = best.partition_point(|&b| better(b, cand));
    best.insert(pos, cand);
    if best.len() > k {
        best.pop();
    }
}

/// Reference search by exhaustive scan.
pub fn knn_brute(points: &[Point], q: &Point, k: usize) -> Vec<(usize, f64)> {
    let mut best = Vec::with_capacity(k + 1);
    if k == 0 {
        return best;
    }
    for (i, p) in points.iter().enumerate() {
        insert_candidate(&mut best, k, (i, sq_dist(q, p)));
    }
    best
}

/// For each query, its `k` nearest points of `data`.
pub fn knn_all(
    data: &[Point],
    queries: &[Point],
    k: usize,
    backend: NnBackend,
) -> Vec<Vec<(usize, f64)>> {
    let use_tree = match backend {
        NnBackend::BruteForce => false,
        NnBackend::KdTree => true,
        NnBackend::Auto => data.len() * queries.len() > AUTO_BRUTE_LIMIT && data.len() > 32,
    };
    let par = queries.len() >= PAR_MIN_QUERIES;
    if use_tree {
        let tree = KdTree::build(data);
        if par {
            queries.par_iter().map(|q| tree.knn(q, k)).collect()
        } else {
            queries.iter().map(|q| tree.knn(q, k)).collect()
        }
    } else if par {
        queries.par_iter().map(|q| knn_brute(data, q, k)).collect()
    } else {
        queries.iter().map(|q| knn_brute(data, q, k)).collect()
    }
}

/// Nearest point of `data` for each query: `(index, squared distance)`.
pub fn nearest_all(data: &[Point], queries: &[Point], backend: NnBackend) -> Vec<(usize, f64)> {
    knn_all(data, queries, 1, backend)
        .into_iter()
        .map(|v| v[0])
        .collect()
}

pub(crate) fn matrix_points(m: &Matrix) -> Vec<Point> {
    debug_assert_eq!(m.cols(), 3);
    (0..m.rows()).map(|r| [m.get(r, 0), m.get(r, 1), m.get(r, 2)]).collect()
}

/// Nearest row of `dst` for every row of `src`, both `n×3`.
pub(crate) fn nearest_neighbors(src: &Matrix, dst: &Matrix) -> Vec<(usize, f64)> {
    nearest_all(&matrix_points(dst), &matrix_points(src), NnBackend::Auto)
}
