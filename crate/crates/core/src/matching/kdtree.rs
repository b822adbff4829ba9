//! Exact k-nearest-neighbour search with a k-d tree.
//!
//! Results are ordered by `(squared distance, point index)`, the same total
//! order an exhaustive scan produces, so the two are interchangeable. Callers
//! that need a tie rule on external keys insert points in key order.

use std::cmp::Ordering;

use super::sq_dist;

#[derive(Debug, Clone)]
struct Node {
    point: usize,
    axis: usize,
    left: Option<usize>,
    right: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<Vec<f64>>,
    nodes: Vec<Node>,
    root: Option<usize>,
}

pub(crate) fn cmp_candidate(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

impl KdTree {
    pub fn build(points: Vec<Vec<f64>>) -> Self {
        let mut tree = KdTree {
            nodes: Vec::with_capacity(points.len()),
            root: None,
            points,
        };
        let mut idx: Vec<usize> = (0..tree.points.len()).collect();
        tree.root = tree.build_rec(&mut idx);
        tree
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn build_rec(&mut self, idx: &mut [usize]) -> Option<usize> {
        if idx.is_empty() {
            return None;
        }
        let dim = self.points[idx[0]].len();
        let axis = (0..dim)
            .map(|a| {
                let (lo, hi) = idx.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
                    let v = self.points[i][a];
                    (lo.min(v), hi.max(v))
                });
                (a, hi - lo)
            })
            .fold((0, f64::NEG_INFINITY), |best, c| if c.1 > best.1 { c } else { best })
            .0;
        idx.sort_by(|&a, &b| self.points[a][axis].total_cmp(&self.points[b][axis]).then(a.cmp(&b)));
        let mid = idx.len() / 2;
        let point = idx[mid];
        let (lo, rest) = idx.split_at_mut(mid);
        let left = self.build_rec(lo);
        let right = self.build_rec(&mut rest[1..]);
        self.nodes.push(Node {
            point,
            axis,
            left,
            right,
        });
        Some(self.nodes.len() - 1)
    }

    /// The `k` nearest allowed points to `query`, ascending by
    /// `(squared distance, index)`. Returns fewer when fewer are allowed.
    pub fn nearest<F: Fn(usize) -> bool>(&self, query: &[f64], k: usize, allowed: F) -> Vec<(f64, usize)> {
        let mut best = Vec::with_capacity(k + 1);
        if k > 0 {
            if let Some(root) = self.root {
                self.search(root, query, k, &allowed, &mut best);
            }
        }
        best
    }

    fn search<F: Fn(usize) -> bool>(
        &self,
        node: usize,
        query: &[f64],
        k: usize,
        allowed: &F,
        best: &mut Vec<(f64, usize)>,
    ) {
        let n = &self.nodes[node];
        let here = &self.points[n.point];
        if allowed(n.point) {
            let cand = (sq_dist(query, here), n.point);
            if best.len() < k || cmp_candidate(&cand, best.last().expect("non-empty")) == Ordering::Less {
                let pos = best.partition_point(|b| cmp_candidate(b, &cand) == Ordering::Less);
                best.insert(pos, cand);
                best.truncate(k);
            }
        }
        let diff = query[n.axis] - here[n.axis];
        let (near, far) = if diff < 0.0 { (n.left, n.right) } else { (n.right, n.left) };
        if let Some(c) = near {
            self.search(c, query, k, allowed, best);
        }
        if let Some(c) = far {
            // a tie at the bound may still win on index, so only prune on strict excess
            if best.len() < k || diff * diff <= best.last().expect("non-empty").0 {
                self.search(c, query, k, allowed, best);
            }
        }
    }
}

/// Exhaustive scan with the same ordering contract as [`KdTree::nearest`].
pub fn scan_nearest<F: Fn(usize) -> bool>(points: &[Vec<f64>], query: &[f64], k: usize, allowed: F) -> Vec<(f64, usize)> {
    let mut all: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .filter(|(i, _)| allowed(*i))
        .map(|(i, p)| (sq_dist(query, p), i))
        .collect();
    all.sort_by(cmp_candidate);
    all.truncate(k);
    all
}
