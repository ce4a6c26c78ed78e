//! Exact nearest-neighbour search: a kd-tree for moderate dimension and a
//! brute-force scan above [`KD_TREE_MAX_DIM`].
//!
//! Results are ordered by `(squared distance, index)`, so ties always resolve
//! to the smaller index.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

pub const KD_TREE_MAX_DIM: usize = 16;
const LEAF_SIZE: usize = 16;

#[inline]
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// A neighbour hit: point index and squared distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub index: usize,
    pub sq_dist: f64,
}

impl Hit {
    fn key_cmp(&self, other: &Self) -> Ordering {
        self.sq_dist
            .total_cmp(&other.sq_dist)
            .then(self.index.cmp(&other.index))
    }
}

impl Eq for Hit {}

impl PartialOrd for Hit {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Hit {
    fn cmp(&self, other: &Self) -> Ordering {
        self.key_cmp(other)
    }
}

enum Node {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: usize, right: usize },
}

pub struct NeighborIndex<'a> {
    points: &'a [f64],
    dim: usize,
    n: usize,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

impl<'a> NeighborIndex<'a> {
    /// Index over row-major `points` of dimension `dim`.
    pub fn new(points: &'a [f64], dim: usize) -> Self {
        let n = points.len() / dim;
        let mut index = Self { points, dim, n, order: (0..n).collect(), nodes: Vec::new() };
        if dim <= KD_TREE_MAX_DIM && n > 0 {
            index.build(0, n);
        }
        index
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn uses_kd_tree(&self) -> bool {
        !self.nodes.is_empty()
    }

    fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    fn build(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mut axis = 0;
        let mut best_spread = -1.0;
        for a in 0..self.dim {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for &i in &self.order[start..end] {
                let v = self.points[i * self.dim + a];
                lo = lo.min(v);
                hi = hi.max(v);
            }
            if hi - lo > best_spread {
                best_spread = hi - lo;
                axis = a;
            }
        }
        let mid = start + (end - start) / 2;
        let (points, dim) = (self.points, self.dim);
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            points[a * dim + axis].total_cmp(&points[b * dim + axis])
        });
        let value = points[self.order[mid] * dim + axis];
        self.nodes.push(Node::Leaf { start, end });
        let left = self.build(start, mid);
        let right = self.build(mid, end);
        self.nodes[id] = Node::Split { axis, value, left, right };
        id
    }

    /// The `k` nearest points to `query`, skipping index `exclude`.
    pub fn knn(&self, query: &[f64], k: usize, exclude: Option<usize>) -> Vec<Hit> {
        if k == 0 {
            return Vec::new();
        }
        let mut heap: BinaryHeap<Hit> = BinaryHeap::with_capacity(k + 1);
        let offer = |hit: Hit, heap: &mut BinaryHeap<Hit>| {
            if heap.len() < k {
                heap.push(hit);
            } else if hit < *heap.peek().expect("heap is full") {
                heap.pop();
                heap.push(hit);
            }
        };
        if self.nodes.is_empty() {
            for i in 0..self.n {
                if Some(i) != exclude {
                    offer(Hit { index: i, sq_dist: sq_dist(query, self.point(i)) }, &mut heap);
                }
            }
        } else {
            let mut stack = vec![(0usize, 0.0f64)];
            while let Some((node, bound)) = stack.pop() {
                if heap.len() == k && bound > heap.peek().expect("heap is full").sq_dist {
                    continue;
                }
                match self.nodes[node] {
                    Node::Leaf { start, end } => {
                        for &i in &self.order[start..end] {
                            if Some(i) != exclude {
                                offer(Hit { index: i, sq_dist: sq_dist(query, self.point(i)) }, &mut heap);
                            }
                        }
                    }
                    Node::Split { axis, value, left, right } => {
                        let diff = query[axis] - value;
                        let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                        stack.push((far, bound.max(diff * diff)));
                        stack.push((near, bound));
                    }
                }
            }
        }
        let mut out = heap.into_vec();
        out.sort();
        out
    }

    /// All points within distance `radius` (inclusive) of `query`, sorted.
    pub fn within(&self, query: &[f64], radius: f64, exclude: Option<usize>) -> Vec<Hit> {
        let r2 = radius * radius;
        let mut out = Vec::new();
        if self.nodes.is_empty() {
            for i in 0..self.n {
                let d = sq_dist(query, self.point(i));
                if d <= r2 && Some(i) != exclude {
                    out.push(Hit { index: i, sq_dist: d });
                }
            }
        } else {
            let mut stack = vec![0usize];
            while let Some(node) = stack.pop() {
                match self.nodes[node] {
                    Node::Leaf { start, end } => {
                        for &i in &self.order[start..end] {
                            let d = sq_dist(query, self.point(i));
                            if d <= r2 && Some(i) != exclude {
                                out.push(Hit { index: i, sq_dist: d });
                            }
                        }
                    }
                    Node::Split { axis, value, left, right } => {
                        let diff = query[axis] - value;
                        if diff <= radius {
                            stack.push(left);
                        }
                        if diff >= -radius {
                            stack.push(right);
                        }
                    }
                }
            }
        }
        out.sort();
        out
    }
}
