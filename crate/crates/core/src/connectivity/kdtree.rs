//! Static kd-tree used to answer exact k-nearest-neighbor queries.
//!
//! Results are identical to an exhaustive scan: candidates are ordered by
//! `(squared distance, index)` and a subtree is skipped only when its
//! splitting plane is strictly farther than the current k-th candidate.

use alloc::vec::Vec;

const LEAF_SIZE: usize = 8;

#[derive(Debug, Clone)]
enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        axis: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

pub(crate) struct KdTree<'a> {
    points: &'a [f64],
    dim: usize,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

#[inline]
pub(crate) fn dist2(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        s += d * d;
    }
    s
}

#[inline]
fn precedes(a: (f64, usize), b: (f64, usize)) -> bool {
    a.0 < b.0 || (a.0 == b.0 && a.1 < b.1)
}

/// Bounded, sorted candidate list. `k` is small so insertion sort wins.
pub(crate) struct Candidates {
    k: usize,
    items: Vec<(f64, usize)>,
}

impl Candidates {
    pub(crate) fn new(k: usize) -> Self {
        Self {
            k,
            items: Vec::with_capacity(k + 1),
        }
    }

    pub(crate) fn clear(&mut self) {
        self.items.clear();
    }

    #[inline]
    pub(crate) fn offer(&mut self, d: f64, idx: usize) {
        let cand = (d, idx);
        if self.items.len() == self.k {
            if !precedes(cand, self.items[self.k - 1]) {
                return;
            }
            self.items.pop();
        }
        let pos = self
            .items
            .iter()
            .position(|&it| precedes(cand, it))
            .unwrap_or(self.items.len());
        self.items.insert(pos, cand);
    }

    #[inline]
    fn worst(&self) -> Option<f64> {
        if self.items.len() == self.k {
            Some(self.items[self.k - 1].0)
        } else {
            None
        }
    }

    pub(crate) fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.items.iter().map(|&(_, i)| i)
    }
}

impl<'a> KdTree<'a> {
    pub(crate) fn build(points: &'a [f64], dim: usize) -> Self {
        let n = points.len() / dim;
        let mut tree = Self {
            points,
            dim,
            order: (0..n).collect(),
            nodes: Vec::new(),
        };
        if n > 0 {
            tree.build_node(0, n);
        }
        tree
    }

    fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        // split the widest axis at the median
        let mut axis = 0;
        let mut widest = f64::NEG_INFINITY;
        for a in 0..self.dim {
            let (lo, hi) = self.order[start..end]
                .iter()
                .map(|&i| self.points[i * self.dim + a])
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                    (lo.min(v), hi.max(v))
                });
            if hi - lo > widest {
                widest = hi - lo;
                axis = a;
            }
        }
        let mid = start + (end - start) / 2;
        let (points, dim) = (self.points, self.dim);
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            points[a * dim + axis]
                .total_cmp(&points[b * dim + axis])
                .then(a.cmp(&b))
        });
        let value = points[self.order[mid] * dim + axis];
        self.nodes.push(Node::Leaf { start, end });
        let left = self.build_node(start, mid);
        let right = self.build_node(mid, end);
        self.nodes[id] = Node::Split {
            axis,
            value,
            left,
            right,
        };
        id
    }

    pub(crate) fn query(&self, q: &[f64], out: &mut Candidates) {
        out.clear();
        if !self.nodes.is_empty() {
            self.search(0, q, out);
        }
    }

    fn search(&self, node: usize, q: &[f64], out: &mut Candidates) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    out.offer(dist2(q, self.point(i)), i);
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, out);
                let plane = diff * diff;
                match out.worst() {
                    Some(w) if plane > w => {}
                    _ => self.search(far, q, out),
                }
            }
        }
    }
}
