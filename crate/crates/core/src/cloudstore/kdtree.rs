//! Median-split KD-tree over 3-D points.
//!
//! The tree only accelerates the queries; every result is ordered by
//! `(squared distance, index)` so output never depends on tree layout.

use rayon::prelude::*;

use super::cloud::{dist2, Point3};
use crate::error::{Error, Result};

pub const LEAF_SIZE: usize = 16;

/// Neighbor cap used when building network neighborhoods.
pub const DEFAULT_NEIGHBOR_CAP: usize = 40;

#[derive(Clone, Debug)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: usize, right: usize },
}

#[derive(Clone, Debug)]
pub struct KdTree {
    points: Vec<Point3>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

impl KdTree {
    pub fn build(points: &[Point3]) -> Self {
        let mut tree = KdTree {
            points: points.to_vec(),
            order: (0..points.len()).collect(),
            nodes: Vec::new(),
        };
        if !points.is_empty() {
            tree.build_node(0, points.len());
        }
        tree
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &i in &self.order[start..end] {
            for a in 0..3 {
                lo[a] = lo[a].min(self.points[i][a]);
                hi[a] = hi[a].max(self.points[i][a]);
            }
        }
        let axis = (0..3)
            .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
            .unwrap_or(0);
        let mid = (end - start) / 2;
        let points = &self.points;
        self.order[start..end].select_nth_unstable_by(mid, |&a, &b| points[a][axis].total_cmp(&points[b][axis]));
        let value = self.points[self.order[start + mid]][axis];
        self.nodes.push(Node::Leaf { start: 0, end: 0 });
        let left = self.build_node(start, start + mid);
        let right = self.build_node(start + mid, end);
        self.nodes[id] = Node::Split {
            axis,
            value,
            left,
            right,
        };
        id
    }

    /// All points with `‖p − q‖ < radius`, as `(index, squared distance)`
    /// sorted by distance then index.
    pub fn within(&self, q: &Point3, radius: f64) -> Vec<(usize, f64)> {
        let mut out = Vec::new();
        if self.nodes.is_empty() {
            return out;
        }
        let r2 = radius * radius;
        let mut stack = vec![0usize];
        while let Some(n) = stack.pop() {
            match self.nodes[n] {
                Node::Leaf { start, end } => {
                    for &i in &self.order[start..end] {
                        let d = dist2(&self.points[i], q);
                        if d < r2 {
                            out.push((i, d));
                        }
                    }
                }
                Node::Split {
                    axis,
                    value,
                    left,
                    right,
                } => {
                    let diff = q[axis] - value;
                    let (near, far) = if diff <= 0.0 { (left, right) } else { (right, left) };
                    if diff * diff < r2 {
                        stack.push(far);
                    }
                    stack.push(near);
                }
            }
        }
        out.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        out
    }

    /// Closest point to `q`, ties broken towards the lowest index.
    pub fn nearest(&self, q: &Point3) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        if !self.nodes.is_empty() {
            self.nearest_in(0, q, &mut best);
        }
        best
    }

    fn nearest_in(&self, n: usize, q: &Point3, best: &mut Option<(usize, f64)>) {
        match self.nodes[n] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let d = dist2(&self.points[i], q);
                    let better = match *best {
                        None => true,
                        Some((bi, bd)) => d < bd || (d == bd && i < bi),
                    };
                    if better {
                        *best = Some((i, d));
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[axis] - value;
                let (near, far) = if diff <= 0.0 { (left, right) } else { (right, left) };
                self.nearest_in(near, q, best);
                if best.is_none_or(|(_, bd)| diff * diff <= bd) {
                    self.nearest_in(far, q, best);
                }
            }
        }
    }
}

/// Per-query neighbor lists of support points strictly inside `radius`.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborIndex {
    pub lists: Vec<Vec<usize>>,
    pub radius: f64,
    pub cap: Option<usize>,
}

impl NeighborIndex {
    pub fn len(&self) -> usize {
        self.lists.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lists.is_empty()
    }

    /// Shift every neighbor index by `offset` (used when stacking clouds).
    pub fn offset_by(&mut self, offset: usize) {
        for list in &mut self.lists {
            list.iter_mut().for_each(|j| *j += offset);
        }
    }
}

/// Radius search of every query against `supports`. Lists longer than `cap`
/// keep the closest entries.
pub fn radius_neighbors(queries: &[Point3], supports: &[Point3], radius: f64, cap: Option<usize>) -> Result<NeighborIndex> {
    if !(radius > 0.0) {
        return Err(Error::Validation(format!("radius {radius} must be positive")));
    }
    let tree = KdTree::build(supports);
    let lists = queries
        .par_iter()
        .map(|q| {
            let mut hits = tree.within(q, radius);
            if let Some(c) = cap {
                hits.truncate(c);
            }
            hits.into_iter().map(|(i, _)| i).collect()
        })
        .collect();
    Ok(NeighborIndex { lists, radius, cap })
}

/// Index of the nearest support for each query (ties → lowest index).
pub fn nearest_indices(queries: &[Point3], supports: &[Point3]) -> Result<Vec<usize>> {
    if supports.is_empty() {
        return Err(Error::EmptyInput("nearest-neighbor supports"));
    }
    let tree = KdTree::build(supports);
    Ok(queries
        .par_iter()
        .map(|q| tree.nearest(q).map(|(i, _)| i).unwrap_or(0))
        .collect())
}
