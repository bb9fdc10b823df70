//! Exact k-nearest and fixed-radius queries over 3-D points.
//!
//! Distances are compared as squared Euclidean norms throughout, and equal
//! distances are ordered by point index, so results match a brute-force scan
//! bit for bit.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};
use crate::geometry::dist2;
use crate::ingest::Vec3;

#[derive(Clone, Debug)]
pub struct KdTree {
    points: Vec<Vec3>,
    /// Implicit balanced tree: the median of `order[lo..hi]` is the node.
    order: Vec<usize>,
    axes: Vec<u8>,
}

#[derive(Clone, Copy, PartialEq)]
struct Cand {
    d2: f64,
    idx: usize,
}

impl Eq for Cand {}

impl Ord for Cand {
    fn cmp(&self, other: &Self) -> Ordering {
        self.d2.total_cmp(&other.d2).then(self.idx.cmp(&other.idx))
    }
}

impl PartialOrd for Cand {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl KdTree {
    pub fn new(points: Vec<Vec3>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Index("spatial index needs at least one point".into()));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Index("spatial index: non-finite coordinate".into()));
        }
        let n = points.len();
        let mut tree = Self {
            points,
            order: (0..n).collect(),
            axes: vec![0; n],
        };
        tree.build(0, n);
        Ok(tree)
    }

    fn build(&mut self, lo: usize, hi: usize) {
        if hi - lo <= 1 {
            return;
        }
        // split on the axis of widest spread
        let mut axis = 0;
        let mut best = -1.0;
        for a in 0..3 {
            let (mut mn, mut mx) = (f64::INFINITY, f64::NEG_INFINITY);
            for &k in &self.order[lo..hi] {
                mn = mn.min(self.points[k][a]);
                mx = mx.max(self.points[k][a]);
            }
            if mx - mn > best {
                best = mx - mn;
                axis = a;
            }
        }
        let mid = lo + (hi - lo) / 2;
        let pts = &self.points;
        self.order[lo..hi]
            .select_nth_unstable_by(mid - lo, |&x, &y| pts[x][axis].total_cmp(&pts[y][axis]).then(x.cmp(&y)));
        self.axes[mid] = axis as u8;
        self.build(lo, mid);
        self.build(mid + 1, hi);
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    /// The `k` nearest points to `q` (excluding `exclude`), nearest first,
    /// equal distances by lower index.
    pub fn knn(&self, q: Vec3, k: usize, exclude: Option<usize>) -> Vec<usize> {
        if k == 0 {
            return Vec::new();
        }
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.knn_rec(0, self.points.len(), q, k, exclude, &mut heap);
        let mut out = heap.into_vec();
        out.sort();
        out.into_iter().map(|c| c.idx).collect()
    }

    fn knn_rec(&self, lo: usize, hi: usize, q: Vec3, k: usize, exclude: Option<usize>, heap: &mut BinaryHeap<Cand>) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let idx = self.order[mid];
        if Some(idx) != exclude {
            let c = Cand {
                d2: dist2(q, self.points[idx]),
                idx,
            };
            if heap.len() < k {
                heap.push(c);
            } else if c < *heap.peek().expect("heap is full") {
                heap.pop();
                heap.push(c);
            }
        }
        if hi - lo == 1 {
            return;
        }
        let axis = self.axes[mid] as usize;
        let diff = q[axis] - self.points[idx][axis];
        let (near, far) = if diff < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.knn_rec(near.0, near.1, q, k, exclude, heap);
        let visit_far = heap.len() < k || diff * diff <= heap.peek().expect("non-empty").d2;
        if visit_far {
            self.knn_rec(far.0, far.1, q, k, exclude, heap);
        }
    }

    /// Indices with squared distance `≤ r²` from `q` (excluding `exclude`),
    /// in ascending index order.
    pub fn within(&self, q: Vec3, r: f64, exclude: Option<usize>) -> Vec<usize> {
        let mut out = Vec::new();
        if r >= 0.0 {
            self.within_rec(0, self.points.len(), q, r * r, exclude, &mut out);
        }
        out.sort_unstable();
        out
    }

    fn within_rec(&self, lo: usize, hi: usize, q: Vec3, r2: f64, exclude: Option<usize>, out: &mut Vec<usize>) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let idx = self.order[mid];
        if Some(idx) != exclude && dist2(q, self.points[idx]) <= r2 {
            out.push(idx);
        }
        if hi - lo == 1 {
            return;
        }
        let axis = self.axes[mid] as usize;
        let diff = q[axis] - self.points[idx][axis];
        let (near, far) = if diff < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.within_rec(near.0, near.1, q, r2, exclude, out);
        if diff * diff <= r2 {
            self.within_rec(far.0, far.1, q, r2, exclude, out);
        }
    }
}

/// Brute-force reference for [`KdTree::knn`].
pub fn brute_knn(points: &[Vec3], q: Vec3, k: usize, exclude: Option<usize>) -> Vec<usize> {
    let mut all: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != exclude)
        .map(|(i, p)| (dist2(q, *p), i))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    all.into_iter().take(k).map(|(_, i)| i).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(n: usize, seed: u64, grid: bool) -> Vec<Vec3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                if grid {
                    // many exact ties
                    [0, 0, 0].map(|_: i32| rng.random_range(0..6) as f64)
                } else {
                    [0, 0, 0].map(|_: i32| rng.random_range(-20.0..20.0))
                }
            })
            .collect()
    }

    #[test]
    fn empty_is_index_error() {
        assert!(matches!(KdTree::new(vec![]), Err(Error::Index(_))));
    }

    #[test]
    fn knn_and_radius_match_brute_force() {
        for (seed, grid) in [(1, false), (2, true), (3, true), (4, false)] {
            let pts = cloud(300, seed, grid);
            let tree = KdTree::new(pts.clone()).unwrap();
            for i in 0..pts.len() {
                for k in [1, 5, 30] {
                    assert_eq!(tree.knn(pts[i], k, Some(i)), brute_knn(&pts, pts[i], k, Some(i)));
                }
                let r = 3.0;
                let brute: Vec<usize> = (0..pts.len())
                    .filter(|&j| j != i && dist2(pts[i], pts[j]) <= r * r)
                    .collect();
                assert_eq!(tree.within(pts[i], r, Some(i)), brute);
            }
        }
    }

    #[test]
    fn zero_radius_excludes_self() {
        let pts = cloud(50, 9, false);
        let tree = KdTree::new(pts.clone()).unwrap();
        for (i, p) in pts.iter().enumerate() {
            assert!(tree.within(*p, 0.0, Some(i)).is_empty());
        }
    }

    #[test]
    fn k_larger_than_set() {
        let pts = cloud(4, 5, false);
        let tree = KdTree::new(pts.clone()).unwrap();
        assert_eq!(tree.knn(pts[0], 10, Some(0)).len(), 3);
    }
}
