//! Static balanced kd-tree for exact k-nearest-neighbor queries.
//!
//! The tree is built once over (id, position) pairs and never mutated.
//! Split axis is the axis of largest spread of the subrange, the split point
//! is the median under a (coordinate, id) total order, so the tree — and
//! therefore every query result — is independent of input order. Queries
//! return exactly what an exhaustive scan would: neighbors in ascending
//! (distance, id) order.

use crate::cloud::PointId;
use crate::geom::Vec3;

/// One query result.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub id: PointId,
    pub dist: f64,
}

pub struct KdTree {
    /// Entries rearranged into kd order; node of a subrange sits at its midpoint.
    entries: Vec<(PointId, Vec3)>,
    /// Split axis per node position.
    axes: Vec<u8>,
}

impl KdTree {
    pub fn build(points: &[(PointId, Vec3)]) -> KdTree {
        let mut entries = points.to_vec();
        let mut axes = vec![0u8; entries.len()];
        if !entries.is_empty() {
            let len = entries.len();
            build_range(&mut entries, &mut axes, 0, len);
        }
        KdTree { entries, axes }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// The `count` nearest neighbors of `query`, ascending by (distance, id),
    /// excluding `exclude` when given. Fewer are returned when the tree is
    /// smaller than `count`.
    pub fn knn(&self, query: Vec3, count: usize, exclude: Option<PointId>) -> Vec<Neighbor> {
        self.knn2(query, count, exclude)
            .into_iter()
            .map(|(d2, id)| Neighbor { id, dist: d2.sqrt() })
            .collect()
    }

    /// Like [`KdTree::knn`] but yields squared distances untouched, for callers
    /// that must stay on the canonical squared-distance path.
    pub fn knn2(&self, query: Vec3, count: usize, exclude: Option<PointId>) -> Vec<(f64, PointId)> {
        if count == 0 || self.entries.is_empty() {
            return Vec::new();
        }
        let mut best: Vec<(f64, PointId)> = Vec::with_capacity(count + 1);
        self.knn_range(query, count, exclude, 0, self.entries.len(), &mut best);
        best
    }

    fn knn_range(
        &self,
        query: Vec3,
        count: usize,
        exclude: Option<PointId>,
        lo: usize,
        hi: usize,
        best: &mut Vec<(f64, PointId)>,
    ) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let (id, pos) = self.entries[mid];
        if Some(id) != exclude {
            let cand = (pos.dist2(query), id);
            if best.len() < count {
                let at = best.partition_point(|&e| e < cand);
                best.insert(at, cand);
            } else if cand < best[count - 1] {
                best.pop();
                let at = best.partition_point(|&e| e < cand);
                best.insert(at, cand);
            }
        }

        let axis = self.axes[mid] as usize;
        let delta = query.axis(axis) - pos.axis(axis);
        let (near_lo, near_hi, far_lo, far_hi) = if delta <= 0.0 {
            (lo, mid, mid + 1, hi)
        } else {
            (mid + 1, hi, lo, mid)
        };
        self.knn_range(query, count, exclude, near_lo, near_hi, best);
        // The far side can still hold ties, so recurse on >= as well as <.
        if best.len() < count || delta * delta <= best[count - 1].0 {
            self.knn_range(query, count, exclude, far_lo, far_hi, best);
        }
    }

    /// All neighbors with distance <= radius, ascending by (distance, id).
    pub(crate) fn within_radius(
        &self,
        query: Vec3,
        radius: f64,
        exclude: Option<PointId>,
    ) -> Vec<Neighbor> {
        self.within_radius2(query, radius, exclude)
            .into_iter()
            .map(|(d2, id)| Neighbor { id, dist: d2.sqrt() })
            .collect()
    }

    /// Squared-distance twin of [`KdTree::within_radius`].
    pub(crate) fn within_radius2(
        &self,
        query: Vec3,
        radius: f64,
        exclude: Option<PointId>,
    ) -> Vec<(f64, PointId)> {
        let mut hits: Vec<(f64, PointId)> = Vec::new();
        if !self.entries.is_empty() && radius >= 0.0 {
            self.radius_range(query, radius * radius, exclude, 0, self.entries.len(), &mut hits);
        }
        hits.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
        hits
    }

    /// Number of neighbors with distance <= radius.
    pub(crate) fn count_within(&self, query: Vec3, radius: f64, exclude: Option<PointId>) -> usize {
        let mut n = 0usize;
        if !self.entries.is_empty() && radius >= 0.0 {
            self.count_range(query, radius * radius, exclude, 0, self.entries.len(), &mut n);
        }
        n
    }

    fn radius_range(
        &self,
        query: Vec3,
        r2: f64,
        exclude: Option<PointId>,
        lo: usize,
        hi: usize,
        hits: &mut Vec<(f64, PointId)>,
    ) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let (id, pos) = self.entries[mid];
        let d2 = pos.dist2(query);
        if d2 <= r2 && Some(id) != exclude {
            hits.push((d2, id));
        }
        let axis = self.axes[mid] as usize;
        let delta = query.axis(axis) - pos.axis(axis);
        if delta <= 0.0 || delta * delta <= r2 {
            self.radius_range(query, r2, exclude, lo, mid, hits);
        }
        if delta > 0.0 || delta * delta <= r2 {
            self.radius_range(query, r2, exclude, mid + 1, hi, hits);
        }
    }

    fn count_range(
        &self,
        query: Vec3,
        r2: f64,
        exclude: Option<PointId>,
        lo: usize,
        hi: usize,
        n: &mut usize,
    ) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let (id, pos) = self.entries[mid];
        if pos.dist2(query) <= r2 && Some(id) != exclude {
            *n += 1;
        }
        let axis = self.axes[mid] as usize;
        let delta = query.axis(axis) - pos.axis(axis);
        if delta <= 0.0 || delta * delta <= r2 {
            self.count_range(query, r2, exclude, lo, mid, n);
        }
        if delta > 0.0 || delta * delta <= r2 {
            self.count_range(query, r2, exclude, mid + 1, hi, n);
        }
    }
}

fn build_range(entries: &mut [(PointId, Vec3)], axes: &mut [u8], lo: usize, hi: usize) {
    if hi - lo <= 1 {
        return;
    }
    let slice = &entries[lo..hi];
    let mut min = slice[0].1;
    let mut max = slice[0].1;
    for &(_, p) in &slice[1..] {
        min.x = min.x.min(p.x);
        min.y = min.y.min(p.y);
        min.z = min.z.min(p.z);
        max.x = max.x.max(p.x);
        max.y = max.y.max(p.y);
        max.z = max.z.max(p.z);
    }
    let spread = max - min;
    let mut axis = 0usize;
    if spread.y > spread.axis(axis) {
        axis = 1;
    }
    if spread.z > spread.axis(axis) {
        axis = 2;
    }

    let mid = lo + (hi - lo) / 2;
    entries[lo..hi].select_nth_unstable_by(mid - lo, |a, b| {
        (a.1.axis(axis), a.0).partial_cmp(&(b.1.axis(axis), b.0)).unwrap()
    });
    axes[mid] = axis as u8;
    build_range(entries, axes, lo, mid);
    build_range(entries, axes, mid + 1, hi);
}

/// Exhaustive k-NN over a point set: the reference the tree must match.
pub fn knn_linear(
    points: &[(PointId, Vec3)],
    query: Vec3,
    count: usize,
    exclude: Option<PointId>,
) -> Vec<Neighbor> {
    let mut all: Vec<(f64, PointId)> = points
        .iter()
        .filter(|(id, _)| Some(*id) != exclude)
        .map(|&(id, p)| (p.dist2(query), id))
        .collect();
    all.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
    all.truncate(count);
    all.into_iter().map(|(d2, id)| Neighbor { id, dist: d2.sqrt() }).collect()
}
