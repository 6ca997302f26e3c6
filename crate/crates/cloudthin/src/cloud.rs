//! In-memory point cloud model.
//!
//! Points carry a stable `u64` id, a double-precision position, and optional
//! unit normal and RGB color attributes. Ids are assigned once (storage
//! order) and survive every subsampling operation, so output clouds can be
//! traced back to their source points.

use crate::error::{Error, Result};
use crate::geom::{Aabb, Vec3};

/// Stable identifier of a point within one cloud.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PointId(pub u64);

impl std::fmt::Display for PointId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.0.fmt(f)
    }
}

/// One point with its optional attributes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointRecord {
    pub id: PointId,
    pub position: Vec3,
    pub normal: Option<[f32; 3]>,
    pub color: Option<[u8; 3]>,
}

impl PointRecord {
    pub fn bare(id: u64, position: Vec3) -> Self {
        PointRecord { id: PointId(id), position, normal: None, color: None }
    }
}

/// A cloud plus its cached bounding box.
///
/// Invariants, checked by [`PointCloud::from_records`]:
/// ids strictly increase in storage order, every position is finite, and
/// `bounds` is exactly the bounding box of the positions.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<PointRecord>,
    bounds: Aabb,
}

impl PointCloud {
    pub fn from_records(points: Vec<PointRecord>) -> Result<Self> {
        let mut bounds = Aabb::empty();
        let mut prev: Option<u64> = None;
        for rec in &points {
            if !rec.position.is_finite() {
                return Err(Error::Data(format!(
                    "point {} has a non-finite position",
                    rec.id
                )));
            }
            if let Some(p) = prev {
                if rec.id.0 <= p {
                    return Err(Error::Data(format!(
                        "point ids must strictly increase in storage order ({} after {})",
                        rec.id, p
                    )));
                }
            }
            prev = Some(rec.id.0);
            bounds.expand(rec.position);
        }
        Ok(PointCloud { points, bounds })
    }

    /// Builds a cloud from bare positions, assigning sequential ids from 0.
    pub fn from_positions(positions: impl IntoIterator<Item = Vec3>) -> Result<Self> {
        let points = positions
            .into_iter()
            .enumerate()
            .map(|(i, p)| PointRecord::bare(i as u64, p))
            .collect();
        Self::from_records(points)
    }

    pub fn points(&self) -> &[PointRecord] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn bounds(&self) -> Aabb {
        self.bounds
    }

    pub fn has_normals(&self) -> bool {
        self.points.iter().all(|p| p.normal.is_some()) && !self.points.is_empty()
    }

    pub fn has_colors(&self) -> bool {
        self.points.iter().all(|p| p.color.is_some()) && !self.points.is_empty()
    }

    /// Keeps exactly the points whose id the predicate accepts.
    pub fn filter_by_id(&self, mut keep: impl FnMut(PointId) -> bool) -> PointCloud {
        let points: Vec<PointRecord> =
            self.points.iter().copied().filter(|p| keep(p.id)).collect();
        let bounds = Aabb::from_points(points.iter().map(|p| p.position));
        PointCloud { points, bounds }
    }
}

/// Smallest distance between any two distinct points, by exhaustive O(n²)
/// comparison. A reference measurement for test-scale clouds, not a spatial
/// query — use the kd-tree for anything large.
pub fn min_pairwise_distance(cloud: &PointCloud) -> Result<f64> {
    let pts = cloud.points();
    if pts.len() < 2 {
        return Err(Error::Data(format!(
            "min pairwise distance needs at least 2 points, got {}",
            pts.len()
        )));
    }
    let mut best = f64::INFINITY;
    for i in 0..pts.len() {
        for j in (i + 1)..pts.len() {
            let d = pts[i].position.dist(pts[j].position);
            if d < best {
                best = d;
            }
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud_of(coords: &[(f64, f64, f64)]) -> PointCloud {
        PointCloud::from_positions(coords.iter().map(|&(x, y, z)| Vec3::new(x, y, z))).unwrap()
    }

    #[test]
    fn min_pairwise_unit_square() {
        let c = cloud_of(&[(0.0, 0.0, 0.0), (1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (1.0, 1.0, 0.0)]);
        assert_eq!(min_pairwise_distance(&c).unwrap(), 1.0);
    }

    #[test]
    fn min_pairwise_coincident_is_zero() {
        let c = cloud_of(&[(2.0, 3.0, 4.0), (2.0, 3.0, 4.0), (9.0, 9.0, 9.0)]);
        assert_eq!(min_pairwise_distance(&c).unwrap(), 0.0);
    }

    #[test]
    fn min_pairwise_rejects_tiny_clouds() {
        let c = cloud_of(&[(0.0, 0.0, 0.0)]);
        assert!(min_pairwise_distance(&c).is_err());
        let empty = PointCloud::from_records(Vec::new()).unwrap();
        assert!(min_pairwise_distance(&empty).is_err());
    }

    #[test]
    fn ids_must_increase() {
        let recs = vec![
            PointRecord::bare(3, Vec3::ZERO),
            PointRecord::bare(3, Vec3::new(1.0, 0.0, 0.0)),
        ];
        assert!(PointCloud::from_records(recs).is_err());
        let recs = vec![
            PointRecord::bare(5, Vec3::ZERO),
            PointRecord::bare(2, Vec3::new(1.0, 0.0, 0.0)),
        ];
        assert!(PointCloud::from_records(recs).is_err());
    }

    #[test]
    fn rejects_non_finite_positions() {
        let recs = vec![PointRecord::bare(0, Vec3::new(f64::NAN, 0.0, 0.0))];
        assert!(PointCloud::from_records(recs).is_err());
    }

    #[test]
    fn bounds_cover_all_points() {
        let c = cloud_of(&[(-1.0, 2.0, 0.5), (3.0, -4.0, 2.5)]);
        let b = c.bounds();
        for p in c.points() {
            assert!(b.contains(p.position));
        }
    }
}
