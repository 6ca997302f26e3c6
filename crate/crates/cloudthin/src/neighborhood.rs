//! Cached extended neighborhoods over a 27-voxel working set, plus the
//! reverse-neighbor edges that say whose cost must change when a point dies.
//!
//! Every alive point of a working set's center voxel gets a cache of its
//! k+b nearest alive neighbors (squared distance, id, and a build-time pair
//! weight). Removals are absorbed by marking entries invalid; the cost is
//! always recomputed over the first min(k, valid) entries in ascending
//! (distance, id) order, so a cache-derived cost is bit-identical to one
//! recomputed from scratch over the same survivors.

use std::collections::HashMap;

use crate::cloud::PointId;
use crate::cost::CostEvaluator;
use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::knn::KdTree;
use crate::voxel::{VoxelKey, VoxelPage};

/// One cached neighbor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CacheEntry {
    pub id: PointId,
    pub dist2: f64,
    /// Kind-specific pair factor frozen at build time (1 for geometric
    /// kinds, normal/color similarity otherwise), so recomputing a cost
    /// never needs the neighbor's attributes again.
    pub weight: f64,
}

/// A point's cached k+b-neighborhood with removal bookkeeping.
///
/// `complete` records that the cache was born holding *every* reachable
/// candidate (fewer than k+b existed): such a cache stays exact under any
/// number of removals — its valid entries are always exactly the alive
/// reachable neighbors — so it is never dirty and its partial cost is the
/// true cost. Caches that were truncated at k+b go dirty once fewer than k
/// valid entries remain, because the true k-th neighbor may then be a point
/// that was never cached.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborCache {
    entries: Vec<CacheEntry>,
    valid: Vec<bool>,
    valid_count: usize,
    complete: bool,
    k: usize,
}

impl NeighborCache {
    pub fn from_entries(entries: Vec<CacheEntry>, complete: bool, k: usize) -> NeighborCache {
        let valid = vec![true; entries.len()];
        let valid_count = entries.len();
        NeighborCache { entries, valid, valid_count, complete, k }
    }

    /// Reassembles a cache from persisted state.
    pub fn from_parts(
        entries: Vec<CacheEntry>,
        valid: Vec<bool>,
        complete: bool,
        k: usize,
    ) -> NeighborCache {
        debug_assert_eq!(entries.len(), valid.len());
        let valid_count = valid.iter().filter(|v| **v).count();
        NeighborCache { entries, valid, valid_count, complete, k }
    }

    pub fn entries(&self) -> &[CacheEntry] {
        &self.entries
    }

    pub fn validity(&self) -> &[bool] {
        &self.valid
    }

    pub fn valid_count(&self) -> usize {
        self.valid_count
    }

    pub fn is_complete(&self) -> bool {
        self.complete
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// A dirty cache has lost too many neighbors to certify its own cost:
    /// fewer than k valid entries remain and the cache was truncated at
    /// build time. Dirty points are exempt from removal until rebuilt.
    pub fn is_dirty(&self) -> bool {
        self.valid_count < self.k && !self.complete
    }

    /// Marks `removed` invalid if it is a still-valid member. Never searches;
    /// returns whether anything changed.
    pub fn invalidate(&mut self, removed: PointId) -> bool {
        for (entry, valid) in self.entries.iter().zip(self.valid.iter_mut()) {
            if entry.id == removed && *valid {
                *valid = false;
                self.valid_count -= 1;
                return true;
            }
        }
        false
    }

    /// The first min(k, valid) valid entries in ascending (distance, id)
    /// order: the neighbors the cost is defined over.
    pub fn k_prefix(&self) -> impl Iterator<Item = &CacheEntry> {
        self.entries
            .iter()
            .zip(&self.valid)
            .filter(|(_, v)| **v)
            .map(|(e, _)| e)
            .take(self.k)
    }

    /// Ids of the cost-relevant neighbors (the reverse-edge targets).
    pub fn k_prefix_ids(&self) -> impl Iterator<Item = PointId> + '_ {
        self.k_prefix().map(|e| e.id)
    }

    /// Current cost over the valid prefix, in canonical order.
    pub fn cost(&self, eval: &CostEvaluator) -> f64 {
        let mut sum = 0.0;
        for entry in self.k_prefix() {
            sum += eval.term(entry.dist2, entry.weight);
        }
        sum
    }
}

/// "`source`'s cost watches `target`": `target` is among the first k valid
/// neighbors of `source`, so removing `target` must invalidate `source`'s
/// cache. Voxel keys let the decimator route the update to the right page.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReverseEdge {
    pub target: PointId,
    pub target_voxel: VoxelKey,
    pub source: PointId,
    pub source_voxel: VoxelKey,
}

/// target id → the (source, source voxel) pairs whose caches watch it.
#[derive(Debug, Default)]
pub struct ReverseIndex {
    watchers: HashMap<PointId, Vec<(PointId, VoxelKey)>>,
}

impl ReverseIndex {
    pub fn new() -> ReverseIndex {
        ReverseIndex::default()
    }

    pub fn add(&mut self, target: PointId, source: PointId, source_voxel: VoxelKey) {
        self.watchers.entry(target).or_default().push((source, source_voxel));
    }

    pub fn add_edge(&mut self, edge: &ReverseEdge) {
        self.add(edge.target, edge.source, edge.source_voxel);
    }

    pub fn watchers(&self, target: PointId) -> &[(PointId, VoxelKey)] {
        self.watchers.get(&target).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn targets(&self) -> usize {
        self.watchers.len()
    }
}

/// Everything one working set contributes to a cost pass.
#[derive(Debug)]
pub struct CacheBuild {
    /// (id, cache) for every alive center-voxel point, in page record order.
    pub caches: Vec<(PointId, NeighborCache)>,
    /// Reverse edges whose source is in the center voxel.
    pub reverse: Vec<ReverseEdge>,
    /// Center points whose truncated cache reaches to or beyond one voxel
    /// size: the documented cross-partition equivalence precondition
    /// ((k+b)-th neighbor closer than the voxel size) failed for them.
    pub reach_saturated: usize,
}

/// Builds caches for every alive point of the center page (`pages[0]`) over
/// all alive points of the working set, with `b` buffer neighbors past the
/// cost's k.
pub fn build_caches(
    pages: &[VoxelPage],
    eval: &CostEvaluator,
    b: usize,
    voxel_size: f64,
) -> Result<CacheBuild> {
    let center = pages
        .first()
        .ok_or_else(|| Error::Internal("cache build needs at least the center page".into()))?;

    // Working sets can hold thousands of points, so the side tables are kept
    // lean: one packed page/record index per id (the page already knows its
    // own voxel key), and the tree's staging buffer is released as soon as
    // the tree has copied it.
    let mut kd_input: Vec<(PointId, Vec3)> = Vec::new();
    let mut info: HashMap<PointId, usize> = HashMap::new();
    for (page_idx, page) in pages.iter().enumerate() {
        for (rec_idx, rec) in page.records.iter().enumerate() {
            if !page.alive[rec_idx] {
                continue;
            }
            kd_input.push((rec.id, rec.position));
            if info.insert(rec.id, page_idx * (1 << 32) + rec_idx).is_some() {
                return Err(Error::Data(format!(
                    "point id {} appears in more than one page of a working set",
                    rec.id
                )));
            }
        }
    }
    let record_of = |packed: usize| &pages[packed >> 32].records[packed & 0xffff_ffff];

    let universe = kd_input.len();
    let tree = KdTree::build(&kd_input);
    drop(kd_input);
    let want = eval.k() + b;
    let vs2 = voxel_size * voxel_size;

    let mut caches = Vec::with_capacity(center.alive_count());
    let mut reverse = Vec::new();
    let mut reach_saturated = 0usize;

    for rec in center.iter_alive() {
        let found = tree.knn2(rec.position, want, Some(rec.id));
        let complete = universe - 1 <= want;
        if !complete && found.last().map_or(false, |&(d2, _)| d2 >= vs2) {
            reach_saturated += 1;
        }

        let mut entries = Vec::with_capacity(found.len());
        for &(dist2, id) in &found {
            let other = record_of(info[&id]);
            let weight = eval.pair_weight(rec.normal, rec.color, other.normal, other.color)?;
            entries.push(CacheEntry { id, dist2, weight });
        }
        for entry in entries.iter().take(eval.k()) {
            reverse.push(ReverseEdge {
                target: entry.id,
                target_voxel: pages[info[&entry.id] >> 32].key,
                source: rec.id,
                source_voxel: center.key,
            });
        }
        caches.push((rec.id, NeighborCache::from_entries(entries, complete, eval.k())));
    }

    Ok(CacheBuild { caches, reverse, reach_saturated })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    use crate::cloud::{PointCloud, PointRecord};
    use crate::cost::{cost_knn, CostConfig, CostKind, DEFAULT_EPSILON_D};
    use crate::voxel::VoxelStore;

    fn page(key: (i64, i64, i64), points: &[(u64, f64, f64, f64)]) -> VoxelPage {
        let records: Vec<PointRecord> = points
            .iter()
            .map(|&(id, x, y, z)| PointRecord::bare(id, Vec3::new(x, y, z)))
            .collect();
        let alive = vec![true; records.len()];
        VoxelPage { key: VoxelKey::new(key.0, key.1, key.2), records, alive }
    }

    fn plain_eval(k: usize) -> CostEvaluator {
        CostEvaluator::resolve(&CostConfig::knn(k)).unwrap()
    }

    #[test]
    fn isolated_point_gets_an_exact_empty_cache() {
        let pages = [page((0, 0, 0), &[(0, 0.5, 0.5, 0.5)])];
        let eval = plain_eval(6);
        let built = build_caches(&pages, &eval, 8, 1.0).unwrap();
        assert_eq!(built.caches.len(), 1);
        let (_, cache) = &built.caches[0];
        assert!(cache.entries().is_empty());
        assert!(cache.is_complete());
        assert!(!cache.is_dirty(), "a cache holding its whole universe is never stale");
        assert_eq!(cache.cost(&eval), 0.0);
        assert!(built.reverse.is_empty());
    }

    #[test]
    fn adjacent_voxel_pair_find_each_other() {
        let a = page((0, 0, 0), &[(0, 0.9, 0.5, 0.5)]);
        let b = page((1, 0, 0), &[(1, 1.1, 0.5, 0.5)]);
        let eval = plain_eval(1);

        let built = build_caches(&[a.clone(), b.clone()], &eval, 0, 1.0).unwrap();
        let (_, cache) = &built.caches[0];
        assert_eq!(cache.entries().len(), 1);
        assert_eq!(cache.entries()[0].id, PointId(1));
        assert!(cache.is_complete());
        assert_eq!(built.reverse.len(), 1);
        assert_eq!(built.reverse[0].target, PointId(1));
        assert_eq!(built.reverse[0].target_voxel, VoxelKey::new(1, 0, 0));
        assert_eq!(built.reverse[0].source, PointId(0));

        let built_b = build_caches(&[b, a], &eval, 0, 1.0).unwrap();
        assert_eq!(built_b.caches[0].1.entries()[0].id, PointId(0));
    }

    #[test]
    fn caches_match_global_oracle_across_eight_voxels() {
        // 2000 points over a 2x2x2 voxel block: every voxel is adjacent to
        // every other, so the full cloud is each working set's universe and
        // an exhaustive scan is the exact oracle.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let cloud = PointCloud::from_positions((0..2000).map(|_| {
            Vec3::new(rng.gen::<f64>() * 2.0, rng.gen::<f64>() * 2.0, rng.gen::<f64>() * 2.0)
        }))
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let store = VoxelStore::build_from_cloud(&cloud, 1.0, dir.path()).unwrap();
        assert_eq!(store.manifest().voxels.len(), 8);

        let eval = plain_eval(6);
        let positions: Vec<(PointId, Vec3)> =
            cloud.points().iter().map(|r| (r.id, r.position)).collect();

        for &key in store.manifest().voxels.keys() {
            let pages = store.load_neighborhood(key).unwrap();
            let built = build_caches(&pages, &eval, 8, 1.0).unwrap();
            for (id, cache) in &built.caches {
                let own = positions[id.0 as usize].1;
                let mut oracle: Vec<(f64, PointId)> = positions
                    .iter()
                    .filter(|(other, _)| other != id)
                    .map(|&(other, p)| (p.dist2(own), other))
                    .collect();
                oracle.sort_unstable_by(|x, y| x.partial_cmp(y).unwrap());
                oracle.truncate(14);
                let got: Vec<(f64, PointId)> =
                    cache.entries().iter().map(|e| (e.dist2, e.id)).collect();
                assert_eq!(got, oracle, "cache for {id}");
            }
        }
    }

    #[test]
    fn invalidation_and_dirtiness() {
        // Three collinear points; k=1, b=0 means the middle point's cache is
        // truncated (universe has 2 candidates, cache holds 1).
        let pages =
            [page((0, 0, 0), &[(0, 0.1, 0.5, 0.5), (1, 0.4, 0.5, 0.5), (2, 0.9, 0.5, 0.5)])];
        let eval = plain_eval(1);
        let built = build_caches(&pages, &eval, 0, 1.0).unwrap();
        let (_, cache) = &built.caches[1];
        let mut cache = cache.clone();
        assert!(!cache.is_complete());
        assert!(!cache.is_dirty());
        assert_eq!(cache.entries().len(), 1);
        assert_eq!(cache.entries()[0].id, PointId(0), "0.3 beats 0.5");

        // Unknown id: explicit no-op.
        let before = cache.clone();
        assert!(!cache.invalidate(PointId(42)));
        assert_eq!(cache, before);

        // Losing the only cached neighbor exhausts the buffer.
        assert!(cache.invalidate(PointId(0)));
        assert_eq!(cache.valid_count(), 0);
        assert!(cache.is_dirty());
        // Invalidating twice changes nothing.
        assert!(!cache.invalidate(PointId(0)));
    }

    #[test]
    fn dirtiness_tracks_the_valid_count_exactly() {
        // 20 points on a line, k=6, b=8: remove cached neighbors one by one;
        // the cache must flip dirty exactly when fewer than 6 remain.
        let points: Vec<(u64, f64, f64, f64)> =
            (0..20).map(|i| (i as u64, i as f64 * 0.04, 0.5, 0.5)).collect();
        let pages = [page((0, 0, 0), &points)];
        let eval = plain_eval(6);
        let built = build_caches(&pages, &eval, 8, 1.0).unwrap();
        let mut cache = built.caches[10].1.clone();
        assert!(!cache.is_complete(), "19 candidates exceed the 14-entry cache");
        assert_eq!(cache.entries().len(), 14);

        let members: Vec<PointId> = cache.entries().iter().map(|e| e.id).collect();
        for (removed, member) in members.iter().take(9).enumerate() {
            assert!(cache.invalidate(*member));
            let valid = 14 - (removed + 1);
            assert_eq!(cache.valid_count(), valid);
            assert_eq!(cache.is_dirty(), valid < 6, "after {} removals", removed + 1);
        }
    }

    #[test]
    fn prefix_costs_match_slice_recomputation_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let points: Vec<(u64, f64, f64, f64)> = (0..120)
            .map(|i| (i as u64, rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()))
            .collect();
        let pages = [page((0, 0, 0), &points)];
        let eval = plain_eval(6);
        let built = build_caches(&pages, &eval, 8, 1.0).unwrap();

        for (_, cache) in &built.caches {
            let d2: Vec<f64> = cache.k_prefix().map(|e| e.dist2).collect();
            assert_eq!(cache.cost(&eval), cost_knn(&d2, 6, DEFAULT_EPSILON_D));
        }

        // After invalidations, the shrunken prefix still matches.
        let mut cache = built.caches[0].1.clone();
        let victims: Vec<PointId> = cache.entries().iter().map(|e| e.id).take(10).collect();
        for v in victims {
            cache.invalidate(v);
        }
        let d2: Vec<f64> = cache.k_prefix().map(|e| e.dist2).collect();
        assert_eq!(d2.len(), 4);
        assert_eq!(cache.cost(&eval), cost_knn(&d2, 6, DEFAULT_EPSILON_D));
    }

    #[test]
    fn straddling_points_see_across_the_boundary() {
        // A tight cluster split by the x=1 voxel wall.
        let a = page((0, 0, 0), &[(0, 0.98, 0.5, 0.5), (1, 0.96, 0.5, 0.5)]);
        let b = page((1, 0, 0), &[(2, 1.02, 0.5, 0.5), (3, 1.04, 0.5, 0.5)]);
        let eval = plain_eval(2);
        let built = build_caches(&[a, b], &eval, 0, 1.0).unwrap();
        let ids: Vec<PointId> = built.caches[0].1.k_prefix_ids().collect();
        assert_eq!(ids, vec![PointId(1), PointId(2)], "nearest neighbors cross the wall");
    }

    #[test]
    fn attribute_weights_are_frozen_at_build() {
        let mut rec_a = PointRecord::bare(0, Vec3::new(0.2, 0.5, 0.5));
        rec_a.normal = Some([0.0, 0.0, 1.0]);
        let mut rec_b = PointRecord::bare(1, Vec3::new(0.8, 0.5, 0.5));
        rec_b.normal = Some([0.0, 0.0, -1.0]);
        let pages = [VoxelPage {
            key: VoxelKey::new(0, 0, 0),
            records: vec![rec_a, rec_b],
            alive: vec![true, true],
        }];
        let eval =
            CostEvaluator::resolve(&CostConfig::new(CostKind::KnnNormal, 1)).unwrap();
        let built = build_caches(&pages, &eval, 0, 1.0).unwrap();
        assert_eq!(built.caches[0].1.entries()[0].weight, 0.0, "opposite normals");
        assert_eq!(built.caches[0].1.cost(&eval), 0.0);

        // Missing attribute: loud configuration error.
        let bare = page((0, 0, 0), &[(0, 0.2, 0.5, 0.5), (1, 0.8, 0.5, 0.5)]);
        assert!(build_caches(&[bare], &eval, 0, 1.0).is_err());
    }

    #[test]
    fn reverse_index_collects_watchers() {
        let pages = [page(
            (0, 0, 0),
            &[(0, 0.1, 0.5, 0.5), (1, 0.2, 0.5, 0.5), (2, 0.3, 0.5, 0.5), (3, 0.9, 0.5, 0.5)],
        )];
        let eval = plain_eval(2);
        let built = build_caches(&pages, &eval, 1, 1.0).unwrap();
        let mut index = ReverseIndex::new();
        for edge in &built.reverse {
            index.add_edge(edge);
        }
        // Point 1 is among the 2 nearest of 0 and 2 (and of 3: 0.6 < 0.7, 0.8).
        let watchers: Vec<PointId> =
            index.watchers(PointId(1)).iter().map(|w| w.0).collect();
        assert!(watchers.contains(&PointId(0)));
        assert!(watchers.contains(&PointId(2)));
        assert_eq!(index.watchers(PointId(42)), &[]);
    }
}
