//! In-core reference subsamplers to benchmark the out-of-core engine against.
//!
//! Three classics: greedy sample elimination driven by a radial falloff
//! weight, dart throwing with a bisected radius, and random-order purging
//! with a fixed radius. All three hold the whole cloud in memory — they are
//! quality yardsticks, not production paths, and the CLI gates them behind a
//! memory budget for exactly that reason.

use std::collections::{BTreeSet, BinaryHeap, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cloud::{PointCloud, PointId};
use crate::cost::{yuksel_cost, YukselParams};
use crate::error::{Error, Result};
use crate::knn::KdTree;
use crate::queue::CostKey;

/// Conservative in-core footprint per point: the record itself plus kd-tree
/// node, cost slot, and heap entry. Used by the CLI's memory-budget gate.
pub const IN_CORE_BYTES_PER_POINT: u64 =
    (std::mem::size_of::<crate::cloud::PointRecord>() + 80) as u64;

/// Refuses clouds whose estimated in-core working set exceeds `budget_mb`
/// mebibytes. The reference subsamplers hold everything in memory, so they
/// must fail loudly rather than thrash.
pub fn require_in_core_budget(points: u64, budget_mb: u64) -> Result<()> {
    let need = points.saturating_mul(IN_CORE_BYTES_PER_POINT);
    let have = budget_mb.saturating_mul(1024 * 1024);
    if need > have {
        return Err(Error::Config(format!(
            "{points} points need ~{need} bytes in core but the budget is {budget_mb} MiB \
             ({have} bytes); raise --budget-mb or use the out-of-core decimator"
        )));
    }
    Ok(())
}

/// Input echo attached to every baseline result: the governing radius (the
/// elimination radius, the bisected dart radius, or the purge radius), the
/// falloff clamp weight β where applicable, and the seed where one was used.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BaselineParams {
    pub radius: Option<f64>,
    pub beta: Option<f64>,
    pub seed: Option<u64>,
}

/// Outcome of one reference subsampler run.
#[derive(Debug, Clone)]
pub struct BaselineResult {
    /// Ids of the points that survived; always a subset of the input ids.
    pub surviving_ids: BTreeSet<PointId>,
    /// `surviving_ids.len()`, for convenience in reports.
    pub achieved_count: u64,
    /// Echo of the effective inputs.
    pub parameters: BaselineParams,
}

fn target_count(n: usize, lambda: f64) -> Result<u64> {
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(Error::Config(format!(
            "lambda must lie strictly between 0 and 1, got {lambda}"
        )));
    }
    let target = (lambda * n as f64).floor() as u64;
    if target == 0 {
        return Err(Error::Config(format!(
            "target count floor({lambda}*{n}) is zero; nothing would survive"
        )));
    }
    Ok(target)
}

/// Greedy sample elimination: repeatedly remove the point whose neighbors
/// crowd it the most.
///
/// Every point is weighted by a radial falloff over its neighbors within the
/// elimination radius `r` — derived from the bounding-box volume and the
/// target count, so roughly one survivor fits per `r`-ball — and the
/// highest-weight point is removed until ⌊λ·|C|⌋ remain. Neighbor weights
/// are kept current with a lazy-deletion max-heap: each removal re-weighs
/// only the removed point's neighbors and pushes fresh heap entries, leaving
/// stale ones to be skipped on pop. Ties break toward the higher id.
///
/// Exactly planar clouds have a zero bounding-box volume, which leaves the
/// radius underived; they are rejected.
pub fn yuksel_eliminate(
    cloud: &PointCloud,
    lambda: f64,
    alpha: f64,
    beta: f64,
    gamma: f64,
) -> Result<BaselineResult> {
    yuksel_eliminate_traced(cloud, lambda, alpha, beta, gamma).map(|(result, _)| result)
}

/// As [`yuksel_eliminate`], also returning the removal order for audits.
fn yuksel_eliminate_traced(
    cloud: &PointCloud,
    lambda: f64,
    alpha: f64,
    beta: f64,
    gamma: f64,
) -> Result<(BaselineResult, Vec<PointId>)> {
    let n = cloud.len();
    let target = target_count(n, lambda)?;
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Config(format!("beta must lie in [0, 1], got {beta}")));
    }
    let params = YukselParams {
        alpha,
        beta,
        gamma,
        lambda,
        volume: cloud.bounds().volume(),
        current_count: target,
    };
    let radius = params.radius()?;
    let r_min = params.r_min(radius);

    let entries: Vec<(PointId, crate::geom::Vec3)> =
        cloud.points().iter().map(|p| (p.id, p.position)).collect();
    let tree = KdTree::build(&entries);
    let index_of: HashMap<PointId, usize> =
        entries.iter().enumerate().map(|(i, &(id, _))| (id, i)).collect();

    let mut alive = vec![true; n];
    let mut stamps = vec![0u64; n];
    let mut heap: BinaryHeap<(CostKey, u64)> = BinaryHeap::with_capacity(n);

    let weigh = |idx: usize, alive: &[bool]| -> f64 {
        let (id, pos) = entries[idx];
        let dists: Vec<f64> = tree
            .within_radius(pos, radius, Some(id))
            .into_iter()
            .filter(|nb| alive[index_of[&nb.id]])
            .map(|nb| nb.dist)
            .collect();
        yuksel_cost(&dists, radius, r_min, alpha)
    };

    for idx in 0..n {
        heap.push((CostKey { cost: weigh(idx, &alive), id: entries[idx].0 }, 0));
    }

    let mut alive_count = n as u64;
    let mut removed_order = Vec::with_capacity(n - target as usize);
    while alive_count > target {
        let (key, stamp) = heap.pop().expect("every alive point has a heap entry");
        let idx = index_of[&key.id];
        if !alive[idx] || stamp != stamps[idx] {
            continue; // lazy deletion: superseded or already removed
        }
        alive[idx] = false;
        alive_count -= 1;
        removed_order.push(key.id);
        for nb in tree.within_radius(entries[idx].1, radius, Some(key.id)) {
            let nidx = index_of[&nb.id];
            if alive[nidx] {
                stamps[nidx] += 1;
                heap.push((CostKey { cost: weigh(nidx, &alive), id: nb.id }, stamps[nidx]));
            }
        }
    }

    let surviving_ids: BTreeSet<PointId> = entries
        .iter()
        .enumerate()
        .filter(|(i, _)| alive[*i])
        .map(|(_, &(id, _))| id)
        .collect();
    Ok((
        BaselineResult {
            achieved_count: surviving_ids.len() as u64,
            surviving_ids,
            parameters: BaselineParams {
                radius: Some(radius),
                beta: Some(beta),
                seed: None,
            },
        },
        removed_order,
    ))
}

/// Greedy acceptance sweep used by [`dart_throwing`]: walk `order`, keep a
/// point iff every already-kept point is at least `radius` away. Returns the
/// kept positions as indices into `order`'s referents.
fn greedy_accept(tree: &KdTree, entries: &[(PointId, crate::geom::Vec3)], order: &[usize], radius: f64) -> Vec<usize> {
    let r2 = radius * radius;
    let mut accepted_flag = vec![false; entries.len()];
    let mut accepted = Vec::new();
    let index_of: HashMap<PointId, usize> =
        entries.iter().enumerate().map(|(i, &(id, _))| (id, i)).collect();
    for &idx in order {
        let (id, pos) = entries[idx];
        let conflict = tree
            .within_radius2(pos, radius, Some(id))
            .into_iter()
            // Strict: a kept point at exactly `radius` does not conflict,
            // keeping the output's min pairwise distance >= radius.
            .any(|(d2, nid)| d2 < r2 && accepted_flag[index_of[&nid]]);
        if !conflict {
            accepted_flag[idx] = true;
            accepted.push(idx);
        }
    }
    accepted
}

/// Dart throwing with radius bisection.
///
/// Points are shuffled once by `seed`, then greedily accepted at a candidate
/// radius; the radius is bisected until the accepted count lands in
/// `[target, target·(1+tolerance)]`, and a seeded random trim drops the
/// excess for an exact count. Clouds that cannot reach the window — all
/// points coincident, say — fail after 64 bisection steps.
pub fn dart_throwing(
    cloud: &PointCloud,
    lambda: f64,
    seed: u64,
    tolerance: f64,
) -> Result<BaselineResult> {
    let n = cloud.len();
    let target = target_count(n, lambda)?;
    if !(tolerance >= 0.0) {
        return Err(Error::Config(format!("tolerance must be nonnegative, got {tolerance}")));
    }
    let entries: Vec<(PointId, crate::geom::Vec3)> =
        cloud.points().iter().map(|p| (p.id, p.position)).collect();
    let tree = KdTree::build(&entries);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);

    let in_window = |c: usize| c as u64 >= target && c as f64 <= target as f64 * (1.0 + tolerance);
    let mut lo = 0.0f64; // accepts everything: count = n >= target
    let mut hi = cloud.bounds().diagonal() + 1.0; // accepts exactly 1 <= target
    let mut found: Option<(f64, Vec<usize>)> = None;
    for _ in 0..64 {
        let mid = 0.5 * (lo + hi);
        let accepted = greedy_accept(&tree, &entries, &order, mid);
        if in_window(accepted.len()) {
            found = Some((mid, accepted));
            break;
        }
        if (accepted.len() as u64) < target {
            hi = mid; // too sparse: radius too large
        } else {
            lo = mid; // too many survivors: radius too small
        }
    }
    let (radius, mut accepted) = found.ok_or_else(|| {
        Error::Data(format!(
            "radius bisection could not reach {target}..={:.0} accepted points in 64 steps; \
             the cloud is too degenerate for dart throwing",
            target as f64 * (1.0 + tolerance)
        ))
    })?;

    // Seeded uniform trim to the exact target.
    accepted.shuffle(&mut rng);
    accepted.truncate(target as usize);

    let surviving_ids: BTreeSet<PointId> = accepted.into_iter().map(|i| entries[i].0).collect();
    Ok(BaselineResult {
        achieved_count: surviving_ids.len() as u64,
        surviving_ids,
        parameters: BaselineParams {
            radius: Some(radius),
            beta: None,
            seed: Some(seed),
        },
    })
}

/// Random-order purge: visit points in a seeded shuffle and keep each one
/// iff no already-kept point lies strictly within `radius`. There is no
/// count control — the survivor count is whatever the radius dictates.
pub fn random_purge(cloud: &PointCloud, radius: f64, seed: u64) -> Result<BaselineResult> {
    if !(radius > 0.0) {
        return Err(Error::Config(format!("purge radius must be positive, got {radius}")));
    }
    let entries: Vec<(PointId, crate::geom::Vec3)> =
        cloud.points().iter().map(|p| (p.id, p.position)).collect();
    let tree = KdTree::build(&entries);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..entries.len()).collect();
    order.shuffle(&mut rng);

    let kept_idx = greedy_accept(&tree, &entries, &order, radius);
    let surviving_ids: BTreeSet<PointId> = kept_idx.into_iter().map(|i| entries[i].0).collect();
    Ok(BaselineResult {
        achieved_count: surviving_ids.len() as u64,
        surviving_ids,
        parameters: BaselineParams {
            radius: Some(radius),
            beta: None,
            seed: Some(seed),
        },
    })
}
