//! The out-of-core greedy thinning engine.
//!
//! A decimation run alternates two passes over the voxel store until exactly
//! ⌊λ·n⌋ points remain:
//!
//! * **Cost pass** — sweep voxels in key order; for each, load its 27-voxel
//!   working set, build k+b neighbor caches for the center voxel's points,
//!   compute every point's cost, and feed a bounded queue holding the
//!   target-count *lowest* (cost, id) pairs. The queue's maximum is the
//!   removal threshold `w_up`: any point costing strictly more provably
//!   cannot be among the points that must survive. Caches and reverse edges
//!   go to scratch files so the removal pass never recomputes geometry.
//!
//! * **Removal pass** — remove points in globally descending (cost, id)
//!   order while their *freshly recomputed* cost stays above `w_up`. A
//!   max-heap over per-voxel cost maxima orders the voxels; because
//!   removals only ever lower costs, a popped maximum is an upper bound
//!   and can be safely re-verified and pushed back when stale. Each
//!   removal invalidates the cached neighborhoods that contained it (via
//!   reverse edges), lowering those costs in place. Caches that lose too
//!   many members go *dirty* and their points are exempt until rebuilt by
//!   the next cost pass.
//!
//! Voxel files are never touched mid-iteration: removals accumulate in
//! scratch files and are committed (rewrite + manifest + checkpoint) only at
//! iteration boundaries, so a crash mid-pass leaves the store exactly at the
//! previous boundary and [`resume`] can continue from it.

use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Cursor, Read, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use rayon::prelude::*;

use crate::cloud::PointId;
use crate::cost::{CostConfig, CostEvaluator, CostKind, YukselParams};
use crate::error::{Error, Result};
use crate::neighborhood::{build_caches, CacheEntry, NeighborCache, ReverseEdge, ReverseIndex};
use crate::queue::{CostKey, CostQueue};
use crate::voxel::{Manifest, VoxelKey, VoxelStore};

/// Buffered cross-voxel scratch appends (reverse edges, pending
/// invalidations) are flushed to disk once this many entries accumulate,
/// bounding the buffer around a hundred kilobytes.
const SCRATCH_FLUSH_ENTRIES: usize = 2048;

/// Everything configurable about a decimation run.
#[derive(Debug, Clone)]
pub struct DecimateOptions {
    /// Fraction of points kept; the target count is ⌊lambda·n⌋.
    pub lambda: f64,
    /// Cost function; for the radial elimination kind, its kernel radius is
    /// derived from the store bounds and the target count (any provided
    /// volume/count fields are overridden).
    pub cost: CostConfig,
    /// Buffer neighbors cached beyond the cost's k, absorbing removals
    /// before a cache goes dirty.
    pub buffer: usize,
    /// Recorded in the report; the engine itself is fully deterministic.
    pub seed: u64,
    /// Worker threads for the cost pass (the removal pass is inherently
    /// sequential).
    pub threads: usize,
    /// Cached voxel bundles held in memory during the removal pass.
    pub page_cache: usize,
    /// When set, one line per removal — `iter voxel id cost w_up` — is
    /// written here.
    pub audit_path: Option<PathBuf>,
    /// Stop after this many iteration boundaries (checkpoint written),
    /// leaving the run resumable. Test hook for interruption.
    pub stop_after_iterations: Option<usize>,
}

impl DecimateOptions {
    pub fn new(lambda: f64) -> DecimateOptions {
        DecimateOptions {
            lambda,
            cost: CostConfig::knn(6),
            buffer: 8,
            seed: 0,
            threads: 1,
            page_cache: 8,
            audit_path: None,
            stop_after_iterations: None,
        }
    }
}

/// What a decimation run did.
#[derive(Debug, Clone)]
pub struct DecimationReport {
    /// Point count when the run (or the run this resumed) started.
    pub initial_count: u64,
    pub target_count: u64,
    pub final_count: u64,
    /// Total finished iterations, including any before a resume.
    pub iterations: usize,
    pub removed_per_iteration: Vec<u64>,
    /// Per iteration: points whose truncated cache reached a full voxel
    /// size — nonzero means the voxel grid is too fine for exact
    /// partition-independence.
    pub reach_saturated_per_iteration: Vec<u64>,
    pub wall_time_per_iteration: Vec<Duration>,
    pub seed: u64,
    /// False when stopped early by `stop_after_iterations`.
    pub completed: bool,
    pub resumed: bool,
}

/// Where a store's decimation checkpoint lives.
pub fn checkpoint_path(store: &VoxelStore) -> PathBuf {
    store.dir().join("checkpoint.bin")
}

/// Thins the store to ⌊lambda·n⌋ points. Starts fresh: any checkpoint or
/// scratch left by an earlier run on this store is discarded first.
pub fn decimate(store: &mut VoxelStore, options: &DecimateOptions) -> Result<DecimationReport> {
    validate_options(options)?;
    let initial = store.manifest().total_points();
    if initial == 0 {
        return Err(Error::Data("cannot decimate an empty store".into()));
    }
    let target = (options.lambda * initial as f64).floor() as u64;
    if target == 0 {
        return Err(Error::Config(format!(
            "lambda {} of {initial} points leaves a target of zero",
            options.lambda
        )));
    }

    let ckpt = checkpoint_path(store);
    if ckpt.exists() {
        fs::remove_file(&ckpt).map_err(|e| Error::io(&ckpt, e))?;
    }
    let scratch = store.scratch_dir();
    if scratch.exists() {
        fs::remove_dir_all(&scratch).map_err(|e| Error::io(&scratch, e))?;
    }

    let (eval, stamp) = resolve_run(options, store, target)?;
    run(store, &eval, stamp, options, initial, target, Vec::new(), false)
}

/// Continues a checkpointed run to completion. The store must be untouched
/// since the checkpoint was written and `options` must describe the same
/// run; the final surviving id set is identical to an uninterrupted run.
pub fn resume(store: &mut VoxelStore, options: &DecimateOptions) -> Result<DecimationReport> {
    validate_options(options)?;
    let path = checkpoint_path(store);
    if !path.exists() {
        return Err(Error::Data(format!(
            "no checkpoint at {} to resume from",
            path.display()
        )));
    }
    let ckpt = read_checkpoint(&path)?;
    let current = store.manifest_fingerprint()?;
    if current != ckpt.fingerprint {
        return Err(Error::CheckpointMismatch(
            "the store has changed since this checkpoint was written".into(),
        ));
    }
    let (eval, stamp) = resolve_run(options, store, ckpt.target)?;
    if stamp != ckpt.stamp {
        return Err(Error::CheckpointMismatch(
            "decimation options differ from the checkpointed run".into(),
        ));
    }
    run(store, &eval, stamp, options, ckpt.original, ckpt.target, ckpt.iterations, true)
}

fn validate_options(options: &DecimateOptions) -> Result<()> {
    if !(options.lambda > 0.0 && options.lambda < 1.0) {
        return Err(Error::Config(format!(
            "keep fraction lambda must be in (0, 1), got {}",
            options.lambda
        )));
    }
    if options.threads == 0 {
        return Err(Error::Config("thread count must be at least 1".into()));
    }
    if options.page_cache == 0 {
        return Err(Error::Config("page cache must hold at least 1 bundle".into()));
    }
    if options.cost.effective_k() + options.buffer > u16::MAX as usize {
        return Err(Error::Config(format!(
            "k + buffer = {} exceeds the cache limit of {}",
            options.cost.effective_k() + options.buffer,
            u16::MAX
        )));
    }
    Ok(())
}

/// Resolves the evaluator for this store/target and stamps the
/// configuration for checkpoint compatibility checks.
fn resolve_run(
    options: &DecimateOptions,
    store: &VoxelStore,
    target: u64,
) -> Result<(CostEvaluator, ConfigStamp)> {
    let mut config = options.cost;
    if config.kind == CostKind::Yuksel {
        let base = config
            .yuksel
            .unwrap_or_else(|| YukselParams::with_defaults(options.lambda, 0.0, 0));
        config.yuksel = Some(YukselParams {
            alpha: base.alpha,
            beta: base.beta,
            gamma: base.gamma,
            lambda: options.lambda,
            volume: store.manifest().bounds.volume(),
            current_count: target,
        });
    }
    let eval = CostEvaluator::resolve(&config)?;
    let stamp = ConfigStamp::new(&config, options);
    Ok((eval, stamp))
}

// ---------------------------------------------------------------------------
// Checkpoint

/// Exact-match fingerprint of a run's configuration (f64s compared by bits).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ConfigStamp {
    kind: u8,
    k: u64,
    buffer: u64,
    epsilon_bits: u64,
    sigma_bits: u64,
    alpha_bits: u64,
    beta_bits: u64,
    gamma_bits: u64,
    lambda_bits: u64,
    seed: u64,
}

impl ConfigStamp {
    fn new(config: &CostConfig, options: &DecimateOptions) -> ConfigStamp {
        let (a, b, g) = match config.yuksel {
            Some(p) if config.kind == CostKind::Yuksel => (p.alpha, p.beta, p.gamma),
            _ => (0.0, 0.0, 0.0),
        };
        ConfigStamp {
            kind: kind_code(config.kind),
            k: config.k as u64,
            buffer: options.buffer as u64,
            epsilon_bits: config.epsilon_d.to_bits(),
            sigma_bits: config.sigma_c.to_bits(),
            alpha_bits: a.to_bits(),
            beta_bits: b.to_bits(),
            gamma_bits: g.to_bits(),
            lambda_bits: options.lambda.to_bits(),
            seed: options.seed,
        }
    }
}

fn kind_code(kind: CostKind) -> u8 {
    match kind {
        CostKind::K1 => 0,
        CostKind::Knn => 1,
        CostKind::KnnNormal => 2,
        CostKind::KnnColor => 3,
        CostKind::Yuksel => 4,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct IterationStamp {
    removed: u64,
    reach_saturated: u64,
    wall_secs: f64,
}

struct Checkpoint {
    fingerprint: String,
    stamp: ConfigStamp,
    original: u64,
    target: u64,
    iterations: Vec<IterationStamp>,
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"CTCKPT01";

fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut buf = Vec::with_capacity(256);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    let fp = ckpt.fingerprint.as_bytes();
    buf.write_u16::<LE>(fp.len() as u16).expect("vec write");
    buf.extend_from_slice(fp);
    let s = &ckpt.stamp;
    buf.push(s.kind);
    for v in [
        s.k,
        s.buffer,
        s.epsilon_bits,
        s.sigma_bits,
        s.alpha_bits,
        s.beta_bits,
        s.gamma_bits,
        s.lambda_bits,
        s.seed,
        ckpt.original,
        ckpt.target,
        ckpt.iterations.len() as u64,
    ] {
        buf.write_u64::<LE>(v).expect("vec write");
    }
    for it in &ckpt.iterations {
        buf.write_u64::<LE>(it.removed).expect("vec write");
        buf.write_u64::<LE>(it.reach_saturated).expect("vec write");
        buf.write_f64::<LE>(it.wall_secs).expect("vec write");
    }
    let tmp = path.with_extension("bin.tmp");
    fs::write(&tmp, &buf).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let corrupt = || Error::Corruption(format!("checkpoint {} is malformed", path.display()));
    let mut cur = Cursor::new(bytes.as_slice());
    let mut magic = [0u8; 8];
    cur.read_exact(&mut magic).map_err(|_| corrupt())?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(corrupt());
    }
    let fp_len = cur.read_u16::<LE>().map_err(|_| corrupt())? as usize;
    let mut fp = vec![0u8; fp_len];
    cur.read_exact(&mut fp).map_err(|_| corrupt())?;
    let fingerprint = String::from_utf8(fp).map_err(|_| corrupt())?;
    let kind = cur.read_u8().map_err(|_| corrupt())?;
    let mut words = [0u64; 12];
    for w in &mut words {
        *w = cur.read_u64::<LE>().map_err(|_| corrupt())?;
    }
    let stamp = ConfigStamp {
        kind,
        k: words[0],
        buffer: words[1],
        epsilon_bits: words[2],
        sigma_bits: words[3],
        alpha_bits: words[4],
        beta_bits: words[5],
        gamma_bits: words[6],
        lambda_bits: words[7],
        seed: words[8],
    };
    let n_iters = words[11] as usize;
    let mut iterations = Vec::with_capacity(n_iters);
    for _ in 0..n_iters {
        let removed = cur.read_u64::<LE>().map_err(|_| corrupt())?;
        let reach_saturated = cur.read_u64::<LE>().map_err(|_| corrupt())?;
        let wall_secs = cur.read_f64::<LE>().map_err(|_| corrupt())?;
        iterations.push(IterationStamp { removed, reach_saturated, wall_secs });
    }
    Ok(Checkpoint { fingerprint, stamp, original: words[9], target: words[10], iterations })
}

// ---------------------------------------------------------------------------
// Scratch files

fn nc_path(scratch: &Path, key: VoxelKey) -> PathBuf {
    scratch.join(format!("nc_{key}.bin"))
}

fn rev_path(scratch: &Path, key: VoxelKey) -> PathBuf {
    scratch.join(format!("rev_{key}.bin"))
}

fn dead_path(scratch: &Path, key: VoxelKey) -> PathBuf {
    scratch.join(format!("dead_{key}.bin"))
}

fn pend_path(scratch: &Path, key: VoxelKey) -> PathBuf {
    scratch.join(format!("pend_{key}.bin"))
}

fn append_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

fn write_nc<'a>(
    path: &Path,
    items: impl Iterator<Item = (PointId, &'a NeighborCache)>,
) -> Result<()> {
    let mut buf = Vec::new();
    for (id, cache) in items {
        buf.write_u64::<LE>(id.0).expect("vec write");
        buf.push(cache.is_complete() as u8);
        buf.write_u16::<LE>(cache.entries().len() as u16).expect("vec write");
        for (entry, valid) in cache.entries().iter().zip(cache.validity()) {
            buf.write_u64::<LE>(entry.id.0).expect("vec write");
            buf.write_f64::<LE>(entry.dist2).expect("vec write");
            buf.write_f64::<LE>(entry.weight).expect("vec write");
            buf.push(*valid as u8);
        }
    }
    fs::write(path, &buf).map_err(|e| Error::io(path, e))
}

fn read_nc(path: &Path, k: usize) -> Result<(Vec<PointId>, HashMap<PointId, NeighborCache>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let corrupt = || Error::Corruption(format!("cache scratch {} is malformed", path.display()));
    let len = bytes.len() as u64;
    let mut cur = Cursor::new(bytes.as_slice());
    let mut order = Vec::new();
    let mut caches = HashMap::new();
    while cur.position() < len {
        let id = PointId(cur.read_u64::<LE>().map_err(|_| corrupt())?);
        let complete = cur.read_u8().map_err(|_| corrupt())? != 0;
        let n = cur.read_u16::<LE>().map_err(|_| corrupt())? as usize;
        let mut entries = Vec::with_capacity(n);
        let mut valid = Vec::with_capacity(n);
        for _ in 0..n {
            let nid = PointId(cur.read_u64::<LE>().map_err(|_| corrupt())?);
            let dist2 = cur.read_f64::<LE>().map_err(|_| corrupt())?;
            let weight = cur.read_f64::<LE>().map_err(|_| corrupt())?;
            let v = cur.read_u8().map_err(|_| corrupt())? != 0;
            entries.push(CacheEntry { id: nid, dist2, weight });
            valid.push(v);
        }
        order.push(id);
        caches.insert(id, NeighborCache::from_parts(entries, valid, complete, k));
    }
    Ok((order, caches))
}

fn read_rev(path: &Path) -> Result<ReverseIndex> {
    let mut index = ReverseIndex::new();
    if !path.exists() {
        return Ok(index);
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let corrupt = || Error::Corruption(format!("edge scratch {} is malformed", path.display()));
    let len = bytes.len() as u64;
    let mut cur = Cursor::new(bytes.as_slice());
    while cur.position() < len {
        let target = PointId(cur.read_u64::<LE>().map_err(|_| corrupt())?);
        let source = PointId(cur.read_u64::<LE>().map_err(|_| corrupt())?);
        let i = cur.read_i64::<LE>().map_err(|_| corrupt())?;
        let j = cur.read_i64::<LE>().map_err(|_| corrupt())?;
        let k = cur.read_i64::<LE>().map_err(|_| corrupt())?;
        index.add(target, source, VoxelKey::new(i, j, k));
    }
    Ok(index)
}

fn read_dead_ids(path: &Path) -> Result<Vec<PointId>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Corruption(format!(
            "removal scratch {} is malformed",
            path.display()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| PointId(u64::from_le_bytes(c.try_into().expect("chunk of 8"))))
        .collect())
}

fn read_pend(path: &Path) -> Result<Vec<(PointId, PointId)>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 16 != 0 {
        return Err(Error::Corruption(format!(
            "invalidation scratch {} is malformed",
            path.display()
        )));
    }
    Ok(bytes
        .chunks_exact(16)
        .map(|c| {
            let source = u64::from_le_bytes(c[..8].try_into().expect("8 bytes"));
            let removed = u64::from_le_bytes(c[8..].try_into().expect("8 bytes"));
            (PointId(source), PointId(removed))
        })
        .collect())
}

// ---------------------------------------------------------------------------
// The run loop

#[allow(clippy::too_many_arguments)]
fn run(
    store: &mut VoxelStore,
    eval: &CostEvaluator,
    stamp: ConfigStamp,
    options: &DecimateOptions,
    original: u64,
    target: u64,
    mut history: Vec<IterationStamp>,
    resumed: bool,
) -> Result<DecimationReport> {
    let mut alive = store.manifest().total_points();
    if alive < target {
        return Err(Error::Data(format!(
            "store holds {alive} points, below the target of {target}"
        )));
    }

    let mut audit = match &options.audit_path {
        Some(path) => {
            let file = OpenOptions::new()
                .create(true)
                .append(resumed)
                .truncate(!resumed)
                .write(true)
                .open(path)
                .map_err(|e| Error::io(path, e))?;
            Some(BufWriter::new(file))
        }
        None => None,
    };

    let scratch = store.scratch_dir();
    let mut new_iterations = 0usize;
    while alive > target {
        let started = Instant::now();
        let iteration = history.len() + 1;
        if scratch.exists() {
            fs::remove_dir_all(&scratch).map_err(|e| Error::io(&scratch, e))?;
        }
        fs::create_dir_all(&scratch).map_err(|e| Error::io(&scratch, e))?;

        let cost_pass = pass_a(store, eval, options, target)?;
        let w_up = cost_pass
            .queue
            .w_up()
            .ok_or_else(|| Error::Internal("cost pass produced an empty queue".into()))?;

        let mut remover = PassB {
            store: &mut *store,
            eval,
            scratch: scratch.clone(),
            cache_capacity: options.page_cache,
            bundles: HashMap::new(),
            recency: Vec::new(),
            pend_buffer: BTreeMap::new(),
            pend_buffered: 0,
            dead_voxels: BTreeSet::new(),
            removed: 0,
            iteration,
            w_up,
            audit: &mut audit,
        };
        remover.execute(&cost_pass, alive, target)?;
        let removed = remover.removed;
        let dead_voxels = std::mem::take(&mut remover.dead_voxels);
        drop(remover);
        alive -= removed;

        // Iteration boundary: fold the scratch removals into the voxel
        // files, persist the manifest, then checkpoint.
        for &key in &dead_voxels {
            let dead: HashSet<u64> =
                read_dead_ids(&dead_path(&scratch, key))?.iter().map(|id| id.0).collect();
            let mut page = store.load_page(key)?;
            let mut hits = 0usize;
            for (i, rec) in page.records.iter().enumerate() {
                if dead.contains(&rec.id.0) {
                    page.alive[i] = false;
                    hits += 1;
                }
            }
            if hits != dead.len() {
                return Err(Error::Internal(format!(
                    "voxel {key}: {hits} of {} recorded removals found on disk",
                    dead.len()
                )));
            }
            store.commit_removals(&page)?;
        }
        if store.manifest().total_points() != alive {
            return Err(Error::Internal(format!(
                "committed store holds {} points, expected {alive}",
                store.manifest().total_points()
            )));
        }
        store.save_manifest()?;
        history.push(IterationStamp {
            removed,
            reach_saturated: cost_pass.reach_saturated,
            wall_secs: started.elapsed().as_secs_f64(),
        });
        write_checkpoint(
            &checkpoint_path(store),
            &Checkpoint {
                fingerprint: store.manifest_fingerprint()?,
                stamp,
                original,
                target,
                iterations: history.clone(),
            },
        )?;
        fs::remove_dir_all(&scratch).map_err(|e| Error::io(&scratch, e))?;
        if let Some(w) = audit.as_mut() {
            w.flush().map_err(|e| Error::io(options.audit_path.as_ref().unwrap(), e))?;
        }

        new_iterations += 1;
        log::info!(
            "iteration {iteration}: removed {removed}, {alive} of {original} alive \
             (target {target}), w_up {w_up:.6e}"
        );
        if let Some(stop) = options.stop_after_iterations {
            if new_iterations >= stop && alive > target {
                return Ok(make_report(original, target, alive, options.seed, &history, false, resumed));
            }
        }
    }

    Ok(make_report(original, target, alive, options.seed, &history, true, resumed))
}

fn make_report(
    original: u64,
    target: u64,
    alive: u64,
    seed: u64,
    history: &[IterationStamp],
    completed: bool,
    resumed: bool,
) -> DecimationReport {
    DecimationReport {
        initial_count: original,
        target_count: target,
        final_count: alive,
        iterations: history.len(),
        removed_per_iteration: history.iter().map(|i| i.removed).collect(),
        reach_saturated_per_iteration: history.iter().map(|i| i.reach_saturated).collect(),
        wall_time_per_iteration: history
            .iter()
            .map(|i| Duration::from_secs_f64(i.wall_secs))
            .collect(),
        seed,
        completed,
        resumed,
    }
}

// ---------------------------------------------------------------------------
// Pass A: cost update

struct CostPass {
    queue: CostQueue,
    /// Per-voxel (max cost, argmax id) over its alive points, one entry per
    /// occupied voxel. A flat vec: keys are unique by construction and the
    /// consumers (removal heap seed, global argmax) never look one up.
    tops: Vec<(VoxelKey, CostKey)>,
    reach_saturated: u64,
}

impl CostPass {
    /// The single highest-cost point anywhere (ties to the higher id).
    fn global_top(&self) -> Option<(VoxelKey, CostKey)> {
        self.tops.iter().copied().max_by(|a, b| a.1.cmp(&b.1))
    }
}

struct VoxelCostResult {
    key: VoxelKey,
    entries: Vec<CostKey>,
    top: Option<CostKey>,
    reach_saturated: u64,
    reverse: Vec<ReverseEdge>,
}

fn pass_a(
    store: &mut VoxelStore,
    eval: &CostEvaluator,
    options: &DecimateOptions,
    target: u64,
) -> Result<CostPass> {
    let scratch = store.scratch_dir();
    let keys: Vec<VoxelKey> = store.manifest().voxels.keys().copied().collect();
    let voxel_size = store.manifest().voxel_size;

    let mut queue = CostQueue::new(target as usize);
    let mut tops: Vec<(VoxelKey, CostKey)> = Vec::with_capacity(keys.len());
    let mut reach_saturated = 0u64;
    // Reverse edges are binned by the *target's* voxel; buffered so
    // appends hit each file in batches.
    let mut rev_buffer: BTreeMap<VoxelKey, Vec<u8>> = BTreeMap::new();
    let mut rev_buffered = 0usize;

    // Folds one voxel's results into the pass accumulators and records its
    // cost maximum in the manifest (a fresh cost pass leaves nothing dirty).
    let absorb = |result: VoxelCostResult,
                      manifest: &mut Manifest,
                      queue: &mut CostQueue,
                      tops: &mut Vec<(VoxelKey, CostKey)>,
                      reach: &mut u64,
                      rev_buffer: &mut BTreeMap<VoxelKey, Vec<u8>>,
                      rev_buffered: &mut usize|
     -> Result<()> {
        for ck in &result.entries {
            queue.insert(ck.cost, ck.id);
        }
        let entry = manifest
            .voxels
            .get_mut(&result.key)
            .ok_or_else(|| Error::Internal(format!("voxel {} vanished mid-pass", result.key)))?;
        entry.max_cost = result.top.map(|ck| ck.cost);
        entry.dirty_count = 0;
        if let Some(top) = result.top {
            tops.push((result.key, top));
        }
        *reach += result.reach_saturated;
        for edge in &result.reverse {
            let buf = rev_buffer.entry(edge.target_voxel).or_default();
            buf.write_u64::<LE>(edge.target.0).expect("vec write");
            buf.write_u64::<LE>(edge.source.0).expect("vec write");
            buf.write_i64::<LE>(edge.source_voxel.i).expect("vec write");
            buf.write_i64::<LE>(edge.source_voxel.j).expect("vec write");
            buf.write_i64::<LE>(edge.source_voxel.k).expect("vec write");
            *rev_buffered += 1;
        }
        if *rev_buffered >= SCRATCH_FLUSH_ENTRIES {
            for (key, bytes) in std::mem::take(rev_buffer) {
                append_file(&rev_path(&scratch, key), &bytes)?;
            }
            *rev_buffered = 0;
        }
        Ok(())
    };

    if options.threads == 1 {
        for &key in &keys {
            let result = cost_one_voxel(store, eval, options.buffer, voxel_size, &scratch, key)?;
            absorb(
                result,
                store.manifest_mut(),
                &mut queue,
                &mut tops,
                &mut reach_saturated,
                &mut rev_buffer,
                &mut rev_buffered,
            )?;
        }
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(options.threads)
            .build()
            .map_err(|e| Error::Internal(format!("thread pool: {e}")))?;
        let shared: &VoxelStore = store;
        let results: Vec<VoxelCostResult> = pool.install(|| {
            keys.par_iter()
                .map(|&key| cost_one_voxel(shared, eval, options.buffer, voxel_size, &scratch, key))
                .collect::<Result<Vec<_>>>()
        })?;
        for result in results {
            absorb(
                result,
                store.manifest_mut(),
                &mut queue,
                &mut tops,
                &mut reach_saturated,
                &mut rev_buffer,
                &mut rev_buffered,
            )?;
        }
    }
    for (key, bytes) in rev_buffer {
        append_file(&rev_path(&scratch, key), &bytes)?;
    }

    Ok(CostPass { queue, tops, reach_saturated })
}

fn cost_one_voxel(
    store: &VoxelStore,
    eval: &CostEvaluator,
    buffer: usize,
    voxel_size: f64,
    scratch: &Path,
    key: VoxelKey,
) -> Result<VoxelCostResult> {
    let pages = store.load_neighborhood(key)?;
    let built = build_caches(&pages, eval, buffer, voxel_size)?;
    write_nc(&nc_path(scratch, key), built.caches.iter().map(|(id, c)| (*id, c)))?;

    let mut entries = Vec::with_capacity(built.caches.len());
    let mut top: Option<CostKey> = None;
    for (id, cache) in &built.caches {
        let ck = CostKey::new(cache.cost(eval), *id);
        if top.map_or(true, |t| ck > t) {
            top = Some(ck);
        }
        entries.push(ck);
    }
    Ok(VoxelCostResult {
        key,
        entries,
        top,
        reach_saturated: built.reach_saturated as u64,
        reverse: built.reverse,
    })
}

// ---------------------------------------------------------------------------
// Pass B: removal

struct Bundle {
    /// Original page order of this voxel's points; dead ids are simply
    /// absent from `caches`.
    order: Vec<PointId>,
    caches: HashMap<PointId, NeighborCache>,
    watchers: ReverseIndex,
    dead_buffer: Vec<PointId>,
}

impl Bundle {
    /// Highest (cost, id) among alive, non-dirty points.
    fn top(&self, eval: &CostEvaluator) -> Option<CostKey> {
        self.caches
            .iter()
            .filter(|(_, c)| !c.is_dirty())
            .map(|(id, c)| CostKey::new(c.cost(eval), *id))
            .max()
    }
}

struct PassB<'a> {
    store: &'a mut VoxelStore,
    eval: &'a CostEvaluator,
    scratch: PathBuf,
    cache_capacity: usize,
    bundles: HashMap<VoxelKey, Bundle>,
    recency: Vec<VoxelKey>,
    pend_buffer: BTreeMap<VoxelKey, Vec<(PointId, PointId)>>,
    pend_buffered: usize,
    dead_voxels: BTreeSet<VoxelKey>,
    removed: u64,
    iteration: usize,
    w_up: f64,
    audit: &'a mut Option<BufWriter<File>>,
}

impl PassB<'_> {
    fn execute(&mut self, cost_pass: &CostPass, alive_at_start: u64, target: u64) -> Result<()> {
        let mut heap: BinaryHeap<(CostKey, VoxelKey)> = cost_pass
            .tops
            .iter()
            .filter(|(_, ck)| ck.cost > self.w_up)
            .map(|&(key, ck)| (ck, key))
            .collect();

        'voxels: while alive_at_start - self.removed > target {
            let Some(&(claim, key)) = heap.peek() else { break };
            if claim.cost <= self.w_up {
                break;
            }
            heap.pop();
            let mut bundle = self.take_or_load(key)?;
            loop {
                if alive_at_start - self.removed == target {
                    self.put_bundle(key, bundle)?;
                    break 'voxels;
                }
                let Some(top) = bundle.top(self.eval) else { break };
                if top.cost <= self.w_up {
                    break;
                }
                // Another voxel now holds a (possibly stale-high) better
                // candidate: yield to it to preserve the global order.
                if let Some(&(next, _)) = heap.peek() {
                    if top < next {
                        heap.push((top, key));
                        break;
                    }
                }
                self.remove_point(key, &mut bundle, top)?;
            }
            self.put_bundle(key, bundle)?;
        }

        // Exact cost ties at w_up can starve a whole pass (ties are kept);
        // removing the single globally worst point guarantees progress and
        // is exact: nothing was removed, so no cost has changed.
        if self.removed == 0 && alive_at_start > target {
            let (key, top) = cost_pass
                .global_top()
                .ok_or_else(|| Error::Internal("no removable point in a non-target store".into()))?;
            let mut bundle = self.take_or_load(key)?;
            let current = bundle
                .caches
                .get(&top.id)
                .map(|c| CostKey::new(c.cost(self.eval), top.id))
                .ok_or_else(|| Error::Internal("global argmax vanished without removals".into()))?;
            self.remove_point(key, &mut bundle, current)?;
            self.put_bundle(key, bundle)?;
        }

        self.flush_pending()?;
        let keys: Vec<VoxelKey> = {
            let mut v: Vec<VoxelKey> = self.bundles.keys().copied().collect();
            v.sort_unstable();
            v
        };
        for key in keys {
            if let Some(bundle) = self.bundles.remove(&key) {
                self.evict(key, bundle)?;
            }
        }
        self.recency.clear();
        Ok(())
    }

    /// Removes one point: drops its cache, logs it, and invalidates every
    /// cache that contained it among its cost-relevant neighbors.
    fn remove_point(&mut self, key: VoxelKey, bundle: &mut Bundle, top: CostKey) -> Result<()> {
        let cache = bundle
            .caches
            .remove(&top.id)
            .ok_or_else(|| Error::Internal(format!("removing unknown point {}", top.id)))?;
        if cache.is_dirty() {
            return Err(Error::Internal(format!(
                "attempted to remove dirty point {}",
                top.id
            )));
        }
        bundle.dead_buffer.push(top.id);
        self.dead_voxels.insert(key);
        self.removed += 1;
        if let Some(w) = self.audit.as_mut() {
            writeln!(w, "{} {} {} {} {}", self.iteration, key, top.id, top.cost, self.w_up)
                .map_err(|e| Error::Internal(format!("audit write failed: {e}")))?;
        }

        let watchers: Vec<(PointId, VoxelKey)> = bundle.watchers.watchers(top.id).to_vec();
        for (source, source_voxel) in watchers {
            if source_voxel == key {
                if let Some(c) = bundle.caches.get_mut(&source) {
                    c.invalidate(top.id);
                }
            } else if let Some(other) = self.bundles.get_mut(&source_voxel) {
                if let Some(c) = other.caches.get_mut(&source) {
                    c.invalidate(top.id);
                }
            } else {
                self.pend_buffer
                    .entry(source_voxel)
                    .or_default()
                    .push((source, top.id));
                self.pend_buffered += 1;
                if self.pend_buffered >= SCRATCH_FLUSH_ENTRIES {
                    self.flush_pending()?;
                }
            }
        }
        Ok(())
    }

    fn flush_pending(&mut self) -> Result<()> {
        for (key, pairs) in std::mem::take(&mut self.pend_buffer) {
            let mut bytes = Vec::with_capacity(pairs.len() * 16);
            for (source, removed) in pairs {
                bytes.write_u64::<LE>(source.0).expect("vec write");
                bytes.write_u64::<LE>(removed.0).expect("vec write");
            }
            append_file(&pend_path(&self.scratch, key), &bytes)?;
        }
        self.pend_buffered = 0;
        Ok(())
    }

    fn take_or_load(&mut self, key: VoxelKey) -> Result<Bundle> {
        self.recency.retain(|k| *k != key);
        if let Some(bundle) = self.bundles.remove(&key) {
            return Ok(bundle);
        }
        let (order, mut caches) = read_nc(&nc_path(&self.scratch, key), self.eval.k())?;
        for id in read_dead_ids(&dead_path(&self.scratch, key))? {
            caches.remove(&id);
        }
        for (source, removed) in read_pend(&pend_path(&self.scratch, key))? {
            if let Some(c) = caches.get_mut(&source) {
                c.invalidate(removed);
            }
        }
        if let Some(pairs) = self.pend_buffer.remove(&key) {
            self.pend_buffered -= pairs.len();
            for (source, removed) in pairs {
                if let Some(c) = caches.get_mut(&source) {
                    c.invalidate(removed);
                }
            }
        }
        let watchers = read_rev(&rev_path(&self.scratch, key))?;
        Ok(Bundle { order, caches, watchers, dead_buffer: Vec::new() })
    }

    fn put_bundle(&mut self, key: VoxelKey, bundle: Bundle) -> Result<()> {
        self.bundles.insert(key, bundle);
        self.recency.push(key);
        while self.bundles.len() > self.cache_capacity {
            let victim = self.recency.remove(0);
            if let Some(b) = self.bundles.remove(&victim) {
                self.evict(victim, b)?;
            }
        }
        Ok(())
    }

    /// Persists a bundle back to scratch: current cache state, buffered
    /// removals, and refreshed per-voxel manifest bookkeeping.
    fn evict(&mut self, key: VoxelKey, bundle: Bundle) -> Result<()> {
        write_nc(
            &nc_path(&self.scratch, key),
            bundle.order.iter().filter_map(|id| bundle.caches.get(id).map(|c| (*id, c))),
        )?;
        if !bundle.dead_buffer.is_empty() {
            let mut bytes = Vec::with_capacity(bundle.dead_buffer.len() * 8);
            for id in &bundle.dead_buffer {
                bytes.write_u64::<LE>(id.0).expect("vec write");
            }
            append_file(&dead_path(&self.scratch, key), &bytes)?;
        }
        if let Some(entry) = self.store.manifest_mut().voxels.get_mut(&key) {
            entry.max_cost = bundle.top(self.eval).map(|ck| ck.cost);
            entry.dirty_count = bundle.caches.values().filter(|c| c.is_dirty()).count() as u64;
        }
        Ok(())
    }
}
