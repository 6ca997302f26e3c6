//! On-disk voxel grid: the paging unit of the out-of-core pipeline.
//!
//! A store is a directory holding one fixed-width binary file per occupied
//! voxel plus a human-readable `manifest.txt`. Records are partitioned by
//! flooring their offset from the grid origin (the input bounding-box min
//! corner), so a point exactly on a voxel boundary lands in the higher-index
//! voxel. Voxel files are rewritten only through [`VoxelStore::commit_removals`],
//! which writes a temp file and renames it, so a crash leaves either the old
//! or the new state. The manifest is written last during a build, making a
//! half-finished build directory unreadable rather than silently short.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::{BufReader, Read, Write};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::cloud::{PointCloud, PointId, PointRecord};
use crate::error::{Error, Result};
use crate::geom::{Aabb, Vec3};
use crate::ply::PlyReader;

/// Warn when a single voxel grows beyond this many points: every page must fit
/// in memory on its own for the working-set machinery to make sense.
pub const VOXEL_POINT_BUDGET: u64 = 50_000_000;

/// Flush one voxel's build buffer once it reaches this many bytes.
const VOXEL_FLUSH_BYTES: usize = 64 * 1024;
/// Flush every build buffer once their combined size reaches this many bytes,
/// which keeps build memory flat no matter how many voxels are open.
const TOTAL_FLUSH_BYTES: usize = 256 * 1024;

/// Integer grid coordinates of one voxel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VoxelKey {
    pub i: i64,
    pub j: i64,
    pub k: i64,
}

impl VoxelKey {
    pub fn new(i: i64, j: i64, k: i64) -> VoxelKey {
        VoxelKey { i, j, k }
    }

    /// `vx_<i>_<j>_<k>.bin`
    pub fn file_name(self) -> String {
        format!("vx_{}_{}_{}.bin", self.i, self.j, self.k)
    }

    /// This key plus its 26 adjacent keys, in ascending (i, j, k) order.
    pub fn block(self) -> impl Iterator<Item = VoxelKey> {
        let VoxelKey { i, j, k } = self;
        (-1..=1).flat_map(move |di| {
            (-1..=1).flat_map(move |dj| {
                (-1..=1).map(move |dk| VoxelKey::new(i + di, j + dj, k + dk))
            })
        })
    }

    pub fn is_adjacent(self, other: VoxelKey) -> bool {
        (self.i - other.i).abs() <= 1
            && (self.j - other.j).abs() <= 1
            && (self.k - other.k).abs() <= 1
    }
}

impl std::fmt::Display for VoxelKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}_{}_{}", self.i, self.j, self.k)
    }
}

/// Which optional per-point attributes every record in a store carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FieldSet {
    pub normals: bool,
    pub colors: bool,
}

impl FieldSet {
    pub fn none() -> FieldSet {
        FieldSet { normals: false, colors: false }
    }

    /// Bytes per on-disk record: id + position + flags + optional blocks.
    pub fn record_len(self) -> usize {
        8 + 24 + 1 + if self.normals { 12 } else { 0 } + if self.colors { 3 } else { 0 }
    }

    fn token(self) -> &'static str {
        match (self.normals, self.colors) {
            (false, false) => "none",
            (true, false) => "normal",
            (false, true) => "color",
            (true, true) => "normal color",
        }
    }

    fn parse(tokens: &[&str]) -> Result<FieldSet> {
        match tokens {
            ["none"] => Ok(FieldSet::none()),
            ["normal"] => Ok(FieldSet { normals: true, colors: false }),
            ["color"] => Ok(FieldSet { normals: false, colors: true }),
            ["normal", "color"] => Ok(FieldSet { normals: true, colors: true }),
            other => Err(Error::Corruption(format!("bad fields line {other:?} in manifest"))),
        }
    }
}

/// Per-voxel bookkeeping held in the manifest.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoxelEntry {
    pub count: u64,
    /// Maximum point cost in this voxel as of the last cost pass; `None`
    /// before the first pass.
    pub max_cost: Option<f64>,
    pub dirty_count: u64,
}

impl VoxelEntry {
    fn fresh(count: u64) -> VoxelEntry {
        VoxelEntry { count, max_cost: None, dirty_count: 0 }
    }
}

/// The store's self-description: grid geometry plus one entry per voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub origin: Vec3,
    pub voxel_size: f64,
    /// Exact bounding box of the stored cloud (origin is its min corner).
    pub bounds: Aabb,
    pub fields: FieldSet,
    pub voxels: BTreeMap<VoxelKey, VoxelEntry>,
}

impl Manifest {
    pub fn total_points(&self) -> u64 {
        self.voxels.values().map(|e| e.count).sum()
    }

    /// The voxel a position belongs to. Floor semantics: a point exactly on a
    /// boundary goes to the higher-index voxel.
    pub fn key_for(&self, p: Vec3) -> VoxelKey {
        let s = self.voxel_size;
        VoxelKey::new(
            ((p.x - self.origin.x) / s).floor() as i64,
            ((p.y - self.origin.y) / s).floor() as i64,
            ((p.z - self.origin.z) / s).floor() as i64,
        )
    }

    fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "origin {} {} {}", self.origin.x, self.origin.y, self.origin.z);
        let _ = writeln!(out, "voxel_size {}", self.voxel_size);
        let _ = writeln!(
            out,
            "bounds {} {} {} {} {} {}",
            self.bounds.min.x,
            self.bounds.min.y,
            self.bounds.min.z,
            self.bounds.max.x,
            self.bounds.max.y,
            self.bounds.max.z
        );
        let _ = writeln!(out, "fields {}", self.fields.token());
        for (key, e) in &self.voxels {
            let cost = match e.max_cost {
                Some(c) => c.to_string(),
                None => "-".to_string(),
            };
            let _ = writeln!(
                out,
                "voxel {} {} {} {} {} {}",
                key.i, key.j, key.k, e.count, cost, e.dirty_count
            );
        }
        out
    }

    fn from_text(text: &str) -> Result<Manifest> {
        let corrupt = |msg: String| Error::Corruption(msg);
        let mut origin = None;
        let mut voxel_size = None;
        let mut bounds = None;
        let mut fields = None;
        let mut voxels = BTreeMap::new();

        for (lineno, line) in text.lines().enumerate() {
            let tokens: Vec<&str> = line.split_whitespace().collect();
            if tokens.is_empty() {
                continue;
            }
            let ctx = || format!("manifest line {}: {line:?}", lineno + 1);
            let num = |s: &str| -> Result<f64> {
                s.parse::<f64>().map_err(|_| corrupt(format!("bad number {s:?} in {}", ctx())))
            };
            let int = |s: &str| -> Result<i64> {
                s.parse::<i64>().map_err(|_| corrupt(format!("bad integer {s:?} in {}", ctx())))
            };
            match tokens.as_slice() {
                ["origin", x, y, z] => origin = Some(Vec3::new(num(x)?, num(y)?, num(z)?)),
                ["voxel_size", s] => voxel_size = Some(num(s)?),
                ["bounds", x0, y0, z0, x1, y1, z1] => {
                    bounds = Some(Aabb {
                        min: Vec3::new(num(x0)?, num(y0)?, num(z0)?),
                        max: Vec3::new(num(x1)?, num(y1)?, num(z1)?),
                    })
                }
                ["fields", rest @ ..] => fields = Some(FieldSet::parse(rest)?),
                ["voxel", i, j, k, count, max_cost, dirty] => {
                    let key = VoxelKey::new(int(i)?, int(j)?, int(k)?);
                    let entry = VoxelEntry {
                        count: count
                            .parse()
                            .map_err(|_| corrupt(format!("bad count in {}", ctx())))?,
                        max_cost: if *max_cost == "-" { None } else { Some(num(max_cost)?) },
                        dirty_count: dirty
                            .parse()
                            .map_err(|_| corrupt(format!("bad dirty count in {}", ctx())))?,
                    };
                    if voxels.insert(key, entry).is_some() {
                        return Err(corrupt(format!("duplicate voxel {key} in manifest")));
                    }
                }
                _ => return Err(corrupt(format!("unrecognized {}", ctx()))),
            }
        }

        let manifest = Manifest {
            origin: origin.ok_or_else(|| corrupt("manifest missing origin line".into()))?,
            voxel_size: voxel_size
                .ok_or_else(|| corrupt("manifest missing voxel_size line".into()))?,
            bounds: bounds.ok_or_else(|| corrupt("manifest missing bounds line".into()))?,
            fields: fields.ok_or_else(|| corrupt("manifest missing fields line".into()))?,
            voxels,
        };
        if !(manifest.voxel_size > 0.0) {
            return Err(corrupt(format!("non-positive voxel_size {}", manifest.voxel_size)));
        }
        Ok(manifest)
    }
}

/// One voxel's records in memory, with a liveness flag per record.
#[derive(Debug, Clone)]
pub struct VoxelPage {
    pub key: VoxelKey,
    pub records: Vec<PointRecord>,
    pub alive: Vec<bool>,
}

impl VoxelPage {
    pub fn alive_count(&self) -> usize {
        self.alive.iter().filter(|a| **a).count()
    }

    pub fn iter_alive(&self) -> impl Iterator<Item = &PointRecord> {
        self.records.iter().zip(&self.alive).filter(|(_, a)| **a).map(|(r, _)| r)
    }
}

/// A directory-backed voxel grid over one point cloud.
#[derive(Debug)]
pub struct VoxelStore {
    dir: PathBuf,
    manifest: Manifest,
}

impl VoxelStore {
    /// Streams a PLY file into a new store without ever holding the cloud in
    /// memory: one bounding-box pass, then one write pass through bounded
    /// per-voxel buffers.
    pub fn build_from_ply(
        ply_path: impl AsRef<Path>,
        voxel_size: f64,
        out_dir: impl AsRef<Path>,
    ) -> Result<VoxelStore> {
        let ply_path = ply_path.as_ref();
        let probe = PlyReader::open(ply_path)?;
        let fields = FieldSet { normals: probe.has_normals(), colors: probe.has_colors() };
        drop(probe);
        build_streaming(
            || PlyReader::open(ply_path),
            fields,
            voxel_size,
            out_dir.as_ref(),
        )
    }

    /// Builds a store from an in-memory cloud. Attributes are stored only when
    /// every point carries them, mirroring [`PointCloud::has_normals`].
    pub fn build_from_cloud(
        cloud: &PointCloud,
        voxel_size: f64,
        out_dir: impl AsRef<Path>,
    ) -> Result<VoxelStore> {
        let fields = FieldSet { normals: cloud.has_normals(), colors: cloud.has_colors() };
        build_streaming(
            || Ok(cloud.points().iter().cloned().map(Ok)),
            fields,
            voxel_size,
            out_dir.as_ref(),
        )
    }

    /// Opens an existing store and verifies that every voxel file exists with
    /// exactly the size the manifest promises.
    pub fn open(dir: impl AsRef<Path>) -> Result<VoxelStore> {
        let dir = dir.as_ref().to_path_buf();
        let manifest_path = dir.join("manifest.txt");
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest = Manifest::from_text(&text)?;
        let record_len = manifest.fields.record_len() as u64;
        for (key, entry) in &manifest.voxels {
            let path = dir.join(key.file_name());
            let meta = fs::metadata(&path).map_err(|_| {
                Error::Corruption(format!("voxel file {} is missing", path.display()))
            })?;
            let expect = entry.count * record_len;
            if meta.len() != expect {
                return Err(Error::Corruption(format!(
                    "voxel file {} has {} bytes, manifest expects {expect}",
                    path.display(),
                    meta.len()
                )));
            }
        }
        Ok(VoxelStore { dir, manifest })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn manifest_mut(&mut self) -> &mut Manifest {
        &mut self.manifest
    }

    pub fn voxel_path(&self, key: VoxelKey) -> PathBuf {
        self.dir.join(key.file_name())
    }

    /// Scratch area for transient per-pass files (caches, reverse edges, …).
    pub fn scratch_dir(&self) -> PathBuf {
        self.dir.join("scratch")
    }

    /// Persists the manifest via temp file + rename.
    pub fn save_manifest(&self) -> Result<()> {
        let path = self.dir.join("manifest.txt");
        let tmp = self.dir.join("manifest.txt.tmp");
        fs::write(&tmp, self.manifest.to_text()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        Ok(())
    }

    /// Hex SHA-256 of the persisted manifest, used to pair checkpoints with
    /// the store state they were written against.
    pub fn manifest_fingerprint(&self) -> Result<String> {
        let path = self.dir.join("manifest.txt");
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let mut hasher = Sha256::new();
        hasher.update(&bytes);
        Ok(hex_string(&hasher.finalize()))
    }

    /// Loads one voxel's records. Every record is checked to map back to the
    /// requested key, so silently mixed-up files surface as corruption.
    pub fn load_page(&self, key: VoxelKey) -> Result<VoxelPage> {
        let entry = self
            .manifest
            .voxels
            .get(&key)
            .ok_or_else(|| Error::Data(format!("voxel {key} is not in the manifest")))?;
        let path = self.voxel_path(key);
        let bytes = fs::read(&path).map_err(|_| {
            Error::Corruption(format!("voxel file {} is missing or unreadable", path.display()))
        })?;
        let record_len = self.manifest.fields.record_len();
        if bytes.len() != entry.count as usize * record_len {
            return Err(Error::Corruption(format!(
                "voxel file {} has {} bytes, manifest expects {}",
                path.display(),
                bytes.len(),
                entry.count as usize * record_len
            )));
        }
        let mut records = Vec::with_capacity(entry.count as usize);
        for chunk in bytes.chunks_exact(record_len) {
            let rec = decode_record(chunk, self.manifest.fields);
            if self.manifest.key_for(rec.position) != key {
                return Err(Error::Corruption(format!(
                    "point {} in voxel file {} maps to voxel {}",
                    rec.id,
                    path.display(),
                    self.manifest.key_for(rec.position)
                )));
            }
            records.push(rec);
        }
        let alive = vec![true; records.len()];
        Ok(VoxelPage { key, records, alive })
    }

    /// Loads the page for `key` first, then every existing adjacent page in
    /// ascending key order.
    pub fn load_neighborhood(&self, key: VoxelKey) -> Result<Vec<VoxelPage>> {
        let mut pages = vec![self.load_page(key)?];
        for adjacent in key.block() {
            if adjacent != key && self.manifest.voxels.contains_key(&adjacent) {
                pages.push(self.load_page(adjacent)?);
            }
        }
        Ok(pages)
    }

    /// Physically removes this page's dead records from its voxel file.
    ///
    /// No-op (file untouched) when everything is alive; file and manifest
    /// entry are deleted when nothing is. The rewrite goes through a temp
    /// file + atomic rename. The in-memory manifest is updated; call
    /// [`VoxelStore::save_manifest`] to persist it.
    pub fn commit_removals(&mut self, page: &VoxelPage) -> Result<()> {
        let entry = self
            .manifest
            .voxels
            .get(&page.key)
            .copied()
            .ok_or_else(|| Error::Data(format!("voxel {} is not in the manifest", page.key)))?;
        if entry.count as usize != page.records.len() || page.records.len() != page.alive.len() {
            return Err(Error::Data(format!(
                "page for voxel {} is stale: {} records vs {} in manifest",
                page.key,
                page.records.len(),
                entry.count
            )));
        }
        let survivors = page.alive_count();
        if survivors == page.records.len() {
            return Ok(());
        }
        let path = self.voxel_path(page.key);
        if survivors == 0 {
            fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
            self.manifest.voxels.remove(&page.key);
            return Ok(());
        }
        let mut buf = Vec::with_capacity(survivors * self.manifest.fields.record_len());
        for rec in page.iter_alive() {
            encode_record(&mut buf, rec, self.manifest.fields)?;
        }
        let tmp = self.dir.join(format!("{}.tmp", page.key.file_name()));
        fs::write(&tmp, &buf).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        self.manifest.voxels.get_mut(&page.key).unwrap().count = survivors as u64;
        Ok(())
    }

    /// Streams every record in ascending voxel-key order without loading more
    /// than one record at a time.
    pub fn for_each_record(
        &self,
        mut f: impl FnMut(VoxelKey, PointRecord) -> Result<()>,
    ) -> Result<()> {
        let record_len = self.manifest.fields.record_len();
        let mut buf = vec![0u8; record_len];
        for (&key, entry) in &self.manifest.voxels {
            let path = self.voxel_path(key);
            let file = fs::File::open(&path).map_err(|_| {
                Error::Corruption(format!("voxel file {} is missing or unreadable", path.display()))
            })?;
            let mut reader = BufReader::new(file);
            for _ in 0..entry.count {
                reader.read_exact(&mut buf).map_err(|_| {
                    Error::Corruption(format!("voxel file {} is truncated", path.display()))
                })?;
                f(key, decode_record(&buf, self.manifest.fields))?;
            }
        }
        Ok(())
    }

    /// All stored point ids, in storage (voxel-key, arrival) order.
    pub fn collect_ids(&self) -> Result<Vec<PointId>> {
        let mut ids = Vec::with_capacity(self.manifest.total_points() as usize);
        self.for_each_record(|_, rec| {
            ids.push(rec.id);
            Ok(())
        })?;
        Ok(ids)
    }

    /// Reads the whole store into memory as a cloud, records sorted by id.
    /// Convenience for analysis and tests; large clouds should stream via
    /// [`VoxelStore::for_each_record`] instead.
    pub fn read_all_points(&self) -> Result<PointCloud> {
        let mut records = Vec::with_capacity(self.manifest.total_points() as usize);
        self.for_each_record(|_, rec| {
            records.push(rec);
            Ok(())
        })?;
        records.sort_unstable_by_key(|r| r.id);
        PointCloud::from_records(records)
    }
}

fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        let _ = write!(s, "{b:02x}");
    }
    s
}

fn encode_record(buf: &mut Vec<u8>, rec: &PointRecord, fields: FieldSet) -> Result<()> {
    buf.extend_from_slice(&rec.id.0.to_le_bytes());
    buf.extend_from_slice(&rec.position.x.to_le_bytes());
    buf.extend_from_slice(&rec.position.y.to_le_bytes());
    buf.extend_from_slice(&rec.position.z.to_le_bytes());
    buf.push(0u8); // flags: reserved
    if fields.normals {
        let n = rec.normal.ok_or_else(|| {
            Error::Data(format!("point {} is missing the normal this store requires", rec.id))
        })?;
        for c in n {
            buf.extend_from_slice(&c.to_le_bytes());
        }
    }
    if fields.colors {
        let c = rec.color.ok_or_else(|| {
            Error::Data(format!("point {} is missing the color this store requires", rec.id))
        })?;
        buf.extend_from_slice(&c);
    }
    Ok(())
}

fn decode_record(bytes: &[u8], fields: FieldSet) -> PointRecord {
    let f64_at = |off: usize| f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
    let id = u64::from_le_bytes(bytes[0..8].try_into().unwrap());
    let position = Vec3::new(f64_at(8), f64_at(16), f64_at(24));
    let mut off = 33; // 32 fixed bytes + 1 flags byte
    let normal = fields.normals.then(|| {
        let f32_at =
            |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let n = [f32_at(off), f32_at(off + 4), f32_at(off + 8)];
        off += 12;
        n
    });
    let color = fields.colors.then(|| [bytes[off], bytes[off + 1], bytes[off + 2]]);
    PointRecord { id: PointId(id), position, normal, color }
}

/// Two-pass streaming build shared by the PLY and in-memory entry points.
fn build_streaming<I, F>(
    make_iter: F,
    fields: FieldSet,
    voxel_size: f64,
    out_dir: &Path,
) -> Result<VoxelStore>
where
    I: Iterator<Item = Result<PointRecord>>,
    F: Fn() -> Result<I>,
{
    if !(voxel_size > 0.0 && voxel_size.is_finite()) {
        return Err(Error::Config(format!("voxel_size must be positive, got {voxel_size}")));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let manifest_path = out_dir.join("manifest.txt");
    if manifest_path.exists() {
        return Err(Error::Config(format!(
            "{} already contains a voxel store",
            out_dir.display()
        )));
    }

    // Pass 1: bounding box.
    let mut bounds = Aabb::empty();
    let mut total = 0u64;
    for rec in make_iter()? {
        bounds.expand(rec?.position);
        total += 1;
    }
    if total == 0 {
        return Err(Error::Data("cannot voxelize an empty cloud".into()));
    }

    let mut manifest = Manifest {
        origin: bounds.min,
        voxel_size,
        bounds,
        fields,
        voxels: BTreeMap::new(),
    };

    // Pass 2: write records through bounded per-voxel buffers.
    let mut buffers: BTreeMap<VoxelKey, Vec<u8>> = BTreeMap::new();
    let mut counts: BTreeMap<VoxelKey, u64> = BTreeMap::new();
    let mut buffered = 0usize;
    let flush_one = |key: VoxelKey, buf: &mut Vec<u8>, fresh: bool| -> Result<()> {
        let path = out_dir.join(key.file_name());
        let mut file = if fresh {
            // First bytes for this voxel this build: truncate anything stale.
            OpenOptions::new()
                .write(true)
                .create(true)
                .truncate(true)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?
        } else {
            OpenOptions::new().append(true).open(&path).map_err(|e| Error::io(&path, e))?
        };
        file.write_all(buf).map_err(|e| Error::io(&path, e))?;
        buf.clear();
        Ok(())
    };
    let mut flushed_once: std::collections::HashSet<VoxelKey> = std::collections::HashSet::new();

    for rec in make_iter()? {
        let rec = rec?;
        let key = manifest.key_for(rec.position);
        let buf = buffers.entry(key).or_default();
        let before = buf.len();
        encode_record(buf, &rec, fields)?;
        buffered += buf.len() - before;
        *counts.entry(key).or_insert(0) += 1;

        if buf.len() >= VOXEL_FLUSH_BYTES {
            buffered -= buf.len();
            let fresh = flushed_once.insert(key);
            flush_one(key, buf, fresh)?;
        } else if buffered >= TOTAL_FLUSH_BYTES {
            for (&k, b) in buffers.iter_mut() {
                if !b.is_empty() {
                    let fresh = flushed_once.insert(k);
                    flush_one(k, b, fresh)?;
                }
            }
            buffered = 0;
        }
    }
    for (&k, b) in buffers.iter_mut() {
        if !b.is_empty() {
            let fresh = flushed_once.insert(k);
            flush_one(k, b, fresh)?;
        }
    }
    drop(buffers);

    for (key, count) in counts {
        if count > VOXEL_POINT_BUDGET {
            log::warn!(
                "voxel {key} holds {count} points, beyond the {VOXEL_POINT_BUDGET}-point page budget"
            );
        }
        manifest.voxels.insert(key, VoxelEntry::fresh(count));
    }

    let store = VoxelStore { dir: out_dir.to_path_buf(), manifest };
    store.save_manifest()?;
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use std::collections::{BTreeSet, HashMap};

    fn cloud_of(positions: &[(f64, f64, f64)]) -> PointCloud {
        PointCloud::from_positions(positions.iter().map(|&(x, y, z)| Vec3::new(x, y, z)))
            .unwrap()
    }

    fn random_cloud(n: usize, extent: f64, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointCloud::from_positions((0..n).map(|_| {
            Vec3::new(
                rng.gen::<f64>() * extent,
                rng.gen::<f64>() * extent,
                rng.gen::<f64>() * extent,
            )
        }))
        .unwrap()
    }

    #[test]
    fn corner_points_partition_into_eight_voxels() {
        let mut corners = Vec::new();
        for x in [0.0, 10.0] {
            for y in [0.0, 10.0] {
                for z in [0.0, 10.0] {
                    corners.push((x, y, z));
                }
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let store = VoxelStore::build_from_cloud(&cloud_of(&corners), 10.0, dir.path()).unwrap();
        assert_eq!(store.manifest().voxels.len(), 8);
        assert!(store.manifest().voxels.values().all(|e| e.count == 1));
        assert_eq!(store.manifest().total_points(), 8);
    }

    #[test]
    fn single_voxel_holds_everything() {
        let cloud = random_cloud(1000, 0.9, 3);
        let dir = tempfile::tempdir().unwrap();
        let store = VoxelStore::build_from_cloud(&cloud, 10.0, dir.path()).unwrap();
        assert_eq!(store.manifest().voxels.len(), 1);
        assert_eq!(store.manifest().total_points(), 1000);
        let key = *store.manifest().voxels.keys().next().unwrap();
        let page = store.load_page(key).unwrap();
        assert_eq!(page.records.len(), 1000);
    }

    #[test]
    fn per_voxel_counts_match_grouping_oracle() {
        let cloud = random_cloud(10_000, 20.0, 17);
        let dir = tempfile::tempdir().unwrap();
        let store = VoxelStore::build_from_cloud(&cloud, 5.0, dir.path()).unwrap();

        let origin = store.manifest().origin;
        let mut oracle: HashMap<(i64, i64, i64), u64> = HashMap::new();
        for rec in cloud.points() {
            let p = rec.position;
            let cell = (
                ((p.x - origin.x) / 5.0).floor() as i64,
                ((p.y - origin.y) / 5.0).floor() as i64,
                ((p.z - origin.z) / 5.0).floor() as i64,
            );
            *oracle.entry(cell).or_insert(0) += 1;
        }
        assert_eq!(store.manifest().voxels.len(), oracle.len());
        for (key, entry) in &store.manifest().voxels {
            assert_eq!(oracle[&(key.i, key.j, key.k)], entry.count, "voxel {key}");
        }
    }

    #[test]
    fn boundary_point_goes_to_higher_index_voxel() {
        let cloud = cloud_of(&[(0.0, 0.0, 0.0), (1.0, 0.2, 0.2), (1.7, 0.2, 0.2)]);
        let dir = tempfile::tempdir().unwrap();
        let store = VoxelStore::build_from_cloud(&cloud, 1.0, dir.path()).unwrap();
        // x = 1.0 sits exactly on the 0/1 boundary and must land in voxel 1.
        let key = store.manifest().key_for(Vec3::new(1.0, 0.2, 0.2));
        assert_eq!(key, VoxelKey::new(1, 0, 0));
        assert_eq!(store.manifest().voxels[&key].count, 2);
    }

    #[test]
    fn neighborhood_page_counts() {
        // Full 3x3x3 block of voxels: center sees 27 pages, corner sees 8.
        let mut positions = Vec::new();
        for x in 0..3 {
            for y in 0..3 {
                for z in 0..3 {
                    positions.push((x as f64 + 0.5, y as f64 + 0.5, z as f64 + 0.5));
                }
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let store = VoxelStore::build_from_cloud(&cloud_of(&positions), 1.0, dir.path()).unwrap();
        assert_eq!(store.manifest().voxels.len(), 27);

        let center = store.load_neighborhood(VoxelKey::new(1, 1, 1)).unwrap();
        assert_eq!(center.len(), 27);
        assert_eq!(center[0].key, VoxelKey::new(1, 1, 1), "center page must come first");
        let mut rest: Vec<VoxelKey> = center[1..].iter().map(|p| p.key).collect();
        let mut sorted = rest.clone();
        sorted.sort();
        assert_eq!(rest, sorted, "adjacent pages in ascending key order");
        rest.push(center[0].key);
        assert_eq!(rest.iter().collect::<BTreeSet<_>>().len(), 27);

        let corner = store.load_neighborhood(VoxelKey::new(0, 0, 0)).unwrap();
        assert_eq!(corner.len(), 8);

        // An isolated voxel far away sees only itself.
        let single = cloud_of(&[(0.1, 0.1, 0.1)]);
        let dir2 = tempfile::tempdir().unwrap();
        let store2 = VoxelStore::build_from_cloud(&single, 1.0, dir2.path()).unwrap();
        assert_eq!(store2.load_neighborhood(VoxelKey::new(0, 0, 0)).unwrap().len(), 1);
    }

    #[test]
    fn commit_single_page_edge_cases() {
        let cloud = random_cloud(100, 0.9, 5);
        let dir = tempfile::tempdir().unwrap();
        let mut store = VoxelStore::build_from_cloud(&cloud, 2.0, dir.path()).unwrap();
        let key = *store.manifest().voxels.keys().next().unwrap();
        let path = store.voxel_path(key);

        // No removals: bytes untouched.
        let before = fs::read(&path).unwrap();
        let page = store.load_page(key).unwrap();
        store.commit_removals(&page).unwrap();
        assert_eq!(fs::read(&path).unwrap(), before);

        // Alternating half removed: survivors are exactly the even ranks.
        let mut page = store.load_page(key).unwrap();
        for (i, a) in page.alive.iter_mut().enumerate() {
            *a = i % 2 == 0;
        }
        let expected: BTreeSet<PointId> =
            page.records.iter().step_by(2).map(|r| r.id).collect();
        store.commit_removals(&page).unwrap();
        assert_eq!(store.manifest().voxels[&key].count, 50);
        let reloaded = store.load_page(key).unwrap();
        let got: BTreeSet<PointId> = reloaded.records.iter().map(|r| r.id).collect();
        assert_eq!(got, expected);

        // Everything removed: file and manifest entry disappear.
        let mut page = store.load_page(key).unwrap();
        page.alive.iter_mut().for_each(|a| *a = false);
        store.commit_removals(&page).unwrap();
        assert!(!path.exists());
        assert!(!store.manifest().voxels.contains_key(&key));

        // Manifest survives a save/open round trip.
        store.save_manifest().unwrap();
        let reopened = VoxelStore::open(dir.path()).unwrap();
        assert_eq!(reopened.manifest().total_points(), 0);
    }

    #[test]
    fn round_trip_preserves_attribute_multiset() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let records: Vec<PointRecord> = (0..500)
            .map(|i| PointRecord {
                id: PointId(i),
                position: Vec3::new(
                    rng.gen::<f64>() * 7.0,
                    rng.gen::<f64>() * 7.0,
                    rng.gen::<f64>() * 7.0,
                ),
                normal: Some([rng.gen(), rng.gen(), rng.gen()]),
                color: Some([rng.gen(), rng.gen(), rng.gen()]),
            })
            .collect();
        let cloud = PointCloud::from_records(records.clone()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let store = VoxelStore::build_from_cloud(&cloud, 2.0, dir.path()).unwrap();

        let mut out = Vec::new();
        store.for_each_record(|_, rec| {
            out.push(rec);
            Ok(())
        })
        .unwrap();
        assert_eq!(out.len(), records.len());
        out.sort_by_key(|r| r.id);
        assert_eq!(out, records);
    }

    #[test]
    fn building_twice_is_byte_identical() {
        let cloud = random_cloud(2000, 12.0, 9);
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let a = VoxelStore::build_from_cloud(&cloud, 3.0, dir_a.path()).unwrap();
        let b = VoxelStore::build_from_cloud(&cloud, 3.0, dir_b.path()).unwrap();
        assert_eq!(
            fs::read_to_string(dir_a.path().join("manifest.txt")).unwrap(),
            fs::read_to_string(dir_b.path().join("manifest.txt")).unwrap()
        );
        for key in a.manifest().voxels.keys() {
            assert_eq!(
                fs::read(a.voxel_path(*key)).unwrap(),
                fs::read(b.voxel_path(*key)).unwrap(),
                "voxel {key}"
            );
        }
    }

    #[test]
    fn ply_build_matches_cloud_build() {
        let cloud = random_cloud(800, 6.0, 31);
        let dir = tempfile::tempdir().unwrap();
        let ply = dir.path().join("in.ply");
        crate::ply::write_ply(&ply, &cloud).unwrap();

        let from_ply = VoxelStore::build_from_ply(&ply, 2.0, dir.path().join("a")).unwrap();
        let from_cloud = VoxelStore::build_from_cloud(&cloud, 2.0, dir.path().join("b")).unwrap();
        assert_eq!(
            fs::read_to_string(dir.path().join("a/manifest.txt")).unwrap(),
            fs::read_to_string(dir.path().join("b/manifest.txt")).unwrap()
        );
        assert_eq!(from_ply.collect_ids().unwrap(), from_cloud.collect_ids().unwrap());
    }

    #[test]
    fn truncated_voxel_file_is_corruption() {
        let cloud = random_cloud(64, 0.9, 2);
        let dir = tempfile::tempdir().unwrap();
        let store = VoxelStore::build_from_cloud(&cloud, 2.0, dir.path()).unwrap();
        let key = *store.manifest().voxels.keys().next().unwrap();
        let path = store.voxel_path(key);
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();

        match VoxelStore::open(dir.path()) {
            Err(Error::Corruption(_)) => {}
            other => panic!("expected corruption, got {other:?}"),
        }
    }

    #[test]
    fn missing_voxel_file_is_corruption() {
        let cloud = cloud_of(&[(0.1, 0.1, 0.1), (3.0, 3.0, 3.0)]);
        let dir = tempfile::tempdir().unwrap();
        let store = VoxelStore::build_from_cloud(&cloud, 1.0, dir.path()).unwrap();
        let key = *store.manifest().voxels.keys().next().unwrap();
        fs::remove_file(store.voxel_path(key)).unwrap();
        assert!(matches!(VoxelStore::open(dir.path()), Err(Error::Corruption(_))));
        assert!(matches!(store.load_page(key), Err(Error::Corruption(_))));
    }

    #[test]
    fn rejects_bad_inputs() {
        let cloud = cloud_of(&[(0.0, 0.0, 0.0)]);
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            VoxelStore::build_from_cloud(&cloud, 0.0, dir.path()),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            VoxelStore::build_from_cloud(&cloud, -1.0, dir.path()),
            Err(Error::Config(_))
        ));

        // Refuses to build on top of an existing store.
        VoxelStore::build_from_cloud(&cloud, 1.0, dir.path()).unwrap();
        assert!(matches!(
            VoxelStore::build_from_cloud(&cloud, 1.0, dir.path()),
            Err(Error::Config(_))
        ));

        let store = VoxelStore::open(dir.path()).unwrap();
        assert!(matches!(
            store.load_page(VoxelKey::new(9, 9, 9)),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn manifest_text_round_trips() {
        let manifest = Manifest {
            origin: Vec3::new(-1.25, 0.0, 3.5e-7),
            voxel_size: 2.5,
            bounds: Aabb { min: Vec3::new(-1.25, 0.0, 3.5e-7), max: Vec3::new(4.0, 8.0, 9.0) },
            fields: FieldSet { normals: true, colors: true },
            voxels: [
                (VoxelKey::new(-1, 0, 2), VoxelEntry { count: 3, max_cost: None, dirty_count: 0 }),
                (
                    VoxelKey::new(0, 0, 0),
                    VoxelEntry { count: 11, max_cost: Some(0.1234567890123), dirty_count: 2 },
                ),
            ]
            .into_iter()
            .collect(),
        };
        let parsed = Manifest::from_text(&manifest.to_text()).unwrap();
        assert_eq!(parsed, manifest);

        assert!(Manifest::from_text("origin 0 0 0\n").is_err());
        assert!(Manifest::from_text("nonsense\n").is_err());
    }
}
