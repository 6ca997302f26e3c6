//! Synthetic spherical-sweep range scanner for triangle meshes.
//!
//! A stationary scanner sweeps rays over a regular grid of polar angles —
//! azimuth θ around the vertical axis, elevation ψ above the horizon — and
//! records one point per surface hit, perturbed by Gaussian range noise along
//! the ray. Because the angular grid is regular, surfaces near the scanner
//! collect far more points per square meter than surfaces far away; that
//! uneven density is exactly the pathology the subsampler exists to repair,
//! so the simulator makes it on demand for ground-truth experiments.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::cloud::{PointCloud, PointId, PointRecord};
use crate::error::{Error, Result};
use crate::geom::Vec3;

/// One scanner pose plus its sweep resolution and noise model.
///
/// Azimuth covers the full circle `[0, 2π)` in `azimuth_step` increments;
/// the start angle 0 is included and 2π is not (it would duplicate 0).
/// Elevation runs from `elevation_min` to `elevation_max` *inclusive* in
/// `elevation_step` increments. Range noise is drawn per hit from
/// `N(0, range_sigma)` and applied along the ray, the way a time-of-flight
/// scanner errs in range rather than sideways.
#[derive(Debug, Clone)]
pub struct ScannerSpec {
    /// Scanner location in world coordinates (meters).
    pub origin: Vec3,
    /// Angular distance between consecutive azimuth samples (radians).
    pub azimuth_step: f64,
    /// Angular distance between consecutive elevation samples (radians).
    pub elevation_step: f64,
    /// Lowest elevation sampled (radians, negative looks down).
    pub elevation_min: f64,
    /// Highest elevation sampled (radians); included when the step divides
    /// the range evenly.
    pub elevation_max: f64,
    /// Standard deviation of the per-hit range error (meters).
    pub range_sigma: f64,
    /// Hits farther than this along the ray are discarded (meters).
    pub max_range: f64,
    /// Seed for the range-noise stream; two scans with identical spec and
    /// seed produce bit-identical clouds.
    pub seed: u64,
}

impl Default for ScannerSpec {
    /// A desk-scale surrogate for a tripod scanner: 90 azimuth steps, 70
    /// elevation steps over ±60°, 0.4 mm range noise, 100 m range.
    fn default() -> Self {
        ScannerSpec {
            origin: Vec3::ZERO,
            azimuth_step: std::f64::consts::TAU / 90.0,
            elevation_step: (2.0 * std::f64::consts::FRAC_PI_3) / 69.0,
            elevation_min: -std::f64::consts::FRAC_PI_3,
            elevation_max: std::f64::consts::FRAC_PI_3,
            range_sigma: 4.0e-4,
            max_range: 100.0,
            seed: 0,
        }
    }
}

impl ScannerSpec {
    /// Number of azimuth samples: ⌊2π / azimuth_step⌋ with a small slack so
    /// steps that divide 2π exactly are not lost to rounding.
    pub fn azimuth_count(&self) -> usize {
        (std::f64::consts::TAU / self.azimuth_step + GRID_SLACK).floor() as usize
    }

    /// Number of elevation samples, endpoints inclusive.
    pub fn elevation_count(&self) -> usize {
        ((self.elevation_max - self.elevation_min) / self.elevation_step + GRID_SLACK).floor()
            as usize
            + 1
    }

    /// Total rays cast by one scan.
    pub fn ray_count(&self) -> usize {
        self.azimuth_count() * self.elevation_count()
    }

    fn validate(&self) -> Result<()> {
        if !(self.azimuth_step > 0.0) || !(self.elevation_step > 0.0) {
            return Err(Error::Config("scanner angle steps must be positive".into()));
        }
        if !(self.elevation_min < self.elevation_max) {
            return Err(Error::Config(
                "scanner elevation_min must be below elevation_max".into(),
            ));
        }
        if !(self.range_sigma >= 0.0) {
            return Err(Error::Config("scanner range_sigma must be nonnegative".into()));
        }
        if !(self.max_range > 0.0) {
            return Err(Error::Config("scanner max_range must be positive".into()));
        }
        if !self.origin.is_finite() {
            return Err(Error::Config("scanner origin must be finite".into()));
        }
        Ok(())
    }
}

/// Absorbs floating-point error when a step divides its range exactly, so
/// e.g. 2π / (2π/90) still yields 90 samples rather than 89.
const GRID_SLACK: f64 = 1e-9;

/// An indexed triangle mesh with one unit normal per triangle.
#[derive(Debug, Clone)]
pub struct TriangleMesh {
    vertices: Vec<Vec3>,
    triangles: Vec<[u32; 3]>,
    normals: Vec<Vec3>,
}

impl TriangleMesh {
    /// Builds a mesh from shared vertices and index triples, rejecting
    /// out-of-range indices and zero-area triangles. Normals follow the
    /// right-hand rule on the winding order.
    pub fn new(vertices: Vec<Vec3>, triangles: Vec<[u32; 3]>) -> Result<TriangleMesh> {
        let mut normals = Vec::with_capacity(triangles.len());
        for (t, idx) in triangles.iter().enumerate() {
            for &i in idx {
                if i as usize >= vertices.len() {
                    return Err(Error::Data(format!(
                        "triangle {t} references vertex {i} but the mesh has {} vertices",
                        vertices.len()
                    )));
                }
            }
            let [a, b, c] = self::corners(&vertices, *idx);
            let n = (b - a).cross(c - a);
            if !(n.norm() > 0.0) || !n.is_finite() {
                return Err(Error::Data(format!("triangle {t} is degenerate (zero area)")));
            }
            normals.push(n.normalized());
        }
        Ok(TriangleMesh { vertices, triangles, normals })
    }

    /// Reads a Wavefront OBJ file, keeping `v` and triangular `f` records.
    ///
    /// Face vertices may carry `/vt/vn` suffixes, which are ignored, as are
    /// normal/texcoord/group/material records. Faces with more or fewer than
    /// three vertices are rejected rather than triangulated.
    pub fn from_obj(path: impl AsRef<Path>) -> Result<TriangleMesh> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut vertices = Vec::new();
        let mut triangles = Vec::new();
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let line = line.trim();
            let mut tokens = line.split_whitespace();
            let bad = |what: &str| Error::Obj(format!("line {}: {what}", lineno + 1));
            match tokens.next() {
                None | Some("#") => {}
                Some("v") => {
                    let mut coord = [0f64; 3];
                    for c in &mut coord {
                        *c = tokens
                            .next()
                            .and_then(|t| t.parse().ok())
                            .ok_or_else(|| bad("vertex needs three numeric coordinates"))?;
                    }
                    vertices.push(Vec3::new(coord[0], coord[1], coord[2]));
                }
                Some("f") => {
                    let refs: Vec<&str> = tokens.collect();
                    if refs.len() != 3 {
                        return Err(bad(&format!(
                            "face has {} vertices; only triangles are supported",
                            refs.len()
                        )));
                    }
                    let mut idx = [0u32; 3];
                    for (slot, r) in idx.iter_mut().zip(&refs) {
                        // "f 3/1/2" style: the vertex index is the part
                        // before the first slash, 1-based.
                        let v: i64 = r
                            .split('/')
                            .next()
                            .and_then(|t| t.parse().ok())
                            .ok_or_else(|| bad("unparsable face vertex index"))?;
                        if v < 1 || v as usize > vertices.len() {
                            return Err(bad(&format!(
                                "face vertex index {v} out of range 1..={}",
                                vertices.len()
                            )));
                        }
                        *slot = (v - 1) as u32;
                    }
                    triangles.push(idx);
                }
                // Normals, texcoords, grouping and material state do not
                // affect geometry; skip them.
                Some("vn" | "vt" | "vp" | "o" | "g" | "s" | "usemtl" | "mtllib" | "l") => {}
                Some(other) => {
                    return Err(bad(&format!("unsupported record {other:?}")));
                }
            }
        }
        if triangles.is_empty() {
            return Err(Error::Obj("mesh has no triangular faces".into()));
        }
        TriangleMesh::new(vertices, triangles)
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn triangle_count(&self) -> usize {
        self.triangles.len()
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[u32; 3]] {
        &self.triangles
    }

    /// Unit normal of triangle `t` (right-hand rule on the stored winding).
    pub fn normal(&self, t: usize) -> Vec3 {
        self.normals[t]
    }

    /// Sum of all triangle areas in square meters.
    pub fn surface_area(&self) -> f64 {
        self.triangles
            .iter()
            .map(|&idx| {
                let [a, b, c] = corners(&self.vertices, idx);
                (b - a).cross(c - a).norm() * 0.5
            })
            .sum()
    }

    /// Nearest intersection of the ray `origin + t·dir` with the mesh, as
    /// `(t, triangle_index)`, or `None` if nothing is hit within `max_t`.
    /// Edge and vertex hits count; when two triangles are hit at exactly the
    /// same distance (a shared edge, say) the lower index wins.
    pub fn cast_ray(&self, origin: Vec3, dir: Vec3, max_t: f64) -> Option<(f64, usize)> {
        let mut best: Option<(f64, usize)> = None;
        for (t, &idx) in self.triangles.iter().enumerate() {
            let [a, b, c] = corners(&self.vertices, idx);
            if let Some(hit) = ray_triangle(origin, dir, a, b, c) {
                if hit <= max_t && best.map_or(true, |(bt, _)| hit < bt) {
                    best = Some((hit, t));
                }
            }
        }
        best
    }
}

fn corners(vertices: &[Vec3], idx: [u32; 3]) -> [Vec3; 3] {
    [
        vertices[idx[0] as usize],
        vertices[idx[1] as usize],
        vertices[idx[2] as usize],
    ]
}

/// Slack on the barycentric bounds. A ray aimed exactly along the seam
/// between two triangles rounds to a hair outside *both* under exact-zero
/// bounds and falls through the surface; tolerating this much overlap keeps
/// seams watertight, and the duplicate hit it can create is collapsed by the
/// nearest-t / lowest-index rule in [`TriangleMesh::cast_ray`].
const EDGE_SLACK: f64 = 1e-10;

/// Möller–Trumbore ray/triangle intersection with *inclusive* edges: hits on
/// an edge or vertex are accepted, so rays crossing the seam between two
/// adjacent triangles cannot slip through. Returns the ray parameter `t > 0`.
fn ray_triangle(origin: Vec3, dir: Vec3, a: Vec3, b: Vec3, c: Vec3) -> Option<f64> {
    let e1 = b - a;
    let e2 = c - a;
    let p = dir.cross(e2);
    let det = e1.dot(p);
    // Rays parallel to the triangle plane cannot produce a stable hit point;
    // treat them as misses.
    if det.abs() < 1e-12 {
        return None;
    }
    let inv = 1.0 / det;
    let s = origin - a;
    let u = s.dot(p) * inv;
    if !(-EDGE_SLACK..=1.0 + EDGE_SLACK).contains(&u) {
        return None;
    }
    let q = s.cross(e1);
    let v = dir.dot(q) * inv;
    if v < -EDGE_SLACK || u + v > 1.0 + EDGE_SLACK {
        return None;
    }
    let t = e2.dot(q) * inv;
    // Strictly in front of the origin; a scanner resting on a surface does
    // not see that surface at range zero.
    (t > 1e-12).then_some(t)
}

/// Sweeps one scanner pose over the mesh and returns the hit cloud.
///
/// Rays go out in row-major order — elevation outer, azimuth inner — and
/// point ids number the *hits* sequentially from zero in that order. Misses
/// (no surface within `max_range`) emit nothing and consume no randomness,
/// so the same scene always yields the same cloud for a given spec.
/// Each point carries the hit triangle's normal, flipped if necessary so it
/// faces the scanner.
pub fn scan(mesh: &TriangleMesh, spec: &ScannerSpec) -> Result<PointCloud> {
    spec.validate()?;
    if mesh.triangle_count() == 0 {
        return Err(Error::Data("cannot scan an empty mesh".into()));
    }
    let noise = if spec.range_sigma > 0.0 {
        Some(Normal::new(0.0, spec.range_sigma).expect("validated sigma"))
    } else {
        None
    };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut records = Vec::new();
    for iel in 0..spec.elevation_count() {
        let psi = spec.elevation_min + iel as f64 * spec.elevation_step;
        let (sin_psi, cos_psi) = psi.sin_cos();
        for iaz in 0..spec.azimuth_count() {
            let theta = iaz as f64 * spec.azimuth_step;
            let dir = Vec3::new(cos_psi * theta.cos(), cos_psi * theta.sin(), sin_psi);
            let Some((t, tri)) = mesh.cast_ray(spec.origin, dir, spec.max_range) else {
                continue;
            };
            let range = t + noise.as_ref().map_or(0.0, |n| n.sample(&mut rng));
            let position = spec.origin + dir * range;
            // The stored winding is arbitrary relative to this pose; a
            // scanner only ever sees the side facing it.
            let mut normal = mesh.normal(tri);
            if normal.dot(dir) > 0.0 {
                normal = -normal;
            }
            records.push(PointRecord {
                id: PointId(records.len() as u64),
                position,
                normal: Some([normal.x as f32, normal.y as f32, normal.z as f32]),
                color: None,
            });
        }
    }
    PointCloud::from_records(records)
}

/// Scans every pose and merges the results into one cloud with fresh
/// sequential ids, plus the per-pose hit counts in pose order.
pub fn multi_scan_with_counts(
    mesh: &TriangleMesh,
    specs: &[ScannerSpec],
) -> Result<(PointCloud, Vec<u64>)> {
    if specs.is_empty() {
        return Err(Error::Config("multi_scan needs at least one scanner pose".into()));
    }
    let mut merged = Vec::new();
    let mut counts = Vec::with_capacity(specs.len());
    for spec in specs {
        let cloud = scan(mesh, spec)?;
        counts.push(cloud.len() as u64);
        for point in cloud.points() {
            merged.push(PointRecord {
                id: PointId(merged.len() as u64),
                ..*point
            });
        }
    }
    Ok((PointCloud::from_records(merged)?, counts))
}

/// Scans every pose and merges the results into one cloud with fresh
/// sequential ids, in pose order.
pub fn multi_scan(mesh: &TriangleMesh, specs: &[ScannerSpec]) -> Result<PointCloud> {
    multi_scan_with_counts(mesh, specs).map(|(cloud, _)| cloud)
}

/// An axis-aligned cube of the given side length centered on the origin,
/// as 12 triangles over 8 shared vertices. With `inward` true the winding
/// makes every normal point into the cube — the natural orientation for an
/// interior scan.
pub fn make_cube_mesh(side: f64, inward: bool) -> TriangleMesh {
    assert!(side > 0.0, "cube side must be positive");
    let h = side / 2.0;
    let mut vertices = Vec::with_capacity(8);
    for &z in &[-h, h] {
        for &y in &[-h, h] {
            for &x in &[-h, h] {
                vertices.push(Vec3::new(x, y, z));
            }
        }
    }
    // Vertex index = x_bit + 2·y_bit + 4·z_bit. Each face is a quad split
    // along one diagonal; winding below is outward, flipped when inward.
    let quads: [[u32; 4]; 6] = [
        [0, 2, 3, 1], // z = -h, normal -z
        [4, 5, 7, 6], // z = +h, normal +z
        [0, 1, 5, 4], // y = -h, normal -y
        [2, 6, 7, 3], // y = +h, normal +y
        [0, 4, 6, 2], // x = -h, normal -x
        [1, 3, 7, 5], // x = +h, normal +x
    ];
    let mut triangles = Vec::with_capacity(12);
    for q in quads {
        let [a, b, c, d] = if inward { [q[0], q[3], q[2], q[1]] } else { q };
        triangles.push([a, b, c]);
        triangles.push([a, c, d]);
    }
    TriangleMesh::new(vertices, triangles).expect("cube construction is valid")
}
