//! Per-point ranking functions: inverse-square crowding costs (plain,
//! normal-weighted, color-weighted) and the clamped falloff kernel used by
//! sample elimination.
//!
//! All inverse-square costs operate on *squared* distances. There is exactly
//! one distance expression in the crate ([`crate::geom::Vec3::dist2`]) and no
//! sqrt/square round trips, so a cost recomputed from scratch by an oracle is
//! bit-identical to one computed incrementally: `1/max(d, ε)²` is evaluated as
//! `1/max(d², ε²)`, the same value for d ≥ 0.

use crate::error::{Error, Result};

/// Distance floor: coincident points get cost 1/ε² instead of infinity,
/// keeping every cost finite and comparable while sorting duplicates first
/// in line for removal.
pub const DEFAULT_EPSILON_D: f64 = 1e-6;

/// Width of the Gaussian color-similarity kernel, in normalized RGB units.
pub const DEFAULT_SIGMA_C: f64 = 0.2;

/// Falloff exponent of the sample-elimination kernel.
pub const ELIMINATION_ALPHA: f64 = 8.0;
/// Shapes how the elimination clamp radius scales with the target fraction.
pub const ELIMINATION_GAMMA: f64 = 1.5;
/// Fraction of the full elimination radius used as the clamp radius.
pub const ELIMINATION_BETA: f64 = 0.65;

/// Which ranking function the decimator runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CostKind {
    /// Inverse-square distance to the single nearest neighbor.
    K1,
    /// Sum of inverse-square distances to the k nearest neighbors.
    Knn,
    /// Like [`CostKind::Knn`], each term scaled by clamped normal agreement.
    KnnNormal,
    /// Like [`CostKind::Knn`], each term scaled by Gaussian color similarity.
    KnnColor,
    /// Truncated sample-elimination weight over the k nearest neighbors.
    Yuksel,
}

impl CostKind {
    pub fn parse(name: &str) -> Result<CostKind> {
        Ok(match name {
            "k1" => CostKind::K1,
            "knn" => CostKind::Knn,
            "normal" => CostKind::KnnNormal,
            "color" => CostKind::KnnColor,
            "yuksel" => CostKind::Yuksel,
            other => {
                return Err(Error::Config(format!(
                    "unknown cost kind {other:?}; expected k1, knn, normal, color, or yuksel"
                )))
            }
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            CostKind::K1 => "k1",
            CostKind::Knn => "knn",
            CostKind::KnnNormal => "normal",
            CostKind::KnnColor => "color",
            CostKind::Yuksel => "yuksel",
        }
    }
}

/// Constants of the sample-elimination weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct YukselParams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Target fraction of points kept.
    pub lambda: f64,
    /// Sampling-domain volume (bounding box of the cloud).
    pub volume: f64,
    /// The count the radius is derived for (the target output size).
    pub current_count: u64,
}

impl YukselParams {
    pub fn with_defaults(lambda: f64, volume: f64, current_count: u64) -> YukselParams {
        YukselParams {
            alpha: ELIMINATION_ALPHA,
            beta: ELIMINATION_BETA,
            gamma: ELIMINATION_GAMMA,
            lambda,
            volume,
            current_count,
        }
    }

    /// Full kernel radius for distributing `current_count` samples over
    /// `volume`.
    pub fn radius(&self) -> Result<f64> {
        yuksel_radius(self.volume, self.current_count)
    }

    /// Clamp radius below which neighbor distances stop mattering.
    pub fn r_min(&self, radius: f64) -> f64 {
        yuksel_r_min(radius, self.lambda, self.gamma, self.beta)
    }
}

/// Kernel radius `2·(V / (4√2·m))^{1/3}`: the largest radius at which m
/// spheres of that radius can pack the volume V.
pub fn yuksel_radius(volume: f64, count: u64) -> Result<f64> {
    if !(volume > 0.0) || !volume.is_finite() {
        return Err(Error::Data(format!(
            "degenerate bounding-box volume {volume}; the elimination radius needs a 3-dimensional extent"
        )));
    }
    if count == 0 {
        return Err(Error::Config("elimination radius needs a nonzero target count".into()));
    }
    Ok(2.0 * (volume / (4.0 * std::f64::consts::SQRT_2 * count as f64)).cbrt())
}

/// Clamp radius `r·(1 − λ^γ)·β`.
pub fn yuksel_r_min(radius: f64, lambda: f64, gamma: f64, beta: f64) -> f64 {
    radius * (1.0 - lambda.powf(gamma)) * beta
}

/// Elimination kernel at plain distance `dist`: `(1 − d̂/r)^α` for d < r with
/// d̂ = max(d, r_min), zero at and beyond r. Distances at exactly r_min take
/// the clamp branch, which is the same value either way.
pub fn yuksel_kernel(dist: f64, radius: f64, r_min: f64, alpha: f64) -> f64 {
    if dist >= radius {
        return 0.0;
    }
    (1.0 - dist.max(r_min) / radius).powf(alpha)
}

/// Sample-elimination weight: kernel summed over the given neighbor
/// distances (callers pass them ascending so sums are order-canonical).
pub fn yuksel_cost(dists: &[f64], radius: f64, r_min: f64, alpha: f64) -> f64 {
    let mut sum = 0.0;
    for &d in dists {
        sum += yuksel_kernel(d, radius, r_min, alpha);
    }
    sum
}

/// Clamped normal agreement `max(n·n', 0)`; expects unit normals. Negative
/// agreement is floored at zero so opposite-facing sheets do not interact.
pub fn normal_weight(a: [f32; 3], b: [f32; 3]) -> f64 {
    let dot = a[0] as f64 * b[0] as f64 + a[1] as f64 * b[1] as f64 + a[2] as f64 * b[2] as f64;
    dot.max(0.0)
}

/// Gaussian color similarity `exp(−‖c−c'‖²/σ²)` in normalized RGB space.
pub fn color_weight(a: [u8; 3], b: [u8; 3], sigma_c: f64) -> f64 {
    let mut d2 = 0.0;
    for i in 0..3 {
        let d = a[i] as f64 / 255.0 - b[i] as f64 / 255.0;
        d2 += d * d;
    }
    (-d2 / (sigma_c * sigma_c)).exp()
}

/// Canonical weighted inverse-square sum: `Σ weight/max(d², ε²)` over the
/// first `k` entries, folded left to right in the given order.
pub fn weighted_inverse_square(
    entries: impl IntoIterator<Item = (f64, f64)>,
    k: usize,
    epsilon_d: f64,
) -> f64 {
    let floor = epsilon_d * epsilon_d;
    let mut sum = 0.0;
    for (dist2, weight) in entries.into_iter().take(k) {
        sum += weight / dist2.max(floor);
    }
    sum
}

/// Crowding cost against the k nearest neighbors. `sorted_dist2` holds
/// squared distances in ascending order; fewer than k entries contribute a
/// partial (exact) sum, and no entries cost zero.
pub fn cost_knn(sorted_dist2: &[f64], k: usize, epsilon_d: f64) -> f64 {
    weighted_inverse_square(sorted_dist2.iter().map(|&d2| (d2, 1.0)), k, epsilon_d)
}

/// Crowding cost against the single nearest neighbor.
pub fn cost_k1(sorted_dist2: &[f64], epsilon_d: f64) -> f64 {
    cost_knn(sorted_dist2, 1, epsilon_d)
}

/// Normal-weighted crowding cost; `neighbors` pairs each ascending squared
/// distance with that neighbor's unit normal.
pub fn cost_knn_normal(
    neighbors: &[(f64, [f32; 3])],
    own_normal: [f32; 3],
    k: usize,
    epsilon_d: f64,
) -> f64 {
    weighted_inverse_square(
        neighbors.iter().map(|&(d2, n)| (d2, normal_weight(own_normal, n))),
        k,
        epsilon_d,
    )
}

/// Color-weighted crowding cost; `neighbors` pairs each ascending squared
/// distance with that neighbor's color.
pub fn cost_knn_color(
    neighbors: &[(f64, [u8; 3])],
    own_color: [u8; 3],
    k: usize,
    epsilon_d: f64,
    sigma_c: f64,
) -> f64 {
    weighted_inverse_square(
        neighbors.iter().map(|&(d2, c)| (d2, color_weight(own_color, c, sigma_c))),
        k,
        epsilon_d,
    )
}

/// A full cost-function selection, as configured by a caller.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostConfig {
    pub kind: CostKind,
    pub k: usize,
    pub epsilon_d: f64,
    pub sigma_c: f64,
    /// Required when `kind` is [`CostKind::Yuksel`], ignored otherwise.
    pub yuksel: Option<YukselParams>,
}

impl CostConfig {
    pub fn new(kind: CostKind, k: usize) -> CostConfig {
        CostConfig {
            kind,
            k,
            epsilon_d: DEFAULT_EPSILON_D,
            sigma_c: DEFAULT_SIGMA_C,
            yuksel: None,
        }
    }

    pub fn knn(k: usize) -> CostConfig {
        CostConfig::new(CostKind::Knn, k)
    }

    /// The neighbor count the cost actually consumes: 1 for the
    /// nearest-neighbor kind regardless of `k`.
    pub fn effective_k(&self) -> usize {
        match self.kind {
            CostKind::K1 => 1,
            _ => self.k,
        }
    }
}

/// A validated cost configuration with every derived constant precomputed,
/// ready to turn cached neighbors into cost terms.
#[derive(Debug, Clone, Copy)]
pub struct CostEvaluator {
    kind: CostKind,
    k: usize,
    epsilon_d: f64,
    sigma_c: f64,
    radius: f64,
    r_min: f64,
    alpha: f64,
}

impl CostEvaluator {
    pub fn resolve(config: &CostConfig) -> Result<CostEvaluator> {
        if config.k == 0 {
            return Err(Error::Config("cost neighbor count k must be at least 1".into()));
        }
        if !(config.epsilon_d > 0.0) {
            return Err(Error::Config(format!(
                "distance floor epsilon_d must be positive, got {}",
                config.epsilon_d
            )));
        }
        if !(config.sigma_c > 0.0) {
            return Err(Error::Config(format!(
                "color kernel width sigma_c must be positive, got {}",
                config.sigma_c
            )));
        }
        let (radius, r_min, alpha) = match config.kind {
            CostKind::Yuksel => {
                let params = config.yuksel.ok_or_else(|| {
                    Error::Config("yuksel cost needs its kernel parameters".into())
                })?;
                if !(params.alpha > 0.0) {
                    return Err(Error::Config(format!(
                        "kernel exponent alpha must be positive, got {}",
                        params.alpha
                    )));
                }
                if !(0.0..=1.0).contains(&params.beta) {
                    return Err(Error::Config(format!(
                        "clamp fraction beta must be in [0, 1], got {}",
                        params.beta
                    )));
                }
                if !(params.lambda > 0.0 && params.lambda < 1.0) {
                    return Err(Error::Config(format!(
                        "target fraction lambda must be in (0, 1), got {}",
                        params.lambda
                    )));
                }
                let radius = params.radius()?;
                (radius, params.r_min(radius), params.alpha)
            }
            _ => (0.0, 0.0, 0.0),
        };
        Ok(CostEvaluator {
            kind: config.kind,
            k: config.effective_k(),
            epsilon_d: config.epsilon_d,
            sigma_c: config.sigma_c,
            radius,
            r_min,
            alpha,
        })
    }

    pub fn kind(&self) -> CostKind {
        self.kind
    }

    /// Neighbors consumed per cost: the cache prefix length.
    pub fn k(&self) -> usize {
        self.k
    }

    /// Cost contribution of one cached neighbor at squared distance `dist2`
    /// with build-time pair weight `weight`.
    pub fn term(&self, dist2: f64, weight: f64) -> f64 {
        match self.kind {
            CostKind::Yuksel => yuksel_kernel(dist2.sqrt(), self.radius, self.r_min, self.alpha),
            _ => weight / dist2.max(self.epsilon_d * self.epsilon_d),
        }
    }

    /// The pair weight to freeze into a cache entry at build time.
    /// Plain and elimination kinds use 1; attribute kinds fail loudly when
    /// the attribute is missing.
    pub fn pair_weight(
        &self,
        own_normal: Option<[f32; 3]>,
        own_color: Option<[u8; 3]>,
        other_normal: Option<[f32; 3]>,
        other_color: Option<[u8; 3]>,
    ) -> Result<f64> {
        match self.kind {
            CostKind::K1 | CostKind::Knn | CostKind::Yuksel => Ok(1.0),
            CostKind::KnnNormal => match (own_normal, other_normal) {
                (Some(a), Some(b)) => Ok(normal_weight(a, b)),
                _ => Err(Error::Config(
                    "normal-weighted cost needs a normal on every point".into(),
                )),
            },
            CostKind::KnnColor => match (own_color, other_color) {
                (Some(a), Some(b)) => Ok(color_weight(a, b, self.sigma_c)),
                _ => Err(Error::Config(
                    "color-weighted cost needs a color on every point".into(),
                )),
            },
        }
    }
}
