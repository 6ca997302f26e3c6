//! Density-homogeneity scoring for subsampled clouds.
//!
//! The core instrument plots, for a sample of points, how many neighbors
//! each one has inside discs of increasing area. On a perfectly even cloud
//! that count grows linearly with area and every point tells the same
//! story; uneven clouds fan out into wide fractile bands. An ordinary
//! least-squares line through the per-point (area, count) pairs condenses
//! the picture into four numbers: the slope estimates global density in
//! points/m², and R²/RMSE grade how tightly the cloud follows it.

use std::collections::BTreeSet;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cloud::{PointCloud, PointId};
use crate::error::{Error, Result};
use crate::knn::KdTree;

/// Neighbor-count fractiles at one neighborhood area.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fractiles {
    pub p01: f64,
    pub p10: f64,
    pub p25: f64,
    pub p50: f64,
    pub p75: f64,
    pub p90: f64,
    pub p99: f64,
}

/// Neighbor-count statistics over a grid of neighborhood areas, plus the
/// least-squares line through all per-point (area, count) pairs.
#[derive(Debug, Clone)]
pub struct DensityProfile {
    /// Neighborhood areas in m², strictly increasing.
    pub areas: Vec<f64>,
    /// Mean neighbor count at each area.
    pub mean: Vec<f64>,
    /// Count fractiles at each area, index-aligned with `areas`.
    pub fractiles: Vec<Fractiles>,
    /// Regression slope: estimated density in points/m².
    pub slope: f64,
    /// Regression intercept in points.
    pub intercept: f64,
    /// Coefficient of determination of the per-point fit, in [0, 1].
    pub r_squared: f64,
    /// Root-mean-square residual of the per-point fit, in points.
    pub rmse: f64,
}

impl DensityProfile {
    /// Serializes the profile as CSV: one row per area under the header
    /// `area,mean,p01,p10,p25,p50,p75,p90,p99`, then four footer rows
    /// carrying `slope`, `intercept`, `r2`, and `rmse`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("area,mean,p01,p10,p25,p50,p75,p90,p99\n");
        for (i, &area) in self.areas.iter().enumerate() {
            let f = &self.fractiles[i];
            out.push_str(&format!(
                "{area},{},{},{},{},{},{},{},{}\n",
                self.mean[i], f.p01, f.p10, f.p25, f.p50, f.p75, f.p90, f.p99
            ));
        }
        out.push_str(&format!("slope,{}\n", self.slope));
        out.push_str(&format!("intercept,{}\n", self.intercept));
        out.push_str(&format!("r2,{}\n", self.r_squared));
        out.push_str(&format!("rmse,{}\n", self.rmse));
        out
    }
}

fn validate_areas(areas: &[f64]) -> Result<()> {
    if areas.is_empty() {
        return Err(Error::Config("area grid is empty".into()));
    }
    if areas.len() < 2 {
        return Err(Error::Config(
            "a single area cannot support a regression; give at least two".into(),
        ));
    }
    for pair in areas.windows(2) {
        if !(pair[0] < pair[1]) {
            return Err(Error::Config(format!(
                "areas must be strictly increasing, got {} then {}",
                pair[0], pair[1]
            )));
        }
    }
    if !(areas[0] > 0.0) {
        return Err(Error::Config(format!("areas must be positive, got {}", areas[0])));
    }
    Ok(())
}

/// Per-sampled-point neighbor counts: one row per id in `ids`, one column
/// per area, computed with inclusive disc radii √(area/π). The sampled point
/// itself is never counted as its own neighbor.
fn count_matrix(cloud: &PointCloud, areas: &[f64], ids: &[PointId]) -> Result<Vec<Vec<u64>>> {
    let known: BTreeSet<PointId> = cloud.points().iter().map(|p| p.id).collect();
    for id in ids {
        if !known.contains(id) {
            return Err(Error::Config(format!("sampled id {id} is not in the cloud")));
        }
    }
    let entries: Vec<(PointId, crate::geom::Vec3)> =
        cloud.points().iter().map(|p| (p.id, p.position)).collect();
    let tree = KdTree::build(&entries);
    let radii: Vec<f64> = areas.iter().map(|a| (a / std::f64::consts::PI).sqrt()).collect();
    let by_id: std::collections::HashMap<PointId, crate::geom::Vec3> =
        entries.iter().copied().collect();
    Ok(ids
        .iter()
        .map(|id| {
            let pos = by_id[id];
            radii
                .iter()
                .map(|&r| tree.count_within(pos, r, Some(*id)) as u64)
                .collect()
        })
        .collect())
}

/// Ordinary least squares of y on x over the given pairs. Returns
/// `(slope, intercept, r_squared, rmse)`. With zero variance in y the fit
/// is the constant mean: R² is 1 when residuals vanish and 0 otherwise.
fn linear_fit(pairs: &[(f64, f64)]) -> Result<(f64, f64, f64, f64)> {
    let n = pairs.len() as f64;
    if pairs.len() < 2 {
        return Err(Error::Config("regression needs at least two samples".into()));
    }
    let mean_x = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut syy = 0.0;
    for &(x, y) in pairs {
        sxx += (x - mean_x) * (x - mean_x);
        sxy += (x - mean_x) * (y - mean_y);
        syy += (y - mean_y) * (y - mean_y);
    }
    if !(sxx > 0.0) {
        return Err(Error::Config("regression x values are all identical".into()));
    }
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_x;
    let ss_res: f64 = pairs
        .iter()
        .map(|&(x, y)| {
            let e = y - (slope * x + intercept);
            e * e
        })
        .sum();
    let r_squared = if syy > 0.0 {
        1.0 - ss_res / syy
    } else if ss_res == 0.0 {
        1.0
    } else {
        0.0
    };
    Ok((slope, intercept, r_squared, (ss_res / n).sqrt()))
}

/// Linearly interpolated fractile of pre-sorted data (the R-7 / numpy
/// default): rank `p·(n−1)` split between its two bracketing order
/// statistics.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let rank = p * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Builds a [`DensityProfile`] for an explicit set of sampled ids — the
/// deterministic core behind [`density_profile`], exposed so callers can
/// sample interior-only or otherwise hand-picked points.
pub fn density_profile_for_points(
    cloud: &PointCloud,
    areas: &[f64],
    ids: &[PointId],
) -> Result<DensityProfile> {
    if cloud.len() < 2 {
        return Err(Error::Data(format!(
            "density profile needs at least 2 points, got {}",
            cloud.len()
        )));
    }
    validate_areas(areas)?;
    if ids.is_empty() {
        return Err(Error::Config("no points sampled for the density profile".into()));
    }
    let matrix = count_matrix(cloud, areas, ids)?;

    let mut mean = Vec::with_capacity(areas.len());
    let mut fractiles = Vec::with_capacity(areas.len());
    for col in 0..areas.len() {
        let mut counts: Vec<f64> = matrix.iter().map(|row| row[col] as f64).collect();
        counts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        mean.push(counts.iter().sum::<f64>() / counts.len() as f64);
        fractiles.push(Fractiles {
            p01: percentile(&counts, 0.01),
            p10: percentile(&counts, 0.10),
            p25: percentile(&counts, 0.25),
            p50: percentile(&counts, 0.50),
            p75: percentile(&counts, 0.75),
            p90: percentile(&counts, 0.90),
            p99: percentile(&counts, 0.99),
        });
    }

    let pairs: Vec<(f64, f64)> = matrix
        .iter()
        .flat_map(|row| {
            areas
                .iter()
                .zip(row)
                .map(|(&a, &c)| (a, c as f64))
                .collect::<Vec<_>>()
        })
        .collect();
    let (slope, intercept, r_squared, rmse) = linear_fit(&pairs)?;
    Ok(DensityProfile {
        areas: areas.to_vec(),
        mean,
        fractiles,
        slope,
        intercept,
        r_squared,
        rmse,
    })
}

/// Profiles neighbor counts over a seeded random sample of the cloud.
///
/// At most `sample_size` points are drawn without replacement (all of them
/// when the cloud is smaller); counts are taken against the *whole* cloud.
/// Boundary points legitimately see emptier discs — no edge correction is
/// applied, so a cloud's physical extent shows up in the fractile bands.
pub fn density_profile(
    cloud: &PointCloud,
    areas: &[f64],
    sample_size: usize,
    seed: u64,
) -> Result<DensityProfile> {
    if sample_size == 0 {
        return Err(Error::Config("sample_size must be positive".into()));
    }
    if cloud.len() < 2 {
        return Err(Error::Data(format!(
            "density profile needs at least 2 points, got {}",
            cloud.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids: Vec<PointId> = cloud.points().iter().map(|p| p.id).collect();
    ids.shuffle(&mut rng);
    ids.truncate(sample_size);
    density_profile_for_points(cloud, areas, &ids)
}

/// Default evaluation grid: 20 areas linearly spaced from `(2·s)²` to
/// `(20·s)²`, where `s = (bbox_volume/|C|)^{1/3}` is the expected point
/// spacing. Needs a full-dimensional bounding box.
pub fn default_area_grid(cloud: &PointCloud) -> Result<Vec<f64>> {
    if cloud.is_empty() {
        return Err(Error::Data("cannot size an area grid for an empty cloud".into()));
    }
    let volume = cloud.bounds().volume();
    if !(volume > 0.0) {
        return Err(Error::Data(
            "cloud bounding box has zero volume; supply an explicit area grid".into(),
        ));
    }
    let spacing = (volume / cloud.len() as f64).cbrt();
    let lo = (2.0 * spacing).powi(2);
    let hi = (20.0 * spacing).powi(2);
    Ok((0..20).map(|i| lo + (hi - lo) * i as f64 / 19.0).collect())
}

/// One row of a [`ProfileRanking`].
#[derive(Debug, Clone)]
pub struct RankRow {
    /// 1-based rank; exact ties share the rank of the first tied row.
    pub rank: usize,
    pub name: String,
    pub r_squared: f64,
    pub rmse: f64,
    /// True when this row ties the previous one on both R² and RMSE.
    pub tied_with_previous: bool,
}

/// Methods ordered best-first by (R² descending, RMSE ascending).
#[derive(Debug, Clone)]
pub struct ProfileRanking {
    pub rows: Vec<RankRow>,
}

impl ProfileRanking {
    /// CSV form: `rank,name,r_squared,rmse`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("rank,name,r_squared,rmse\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                row.rank, row.name, row.r_squared, row.rmse
            ));
        }
        out
    }
}

impl fmt::Display for ProfileRanking {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<5} {:<24} {:>12} {:>12}", "rank", "name", "r_squared", "rmse")?;
        for row in &self.rows {
            writeln!(
                f,
                "{:<5} {:<24} {:>12.6} {:>12.6}{}",
                row.rank,
                row.name,
                row.r_squared,
                row.rmse,
                if row.tied_with_previous { "  (tie)" } else { "" }
            )?;
        }
        Ok(())
    }
}

/// Ranks named profiles by fit quality — R² first, RMSE as the tiebreak —
/// without computing any new statistics. All profiles must share the exact
/// same area grid; comparing fits over different grids is meaningless.
pub fn compare_profiles(profiles: &[(String, DensityProfile)]) -> Result<ProfileRanking> {
    if profiles.len() < 2 {
        return Err(Error::Config(format!(
            "ranking needs at least two profiles, got {}",
            profiles.len()
        )));
    }
    let grid = &profiles[0].1.areas;
    for (name, profile) in profiles.iter().skip(1) {
        let same = profile.areas.len() == grid.len()
            && profile
                .areas
                .iter()
                .zip(grid)
                .all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            return Err(Error::Config(format!(
                "profile {name:?} was evaluated on a different area grid"
            )));
        }
    }

    let mut order: Vec<&(String, DensityProfile)> = profiles.iter().collect();
    order.sort_by(|(an, a), (bn, b)| {
        b.r_squared
            .total_cmp(&a.r_squared)
            .then(a.rmse.total_cmp(&b.rmse))
            .then(an.cmp(bn))
    });

    let mut rows: Vec<RankRow> = Vec::with_capacity(order.len());
    for (i, (name, profile)) in order.iter().enumerate() {
        let tied = i > 0 && {
            let prev = &rows[i - 1];
            prev.r_squared.to_bits() == profile.r_squared.to_bits()
                && prev.rmse.to_bits() == profile.rmse.to_bits()
        };
        let rank = if tied { rows[i - 1].rank } else { i + 1 };
        rows.push(RankRow {
            rank,
            name: name.clone(),
            r_squared: profile.r_squared,
            rmse: profile.rmse,
            tied_with_previous: tied,
        });
    }
    Ok(ProfileRanking { rows })
}

/// Per-point areal density: neighbors within `radius` divided by the disc
/// area π·radius², in cloud order. An isolated point scores 0.
pub fn local_density_map(cloud: &PointCloud, radius: f64) -> Result<Vec<f64>> {
    if !(radius > 0.0) {
        return Err(Error::Config(format!("density radius must be positive, got {radius}")));
    }
    let entries: Vec<(PointId, crate::geom::Vec3)> =
        cloud.points().iter().map(|p| (p.id, p.position)).collect();
    let tree = KdTree::build(&entries);
    let disc = std::f64::consts::PI * radius * radius;
    Ok(cloud
        .points()
        .iter()
        .map(|p| tree.count_within(p.position, radius, Some(p.id)) as f64 / disc)
        .collect())
}
