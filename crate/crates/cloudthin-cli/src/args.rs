//! Command-line surface. Every parameter is an explicit flag; nothing is
//! read from environment variables.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(
    name = "cloudthin",
    version,
    about = "Out-of-core Poisson-disk point-cloud subsampling toolkit"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Simulate spherical range scans of a triangle mesh from multiple poses
    Simulate(SimulateArgs),
    /// Partition a PLY cloud into an on-disk voxel store
    Voxelize(VoxelizeArgs),
    /// Subsample a cloud to floor(lambda*n) points, out of core
    Decimate(DecimateArgs),
    /// Run an in-core reference subsampler
    Baseline(BaselineArgs),
    /// Score density homogeneity of one or more clouds
    Analyze(AnalyzeArgs),
    /// Dump a voxel store back to a PLY file
    Export(ExportArgs),
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// Triangle mesh to scan (OBJ, triangular faces)
    #[arg(long)]
    pub mesh: PathBuf,

    /// Scanner poses, one "x y z" per line; '#' starts a comment
    #[arg(long)]
    pub poses: PathBuf,

    /// Gaussian range-noise sigma in meters, applied along each ray
    #[arg(long, default_value_t = 4e-4)]
    pub sigma: f64,

    /// Base RNG seed; pose i scans with seed + i
    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Azimuth step in radians (default: full turn in 90 steps)
    #[arg(long)]
    pub az_step: Option<f64>,

    /// Elevation step in radians (default: 70 samples over the span)
    #[arg(long)]
    pub el_step: Option<f64>,

    /// Lowest elevation in radians (default -pi/3)
    #[arg(long, allow_negative_numbers = true)]
    pub el_min: Option<f64>,

    /// Highest elevation in radians (default pi/3)
    #[arg(long, allow_negative_numbers = true)]
    pub el_max: Option<f64>,

    /// Maximum ray range in meters
    #[arg(long)]
    pub max_range: Option<f64>,

    /// Output directory: cloud.ply, scan_stats.txt, run_config.txt
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct VoxelizeArgs {
    /// Input cloud (binary little-endian PLY)
    #[arg(long)]
    pub input: PathBuf,

    /// Voxel edge length in meters
    #[arg(long)]
    pub voxel_size: f64,

    /// Directory to create the store in
    #[arg(long)]
    pub store: PathBuf,
}

#[derive(Args, Debug)]
pub struct DecimateArgs {
    /// Input cloud (binary little-endian PLY)
    #[arg(long)]
    pub input: PathBuf,

    /// Fraction of points to keep, in (0, 1); the target is floor(lambda*n)
    #[arg(long)]
    pub lambda: f64,

    /// Cost function: k1, knn, normal, color, or yuksel
    #[arg(long, default_value = "knn")]
    pub cost: String,

    /// Neighbors the cost consumes
    #[arg(long, default_value_t = 6)]
    pub k: usize,

    /// Extra cached neighbors absorbing removals before a cache goes stale
    #[arg(long, default_value_t = 8)]
    pub buffer: usize,

    /// Voxel edge length in meters (default: sized for ~1000 points/voxel)
    #[arg(long)]
    pub voxel_size: Option<f64>,

    /// Seed recorded in the report (the engine itself is deterministic)
    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Worker threads for the cost pass
    #[arg(long, default_value_t = 1)]
    pub threads: usize,

    /// Voxel bundles cached in memory during the removal pass
    #[arg(long, default_value_t = 8)]
    pub page_cache: usize,

    /// Write one line per removal to <out-dir>/audit.log
    #[arg(long)]
    pub audit: bool,

    /// Continue an interrupted run from the store's checkpoint
    #[arg(long)]
    pub resume: bool,

    /// Voxel store location (default: <out-dir>/store)
    #[arg(long)]
    pub store: Option<PathBuf>,

    /// Accepted for symmetry with `baseline`; the out-of-core engine
    /// bounds its own memory and ignores this cap
    #[arg(long)]
    pub budget_mb: Option<u64>,

    /// Output directory: output.ply, report.txt, run_config.txt
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct BaselineArgs {
    #[command(subcommand)]
    pub method: BaselineMethod,
}

#[derive(Subcommand, Debug)]
pub enum BaselineMethod {
    /// Sample elimination over falloff weights (greedy min-removal)
    Yuksel(YukselArgs),
    /// Dart throwing with the radius bisected to hit a target count
    Dart(DartArgs),
    /// Seeded-order purge of points closer than a fixed radius
    Corsini(CorsiniArgs),
}

#[derive(Args, Debug)]
pub struct CommonBaselineArgs {
    /// Input cloud (binary little-endian PLY)
    #[arg(long)]
    pub input: PathBuf,

    /// Refuse inputs whose in-core footprint exceeds this many MiB
    #[arg(long)]
    pub budget_mb: Option<u64>,

    /// Output directory: output.ply, report.txt, run_config.txt
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct YukselArgs {
    #[command(flatten)]
    pub common: CommonBaselineArgs,

    /// Fraction of points to keep, in (0, 1)
    #[arg(long)]
    pub lambda: f64,

    /// Falloff exponent
    #[arg(long, default_value_t = 8.0)]
    pub alpha: f64,

    /// Distance-clamp strength in [0, 1]; 0 disables the clamp
    #[arg(long, default_value_t = 0.65)]
    pub beta: f64,

    /// Clamp growth exponent
    #[arg(long, default_value_t = 1.5)]
    pub gamma: f64,
}

#[derive(Args, Debug)]
pub struct DartArgs {
    #[command(flatten)]
    pub common: CommonBaselineArgs,

    /// Fraction of points to keep, in (0, 1)
    #[arg(long)]
    pub lambda: f64,

    /// Shuffle seed
    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Accept counts up to target*(1+tolerance) before trimming
    #[arg(long, default_value_t = 0.05)]
    pub tolerance: f64,
}

#[derive(Args, Debug)]
pub struct CorsiniArgs {
    #[command(flatten)]
    pub common: CommonBaselineArgs,

    /// Conflict radius in meters
    #[arg(long)]
    pub radius: f64,

    /// Visit-order seed
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    /// Cloud to analyze as name=path.ply; repeat to compare several
    #[arg(long = "cloud", value_parser = parse_named_cloud, required = true)]
    pub clouds: Vec<(String, PathBuf)>,

    /// Comma-separated neighborhood areas in m^2, strictly increasing
    /// (default: 20 areas sized from the first cloud's point spacing)
    #[arg(long)]
    pub areas: Option<String>,

    /// Points sampled per cloud for the profile
    #[arg(long, default_value_t = 1000)]
    pub sample_size: usize,

    /// Sampling seed
    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Also write density_<name>.ply with a per-point density channel
    /// computed from discs of this radius (meters)
    #[arg(long)]
    pub density_radius: Option<f64>,

    /// Output directory: profile_<name>.csv, ranking.csv, run_config.txt
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    /// Voxel store directory
    #[arg(long)]
    pub store: PathBuf,

    /// Output PLY path
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_named_cloud(raw: &str) -> Result<(String, PathBuf), String> {
    let (name, path) = raw
        .split_once('=')
        .ok_or_else(|| format!("expected name=path.ply, got {raw:?}"))?;
    if name.is_empty()
        || !name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
    {
        return Err(format!(
            "cloud name {name:?} must be non-empty and use only letters, digits, '_', '-', '.'"
        ));
    }
    if path.is_empty() {
        return Err(format!("cloud {name:?} has an empty path"));
    }
    Ok((name.to_string(), PathBuf::from(path)))
}
