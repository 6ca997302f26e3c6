//! Out-of-core Poisson-disk subsampling for massive LiDAR point clouds.
//!
//! Terrestrial laser scans oversample wildly near the scanner and wherever
//! sweeps overlap. This crate thins such clouds down to a target fraction by
//! repeatedly discarding the points that contribute most to local density,
//! defined through inverse-square-distance costs over each point's k nearest
//! neighbors. The cloud never has to fit in memory: points are binned into a
//! voxel grid on disk and processed 27 voxels at a time.
//!
//! The crate also ships a spherical-sweep scanner simulator for building
//! ground-truth test scenes, three in-core reference subsamplers to compare
//! against, and a density-homogeneity analyzer that scores how uniform a
//! subsampled cloud ended up.
//!
//! ```
//! use cloudthin::{make_cube_mesh, scan, ScannerSpec, Vec3};
//!
//! let room = make_cube_mesh(10.0, true);
//! let mut spec = ScannerSpec::default();
//! spec.origin = Vec3::new(1.0, 2.0, -1.5);
//! spec.range_sigma = 0.0;
//! let cloud = scan(&room, &spec).unwrap();
//! assert!(cloud.len() > 1000);
//! ```

pub mod analysis;
pub mod baselines;
pub mod cloud;
pub mod cost;
pub mod decimator;
pub mod error;
pub mod geom;
pub mod knn;
pub mod neighborhood;
pub mod ply;
pub mod queue;
pub mod scan;
pub mod voxel;

pub use analysis::{
    compare_profiles, default_area_grid, density_profile, density_profile_for_points,
    local_density_map, DensityProfile, Fractiles, ProfileRanking, RankRow,
};
pub use baselines::{
    dart_throwing, random_purge, require_in_core_budget, yuksel_eliminate, BaselineParams,
    BaselineResult,
};
pub use cloud::{min_pairwise_distance, PointCloud, PointId, PointRecord};
pub use cost::{CostConfig, CostEvaluator, CostKind, YukselParams};
pub use decimator::{checkpoint_path, decimate, resume, DecimateOptions, DecimationReport};
pub use error::{Error, Result};
pub use geom::{Aabb, Vec3};
pub use knn::{KdTree, Neighbor};
pub use neighborhood::{build_caches, CacheBuild, CacheEntry, NeighborCache, ReverseIndex};
pub use ply::{read_ply, write_ply, write_ply_with_scalar, PlyReader, PlyStreamWriter};
pub use queue::{CostKey, CostQueue};
pub use scan::{make_cube_mesh, multi_scan, multi_scan_with_counts, scan, ScannerSpec, TriangleMesh};
pub use voxel::{FieldSet, Manifest, VoxelKey, VoxelPage, VoxelStore};
