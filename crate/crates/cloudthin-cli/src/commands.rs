//! Command implementations. Each writes its data artifacts plus a
//! `run_config.txt` echoing the exact resolved parameters, so every output
//! directory documents the run that produced it.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use cloudthin::{
    compare_profiles, dart_throwing, decimate, default_area_grid, density_profile,
    local_density_map, multi_scan_with_counts, random_purge, require_in_core_budget, resume,
    write_ply, write_ply_with_scalar, yuksel_eliminate, Aabb, BaselineResult, CostConfig,
    CostKind, DecimateOptions, DecimationReport, Error, PlyReader, PlyStreamWriter, PointCloud,
    Result, ScannerSpec, TriangleMesh, Vec3, VoxelStore,
};

use crate::args::{
    AnalyzeArgs, BaselineArgs, BaselineMethod, Command, DecimateArgs, ExportArgs, SimulateArgs,
    VoxelizeArgs,
};

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Simulate(args) => cmd_simulate(args),
        Command::Voxelize(args) => cmd_voxelize(args),
        Command::Decimate(args) => cmd_decimate(args),
        Command::Baseline(args) => cmd_baseline(args),
        Command::Analyze(args) => cmd_analyze(args),
        Command::Export(args) => cmd_export(args),
    }
}

// ---------------------------------------------------------------------------
// shared plumbing

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io { path: path.to_path_buf(), source: e }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn write_run_config(dir: &Path, command: &str, entries: &[(&str, String)]) -> Result<()> {
    let mut text = format!("command: {command}\n");
    for (key, value) in entries {
        text.push_str(&format!("{key}: {value}\n"));
    }
    write_text(&dir.join("run_config.txt"), &text)
}

/// Parses a poses file: one `x y z` per line, `#` starts a comment, blank
/// lines are skipped. An empty pose set is an error.
fn parse_poses(path: &Path) -> Result<Vec<Vec3>> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut poses = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() != 3 {
            return Err(Error::Data(format!(
                "{}:{}: a pose is 'x y z', got {raw:?}",
                path.display(),
                lineno + 1
            )));
        }
        let mut coords = [0.0f64; 3];
        for (i, token) in tokens.iter().enumerate() {
            coords[i] = token.parse().map_err(|_| {
                Error::Data(format!(
                    "{}:{}: bad coordinate {token:?}",
                    path.display(),
                    lineno + 1
                ))
            })?;
            if !coords[i].is_finite() {
                return Err(Error::Data(format!(
                    "{}:{}: coordinate {token:?} is not finite",
                    path.display(),
                    lineno + 1
                )));
            }
        }
        poses.push(Vec3::new(coords[0], coords[1], coords[2]));
    }
    if poses.is_empty() {
        return Err(Error::Data(format!("{} contains no poses", path.display())));
    }
    Ok(poses)
}

/// Streams every record of the store into a PLY file, one record in memory
/// at a time.
fn export_store(store: &VoxelStore, path: &Path) -> Result<()> {
    let manifest = store.manifest();
    let fields = manifest.fields;
    let mut writer =
        PlyStreamWriter::create(path, manifest.total_points(), fields.normals, fields.colors)?;
    store.for_each_record(|_, record| writer.append(&record))?;
    writer.finish()
}

// ---------------------------------------------------------------------------
// simulate

fn cmd_simulate(args: SimulateArgs) -> Result<()> {
    let mesh = TriangleMesh::from_obj(&args.mesh)?;
    let poses = parse_poses(&args.poses)?;

    let base = ScannerSpec::default();
    let template = ScannerSpec {
        origin: Vec3::ZERO,
        azimuth_step: args.az_step.unwrap_or(base.azimuth_step),
        elevation_step: args.el_step.unwrap_or(base.elevation_step),
        elevation_min: args.el_min.unwrap_or(base.elevation_min),
        elevation_max: args.el_max.unwrap_or(base.elevation_max),
        range_sigma: args.sigma,
        max_range: args.max_range.unwrap_or(base.max_range),
        seed: args.seed,
    };
    let specs: Vec<ScannerSpec> = poses
        .iter()
        .enumerate()
        .map(|(i, &origin)| ScannerSpec {
            origin,
            seed: args.seed.wrapping_add(i as u64),
            ..template
        })
        .collect();

    let (cloud, hits) = multi_scan_with_counts(&mesh, &specs)?;

    create_dir(&args.out_dir)?;
    write_ply(args.out_dir.join("cloud.ply"), &cloud)?;

    let mut stats = String::new();
    let mut total_rays = 0usize;
    for (i, spec) in specs.iter().enumerate() {
        let rays = spec.ray_count();
        total_rays += rays;
        stats.push_str(&format!(
            "pose {i}: origin {} {} {} rays {rays} hits {}\n",
            spec.origin.x, spec.origin.y, spec.origin.z, hits[i]
        ));
    }
    stats.push_str(&format!("total_rays: {total_rays}\n"));
    stats.push_str(&format!("total_hits: {}\n", cloud.len()));
    write_text(&args.out_dir.join("scan_stats.txt"), &stats)?;

    write_run_config(
        &args.out_dir,
        "simulate",
        &[
            ("mesh", args.mesh.display().to_string()),
            ("poses", args.poses.display().to_string()),
            ("pose_count", poses.len().to_string()),
            ("sigma", template.range_sigma.to_string()),
            ("seed", args.seed.to_string()),
            ("az_step", template.azimuth_step.to_string()),
            ("el_step", template.elevation_step.to_string()),
            ("el_min", template.elevation_min.to_string()),
            ("el_max", template.elevation_max.to_string()),
            ("max_range", template.max_range.to_string()),
        ],
    )?;

    log::info!(
        "simulated {} points from {} poses ({} rays)",
        cloud.len(),
        poses.len(),
        total_rays
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// voxelize

fn cmd_voxelize(args: VoxelizeArgs) -> Result<()> {
    let store = VoxelStore::build_from_ply(&args.input, args.voxel_size, &args.store)?;
    write_run_config(
        &args.store,
        "voxelize",
        &[
            ("input", args.input.display().to_string()),
            ("voxel_size", args.voxel_size.to_string()),
        ],
    )?;
    log::info!(
        "stored {} points in {} voxels",
        store.manifest().total_points(),
        store.manifest().voxels.len()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// decimate

/// Sizes voxels for roughly 1000 points each, falling back to an eighth of
/// the diagonal for flat clouds, via one streaming pass over the input.
fn derive_voxel_size(input: &Path) -> Result<f64> {
    let reader = PlyReader::open(input)?;
    let mut bounds = Aabb::empty();
    let mut count = 0u64;
    for record in reader {
        bounds.expand(record?.position);
        count += 1;
    }
    if count == 0 {
        return Err(Error::Data(format!("{} holds no points", input.display())));
    }
    let volume = bounds.volume();
    let size = if volume > 0.0 {
        (volume * 1000.0 / count as f64).cbrt()
    } else {
        bounds.diagonal() / 8.0
    };
    if size.is_finite() && size > 0.0 {
        Ok(size)
    } else {
        // Coincident or single-point clouds: any positive size works.
        Ok(1.0)
    }
}

fn cmd_decimate(args: DecimateArgs) -> Result<()> {
    create_dir(&args.out_dir)?;
    let store_dir = args.store.clone().unwrap_or_else(|| args.out_dir.join("store"));

    let cost_kind = CostKind::parse(&args.cost)?;
    let mut options = DecimateOptions::new(args.lambda);
    options.cost = CostConfig::new(cost_kind, args.k);
    options.buffer = args.buffer;
    options.seed = args.seed;
    options.threads = args.threads;
    options.page_cache = args.page_cache;
    if args.audit {
        options.audit_path = Some(args.out_dir.join("audit.log"));
    }

    let (store, voxel_size, report) = if args.resume {
        let mut store = VoxelStore::open(&store_dir)?;
        let voxel_size = store.manifest().voxel_size;
        let report = resume(&mut store, &options)?;
        (store, voxel_size, report)
    } else {
        let voxel_size = match args.voxel_size {
            Some(size) => size,
            None => derive_voxel_size(&args.input)?,
        };
        if store_dir.join("manifest.txt").is_file() {
            // A previous run's store: rebuild from scratch.
            fs::remove_dir_all(&store_dir).map_err(|e| io_err(&store_dir, e))?;
        } else if store_dir.is_dir()
            && store_dir.read_dir().map_err(|e| io_err(&store_dir, e))?.next().is_some()
        {
            return Err(Error::Config(format!(
                "refusing to build a store in non-empty directory {}",
                store_dir.display()
            )));
        }
        let mut store = VoxelStore::build_from_ply(&args.input, voxel_size, &store_dir)?;
        let report = decimate(&mut store, &options)?;
        (store, voxel_size, report)
    };

    export_store(&store, &args.out_dir.join("output.ply"))?;
    write_text(&args.out_dir.join("report.txt"), &report_text(&report))?;
    write_run_config(
        &args.out_dir,
        "decimate",
        &[
            ("input", args.input.display().to_string()),
            ("store", store_dir.display().to_string()),
            ("lambda", args.lambda.to_string()),
            ("cost", args.cost.clone()),
            ("k", args.k.to_string()),
            ("buffer", args.buffer.to_string()),
            ("voxel_size", voxel_size.to_string()),
            ("seed", args.seed.to_string()),
            ("threads", args.threads.to_string()),
            ("page_cache", args.page_cache.to_string()),
            ("audit", args.audit.to_string()),
            ("resume", args.resume.to_string()),
        ],
    )?;

    log::info!(
        "decimated {} -> {} points in {} iterations",
        report.initial_count,
        report.final_count,
        report.iterations
    );
    Ok(())
}

fn join_u64s(values: &[u64]) -> String {
    values.iter().map(u64::to_string).collect::<Vec<_>>().join(" ")
}

fn report_text(report: &DecimationReport) -> String {
    let wall: Vec<String> = report
        .wall_time_per_iteration
        .iter()
        .map(|d| format!("{:.3}", d.as_secs_f64()))
        .collect();
    format!(
        "initial_count: {}\ntarget_count: {}\nfinal_count: {}\niterations: {}\n\
         removed_per_iteration: {}\nreach_saturated_per_iteration: {}\n\
         wall_seconds_per_iteration: {}\nseed: {}\ncompleted: {}\nresumed: {}\n",
        report.initial_count,
        report.target_count,
        report.final_count,
        report.iterations,
        join_u64s(&report.removed_per_iteration),
        join_u64s(&report.reach_saturated_per_iteration),
        wall.join(" "),
        report.seed,
        report.completed,
        report.resumed
    )
}

// ---------------------------------------------------------------------------
// baseline

fn cmd_baseline(args: BaselineArgs) -> Result<()> {
    let (common, label, extra, run): (_, &str, Vec<(&str, String)>, BaselineRun) =
        match args.method {
            BaselineMethod::Yuksel(a) => (
                a.common,
                "baseline yuksel",
                vec![
                    ("lambda", a.lambda.to_string()),
                    ("alpha", a.alpha.to_string()),
                    ("beta", a.beta.to_string()),
                    ("gamma", a.gamma.to_string()),
                ],
                Box::new(move |cloud| yuksel_eliminate(cloud, a.lambda, a.alpha, a.beta, a.gamma)),
            ),
            BaselineMethod::Dart(a) => (
                a.common,
                "baseline dart",
                vec![
                    ("lambda", a.lambda.to_string()),
                    ("seed", a.seed.to_string()),
                    ("tolerance", a.tolerance.to_string()),
                ],
                Box::new(move |cloud| dart_throwing(cloud, a.lambda, a.seed, a.tolerance)),
            ),
            BaselineMethod::Corsini(a) => (
                a.common,
                "baseline corsini",
                vec![
                    ("radius", a.radius.to_string()),
                    ("seed", a.seed.to_string()),
                ],
                Box::new(move |cloud| random_purge(cloud, a.radius, a.seed)),
            ),
        };

    let reader = PlyReader::open(&common.input)?;
    if let Some(budget) = common.budget_mb {
        require_in_core_budget(reader.vertex_count(), budget)?;
    }
    let cloud = reader.read_all()?;
    let result = run(&cloud)?;

    let surviving: &BTreeSet<_> = &result.surviving_ids;
    let survivors = cloud.filter_by_id(|id| surviving.contains(&id));

    create_dir(&common.out_dir)?;
    write_ply(common.out_dir.join("output.ply"), &survivors)?;

    let mut report = format!(
        "input_count: {}\nachieved_count: {}\n",
        cloud.len(),
        result.achieved_count
    );
    if let Some(radius) = result.parameters.radius {
        report.push_str(&format!("radius: {radius}\n"));
    }
    if let Some(beta) = result.parameters.beta {
        report.push_str(&format!("beta: {beta}\n"));
    }
    if let Some(seed) = result.parameters.seed {
        report.push_str(&format!("seed: {seed}\n"));
    }
    write_text(&common.out_dir.join("report.txt"), &report)?;

    let mut entries = vec![("input", common.input.display().to_string())];
    entries.extend(extra);
    if let Some(budget) = common.budget_mb {
        entries.push(("budget_mb", budget.to_string()));
    }
    write_run_config(&common.out_dir, label, &entries)?;

    log::info!("{label}: kept {} of {} points", result.achieved_count, cloud.len());
    Ok(())
}

type BaselineRun = Box<dyn Fn(&PointCloud) -> Result<BaselineResult>>;

// ---------------------------------------------------------------------------
// analyze

fn parse_area_list(raw: &str) -> Result<Vec<f64>> {
    raw.split(',')
        .map(|token| {
            token
                .trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad area {token:?} in --areas")))
        })
        .collect()
}

fn cmd_analyze(args: AnalyzeArgs) -> Result<()> {
    let mut seen = BTreeSet::new();
    for (name, _) in &args.clouds {
        if !seen.insert(name.clone()) {
            return Err(Error::Config(format!("duplicate cloud name {name:?}")));
        }
    }

    let mut clouds: Vec<(String, PointCloud)> = Vec::with_capacity(args.clouds.len());
    for (name, path) in &args.clouds {
        clouds.push((name.clone(), cloudthin::read_ply(path)?));
    }

    let areas = match &args.areas {
        Some(raw) => parse_area_list(raw)?,
        None => default_area_grid(&clouds[0].1)?,
    };

    create_dir(&args.out_dir)?;
    let mut profiles = Vec::with_capacity(clouds.len());
    for (name, cloud) in &clouds {
        let profile = density_profile(cloud, &areas, args.sample_size, args.seed)?;
        write_text(
            &args.out_dir.join(format!("profile_{name}.csv")),
            &profile.to_csv(),
        )?;
        log::info!(
            "{name}: slope {:.4} p/m^2, R^2 {:.4}, RMSE {:.4}",
            profile.slope,
            profile.r_squared,
            profile.rmse
        );
        profiles.push((name.clone(), profile));
    }

    if profiles.len() >= 2 {
        let ranking = compare_profiles(&profiles)?;
        write_text(&args.out_dir.join("ranking.csv"), &ranking.to_csv())?;
        write_text(&args.out_dir.join("ranking.txt"), &ranking.to_string())?;
    }

    if let Some(radius) = args.density_radius {
        for (name, cloud) in &clouds {
            let map = local_density_map(cloud, radius)?;
            let values: Vec<f32> = map.iter().map(|&v| v as f32).collect();
            write_ply_with_scalar(
                args.out_dir.join(format!("density_{name}.ply")),
                cloud,
                "density",
                &values,
            )?;
        }
    }

    let cloud_list = args
        .clouds
        .iter()
        .map(|(name, path)| format!("{name}={}", path.display()))
        .collect::<Vec<_>>()
        .join(" ");
    let area_list = areas.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
    let mut entries = vec![
        ("clouds", cloud_list),
        ("areas", area_list),
        ("sample_size", args.sample_size.to_string()),
        ("seed", args.seed.to_string()),
    ];
    if let Some(radius) = args.density_radius {
        entries.push(("density_radius", radius.to_string()));
    }
    write_run_config(&args.out_dir, "analyze", &entries)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// export

fn cmd_export(args: ExportArgs) -> Result<()> {
    let store = VoxelStore::open(&args.store)?;
    export_store(&store, &args.out)?;
    log::info!(
        "exported {} points to {}",
        store.manifest().total_points(),
        args.out.display()
    );
    Ok(())
}
