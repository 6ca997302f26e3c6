//! End-to-end tests driving the compiled `cloudthin` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use cloudthin::{
    make_cube_mesh, min_pairwise_distance, read_ply, write_ply, PointCloud, PointId, PointRecord,
    TriangleMesh, Vec3,
};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_cloudthin")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary should spawn")
}

fn code(output: &Output) -> i32 {
    output.status.code().expect("no exit code")
}

fn stderr(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).into_owned()
}

fn write_obj(path: &Path, mesh: &TriangleMesh) {
    let mut text = String::new();
    for v in mesh.vertices() {
        text.push_str(&format!("v {} {} {}\n", v.x, v.y, v.z));
    }
    for t in mesh.triangles() {
        text.push_str(&format!("f {} {} {}\n", t[0] + 1, t[1] + 1, t[2] + 1));
    }
    fs::write(path, text).unwrap();
}

fn random_cloud(n: u64, seed: u64, extent: f64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let records = (0..n)
        .map(|i| {
            PointRecord::bare(
                i,
                Vec3::new(
                    rng.gen_range(0.0..extent),
                    rng.gen_range(0.0..extent),
                    rng.gen_range(0.0..extent),
                ),
            )
        })
        .collect();
    PointCloud::from_records(records).unwrap()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn simulate_is_deterministic_and_noiseless_hits_stay_on_faces() {
    let dir = tempfile::tempdir().unwrap();
    let obj = dir.path().join("room.obj");
    write_obj(&obj, &make_cube_mesh(10.0, true));
    let poses = dir.path().join("poses.txt");
    fs::write(&poses, "# one scanner in the middle\n0 0 0\n").unwrap();

    let coarse = [
        "--az-step",
        "0.39269908169872414",
        "--el-step",
        "0.2",
        "--el-min",
        "-0.6",
        "--el-max",
        "0.6",
    ];

    let out1 = dir.path().join("run1");
    let out2 = dir.path().join("run2");
    for out in [&out1, &out2] {
        let mut args = vec![
            "simulate", "--mesh", path_str(&obj), "--poses", path_str(&poses), "--sigma", "0",
            "--seed", "1", "--out-dir", path_str(out),
        ];
        args.extend_from_slice(&coarse);
        let output = run(&args);
        assert_eq!(code(&output), 0, "stderr: {}", stderr(&output));
    }

    let bytes1 = fs::read(out1.join("cloud.ply")).unwrap();
    let bytes2 = fs::read(out2.join("cloud.ply")).unwrap();
    assert_eq!(bytes1, bytes2, "same config must produce identical bytes");
    assert!(out1.join("scan_stats.txt").is_file());
    assert!(out1.join("run_config.txt").is_file());

    // Noiseless rays from the center of a closed 10 m cube end exactly on
    // a face plane: the largest coordinate magnitude is 5.
    let cloud = read_ply(out1.join("cloud.ply")).unwrap();
    assert!(!cloud.is_empty());
    for p in cloud.points() {
        let m = p.position.x.abs().max(p.position.y.abs()).max(p.position.z.abs());
        assert!((m - 5.0).abs() < 1e-9, "hit {:?} is off the walls", p.position);
    }

    // With noise on, different seeds give different clouds.
    let noisy1 = dir.path().join("noisy1");
    let noisy2 = dir.path().join("noisy2");
    for (out, seed) in [(&noisy1, "1"), (&noisy2, "2")] {
        let mut args = vec![
            "simulate", "--mesh", path_str(&obj), "--poses", path_str(&poses), "--sigma",
            "0.0004", "--seed", seed, "--out-dir", path_str(out),
        ];
        args.extend_from_slice(&coarse);
        assert_eq!(code(&run(&args)), 0);
    }
    assert_ne!(
        fs::read(noisy1.join("cloud.ply")).unwrap(),
        fs::read(noisy2.join("cloud.ply")).unwrap()
    );
}

#[test]
fn simulate_rejects_pose_files_without_poses() {
    let dir = tempfile::tempdir().unwrap();
    let obj = dir.path().join("room.obj");
    write_obj(&obj, &make_cube_mesh(10.0, true));
    let poses = dir.path().join("poses.txt");
    fs::write(&poses, "# all comments, no poses\n").unwrap();

    let out = dir.path().join("out");
    let output = run(&[
        "simulate", "--mesh", path_str(&obj), "--poses", path_str(&poses), "--out-dir",
        path_str(&out),
    ]);
    assert_eq!(code(&output), 2);
    assert!(stderr(&output).contains("no poses"), "stderr: {}", stderr(&output));
}

#[test]
fn decimate_pipeline_hits_the_exact_count_and_reruns_byte_identically() {
    let dir = tempfile::tempdir().unwrap();
    let obj = dir.path().join("room.obj");
    write_obj(&obj, &make_cube_mesh(10.0, true));
    let poses = dir.path().join("poses.txt");
    fs::write(&poses, "2 2 2\n-2 -2 2\n2 -2 -2\n-2 2 -2\n").unwrap();

    let sim = dir.path().join("sim");
    let output = run(&[
        "simulate", "--mesh", path_str(&obj), "--poses", path_str(&poses), "--seed", "3",
        "--az-step", "0.26179938779914946", "--el-step", "0.13", "--el-min", "-0.65",
        "--el-max", "0.65", "--out-dir", path_str(&sim),
    ]);
    assert_eq!(code(&output), 0, "stderr: {}", stderr(&output));
    let cloud_path = sim.join("cloud.ply");
    let input_count = read_ply(&cloud_path).unwrap().len() as u64;
    assert!(input_count > 1000, "simulation too small: {input_count}");

    let out_a = dir.path().join("dec_a");
    let out_b = dir.path().join("dec_b");
    for out in [&out_a, &out_b] {
        let output = run(&[
            "decimate", "--input", path_str(&cloud_path), "--lambda", "0.25", "--k", "6",
            "--buffer", "8", "--audit", "--out-dir", path_str(out),
        ]);
        assert_eq!(code(&output), 0, "stderr: {}", stderr(&output));
    }

    let survivors = read_ply(out_a.join("output.ply")).unwrap();
    assert_eq!(survivors.len() as u64, input_count / 4, "floor(0.25 * n) points expected");

    let report = fs::read_to_string(out_a.join("report.txt")).unwrap();
    assert!(report.contains(&format!("final_count: {}", input_count / 4)));
    assert!(report.contains(&format!("initial_count: {input_count}")));

    // The audit log holds one line per removal: iter voxel id cost w_up.
    let audit = fs::read_to_string(out_a.join("audit.log")).unwrap();
    let removals = input_count - input_count / 4;
    assert_eq!(audit.lines().count() as u64, removals);

    assert_eq!(
        fs::read(out_a.join("output.ply")).unwrap(),
        fs::read(out_b.join("output.ply")).unwrap(),
        "same config must reproduce the output byte for byte"
    );

    // Range guard on lambda.
    let bad = run(&[
        "decimate", "--input", path_str(&cloud_path), "--lambda", "1.0", "--out-dir",
        path_str(&dir.path().join("dec_bad")),
    ]);
    assert_eq!(code(&bad), 1);
}

#[test]
fn baselines_honor_count_distance_and_budget_contracts() {
    let dir = tempfile::tempdir().unwrap();
    let cloud = random_cloud(600, 11, 4.0);
    let input = dir.path().join("cloud.ply");
    write_ply(&input, &cloud).unwrap();

    // Sample elimination with the clamp off: exact count.
    let yuksel_out = dir.path().join("yuksel");
    let output = run(&[
        "baseline", "yuksel", "--input", path_str(&input), "--lambda", "0.1", "--beta", "0",
        "--out-dir", path_str(&yuksel_out),
    ]);
    assert_eq!(code(&output), 0, "stderr: {}", stderr(&output));
    assert_eq!(read_ply(yuksel_out.join("output.ply")).unwrap().len(), 60);

    // Dart throwing: exact count and spacing at the achieved radius.
    let dart_out = dir.path().join("dart");
    let output = run(&[
        "baseline", "dart", "--input", path_str(&input), "--lambda", "0.1", "--seed", "7",
        "--out-dir", path_str(&dart_out),
    ]);
    assert_eq!(code(&output), 0, "stderr: {}", stderr(&output));
    let survivors = read_ply(dart_out.join("output.ply")).unwrap();
    assert_eq!(survivors.len(), 60);
    let report = fs::read_to_string(dart_out.join("report.txt")).unwrap();
    let radius: f64 = report
        .lines()
        .find_map(|l| l.strip_prefix("radius: "))
        .expect("dart report echoes its radius")
        .parse()
        .unwrap();
    assert!(radius > 0.0);
    assert!(min_pairwise_distance(&survivors).unwrap() >= radius);

    // Random purge: spacing at the requested radius.
    let purge_out = dir.path().join("purge");
    let output = run(&[
        "baseline", "corsini", "--input", path_str(&input), "--radius", "0.5", "--out-dir",
        path_str(&purge_out),
    ]);
    assert_eq!(code(&output), 0, "stderr: {}", stderr(&output));
    let kept = read_ply(purge_out.join("output.ply")).unwrap();
    assert!(!kept.is_empty());
    assert!(min_pairwise_distance(&kept).unwrap() >= 0.5);

    // The in-core budget refuses oversized inputs with a clear message.
    let blocked = run(&[
        "baseline", "dart", "--input", path_str(&input), "--lambda", "0.1", "--budget-mb", "0",
        "--out-dir", path_str(&dir.path().join("blocked")),
    ]);
    assert_eq!(code(&blocked), 1);
    assert!(stderr(&blocked).to_lowercase().contains("budget"));

    // Unknown baseline names are a usage error.
    let unknown = run(&[
        "baseline", "mystery", "--input", path_str(&input), "--out-dir",
        path_str(&dir.path().join("x")),
    ]);
    assert_eq!(code(&unknown), 1);
}

#[test]
fn analyze_profiles_rank_and_respect_area_guards() {
    let dir = tempfile::tempdir().unwrap();

    // An 80x80 unit lattice: density 1 point/m^2. Over areas {10,20,30}
    // the interior lattice counts are (8,20,28), whose least-squares slope
    // is exactly 1; boundary points pull the whole-cloud slope to ~0.96.
    let lattice_records: Vec<PointRecord> = (0..6400u64)
        .map(|i| PointRecord::bare(i, Vec3::new((i / 80) as f64, (i % 80) as f64, 0.0)))
        .collect();
    let lattice = PointCloud::from_records(lattice_records).unwrap();
    let lattice_path = dir.path().join("lattice.ply");
    write_ply(&lattice_path, &lattice).unwrap();

    // The same extent filled with clumpy duplicates: far less even.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let clumpy_records: Vec<PointRecord> = (0..3600u64)
        .map(|i| {
            let cx = rng.gen_range(0.0..60.0_f64).floor();
            let cy = rng.gen_range(0.0..12.0_f64).floor() * 5.0;
            PointRecord::bare(
                i,
                Vec3::new(
                    cx + rng.gen_range(0.0..0.05),
                    cy + rng.gen_range(0.0..0.05),
                    0.0,
                ),
            )
        })
        .collect();
    let clumpy = PointCloud::from_records(clumpy_records).unwrap();
    let clumpy_path = dir.path().join("clumpy.ply");
    write_ply(&clumpy_path, &clumpy).unwrap();

    let out = dir.path().join("an");
    let lattice_arg = format!("lattice={}", lattice_path.display());
    let clumpy_arg = format!("clumpy={}", clumpy_path.display());
    let output = run(&[
        "analyze", "--cloud", &lattice_arg, "--cloud", &clumpy_arg, "--areas", "10,20,30",
        "--sample-size", "600", "--seed", "2", "--density-radius", "1.05", "--out-dir",
        path_str(&out),
    ]);
    assert_eq!(code(&output), 0, "stderr: {}", stderr(&output));

    let profile = fs::read_to_string(out.join("profile_lattice.csv")).unwrap();
    let lines: Vec<&str> = profile.lines().collect();
    assert_eq!(lines[0], "area,mean,p01,p10,p25,p50,p75,p90,p99");
    let slope: f64 = lines
        .iter()
        .find_map(|l| l.strip_prefix("slope,"))
        .unwrap()
        .parse()
        .unwrap();
    assert!((slope - 1.0).abs() < 0.1, "lattice slope {slope} should sit near 1 p/m^2");

    // The even lattice must outrank the clumpy cloud.
    let ranking = fs::read_to_string(out.join("ranking.csv")).unwrap();
    let first = ranking.lines().nth(1).unwrap();
    assert!(first.starts_with("1,lattice,"), "ranking: {ranking}");
    assert!(out.join("ranking.txt").is_file());
    assert!(out.join("density_lattice.ply").is_file());
    assert!(out.join("density_clumpy.ply").is_file());

    // A single area cannot support the regression.
    let single = run(&[
        "analyze", "--cloud", &lattice_arg, "--areas", "30", "--out-dir",
        path_str(&dir.path().join("an_single")),
    ]);
    assert_eq!(code(&single), 1);

    // Duplicate names would overwrite each other's artifacts.
    let dup = run(&[
        "analyze", "--cloud", &lattice_arg, "--cloud", &lattice_arg, "--out-dir",
        path_str(&dir.path().join("an_dup")),
    ]);
    assert_eq!(code(&dup), 1);
}

#[test]
fn voxelize_then_export_round_trips_the_cloud() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let records: Vec<PointRecord> = (0..500u64)
        .map(|i| PointRecord {
            id: PointId(i),
            position: Vec3::new(
                rng.gen_range(0.0..3.0),
                rng.gen_range(0.0..3.0),
                rng.gen_range(0.0..3.0),
            ),
            normal: Some([1.0, 0.0, 0.0]),
            color: Some([i as u8, 7, 9]),
        })
        .collect();
    let cloud = PointCloud::from_records(records).unwrap();
    let input = dir.path().join("cloud.ply");
    write_ply(&input, &cloud).unwrap();

    let store = dir.path().join("store");
    let output = run(&[
        "voxelize", "--input", path_str(&input), "--voxel-size", "0.5", "--store",
        path_str(&store),
    ]);
    assert_eq!(code(&output), 0, "stderr: {}", stderr(&output));
    assert!(store.join("manifest.txt").is_file());
    assert!(store.join("run_config.txt").is_file());

    let back_path = dir.path().join("back.ply");
    let output = run(&["export", "--store", path_str(&store), "--out", path_str(&back_path)]);
    assert_eq!(code(&output), 0, "stderr: {}", stderr(&output));

    // Ids are not a PLY concept, so compare the attribute multisets.
    let key = |p: &PointRecord| {
        (
            p.position.x.to_bits(),
            p.position.y.to_bits(),
            p.position.z.to_bits(),
            p.normal.map(|n| n.map(f32::to_bits)),
            p.color,
        )
    };
    let mut expect: Vec<_> = cloud.points().iter().map(key).collect();
    let mut got: Vec<_> = read_ply(&back_path).unwrap().points().iter().map(key).collect();
    expect.sort_unstable();
    got.sort_unstable();
    assert_eq!(expect, got);
}

#[test]
fn exit_codes_separate_usage_data_and_success() {
    // Usage errors: no command, unknown command, missing required flag,
    // out-of-range value.
    assert_eq!(code(&run(&[])), 1);
    assert_eq!(code(&run(&["transmogrify"])), 1);
    assert_eq!(code(&run(&["decimate", "--lambda", "0.5"])), 1);

    // Help is not an error.
    let help = run(&["--help"]);
    assert_eq!(code(&help), 0);
    assert!(String::from_utf8_lossy(&help.stdout).contains("cloudthin"));

    // Data errors: files that do not exist.
    let dir = tempfile::tempdir().unwrap();
    let ghost = dir.path().join("ghost.ply");
    let out = dir.path().join("out");
    assert_eq!(
        code(&run(&[
            "decimate", "--input", path_str(&ghost), "--lambda", "0.5", "--out-dir",
            path_str(&out),
        ])),
        2
    );
    assert_eq!(
        code(&run(&["export", "--store", path_str(&dir.path().join("nostore")), "--out",
            path_str(&dir.path().join("x.ply"))])),
        2
    );
}
