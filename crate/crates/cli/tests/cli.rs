//! Exit codes, usage-error hygiene, and per-subcommand behavior through
//! the real binary.

use std::path::Path;
use std::process::{Command, Output};

fn evdeblur(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_evdeblur"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

#[test]
fn help_exits_zero() {
    let out = evdeblur(&["--help"]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("synth"));
}

#[test]
fn unknown_flag_is_usage_error() {
    let out = evdeblur(&["synth", "--scenes", "1", "--out", "/tmp/x", "--bogus"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn scer_odd_bins_is_usage_error_without_partial_output() {
    let dir = tempfile::tempdir().unwrap();
    let events = dir.path().join("e.csv");
    std::fs::write(&events, "# sensor 4x4 window 0 100\n10,1,1,1\n").unwrap();
    let out_path = dir.path().join("r.kunt");
    let out = evdeblur(&[
        "voxelize",
        "--events",
        events.to_str().unwrap(),
        "--bins",
        "5",
        "--repr",
        "scer",
        "--out",
        out_path.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 1, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert!(!out_path.exists(), "usage error must not write output files");
}

#[test]
fn voxelize_missing_file_is_runtime_error() {
    let out = evdeblur(&[
        "voxelize",
        "--events",
        "/nonexistent/e.csv",
        "--bins",
        "6",
        "--out",
        "/tmp/should_not_exist.kunt",
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn voxelize_grid_mass_matches_polarity_sum() {
    let dir = tempfile::tempdir().unwrap();
    let events = dir.path().join("e.csv");
    std::fs::write(
        &events,
        "# sensor 4x4 window 0 100\n10,1,1,1\n20,2,2,1\n30,3,3,-1\n90,0,0,1\n",
    )
    .unwrap();
    let out_path = dir.path().join("v.kunt");
    let out = evdeblur(&[
        "voxelize",
        "--events",
        events.to_str().unwrap(),
        "--bins",
        "6",
        "--out",
        out_path.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let map =
        evdeblur_core::autodiff::container::load_tensors(&std::fs::read(&out_path).unwrap())
            .unwrap();
    let grid = &map["voxel"];
    assert_eq!(grid.shape(), &[6, 4, 4]);
    let sum: f64 = grid.data().iter().sum();
    assert!((sum - 2.0).abs() < 1e-5, "mass {sum} should be 2 (f32 file)");
}

#[test]
fn voxelize_split_writes_two_halves() {
    let dir = tempfile::tempdir().unwrap();
    let events = dir.path().join("e.csv");
    std::fs::write(&events, "# sensor 2x2 window 0 900\n0,0,0,1\n").unwrap();
    let out_path = dir.path().join("s.kunt");
    let out = evdeblur(&[
        "voxelize",
        "--events",
        events.to_str().unwrap(),
        "--bins",
        "10",
        "--repr",
        "split",
        "--out",
        out_path.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0);
    let map =
        evdeblur_core::autodiff::container::load_tensors(&std::fs::read(&out_path).unwrap())
            .unwrap();
    assert_eq!(map["split.forward"].shape(), &[5, 2, 2]);
    assert_eq!(map["split.backward"].shape(), &[5, 2, 2]);
}

#[test]
fn info_census_matches_library() {
    let out = evdeblur(&["info"]);
    assert_eq!(code(&out), 0);
    let stdout = String::from_utf8_lossy(&out.stdout);
    let reported: usize = stdout
        .lines()
        .find_map(|l| l.strip_prefix("parameters: "))
        .expect("census line")
        .parse()
        .unwrap();
    let cfg = evdeblur_core::kunet::ModelConfig::default();
    let params = evdeblur_core::kunet::KUnetParams::init(&cfg, 0).unwrap();
    assert_eq!(reported, params.count_parameters());
    assert!(reported > 0);
}

#[test]
fn info_rejects_bad_config_as_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.cfg");
    std::fs::write(&cfg, "mystery_key = 5\n").unwrap();
    let out = evdeblur(&["info", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("mystery_key"));
}

#[test]
fn eval_missing_counterpart_is_runtime_error() {
    let pred = tempfile::tempdir().unwrap();
    let gt = tempfile::tempdir().unwrap();
    let img = evdeblur_core::events::ImagePlane::zeros(12, 12, 3);
    std::fs::write(
        pred.path().join("a.ppm"),
        evdeblur_core::events::save_image_pnm(&img),
    )
    .unwrap();
    let out = evdeblur(&[
        "eval",
        "--pred",
        pred.path().to_str().unwrap(),
        "--gt",
        gt.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn synth_zero_scenes_writes_manifest_only() {
    let dir = tempfile::tempdir().unwrap();
    let out = evdeblur(&[
        "synth",
        "--scenes",
        "0",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0);
    let entries: Vec<_> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert_eq!(entries, vec!["manifest.csv"]);
}

#[test]
fn voxelize_empty_stream_writes_zero_grid() {
    let dir = tempfile::tempdir().unwrap();
    let events = dir.path().join("e.csv");
    std::fs::write(&events, "# sensor 3x2 window 0 100\n").unwrap();
    let out_path = dir.path().join("z.kunt");
    let out = evdeblur(&[
        "voxelize",
        "--events",
        events.to_str().unwrap(),
        "--bins",
        "6",
        "--out",
        out_path.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0);
    let map =
        evdeblur_core::autodiff::container::load_tensors(&std::fs::read(&out_path).unwrap())
            .unwrap();
    let grid = &map["voxel"];
    assert_eq!(grid.shape(), &[6, 2, 3]);
    assert!(grid.data().iter().all(|&v| v == 0.0));
}

#[test]
fn synth_is_deterministic_through_the_cli(){
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for dir in [&a, &b] {
        let out = evdeblur(&[
            "synth",
            "--scenes",
            "1",
            "--out",
            dir.path().to_str().unwrap(),
            "--seed",
            "3",
        ]);
        assert_eq!(code(&out), 0);
    }
    for name in ["scene_000.blur.ppm", "scene_000.sharp.ppm", "scene_000.events.csv", "manifest.csv"] {
        let x = std::fs::read(a.path().join(name)).unwrap();
        let y = std::fs::read(b.path().join(name)).unwrap();
        assert_eq!(x, y, "{name} differs across same-seed runs");
    }
}

#[test]
fn train_one_iteration_zero_lr_keeps_initialization() {
    let data = tempfile::tempdir().unwrap();
    assert_eq!(
        code(&evdeblur(&[
            "synth",
            "--scenes",
            "1",
            "--out",
            data.path().to_str().unwrap(),
            "--seed",
            "1"
        ])),
        0
    );
    let run = tempfile::tempdir().unwrap();
    let out = evdeblur(&[
        "train",
        "--data",
        data.path().to_str().unwrap(),
        "--out",
        run.path().to_str().unwrap(),
        "--iters",
        "1",
        "--lr-max",
        "0",
        "--base-channels",
        "2",
        "--token-dim",
        "8",
        "--heads",
        "2",
        "--levels",
        "2",
        "--kan-grid",
        "4",
        "--batch-size",
        "2",
        "--patch",
        "16",
        "--seed",
        "4",
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let ck = std::fs::read(run.path().join("checkpoint.kunt")).unwrap();
    let (loaded, cfg) = evdeblur_core::kunet::KUnetParams::load_checkpoint(&ck).unwrap();
    let init = evdeblur_core::kunet::KUnetParams::init(&cfg, 4).unwrap();
    let init_bytes = init.save_checkpoint(&cfg);
    let (init_f32, _) = evdeblur_core::kunet::KUnetParams::load_checkpoint(&init_bytes).unwrap();
    assert_eq!(loaded, init_f32, "zero-lr checkpoint must equal initialization");
    assert!(Path::new(&run.path().join("metrics.csv")).exists());
}
