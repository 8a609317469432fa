//! End-to-end exercises of the `sen4x` binary: the synth -> prepare ->
//! train-sr -> infer -> eval chain on tiny data, exit-code contracts, and
//! byte-identical reruns.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sen4x"))
}

fn run_ok(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("spawn sen4x");
    assert!(
        out.status.success(),
        "command {:?} failed\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn exit_code(args: &[&str]) -> i32 {
    bin().args(args).output().expect("spawn sen4x").status.code().unwrap_or(-1)
}

fn tmp_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("sen4x_cli_{name}_{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// Shared tiny-model flags: 4 views, 16-dim embedding, 16x16 LR patches.
const TINY: &[&str] = &[
    "--set", "n_views=4",
    "--set", "embed_dim=16",
    "--set", "n_rstb=1",
    "--set", "heads=2",
    "--set", "window=4",
    "--set", "rstb_depth=1",
];

#[test]
fn full_pipeline_on_tiny_data() {
    let root = tmp_dir("pipeline");
    let raw = root.join("rawdata");
    let prepared = root.join("prepared");
    let sr_out = root.join("sr");
    let ts = "2026-02-03T04:05:06Z";

    // synth: 4 tiles of 64x64 HR (16x16 LR), 6 candidate revisits each
    run_ok(&[
        "synth",
        "--out", raw.to_str().unwrap(),
        "--tiles", "4",
        "--hr-size", "64",
        "--candidates", "6",
        "--seed", "11",
        "--timestamp", ts,
    ]);
    assert!(raw.join("raw/tile_00000/hr.s4xr").exists());
    assert!(raw.join("raw/tile_00003/candidates.json").exists());
    assert!(raw.join("run_manifest.json").exists());

    // prepare: select 4 of 6, one 16x16 patch per tile, one geo block per tile
    run_ok(&[
        "prepare",
        "--raw", raw.to_str().unwrap(),
        "--out", prepared.to_str().unwrap(),
        "--k-revisits", "4",
        "--patch", "16",
        "--stride", "12",
        "--set", "block_size=1",
        "--seed", "11",
        "--timestamp", ts,
    ]);
    let manifest = read_json(&prepared.join("manifest.json"));
    let tiles = manifest["tiles"].as_array().unwrap();
    assert_eq!(tiles.len(), 4);
    let splits: Vec<&str> = tiles.iter().map(|t| t["split"].as_str().unwrap()).collect();
    assert!(splits.contains(&"train") && splits.contains(&"val") && splits.contains(&"test"));

    // byte-identical rerun with the recorded settings
    let prepared2 = root.join("prepared2");
    run_ok(&[
        "prepare",
        "--raw", raw.to_str().unwrap(),
        "--out", prepared2.to_str().unwrap(),
        "--k-revisits", "4",
        "--patch", "16",
        "--stride", "12",
        "--set", "block_size=1",
        "--seed", "11",
        "--timestamp", ts,
    ]);
    assert_eq!(
        std::fs::read(prepared.join("manifest.json")).unwrap(),
        std::fs::read(prepared2.join("manifest.json")).unwrap()
    );
    let some_patch = tiles[0]["files"]["lr"].as_str().unwrap();
    assert_eq!(
        std::fs::read(prepared.join(some_patch)).unwrap(),
        std::fs::read(prepared2.join(some_patch)).unwrap()
    );

    // train-sr: a few tiny steps
    let mut args = vec![
        "train-sr",
        "--data", prepared.to_str().unwrap(),
        "--out", sr_out.to_str().unwrap(),
        "--epochs", "3",
        "--batches-per-epoch", "2",
        "--batch-size", "2",
        "--lr0", "1e-3",
        "--seed", "11",
        "--timestamp", ts,
    ];
    args.extend_from_slice(TINY);
    run_ok(&args);
    assert!(sr_out.join("best.ckpt").exists());
    assert!(sr_out.join("last.ckpt").exists());
    let summary = read_json(&sr_out.join("summary.json"));
    assert_eq!(summary["steps"].as_u64(), Some(6));

    // infer on one prepared patch stack
    let lr_path = prepared.join(some_patch);
    let infer_out = root.join("infer");
    run_ok(&[
        "infer",
        "--checkpoint", sr_out.join("best.ckpt").to_str().unwrap(),
        "--stack", lr_path.to_str().unwrap(),
        "--out", infer_out.to_str().unwrap(),
        "--png",
        "--timestamp", ts,
    ]);
    assert!(infer_out.join("sr.s4xr").exists());
    assert!(infer_out.join("sr.png").exists());

    // eval-image: prediction against the matching HR patch
    let hr_path = prepared.join(tiles[0]["files"]["hr"].as_str().unwrap());
    let out = run_ok(&[
        "eval-image",
        "--pred", infer_out.join("sr.s4xr").to_str().unwrap(),
        "--ref", hr_path.to_str().unwrap(),
    ]);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(report["psnr_db"].as_f64().unwrap() > 5.0);
    assert!(report["ssim"].as_f64().unwrap() > -1.0);

    // train-lc on ground-truth imagery, then score the saved predictions
    let lc_out = root.join("lc");
    run_ok(&[
        "train-lc",
        "--data", prepared.to_str().unwrap(),
        "--source", "hr",
        "--out", lc_out.to_str().unwrap(),
        "--set", "lc_widths=8,16,16,32",
        "--set", "lc_fpn_dim=16",
        "--set", "lc_max_epochs=3",
        "--set", "lc_batch_size=2",
        "--seed", "11",
        "--timestamp", ts,
    ]);
    let scores = read_json(&lc_out.join("scores.json"));
    assert!(scores["acc"].as_f64().unwrap() >= 0.0);
    assert_eq!(scores["recall"].as_array().unwrap().len(), 7);

    let out = run_ok(&[
        "eval-lc",
        "--data", prepared.to_str().unwrap(),
        "--pred", lc_out.to_str().unwrap(),
    ]);
    let rescored: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(rescored["acc"], scores["acc"]);
}

#[test]
fn eval_image_identical_inputs_reports_inf() {
    let root = tmp_dir("evalinf");
    let raw = root.join("raw");
    run_ok(&[
        "synth",
        "--out", raw.to_str().unwrap(),
        "--tiles", "1",
        "--hr-size", "32",
        "--candidates", "1",
        "--seed", "3",
        "--timestamp", "2026-01-01T00:00:00Z",
    ]);
    let hr = raw.join("raw/tile_00000/hr.s4xr");
    let out = run_ok(&["eval-image", "--pred", hr.to_str().unwrap(), "--ref", hr.to_str().unwrap()]);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["psnr_db"], "inf");
}

#[test]
fn config_errors_exit_2_without_writing() {
    let root = tmp_dir("exit2");
    let out = root.join("never");
    // missing required --out
    assert_eq!(exit_code(&["synth", "--tiles", "2"]), 2);
    // unknown flag
    assert_eq!(exit_code(&["synth", "--out", out.to_str().unwrap(), "--bogus"]), 2);
    // unknown config key via --set
    assert_eq!(
        exit_code(&["synth", "--out", out.to_str().unwrap(), "--set", "embde_dim=1"]),
        2
    );
    assert!(!out.exists(), "failed run must not create outputs");

    // config file with unknown key names the key
    let cfg = root.join("bad.cfg");
    std::fs::write(&cfg, "embde_dim = 32\n").unwrap();
    let output = bin()
        .args(["params", "--config", cfg.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&output.stderr).contains("embde_dim"));
}

#[test]
fn infer_mismatched_checkpoint_exits_3() {
    let root = tmp_dir("exit3");
    let raw = root.join("raw");
    let prepared = root.join("prepared");
    let sr_out = root.join("sr");
    let ts = "2026-01-01T00:00:00Z";
    run_ok(&[
        "synth", "--out", raw.to_str().unwrap(),
        "--tiles", "3", "--hr-size", "64", "--candidates", "5", "--seed", "7",
        "--timestamp", ts,
    ]);
    run_ok(&[
        "prepare", "--raw", raw.to_str().unwrap(), "--out", prepared.to_str().unwrap(),
        "--k-revisits", "4", "--patch", "16", "--stride", "12",
        "--set", "block_size=1", "--seed", "7", "--timestamp", ts,
    ]);
    let mut args = vec![
        "train-sr",
        "--data", prepared.to_str().unwrap(),
        "--out", sr_out.to_str().unwrap(),
        "--epochs", "1", "--batches-per-epoch", "2", "--batch-size", "1",
        "--seed", "7", "--timestamp", ts,
    ];
    args.extend_from_slice(TINY);
    run_ok(&args);

    // a stack whose dims don't match the checkpoint config
    let bad_stack = root.join("bad.s4xr");
    let t = sen4x_core::tensor::Tensor::<f32>::zeros(&[2, 4, 16, 16]); // 2 views < 4
    sen4x_core::raster::write_f32(&t, &bad_stack).unwrap();
    let code = exit_code(&[
        "infer",
        "--checkpoint", sr_out.join("best.ckpt").to_str().unwrap(),
        "--stack", bad_stack.to_str().unwrap(),
        "--out", root.join("x").to_str().unwrap(),
    ]);
    assert_eq!(code, 3);

    // missing file is a data error too
    let code = exit_code(&[
        "infer",
        "--checkpoint", sr_out.join("best.ckpt").to_str().unwrap(),
        "--stack", root.join("nope.s4xr").to_str().unwrap(),
        "--out", root.join("y").to_str().unwrap(),
    ]);
    assert_eq!(code, 3);
}

#[test]
fn params_and_grad_check_run() {
    let out = run_ok(&["params", "--embed-dim", "16", "--n-rstb", "1", "--heads", "2", "--window", "4", "--rstb-depth", "1", "--n-views", "4"]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let total = v["total"].as_u64().unwrap();
    assert_eq!(
        total,
        v["backbone"].as_u64().unwrap() + v["fusion"].as_u64().unwrap() + v["heads"].as_u64().unwrap()
    );

    let out = run_ok(&["grad-check", "--samples", "4", "--eps", "1e-3"]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v["max_rel_err"].as_f64().unwrap() < 1e-2);

    // eps = 0 is a config error
    assert_eq!(exit_code(&["grad-check", "--samples", "2", "--eps", "0"]), 2);
}
