//! End-to-end checks of the command-line binary.

use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_aerialformer"))
}

fn run_ok(cmd: &mut Command) -> String {
    let out = cmd.output().expect("binary ran");
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn count_pngs(dir: &Path) -> usize {
    std::fs::read_dir(dir)
        .unwrap()
        .filter(|e| {
            e.as_ref()
                .unwrap()
                .file_name()
                .to_string_lossy()
                .ends_with(".png")
        })
        .count()
}

#[test]
fn make_synthetic_writes_a_complete_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    run_ok(bin().args([
        "make-synthetic",
        "--n", "3",
        "--size", "32",
        "--classes", "4",
        "--seed", "7",
        "--out", data.to_str().unwrap(),
    ]));
    assert!(data.join("manifest.tsv").is_file());
    assert!(data.join("palette.json").is_file());
    assert_eq!(count_pngs(&data.join("images")), 3);
    assert_eq!(count_pngs(&data.join("masks")), 3);
}

#[test]
fn tile_cuts_the_expected_grid() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    run_ok(bin().args([
        "make-synthetic",
        "--n", "1",
        "--size", "128",
        "--classes", "3",
        "--out", data.to_str().unwrap(),
    ]));
    let image = std::fs::read_dir(data.join("images"))
        .unwrap()
        .next()
        .unwrap()
        .unwrap()
        .path();
    let tiles = dir.path().join("tiles");
    let out = run_ok(bin().args([
        "tile",
        "--image", image.to_str().unwrap(),
        "--tile", "64",
        "--step", "32",
        "--out-dir", tiles.to_str().unwrap(),
    ]));
    // 128 with 64/32 → 3 origins per axis
    assert!(out.contains("9 tiles"), "{out}");
    assert_eq!(count_pngs(&tiles), 9);
}

#[test]
fn eval_of_identical_dirs_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    run_ok(bin().args([
        "make-synthetic",
        "--n", "2",
        "--size", "32",
        "--classes", "4",
        "--out", data.to_str().unwrap(),
    ]));
    let masks = data.join("masks");
    let report = dir.path().join("report.json");
    let out = run_ok(bin().args([
        "eval",
        "--pred-dir", masks.to_str().unwrap(),
        "--gt-dir", masks.to_str().unwrap(),
        "--classes", "4",
        "--out", report.to_str().unwrap(),
    ]));
    assert!(out.contains("mIoU"), "{out}");
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["miou"], 1.0);
    assert_eq!(json["mf1"], 1.0);
}

#[test]
fn eval_without_predictions_fails() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    let out = bin()
        .args([
            "eval",
            "--pred-dir", empty.to_str().unwrap(),
            "--gt-dir", empty.to_str().unwrap(),
            "--classes", "2",
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn params_reports_itemized_counts_and_emits_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("toy.json");
    let out = run_ok(bin().args([
        "params",
        "--config", "toy",
        "--classes", "4",
        "--emit", cfg.to_str().unwrap(),
    ]));
    for group in ["stem", "encoder", "decoder", "total"] {
        assert!(out.contains(group), "missing {group} in:\n{out}");
    }
    // the emitted config round-trips through the same subcommand
    let again = run_ok(bin().args(["params", "--config", cfg.to_str().unwrap(), "--classes", "4"]));
    let total = |s: &str| s.lines().find(|l| l.contains("total")).unwrap().to_string();
    assert_eq!(total(&out), total(&again));
}

#[test]
fn train_then_infer_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    run_ok(bin().args([
        "make-synthetic",
        "--n", "2",
        "--size", "64",
        "--classes", "3",
        "--out", data.to_str().unwrap(),
    ]));
    let run_dir = dir.path().join("run");
    run_ok(bin().args([
        "train",
        "--config", "toy",
        "--data", data.join("manifest.tsv").to_str().unwrap(),
        "--out", run_dir.to_str().unwrap(),
        "--classes", "3",
        "--iterations", "2",
        "--batch-size", "2",
    ]));
    let checkpoint = run_dir.join("checkpoint_final.bin");
    assert!(checkpoint.is_file());
    let trace = std::fs::read_to_string(run_dir.join("loss_trace.jsonl")).unwrap();
    assert_eq!(trace.lines().count(), 2);
    for line in trace.lines() {
        let rec: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(rec["loss"].as_f64().unwrap().is_finite());
    }

    let image = std::fs::read_dir(data.join("images"))
        .unwrap()
        .next()
        .unwrap()
        .unwrap()
        .path();
    let mask_out = dir.path().join("pred.png");
    run_ok(bin().args([
        "infer",
        "--config", "toy",
        "--checkpoint", checkpoint.to_str().unwrap(),
        "--image", image.to_str().unwrap(),
        "--tile", "64",
        "--step", "64",
        "--out", mask_out.to_str().unwrap(),
        "--classes", "3",
    ]));
    assert!(mask_out.is_file());
    assert!(dir.path().join("pred.overlay.png").is_file());
    let (mask, h, w) = aerialformer::data::load_mask(&mask_out, None).unwrap();
    assert_eq!((h, w), (64, 64));
    assert!(mask.iter().all(|&m| m < 3));
}
