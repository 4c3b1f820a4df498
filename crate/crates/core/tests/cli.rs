//! End-to-end checks of the `storyboard` binary and report files.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use storyboard_core::harness::{load_report, run_storyboard, RunConfig};

fn storyboard(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_storyboard"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

/// Writes a mock plan and a small config next to it.
fn setup(dir: &Path, grid: (usize, usize), extra: &str) {
    let out = storyboard(
        &[
            "plan",
            "--prompt",
            "A fox and an owl explore the forest",
            "--frames",
            "2",
            "--out",
            "plan.json",
        ],
        dir,
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let config = format!(
        r#"{{"plan_path": "plan.json", "grid": {{"h": {}, "w": {}}}, "steps": 4, "out_dir": "out"{extra}}}"#,
        grid.0, grid.1
    );
    fs::write(dir.join("c.json"), config).unwrap();
}

#[test]
fn run_writes_report_and_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path(), (4, 4), "");
    let out = storyboard(&["run", "--config", "c.json"], dir.path());
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    for file in ["report.json", "leakage.csv", "timing.json"] {
        assert!(
            dir.path().join("out").join(file).is_file(),
            "{file} missing"
        );
    }
    let csv = fs::read_to_string(dir.path().join("out/leakage.csv")).unwrap();
    assert!(csv.starts_with("step,subject_id,leakage\n"));
}

#[test]
fn missing_config_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = storyboard(&["run", "--config", "missing.json"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.json"));
}

#[test]
fn unknown_flag_and_invalid_config_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = storyboard(&["run", "--config", "c.json", "--frobnicate"], dir.path());
    assert_eq!(out.status.code(), Some(1));

    fs::write(
        dir.path().join("bad.json"),
        r#"{"steps": 4, "colour": "blue"}"#,
    )
    .unwrap();
    let out = storyboard(&["run", "--config", "bad.json"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn help_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = storyboard(&["--help"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("inspect-mask"));
}

#[test]
fn dumped_masks_are_bn_square_pgm() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path(), (4, 4), "");
    let out = storyboard(&["run", "--config", "c.json", "--dump-masks"], dir.path());
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let masks: Vec<_> = fs::read_dir(dir.path().join("out/masks"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    // 4 steps, 2 layers
    assert_eq!(masks.len(), 8);
    let bytes = fs::read(dir.path().join("out/masks/mask_s000_l0.pgm")).unwrap();
    let header = b"P5\n32 32\n255\n";
    assert!(bytes.starts_with(header));
    assert_eq!(bytes.len(), header.len() + 32 * 32);
}

#[test]
fn inspect_mask_writes_cross_and_intra_files() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path(), (4, 4), "");
    let out = storyboard(
        &[
            "inspect-mask",
            "--plan",
            "plan.json",
            "--height",
            "4",
            "--width",
            "4",
            "--dropout",
            "--out",
            "masks",
        ],
        dir.path(),
    );
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    for file in ["cross.pgm", "cross.csv", "intra_f1.pgm", "intra_f2.csv"] {
        assert!(
            dir.path().join("masks").join(file).is_file(),
            "{file} missing"
        );
    }
    let csv = fs::read_to_string(dir.path().join("masks/cross.csv")).unwrap();
    assert_eq!(csv.lines().count(), 32);
}

#[test]
fn compare_prints_a_paired_table() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path(), (4, 4), "");
    let out = storyboard(
        &[
            "compare", "--config", "c.json", "--ablate", "bounding", "--seeds", "3",
        ],
        dir.path(),
    );
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("mean"));
    assert!(text.contains("sign-test p"));
}

#[test]
fn emitted_report_loads_back() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path(), (4, 4), "");
    let mut config = RunConfig::load(&dir.path().join("c.json")).unwrap();
    config.out_dir = dir.path().join("out");
    let report = run_storyboard(&config).unwrap();
    let back = load_report(&dir.path().join("out/report.json")).unwrap();
    assert_eq!(back, report);
    assert_eq!(back.to_json(), report.to_json());
}
