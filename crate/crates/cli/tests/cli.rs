use std::path::Path;
use std::process::{Command, Output};

use crackalign::{save_image, GrayImage};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_crackalign"))
}

fn run(args: &[&str], cwd: &Path) -> Output {
    bin()
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn synth_pair(dir: &Path, seed: &str, cell: &str) {
    let out = run(
        &[
            "synth", "ref.png", "--seed", seed, "--cell", cell, "--target", "tgt.png",
        ],
        dir,
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn align_writes_consistent_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    synth_pair(dir.path(), "2", "tilt-mild");
    let out = run(
        &["align", "ref.png", "tgt.png", "--out", "res", "--seed", "7"],
        dir.path(),
    );
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    let res = dir.path().join("res");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(res.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["schema"], 1);
    assert_eq!(report["status"], "aligned");
    assert_eq!(report["seed"], 7);
    assert_eq!(report["homography"].as_array().unwrap().len(), 9);
    let n = |k: &str| report[k].as_u64().unwrap();
    assert!(n("inliers") <= n("matches_before_ransac"));
    assert!(n("matches_before_ransac") <= n("matches_mutual"));
    assert!(n("matches_mutual") <= n("keypoints_reference").min(n("keypoints_target")));
    assert!(report["timings_ms"].is_null());
    for key in ["report", "corrected", "overlay", "matches"] {
        let p = report["artifacts"][key].as_str().unwrap();
        assert!(dir.path().join(p).exists(), "{p}");
    }
    let csv = std::fs::read_to_string(res.join("matches.csv")).unwrap();
    assert!(csv.starts_with("qx,qy,tx,ty,distance,ratio,inlier\n"));
}

#[test]
fn align_report_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    synth_pair(dir.path(), "5", "noise-medium");
    for out in ["a", "b"] {
        let o = run(
            &[
                "align",
                "ref.png",
                "tgt.png",
                "--out",
                out,
                "--detector",
                "dog",
            ],
            dir.path(),
        );
        assert_eq!(o.status.code(), Some(0));
    }
    for f in ["matches.csv", "corrected.png", "overlay.png"] {
        assert_eq!(
            std::fs::read(dir.path().join("a").join(f)).unwrap(),
            std::fs::read(dir.path().join("b").join(f)).unwrap(),
            "{f}"
        );
    }
    // Reports differ only in the artifact paths.
    let a = std::fs::read_to_string(dir.path().join("a/report.json")).unwrap();
    let b = std::fs::read_to_string(dir.path().join("b/report.json")).unwrap();
    assert_eq!(a.replace("a/", "X/"), b.replace("b/", "X/"));
}

#[test]
fn featureless_pair_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let blank = GrayImage::filled(96, 96, 1.0);
    save_image(&blank, dir.path().join("w.png")).unwrap();
    let out = run(&["align", "w.png", "w.png", "--out", "res"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("res/report.json")).unwrap())
            .unwrap();
    assert_eq!(report["status"], "failed");
    assert!(report["homography"].is_null());
    assert!(report["metrics"]["corrected"].is_null());
    assert_eq!(report["keypoints_reference"], 0);
    assert!(!dir.path().join("res/corrected.png").exists());
}

#[test]
fn config_and_io_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    synth_pair(dir.path(), "1", "identity");
    assert_eq!(
        run(&["align", "ref.png", "missing.png"], dir.path())
            .status
            .code(),
        Some(1)
    );
    assert_eq!(
        run(
            &["align", "ref.png", "tgt.png", "--detector", "sift"],
            dir.path()
        )
        .status
        .code(),
        Some(1)
    );
    assert_eq!(
        run(
            &["align", "ref.png", "tgt.png", "--ransac-p", "1.5"],
            dir.path()
        )
        .status
        .code(),
        Some(1)
    );
    assert_eq!(run(&["frobnicate"], dir.path()).status.code(), Some(1));
    assert_eq!(run(&["--help"], dir.path()).status.code(), Some(0));
}

#[test]
fn detect_match_and_metrics_outputs() {
    let dir = tempfile::tempdir().unwrap();
    synth_pair(dir.path(), "3", "tilt-mild");
    let out = run(&["detect", "ref.png", "--detector", "fast"], dir.path());
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next(),
        Some("x,y,sigma,response,orientation,detector")
    );
    assert!(lines.clone().count() > 10);
    assert!(lines.all(|l| l.ends_with(",fast")));

    let out = run(
        &["match", "ref.png", "tgt.png", "--out", "m.csv"],
        dir.path(),
    );
    assert!(out.status.success());
    let csv = std::fs::read_to_string(dir.path().join("m.csv")).unwrap();
    assert!(csv.starts_with("qx,qy,tx,ty,distance,ratio\n"));
    assert!(csv.lines().count() > 10);

    let out = run(&["metrics", "ref.png", "--mask", "mask.png"], dir.path());
    assert!(out.status.success());
    let m: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(m["area"].as_u64().unwrap() > 100);
    assert!(dir.path().join("mask.png").exists());
}

#[test]
fn bench_csv_is_independent_of_worker_count() {
    let dir = tempfile::tempdir().unwrap();
    let common = [
        "bench",
        "--cells",
        "identity,noise-low",
        "--detectors",
        "nonlinear,fast",
        "--seeds",
        "2",
        "--width",
        "160",
        "--height",
        "128",
    ];
    let mut outputs = Vec::new();
    for (jobs, out) in [("1", "one"), ("4", "four")] {
        let mut args = common.to_vec();
        args.extend(["--jobs", jobs, "--out", out]);
        let o = run(&args, dir.path());
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        outputs.push(std::fs::read(dir.path().join(out).join("bench.csv")).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
    let text = String::from_utf8(outputs.remove(0)).unwrap();
    assert_eq!(text.lines().count(), 1 + 2 * 2 * 2);
}

#[test]
fn levels_dump() {
    let dir = tempfile::tempdir().unwrap();
    synth_pair(dir.path(), "0", "identity");
    assert!(run(&["levels", "ref.png", "--out", "lv"], dir.path())
        .status
        .success());
    assert!(dir.path().join("lv/level_00.png").exists());
    assert!(run(
        &["levels", "ref.png", "--out", "lp", "--linear"],
        dir.path()
    )
    .status
    .success());
    assert!(dir.path().join("lp/plane_o0_s0.png").exists());
}
