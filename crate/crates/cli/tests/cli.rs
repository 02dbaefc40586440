use std::path::Path;
use std::process::{Command, Output};

use shapeseg::volgrid::{load_volume, VolumeGrid};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_shapeseg"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn shapeseg")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn phantom(dir: &Path) {
    ok(
        dir,
        &["phantom", "--out", "data", "--count", "5", "--size", "16", "--slices", "12", "--seed", "3"],
    );
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_eq!(run(d, &["phantom", "--out", "x", "--count", "0"]).status.code(), Some(2));
    assert_eq!(run(d, &["phantom", "--out", "x", "--split", "0.9,0.9,0.1"]).status.code(), Some(2));
    assert_eq!(run(d, &["phantom", "--out", "x", "--split", "0.5,0.5"]).status.code(), Some(2));
    assert!(!d.join("x").exists());
    assert_eq!(run(d, &["sdf", "--mask", "missing.svol.json", "--out", "o.svol.json"]).status.code(), Some(2));
    assert_eq!(run(d, &["frobnicate"]).status.code(), Some(2));
    assert_eq!(run(d, &["train", "--data", "nowhere", "--out", "m"]).status.code(), Some(2));
    phantom(d);
    let img = "data/train/case_000_image.svol.json";
    // an image is not a mask
    assert_eq!(run(d, &["sdf", "--mask", img, "--out", "o.svol.json"]).status.code(), Some(2));
    assert_eq!(
        run(d, &["reconstruct", "--input", img, "--out", "m.ply"]).status.code(),
        Some(2)
    );
}

#[test]
fn sdf_raw_and_normalized() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    phantom(d);
    let mask = "data/train/case_000_mask.svol.json";
    ok(d, &["sdf", "--mask", mask, "--out", "n.svol.json"]);
    ok(d, &["sdf", "--mask", mask, "--out", "r.svol.json", "--raw"]);
    let m = load_volume(&d.join("data/train").join("case_000_mask.svol.json")).unwrap();
    let n = load_volume(&d.join("n.svol.json")).unwrap();
    let r = load_volume(&d.join("r.svol.json")).unwrap();
    assert_eq!(n.dims(), m.dims());
    let (m, n, r) = (m.mask_data().unwrap(), n.scalar_data().unwrap(), r.scalar_data().unwrap());
    assert!(n.iter().all(|v| v.abs() <= 1.0));
    assert!(r.iter().any(|v| v.abs() > 1.0));
    for i in 0..m.len() {
        assert_eq!(m[i] == 1, n[i] < 0.0);
        assert_eq!(n[i] < 0.0, r[i] < 0.0);
    }
}

#[test]
fn evaluate_identical_and_report() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    phantom(d);
    let mask = "data/test/case_004_mask.svol.json";
    ok(d, &["evaluate", "--pred", mask, "--truth", mask, "--json", "m.json", "--csv", "m.csv"]);
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("m.json")).unwrap()).unwrap();
    let rec = &v["records"][0];
    for (k, want) in [("vol_dice", 1.0), ("surf_dice", 1.0), ("hd", 0.0), ("hd95", 0.0), ("assd", 0.0)] {
        assert_eq!(rec[k].as_f64(), Some(want), "{k}");
    }
    let csv = std::fs::read_to_string(d.join("m.csv")).unwrap();
    assert!(csv.starts_with("case,vol_dice,surf_dice,hd,hd95,assd\n"));
    let table = ok(d, &["report", "--metrics", "m.json", "--label", "same"]);
    assert!(table.contains("| Model | Volumetric Dice | Surface Dice | HD | HD95 | ASSD |"));
    assert!(table.contains("| same | 1.0000±0.0000 | 1.0000±0.0000 | 0.0000±0.0000 |"));
}

#[test]
fn empty_prediction_reports_null_surface_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    phantom(d);
    let truth = load_volume(&d.join("data/test/case_004_mask.svol.json")).unwrap();
    let empty = VolumeGrid::new_mask(truth.dims(), truth.spacing(), truth.origin(), vec![0; truth.len()]).unwrap();
    shapeseg::volgrid::save_volume(&empty, &d.join("empty.svol.json")).unwrap();
    let out = ok(d, &["evaluate", "--pred", "empty.svol.json", "--truth", "data/test/case_004_mask.svol.json"]);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["records"][0]["vol_dice"].as_f64(), Some(0.0));
    assert!(v["records"][0]["hd"].is_null());
    assert_eq!(v["aggregate"]["hd"]["excluded"].as_u64(), Some(1));
}

#[test]
fn train_predict_reconstruct() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    phantom(d);
    ok(
        d,
        &["train", "--data", "data", "--out", "m.cfx", "--epochs", "2", "--depth", "1", "--base-channels", "4"],
    );
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("m.cfx.report.json")).unwrap()).unwrap();
    assert_eq!(report["ablation"], "d");
    assert_eq!(report["report"]["epochs"].as_array().map(Vec::len), Some(2));
    ok(d, &["predict", "--model", "m.cfx", "--data", "data", "--split", "test", "--out", "pred"]);
    let p = load_volume(&d.join("pred/case_004_sdf.svol.json")).unwrap();
    assert_eq!(p.dims(), [16, 16, 12]);
    ok(d, &["reconstruct", "--input", "data/test/case_004_mask.svol.json", "--out", "t.obj"]);
    let obj = std::fs::read_to_string(d.join("t.obj")).unwrap();
    assert!(obj.lines().any(|l| l.starts_with("f ")));
    ok(d, &["evaluate", "--pred-dir", "pred", "--data", "data", "--split", "test", "--json", "e.json"]);
}

#[test]
fn raw_sdf_normalizes_to_default() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    phantom(d);
    let mask = "data/val/case_003_mask.svol.json";
    ok(d, &["sdf", "--mask", mask, "--out", "n.svol.json"]);
    ok(d, &["sdf", "--mask", mask, "--out", "r.svol.json", "--raw"]);
    let n = load_volume(d.join("n.svol.json")).unwrap();
    let r = load_volume(d.join("r.svol.json")).unwrap();
    let [w, h, nz] = r.dims();
    let (n, r) = (n.scalar_data().unwrap(), r.scalar_data().unwrap());
    for z in 0..nz {
        let sl = &r[z * w * h..(z + 1) * w * h];
        let neg = sl.iter().filter(|v| **v < 0.0).map(|v| -f64::from(*v)).fold(0.0, f64::max);
        let pos = sl.iter().filter(|v| **v > 0.0).map(|v| f64::from(*v)).fold(0.0, f64::max);
        for (i, &v) in sl.iter().enumerate() {
            let v = f64::from(v);
            let want = if neg == 0.0 {
                1.0
            } else if pos == 0.0 {
                -1.0
            } else {
                v / neg.max(pos)
            };
            assert!((f64::from(n[z * w * h + i]) - want).abs() < 1e-6, "slice {z} pixel {i}");
        }
    }
}

#[test]
fn ablation_a_has_no_regression_loss() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    phantom(d);
    ok(
        d,
        &["train", "--data", "data", "--out", "a.cfx", "--ablation", "a", "--epochs", "2", "--depth", "1", "--base-channels", "2"],
    );
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("a.cfx.report.json")).unwrap()).unwrap();
    for e in report["report"]["epochs"].as_array().unwrap() {
        assert_eq!(e["train_loss"]["reg_total"].as_f64(), Some(0.0));
        assert!(e["train_loss"]["l1"].as_f64().unwrap() > 0.0);
    }
}

#[test]
fn sdf_sphere_reconstruction() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let c = [15.4, 16.2, 15.7];
    let field = shapeseg::phantom::analytic_sphere_sdf([32; 3], [1.0; 3], c, 10.0).unwrap();
    shapeseg::volgrid::save_volume(&field, d.join("s.svol.json")).unwrap();
    ok(d, &["reconstruct", "--input", "s.svol.json", "--from", "sdf", "--iso", "0", "--out", "s.obj"]);
    let obj = std::fs::read_to_string(d.join("s.obj")).unwrap();
    let mut n = 0;
    for l in obj.lines().filter(|l| l.starts_with("v ")) {
        let p: Vec<f64> = l[2..].split_whitespace().map(|t| t.parse().unwrap()).collect();
        let r = ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) + (p[2] - c[2]).powi(2)).sqrt();
        assert!((r - 10.0).abs() <= 0.5, "vertex at radius {r}");
        n += 1;
    }
    assert!(n > 100);
}

#[test]
fn phantom_repeat_is_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    phantom(a.path());
    ok(
        b.path(),
        &["phantom", "--out", "data", "--count", "5", "--size", "16", "--slices", "12", "--seed", "3", "--jobs", "3"],
    );
    for split in ["train", "val", "test"] {
        let mut names: Vec<_> = std::fs::read_dir(a.path().join("data").join(split))
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        names.sort();
        for n in names {
            let x = std::fs::read(a.path().join("data").join(split).join(&n)).unwrap();
            let y = std::fs::read(b.path().join("data").join(split).join(&n)).unwrap();
            assert_eq!(x, y, "{n:?}");
        }
    }
    let m = |p: &Path| std::fs::read(p.join("data/manifest.json")).unwrap();
    assert_eq!(m(a.path()), m(b.path()));
}

#[test]
fn overfit_smoke_config() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(
        d,
        &["phantom", "--out", "data", "--count", "2", "--size", "32", "--slices", "10", "--seed", "1", "--split", "1,0,0"],
    );
    let cfg = serde_json::json!({
        "net": { "depth": 2, "base_channels": 8 },
        "train": { "learning_rate": 1e-3, "epochs": 200, "batch_size": 8, "stop_at_val_dice": 0.95 }
    });
    std::fs::write(d.join("smoke.json"), cfg.to_string()).unwrap();
    ok(
        d,
        &["train", "--data", "data", "--config", "smoke.json", "--out", "m.cfx", "--val-split", "train"],
    );
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("m.cfx.report.json")).unwrap()).unwrap();
    let dice = report["report"]["best_val_dice"].as_f64().unwrap();
    assert!(dice >= 0.95, "train dice {dice}");
}
