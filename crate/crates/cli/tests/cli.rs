use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn svr(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_svr")).current_dir(dir).args(args).env_remove("SVR_THREADS").output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = svr(dir, args);
    assert!(out.status.success(), "svr {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn err(dir: &Path, args: &[&str]) -> Value {
    let out = svr(dir, args);
    assert_eq!(out.status.code(), Some(1), "svr {args:?} should fail");
    let text = String::from_utf8(out.stderr).unwrap();
    assert_eq!(text.trim().lines().count(), 1, "one JSON object expected: {text}");
    serde_json::from_str(text.trim()).unwrap()
}

fn json(text: &str) -> Value {
    serde_json::from_str(text.trim()).unwrap()
}

fn payload(path: PathBuf) -> Vec<u8> {
    std::fs::read(path).unwrap()[352..].to_vec()
}

/// A `.svrm` file with the same displacement at every pixel, written byte by byte.
fn constant_svrm(path: &Path, k: u32, h: u32, w: u32, d: [f32; 3]) {
    let mut b = b"SVRM".to_vec();
    for v in [1u32, k, h, w, 2, 1] {
        b.extend_from_slice(&v.to_le_bytes());
    }
    b.extend_from_slice(&1f32.to_le_bytes());
    for _ in 0..k {
        for c in d {
            for _ in 0..h * w {
                b.extend_from_slice(&c.to_le_bytes());
            }
        }
    }
    std::fs::write(path, b).unwrap();
}

#[test]
fn formats_are_described() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(dir.path(), &["formats"]);
    assert!(text.contains("SVRM") && text.contains("NIfTI-1"));
}

#[test]
fn simulate_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["phantom", "--dims", "20", "--blobs", "3", "--seed", "1", "--out", "vol.nii"]);
    for run in ["a", "b"] {
        std::fs::create_dir(d.join(run)).unwrap();
        ok(d, &["simulate", "--in", "vol.nii", "--axis", "z", "--seed", "0", "--euler-max", "4", "--trans-max", "2",
            "--out-stack", &format!("{run}/s.nii"), "--out-motion", &format!("{run}/m.svrm")]);
    }
    for f in ["s.nii", "m.svrm"] {
        assert_eq!(std::fs::read(d.join("a").join(f)).unwrap(), std::fs::read(d.join("b").join(f)).unwrap(), "{f}");
    }
    let side = json(&std::fs::read_to_string(d.join("a/s.json")).unwrap());
    let other = json(&std::fs::read_to_string(d.join("b/s.json")).unwrap());
    assert_eq!(side["trajectory"], other["trajectory"]);
    assert_eq!(side["seed"], 0);
    assert_eq!(side["config"]["euler_max"], 4.0);
    assert_eq!(side["config"]["lambda"], 0.3);
    ok(d, &["simulate", "--in", "vol.nii", "--seed", "1", "--euler-max", "4", "--out-stack", "sc.nii", "--out-motion", "mc.svrm"]);
    assert_ne!(std::fs::read(d.join("mc.svrm")).unwrap(), std::fs::read(d.join("a/m.svrm")).unwrap());
}

#[test]
fn identity_acquisition_copies_the_volume() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["phantom", "--dims", "12,10,8", "--blobs", "2", "--out", "vol.nii"]);
    ok(d, &["simulate", "--in", "vol.nii", "--euler-max", "0", "--trans-max", "0", "--noise", "0", "--gamma-lo", "1",
        "--gamma-hi", "1", "--psf", "1", "--stride", "1", "--out-stack", "s.nii", "--out-motion", "m.svrm"]);
    assert_eq!(payload(d.join("s.nii")), payload(d.join("vol.nii")));
}

#[test]
fn default_stride_gives_64_slices_of_256() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["phantom", "--dims", "256", "--blobs", "2", "--out", "vol.nii"]);
    let out = json(&ok(d, &["simulate", "--in", "vol.nii", "--out-stack", "s.nii", "--out-motion", "m.svrm"]));
    assert_eq!(out["slices"], 64);
    let b = std::fs::read(d.join("s.nii")).unwrap();
    assert_eq!(i16::from_le_bytes([b[46], b[47]]), 64); // dim[3]
}

#[test]
fn config_file_and_flags() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["phantom", "--dims", "16", "--blobs", "2", "--out", "vol.nii"]);
    std::fs::write(d.join("job.json"), r#"{"in": "vol.nii", "out_stack": "s.nii", "out_motion": "m.svrm", "axis": "y", "seed": 5, "stride": 2}"#).unwrap();
    ok(d, &["simulate", "--config", "job.json", "--seed", "6"]);
    let side = json(&std::fs::read_to_string(d.join("s.json")).unwrap());
    assert_eq!(side["config"]["seed"], 6);
    assert_eq!(side["config"]["axis"], "y");
    assert_eq!(side["geometry"]["slices"], 8);

    std::fs::write(d.join("bad.json"), r#"{"in": "vol.nii", "noise": 0.1}"#).unwrap();
    let e = err(d, &["simulate", "--config", "bad.json"]);
    assert_eq!(e["error"]["kind"], "config");
    assert!(e["error"]["message"].as_str().unwrap().contains("noise"));
}

#[test]
fn zero_motion_reconstruction() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["phantom", "--dims", "16", "--blobs", "3", "--out", "vol.nii"]);
    let mut args = vec!["reconstruct", "--levels", "2", "--outer-iters", "3", "--out-dir", "rec"];
    let names: Vec<(String, String)> = ["x", "y", "z"].iter().map(|a| (format!("s{a}.nii"), format!("m{a}.svrm"))).collect();
    for (a, (s, m)) in ["x", "y", "z"].iter().zip(&names) {
        ok(d, &["simulate", "--in", "vol.nii", "--axis", a, "--euler-max", "0", "--trans-max", "0", "--noise", "0",
            "--gamma-lo", "1", "--psf", "2", "--stride", "2", "--out-stack", s, "--out-motion", m]);
    }
    for (s, m) in &names {
        args.extend(["--stack", s, "--truth-motion", m]);
    }
    let out = json(&ok(d, &args));
    assert!(out["final_epe"].as_f64().unwrap() < 0.01, "{out}");
    assert_eq!(out["monotone"], true);
    for f in ["fused.nii", "consensus.nii", "holes.nii", "motion_0.svrm", "motion_2.svrm", "report.json"] {
        assert!(d.join("rec").join(f).exists(), "{f}");
    }
    let report = json(&std::fs::read_to_string(d.join("rec/report.json")).unwrap());
    assert_eq!(report["config"]["levels"], 2);
    assert!(report["report"]["levels"][0]["objective_trace"].as_array().unwrap().len() > 1);

    // the estimate scores against the truth through evaluate as well
    let m = json(&ok(d, &["evaluate", "--motion", "rec/motion_0.svrm", "--truth-motion", "mx.svrm", "--volume",
        "rec/fused.nii", "--truth-volume", "vol.nii", "--stack", "sx.nii", "--fg-threshold", "0.05"]));
    assert!(m["epe_compensated"].as_f64().unwrap() < 0.01);
    assert!(m["psnr_volume"].as_f64().unwrap() > 25.0);
    assert!(m["psnr_slices"].as_f64().unwrap() > 25.0);

    let e = err(d, &["reconstruct", "--stack", "sx.nii", "--truth-motion", "my.svrm", "--out-dir", "r2", "--dims", "16"]);
    assert_eq!(e["error"]["kind"], "geometry_mismatch");
}

#[test]
fn single_stack_reports_holes_and_inpaints() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["phantom", "--dims", "16", "--blobs", "3", "--out", "vol.nii"]);
    ok(d, &["simulate", "--in", "vol.nii", "--euler-max", "0", "--trans-max", "0", "--psf", "2", "--stride", "5",
        "--out-stack", "s.nii", "--out-motion", "m.svrm"]);
    let out = json(&ok(d, &["reconstruct", "--stack", "s.nii", "--dims", "16", "--levels", "1", "--outer-iters", "2", "--out-dir", "rec"]));
    assert!(out["holes"].as_u64().unwrap() > 0);
    assert!(out["hole_fraction"].as_f64().unwrap() > 0.0);
    let filled = json(&ok(d, &["inpaint", "--in", "rec/fused.nii", "--holes", "rec/holes.nii", "--out", "filled.nii"]));
    assert_eq!(filled["filled"], out["holes"]);

    let e = err(d, &["reconstruct", "--stack", "s.nii", "--out-dir", "r2", "--dims", "16,16,0"]);
    assert_eq!(e["error"]["kind"], "invalid_dims");
}

#[test]
fn inpaint_without_holes_is_identity() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["phantom", "--dims", "10", "--blobs", "2", "--out", "vol.nii"]);
    ok(d, &["simulate", "--in", "vol.nii", "--euler-max", "0", "--trans-max", "0", "--psf", "1", "--stride", "1",
        "--out-stack", "s.nii", "--out-motion", "m.svrm"]);
    ok(d, &["splat", "--stack", "s.nii", "--dims", "10", "--out", "v.nii", "--out-holes", "h.nii"]);
    ok(d, &["inpaint", "--in", "vol.nii", "--holes", "h.nii", "--out", "f.nii"]);
    assert_eq!(payload(d.join("f.nii")), payload(d.join("vol.nii")));
}

#[test]
fn evaluate_identities() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    constant_svrm(&d.join("zero.svrm"), 3, 4, 5, [0.0; 3]);
    constant_svrm(&d.join("off.svrm"), 3, 4, 5, [3.0, 4.0, 0.0]);
    ok(d, &["phantom", "--dims", "8", "--blobs", "1", "--out", "v.nii"]);

    let same = json(&ok(d, &["evaluate", "--motion", "off.svrm", "--truth-motion", "off.svrm", "--volume", "v.nii", "--truth-volume", "v.nii"]));
    for k in ["mse", "epe", "epe_compensated", "ape"] {
        assert_eq!(same[k], 0.0, "{k}");
    }
    assert_eq!(same["psnr_volume"], 300.0);

    let off = json(&ok(d, &["evaluate", "--motion", "off.svrm", "--truth-motion", "zero.svrm"]));
    assert_eq!(off["epe"], 5.0);
    assert_eq!(off["mse"], 25.0);
    assert_eq!(off["ape"], 5.0);
    assert!(off["epe_compensated"].as_f64().unwrap() < 1e-6);
}

#[test]
fn thread_count_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["phantom", "--dims", "24", "--blobs", "3", "--out", "vol.nii"]);
    ok(d, &["simulate", "--in", "vol.nii", "--axis", "x", "--euler-max", "5", "--out-stack", "s.nii", "--out-motion", "m.svrm"]);
    ok(d, &["--threads", "1", "splat", "--stack", "s.nii", "--motion", "m.svrm", "--dims", "24", "--out", "a.nii"]);
    let out = Command::new(env!("CARGO_BIN_EXE_svr"))
        .current_dir(d)
        .args(["splat", "--stack", "s.nii", "--motion", "m.svrm", "--dims", "24", "--out", "b.nii"])
        .env("SVR_THREADS", "3")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(std::fs::read(d.join("a.nii")).unwrap(), std::fs::read(d.join("b.nii")).unwrap());
}

#[test]
fn errors_are_json() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let e = err(d, &["simulate", "--in", "missing.nii", "--out-stack", "s.nii", "--out-motion", "m.svrm"]);
    assert_eq!(e["error"]["kind"], "io");
    assert!(e["error"]["message"].as_str().unwrap().contains("missing.nii"));
    assert_eq!(err(d, &["simulate", "--bogus"])["error"]["kind"], "usage");
    assert_eq!(err(d, &["simulate", "--axis", "w"])["error"]["kind"], "usage");
    std::fs::write(d.join("junk.svrm"), b"SVRX").unwrap();
    assert_eq!(err(d, &["evaluate", "--motion", "junk.svrm"])["error"]["kind"], "format");
    assert!(svr(d, &["--help"]).status.success());
}
