use std::path::Path;
use std::process::{Command, Output};

fn mbdepth(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mbdepth")).args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn generate_train_eval_export() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = dir.path().join("bundle");
    let out = dir.path().join("run");
    let o = mbdepth(&["generate", "--scene", "sphere-on-plane", "--res", "64x48", "--frames", "5", "--seed", "2", "--out", s(&bundle)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let o = mbdepth(&[
        "train", "--bundle", s(&bundle), "--out", s(&out), "--epochs", "2", "--samples", "64", "--patch-k", "3", "--precision", "f32", "--quiet",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("steps_per_epoch: 4"));
    for f in ["model.ckpt", "confidence.bin", "z_avg.bin", "z_star.bin", "train.log"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let log = std::fs::read_to_string(out.join("train.log")).unwrap();
    assert_eq!(log.lines().count(), 2);

    let report = dir.path().join("report.txt");
    let o = mbdepth(&["eval", "--bundle", s(&bundle), "--depth", s(&out.join("z_star.bin")), "--report", s(&report)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&report).unwrap();
    assert!(text.contains("pe_mae: ") && text.contains("depth_mae: "), "{text}");

    let pfm = dir.path().join("z.pfm");
    let png = dir.path().join("n.png");
    let o = mbdepth(&["export", "--depth", s(&out.join("z_star.bin")), "--pfm", s(&pfm), "--normals", s(&png), "--bundle", s(&bundle)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(std::fs::read(&pfm).unwrap().starts_with(b"Pf\n"));
    assert!(std::fs::read(&png).unwrap().starts_with(b"\x89PNG"));

    // Exported PFM reads back as a depth input.
    let o = mbdepth(&["eval", "--bundle", s(&bundle), "--depth", s(&pfm), "--report", s(&dir.path().join("r2.txt"))]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn usage_errors_exit_with_one() {
    let o = mbdepth(&["train", "--epochs", "3"]);
    assert_eq!(o.status.code(), Some(1));
    let o = mbdepth(&["generate", "--scene", "plane", "--res", "64by48", "--out", "/tmp/unused"]);
    assert_eq!(o.status.code(), Some(1));
    let o = mbdepth(&["export", "--depth", "/tmp/whatever.bin"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn runtime_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = mbdepth(&["train", "--bundle", s(&dir.path().join("missing")), "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!o.stderr.is_empty());
}

#[test]
fn stride_changes_step_count() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = dir.path().join("b");
    assert!(mbdepth(&["generate", "--scene", "plane", "--res", "32x24", "--frames", "9", "--out", s(&bundle)]).status.success());
    let steps = |stride: &str| {
        let o = mbdepth(&["train", "--bundle", s(&bundle), "--out", s(&dir.path().join(stride)), "--epochs", "0", "--stride", stride, "--quiet"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        String::from_utf8_lossy(&o.stdout).lines().find_map(|l| l.strip_prefix("steps_per_epoch: ").map(|v| v.parse::<usize>().unwrap())).unwrap()
    };
    assert_eq!(steps("1"), 8);
    assert_eq!(steps("2"), 4);
}
