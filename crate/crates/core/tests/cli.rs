use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "sizes.diffusion=16",
    "sizes.pano_height=16",
    "sizes.satellite=16",
    "schedule.steps=20",
    "schedule.ddim_steps=3",
    "unet.base_channels=4",
    "unet.depth=2",
    "unet.time_embed_dim=8",
    "unet.caption_embed_dim=8",
    "gan.base_channels=4",
    "stage1.pretrain_epochs=1",
    "stage1.epochs=1",
    "stage2.epochs=1",
    "stage3.epochs=1",
    "stage4.epochs=1",
];

fn run(out: &Path, data: &Path, args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_sat2street"));
    cmd.arg("--out").arg(out).arg("--set").arg(format!("data.root={}", data.display()));
    for kv in TINY {
        cmd.args(["--set", kv]);
    }
    cmd.args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn end_to_end_commands_succeed_and_write_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let (out, data) = (dir.path().join("run"), dir.path().join("data"));
    for args in [&["make-synthetic", "--count", "4", "--test-count", "2"][..], &["train"], &["evaluate"], &["report"]] {
        let o = run(&out, &data, args);
        assert_eq!(code(&o), 0, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["full.ckpt", "metrics.json", "report.md", "report.csv", "manifest_train.json", "manifest_evaluate.json"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("manifest_train.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "train");
    assert!(manifest["dataset_hashes"]["train.csv"].is_string());

    let sat = data.join("test").join("sat");
    let first = std::fs::read_dir(&sat).unwrap().map(|e| e.unwrap().path()).min().unwrap();
    let dest = dir.path().join("infer");
    let o = run(&out, &data, &["infer", "--satellite", first.to_str().unwrap(), "--dest", dest.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(std::fs::read_dir(&dest).unwrap().count() >= 3);
}

#[test]
fn failures_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let (out, data) = (dir.path().join("run"), dir.path().join("data"));
    let o = run(&out, &data, &["--set", "no.such.key=1", "report"]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no.such.key"));
    let o = run(&out, &data, &["report"]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    let o = run(&out, &data, &["train", "--stage", "1"]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}
