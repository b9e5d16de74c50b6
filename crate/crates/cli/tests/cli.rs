use std::path::Path;
use std::process::{Command, Output};

fn rigsplat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rigsplat"))
        .args(args)
        .env("RUST_LOG", "info")
        .output()
        .unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(out: &Path, twist_joints: &str) {
    let o = rigsplat(&[
        "synth", "--out", path(out), "--frames", "4", "--test-every", "2", "--width", "24", "--height", "24", "--twist-joints", twist_joints,
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn pipeline_runs_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let low = tmp.path().join("low");
    synth(&data, "3");
    synth(&low, "0");

    let poses = tmp.path().join("poses.json");
    let o = rigsplat(&[
        "fit-pose", "--data", path(&data), "--rig", path(&low.join("rig.rigjson")), "--out", path(&poses), "--set", "max_iters=20",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(tmp.path().join("poses_report.json").exists());

    let run = tmp.path().join("run");
    let o = rigsplat(&[
        "train", "--data", path(&data), "--poses", path(&poses), "--out", path(&run), "--set", "total_iters=6", "--set",
        "densify.interval=3",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(run.join("run_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["total_iters"], 6);

    let ckpt = run.join("checkpoint.json");
    let o = rigsplat(&["eval", "--data", path(&data), "--poses", path(&poses), "--checkpoint", path(&ckpt)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let events: Vec<serde_json::Value> = String::from_utf8_lossy(&o.stderr)
        .lines()
        .filter_map(|l| serde_json::from_str(l).ok())
        .collect();
    assert!(events.iter().any(|e| e["msg"]["event"] == "eval" && e["msg"]["psnr"].is_number()));

    let renders = tmp.path().join("renders");
    let o = rigsplat(&["render", "--data", path(&data), "--poses", path(&poses), "--checkpoint", path(&ckpt), "--out", path(&renders)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(std::fs::read_dir(&renders).unwrap().count() > 0);
}

#[test]
fn exit_codes_distinguish_failure_kinds() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, "3");
    let out = path(&tmp.path().join("run")).to_owned();

    let bad_key = rigsplat(&["train", "--data", path(&data), "--out", &out, "--set", "no_such_key=1"]);
    assert_eq!(bad_key.status.code(), Some(2));

    let diverge = rigsplat(&[
        "train", "--data", path(&data), "--out", &out, "--set", "total_iters=10", "--set", "lr.position=1e308", "--set",
        "lr.log_scale=1e308",
    ]);
    assert_eq!(diverge.status.code(), Some(3));

    let missing = rigsplat(&["train", "--data", path(&tmp.path().join("absent")), "--out", &out]);
    assert_ne!(missing.status.code(), Some(0));

    let usage = rigsplat(&["train"]);
    assert!(!usage.status.success());
}
