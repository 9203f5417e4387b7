use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn gcmae(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gcmae"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn write_config(dir: &Path) -> String {
    let path = dir.join("small.cfg");
    fs::write(
        &path,
        "# tiny run\npreset = toy\ndata.n_train = 64\ndata.n_test = 20\nepochs = 1\nbatch_size = 16\nnegatives = 32\nfinetune.epochs = 1\n",
    )
    .unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn pretrain_probe_embed_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let run = dir.path().join("run");
    let run_s = run.to_str().unwrap();
    let stdout = ok(gcmae(&["pretrain", "--config", &cfg, "--out", run_s, "--seed", "3", "--sequential"]));
    assert!(stdout.contains("steps 4"), "{stdout}");

    let ckpt = run.join("model.ckpt");
    let probe_dir = dir.path().join("probe");
    let stdout = ok(gcmae(&[
        "probe",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--fraction",
        "0.5",
        "--out",
        probe_dir.to_str().unwrap(),
    ]));
    assert!(stdout.contains("labeled 32"), "{stdout}");
    assert_eq!(fs::read_to_string(probe_dir.join("probe_manifest.csv")).unwrap().lines().count(), 33);

    let emb = dir.path().join("emb");
    let stdout = ok(gcmae(&["embed", "--checkpoint", ckpt.to_str().unwrap(), "--out", emb.to_str().unwrap()]));
    assert!(stdout.contains("wrote 84 rows"), "{stdout}");
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let run = dir.path().join("run");
    ok(gcmae(&[
        "pretrain",
        "--config",
        &cfg,
        "--out",
        run.to_str().unwrap(),
        "--mask-ratio",
        "0.75",
        "--set",
        "batch_size=32",
    ]));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("run.json")).unwrap()).unwrap();
    assert_eq!(json["config"]["mask_ratio"], 0.75);
    assert_eq!(json["config"]["batch_size"], 32);
}

#[test]
fn bad_input_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    let r = gcmae(&["pretrain", "--out", out.to_str().unwrap(), "--mask-ratio", "1.5"]);
    assert!(!r.status.success());
    let r = gcmae(&["probe", "--checkpoint", "/nonexistent.ckpt", "--out", out.to_str().unwrap()]);
    assert!(!r.status.success());
    assert!(String::from_utf8_lossy(&r.stderr).contains("nonexistent"));
    let r = gcmae(&["pretrain", "--out", out.to_str().unwrap(), "--set", "no_equals_sign"]);
    assert!(!r.status.success());
}
