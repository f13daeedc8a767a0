use std::path::Path;
use std::process::{Command, Output};

fn iapl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_iapl"))
        .args(args)
        .env("IAPL_THREADS", "1")
        .output()
        .unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL: &str = "encoder.depth = 2
encoder.dim = 8
encoder.heads = 2
encoder.patch = 8
encoder.view_size = 16
encoder.adapter_dim = 2
encoder.n_adapters = 1
encoder.last_token_block = 2
cil.cond_patch = 8
cil.channels = 3,3
train.epochs = 1
train.batch = 4
tta.n_views = 4
tta.m = 2
";

#[test]
fn gen_train_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = iapl(&["gen-data", "--out", p(&data), "--counts", "real=6,fakeA=6", "--size", "16", "--seed", "3"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = std::fs::read_to_string(data.join("manifest.csv")).unwrap();
    assert!(manifest.starts_with("path,label,family"));
    assert_eq!(manifest.lines().count(), 13);

    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, SMALL).unwrap();
    let ckpt = dir.path().join("m.ckpt");
    let out = iapl(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&ckpt)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(ckpt.exists());
    assert!(dir.path().join("m.ckpt.cfg").exists());
    let log = std::fs::read_to_string(dir.path().join("m.ckpt.log.csv")).unwrap();
    assert!(log.starts_with("step,L_cls,L_aux,total"));

    for (fmt, tta) in [("json", "on"), ("csv", "off"), ("svg", "on")] {
        let report = dir.path().join(format!("r.{fmt}"));
        let out = iapl(&[
            "eval", "--ckpt", p(&ckpt), "--data", p(&data), "--tta", tta, "--ovs", "on", "--loss", "pointwise",
            "--report", p(&report), "--format", fmt,
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        assert!(String::from_utf8_lossy(&out.stdout).contains("acc "));
        let text = std::fs::read_to_string(&report).unwrap();
        match fmt {
            "csv" => assert!(text.starts_with("family,acc,ap,count")),
            "json" => assert!(text.contains("\"n_samples\": 12")),
            _ => assert!(text.starts_with("<svg")),
        }
    }

    // Training twice is bit-identical.
    let again = dir.path().join("m2.ckpt");
    let out = iapl(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&again)]);
    assert!(out.status.success());
    assert_eq!(std::fs::read(&ckpt).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "encoder.colour = 3\n").unwrap();
    let out = iapl(&["train", "--config", p(&cfg), "--data", p(dir.path()), "--out", p(&dir.path().join("m"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("encoder.colour"));

    let out = iapl(&["gen-data", "--out", p(dir.path()), "--counts", "real=x"]);
    assert_eq!(out.status.code(), Some(2));
    let out = iapl(&["grad-check", "--eps", "0"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn data_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = iapl(&["train", "--data", p(&dir.path().join("missing")), "--out", p(&dir.path().join("m"))]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn grad_check_passes() {
    let out = iapl(&["grad-check", "--seed", "1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(String::from_utf8_lossy(&out.stdout).contains("max relative error"));
}
