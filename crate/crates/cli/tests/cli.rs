use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn recnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_recnet"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn value<'a>(text: &'a str, key: &str) -> &'a str {
    text.lines()
        .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
        .unwrap_or_else(|| panic!("no {key}= line in\n{text}"))
}

fn smoke(out: &Path, epochs: &str, threads: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_recnet"))
        .env("RECNET_THREADS", threads)
        .args([
            "train",
            "1,2,2,2,2,2,2",
            "--synthetic",
            "--batch",
            "32",
            "--deterministic",
            "--epochs",
            epochs,
        ])
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

#[test]
fn describe_reference_network() {
    let o = recnet(&["describe", "4,8,16,32,10,10,10", "--classes", "100"]);
    assert!(o.status.success());
    let s = stdout(&o);
    assert_eq!(value(&s, "acronym"), "RecNet-60-1280");
    let total: f64 = value(&s, "params").parse().unwrap();
    assert!((total - 1_769_000.0).abs() / 1_769_000.0 < 0.05, "{total}");
    assert!(s.contains("avgpool") && s.contains("320        1x1"));
}

#[test]
fn describe_small_network_and_csv() {
    let s = stdout(&recnet(&["describe", "4,4,8,16,10,10,10"]));
    assert_eq!(value(&s, "acronym"), "RecNet-60-640");
    let csv = stdout(&recnet(&[
        "describe",
        "RecNet(4,4,8,16,10,10,10)",
        "--format",
        "csv",
        "--convention",
        "formula-only",
    ]));
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("layer,out_channels,out_h,out_w,params,flops"));
    assert_eq!(lines.count(), 17);
}

#[test]
fn malformed_architecture_is_a_usage_error() {
    let o = recnet(&["describe", "4,8"]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("7 comma-separated fields"), "{err}");
    let o = recnet(&["describe", "4,8,16,0,10,10,10"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("field S3"));
}

#[test]
fn smoke_training_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let o = smoke(dir.path(), "10", "2");
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let log = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(
        log.lines().next(),
        Some("epoch,lr,train_loss,train_acc,test_loss,test_acc,seconds")
    );
    assert_eq!(log.lines().count(), 11);
    let last_acc = log.lines().last().unwrap().split(',').nth(5).unwrap().to_string();
    let ckpt = dir.path().join("checkpoint.rcn");
    let e = recnet(&["eval", "--ckpt", ckpt.to_str().unwrap()]);
    assert!(e.status.success());
    assert_eq!(value(&stdout(&e), "test_acc"), last_acc);
}

#[test]
fn fixed_seed_runs_are_identical_across_thread_counts() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    assert!(smoke(a.path(), "2", "1").status.success());
    assert!(smoke(b.path(), "2", "4").status.success());
    for f in ["checkpoint.rcn", "metrics.csv"] {
        assert_eq!(
            fs::read(a.path().join(f)).unwrap(),
            fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn zero_epochs_saves_the_initial_model() {
    let dir = tempfile::tempdir().unwrap();
    assert!(smoke(dir.path(), "0", "1").status.success());
    let ck = recnet::checkpoint::Checkpoint::load(&dir.path().join("checkpoint.rcn")).unwrap();
    assert_eq!(ck.meta.epoch, 0);
    assert_eq!(ck.meta.tuple, [1, 2, 2, 2, 2, 2, 2]);
}

#[test]
fn eval_error_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert!(smoke(dir.path(), "0", "1").status.success());
    let ckpt = dir.path().join("checkpoint.rcn");
    let p = ckpt.to_str().unwrap();

    let o = recnet(&["eval", "--ckpt", p, "--data", "/nonexistent", "--dataset", "cifar100"]);
    assert_eq!(o.status.code(), Some(2), "class mismatch");

    let mut bytes = fs::read(&ckpt).unwrap();
    bytes[..4].copy_from_slice(b"XXXX");
    fs::write(&ckpt, bytes).unwrap();
    assert_eq!(recnet(&["eval", "--ckpt", p]).status.code(), Some(3), "bad magic");

    assert_eq!(recnet(&["eval", "--ckpt", "/nonexistent.rcn"]).status.code(), Some(3));
}

#[test]
fn missing_data_directory() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = recnet(&[
        "train",
        "1,1,1,1,1,1,1",
        "--epochs",
        "1",
        "--data",
        "/nonexistent",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("data_batch_1.bin"));
    let o = recnet(&[
        "train",
        "1,1,1,1,1,1,1",
        "--epochs",
        "1",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn verify_exit_status_follows_results() {
    let o = recnet(&["verify", "--suite", "equiv", "--trials", "3"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("[PASS] equiv"));
    // four published network totals sit outside the 5% band
    let o = recnet(&["verify", "--suite", "counts"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(stdout(&o).matches("[FAIL]").count(), 4);
    assert_eq!(recnet(&["verify", "--suite", "bogus"]).status.code(), Some(2));
}

#[test]
fn bad_thread_count() {
    let o = Command::new(env!("CARGO_BIN_EXE_recnet"))
        .env("RECNET_THREADS", "0")
        .args(["verify", "--suite", "counts"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}
