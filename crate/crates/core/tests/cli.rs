use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sparsecert::model_file;
use sparsecert::net::{LastEvent, Network};

const BIN: &str = env!("CARGO_BIN_EXE_sparsecert");

fn idx_images(n: usize, f: impl Fn(usize, usize) -> u8) -> Vec<u8> {
    let mut b = Vec::new();
    for v in [0x0803u32, n as u32, 28, 28] {
        b.extend_from_slice(&v.to_be_bytes());
    }
    for i in 0..n {
        for p in 0..784 {
            b.push(f(i, p));
        }
    }
    b
}

fn idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut b = Vec::new();
    for v in [0x0801u32, labels.len() as u32] {
        b.extend_from_slice(&v.to_be_bytes());
    }
    b.extend_from_slice(labels);
    b
}

/// Ten-class toy digits: class `c` lights up row band `c`.
fn write_toy_mnist(dir: &Path, n_train: usize, n_test: usize) {
    let label = |i: usize| (i % 10) as u8;
    let pixel = |i: usize, p: usize| {
        let band = (p / 28) / 3;
        if band == i % 10 {
            230
        } else {
            ((i * 31 + p * 7) % 40) as u8
        }
    };
    for (imgs, labs, n) in [
        ("train-images-idx3-ubyte", "train-labels-idx1-ubyte", n_train),
        ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte", n_test),
    ] {
        fs::write(dir.join(imgs), idx_images(n, pixel)).unwrap();
        let l: Vec<u8> = (0..n).map(label).collect();
        fs::write(dir.join(labs), idx_labels(&l)).unwrap();
    }
}

fn run(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn train_verify_compact_inspect_bench() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    fs::create_dir(&data).unwrap();
    write_toy_mnist(&data, 400, 100);
    let out = tmp.path().join("run");
    let d = data.to_str().unwrap();
    let o = out.to_str().unwrap();

    let r = run(&[
        "train", "--data-dir", d, "--out", o, "--preset", "mlp-small", "--epochs", "4",
        "--t-exp", "2", "--ramp-start", "1", "--ramp-length", "2", "--eps", "0.05",
        "--budget", "0.3", "--batch-size", "50", "--lr", "0.02", "--strict-determinism",
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    for f in ["model.vcm", "metrics.csv", "summary.json", "certs.csv", "hist.csv"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 5);
    let certs = fs::read_to_string(out.join("certs.csv")).unwrap();
    assert_eq!(certs.lines().count(), 101);

    let (net, manifest) = model_file::load::<f32>(&out.join("model.vcm")).unwrap();
    let budget = manifest.metadata.budget.unwrap();
    assert_eq!(budget, (0.3 * net.total_param_count() as f64).floor() as usize);
    assert!(net.active_param_count() <= budget);
    assert!(net.active_param_count() as f64 >= 0.98 * budget as f64);
    assert_eq!(net.last_event, LastEvent::Deactivate);

    let r = run(&["verify", "--data-dir", d, "--model", &format!("{o}/model.vcm"), "--limit", "20"]);
    assert!(r.status.success());
    assert!(stdout(&r).contains("samples 20"));

    let small = tmp.path().join("small.vcm");
    let r = run(&["compact", "--model", &format!("{o}/model.vcm"), "--output", small.to_str().unwrap()]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let report: serde_json::Value = serde_json::from_str(&stdout(&r)).unwrap();
    assert!(report["size_ratio"].as_f64().unwrap() > 1.0);
    let (compacted, _) = model_file::load::<f32>(&small).unwrap();
    assert_eq!(compacted.total_param_count(), compacted.active_param_count());

    let r = run(&["inspect", "--model", small.to_str().unwrap(), "--hist", tmp.path().join("h.csv").to_str().unwrap()]);
    assert!(r.status.success());
    assert!(stdout(&r).contains("dense"));
    assert!(tmp.path().join("h.csv").is_file());

    let r = run(&[
        "bench", "--model", &format!("{o}/model.vcm"), "--against", small.to_str().unwrap(),
        "--repetitions", "20", "--warmup", "2",
    ]);
    assert!(r.status.success());
    let b: serde_json::Value = serde_json::from_str(&stdout(&r)).unwrap();
    assert!(b["latency_ratio"].as_f64().unwrap() > 0.0);
}

#[test]
fn strict_runs_repeat_byte_for_byte() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    fs::create_dir(&data).unwrap();
    write_toy_mnist(&data, 200, 50);
    let mut streams = Vec::new();
    for run_id in ["a", "b"] {
        let out = tmp.path().join(run_id);
        let r = run(&[
            "train", "--data-dir", data.to_str().unwrap(), "--out", out.to_str().unwrap(),
            "--preset", "cnn-small", "--epochs", "2", "--t-exp", "1", "--ramp-start", "0",
            "--ramp-length", "1", "--budget", "0.5", "--batch-size", "50", "--strict-determinism",
        ]);
        assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
        streams.push(fs::read(out.join("metrics.csv")).unwrap());
    }
    assert_eq!(streams[0], streams[1]);
}

#[test]
fn invalid_plan_exits_2_without_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("never");
    let r = run(&["train", "--epochs", "25", "--t-exp", "10", "--out", out.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(2));
    assert!(!out.exists());

    let r = run(&["train", "--eps=-0.1", "--out", out.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(2));
    let r = run(&["train", "--budget", "0", "--out", out.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn missing_inputs_exit_3() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let r = run(&[
        "train", "--data-dir", tmp.path().join("nothing").to_str().unwrap(),
        "--out", out.to_str().unwrap(), "--epochs", "4", "--t-exp", "2", "--ramp-start", "1", "--ramp-length", "2",
    ]);
    assert_eq!(r.status.code(), Some(3));
    assert!(!out.exists());
    let r = run(&["verify", "--model", tmp.path().join("none.vcm").to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(3));
}

#[test]
fn compact_requires_force_after_training_step() {
    let tmp = tempfile::tempdir().unwrap();
    let arch = sparsecert::net::presets::architecture("mlp-small", &[1, 28, 28], 10).unwrap();
    let mut net = Network::<f32>::build(arch, 3).unwrap();
    net.last_event = LastEvent::Train;
    let path = tmp.path().join("m.vcm");
    model_file::save(&net, &model_file::Metadata::new(), &path).unwrap();
    let dst = tmp.path().join("c.vcm");
    let r = run(&["compact", "--model", path.to_str().unwrap(), "--output", dst.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(4));
    assert!(!dst.exists());
    let r = run(&[
        "compact", "--model", path.to_str().unwrap(), "--output", dst.to_str().unwrap(),
        "--force", "--budget", "0.5",
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let (c, _) = model_file::load::<f32>(&dst).unwrap();
    assert!(c.total_param_count() <= net.total_param_count() / 2);
}
