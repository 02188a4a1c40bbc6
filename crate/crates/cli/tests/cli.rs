use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn fltrace(run_dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fltrace"))
        .arg("--run-dir")
        .arg(run_dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn idx_images(n: usize, pixels: impl Fn(usize, usize) -> u8) -> Vec<u8> {
    let mut bytes = vec![0, 0, 8, 3];
    for d in [n as u32, 28, 28] {
        bytes.extend_from_slice(&d.to_be_bytes());
    }
    for i in 0..n {
        bytes.extend((0..784).map(|px| pixels(i, px)));
    }
    bytes
}

fn idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut bytes = vec![0, 0, 8, 1];
    bytes.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    bytes.extend_from_slice(labels);
    bytes
}

/// A small learnable stand-in for MNIST: one bar pattern per class.
fn synthetic_mnist(dir: &Path) {
    let pixel = |i: usize, px: usize| {
        let class = i % 10;
        let on = (px / 28) / 3 == class || (px % 28) / 3 == class;
        if on {
            200 + ((i * 7 + px) % 50) as u8
        } else {
            ((i * 13 + px * 3) % 40) as u8
        }
    };
    let labels = |n: usize| (0..n).map(|i| (i % 10) as u8).collect::<Vec<_>>();
    std::fs::create_dir_all(dir).unwrap();
    std::fs::write(dir.join("train-images-idx3-ubyte"), idx_images(400, pixel)).unwrap();
    std::fs::write(dir.join("train-labels-idx1-ubyte"), idx_labels(&labels(400))).unwrap();
    std::fs::write(dir.join("t10k-images-idx3-ubyte"), idx_images(100, |i, px| pixel(i + 400, px))).unwrap();
    std::fs::write(dir.join("t10k-labels-idx1-ubyte"), idx_labels(&labels(100))).unwrap();
}

fn write_config(dir: &Path, mnist: &Path, extra: &str) -> PathBuf {
    let path = dir.join("config.toml");
    let text = format!(
        r#"schema_version = 1
preset = "desk"

[code]
m = 40
epsilon = 0.01

[whitebox]
p = 8

[data]
mnist_dir = "{}"
corpus_fraction = 1.0

[fl]
n_owners = 4
owners_per_round = 2
learning_rate = 0.05
wm_learning_rate = 0.05
iterations = 25
wm_steps = 4
wm_batch = 20
log_every = 5
eval_subset = 0

[trials]
collusion_sizes = [1, 2]
attacks = ["none", "prune"]
trials_per_cell = 2
{extra}"#,
        mnist.display()
    );
    std::fs::write(&path, text).unwrap();
    path
}

struct Fixture {
    _tmp: TempDir,
    root: PathBuf,
    run: PathBuf,
    config: PathBuf,
}

fn fixture(extra: &str) -> Fixture {
    let tmp = TempDir::new().unwrap();
    let root = tmp.path().to_path_buf();
    let mnist = root.join("mnist");
    synthetic_mnist(&mnist);
    let config = write_config(&root, &mnist, extra);
    Fixture {
        run: root.join("run"),
        root,
        config,
        _tmp: tmp,
    }
}

#[test]
fn invalid_tau_is_a_validation_error_naming_the_field() {
    let f = fixture("");
    let text = std::fs::read_to_string(&f.config).unwrap().replace("epsilon = 0.01", "epsilon = 0.01\ntau = 0.2");
    std::fs::write(&f.config, text).unwrap();
    let out = fltrace(&f.run, &["setup", "--config", f.config.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("code.tau"));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let f = fixture("[fl.extra]\nvalue = 1\n");
    let out = fltrace(&f.run, &["setup", "--config", f.config.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("fl.extra"));
}

#[test]
fn setup_is_bit_reproducible() {
    let f = fixture("");
    let other = f.root.join("run2");
    for run in [&f.run, &other] {
        let out = fltrace(run, &["setup", "--config", f.config.to_str().unwrap()]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    }
    let files = ["bias.trc", "codebook.trc", "basis.trc", "projection.trc", "triggers_shared.trc", "triggers_owner_003.trc"];
    for name in files {
        let a = std::fs::read(f.run.join("artifacts").join(name)).unwrap();
        let b = std::fs::read(other.join("artifacts").join(name)).unwrap();
        assert_eq!(a, b, "{name}");
    }
    assert_eq!(std::fs::read(f.run.join("partition.json")).unwrap(), std::fs::read(other.join("partition.json")).unwrap());
    let manifest: Value = serde_json::from_slice(&std::fs::read(f.run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["code"]["m"], 40);
    assert_eq!(manifest["seeds"]["codebook"], 42);
    assert_eq!(manifest["steps"][0]["command"], "setup");
}

#[test]
fn report_on_an_empty_directory_fails_validation() {
    let tmp = TempDir::new().unwrap();
    let out = fltrace(tmp.path(), &["report"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn missing_artifacts_name_the_expected_path() {
    let tmp = TempDir::new().unwrap();
    let out = fltrace(tmp.path(), &["train", "--strategy", "DropoutWM"]);
    assert_eq!(code(&out), 5);
    assert!(String::from_utf8_lossy(&out.stderr).contains("manifest.json"));
}

#[test]
fn missing_mnist_is_reported() {
    let f = fixture("");
    std::fs::remove_file(f.root.join("mnist").join("t10k-images-idx3-ubyte")).unwrap();
    let out = fltrace(&f.run, &["setup", "--config", f.config.to_str().unwrap()]);
    assert_eq!(code(&out), 5);
    assert!(String::from_utf8_lossy(&out.stderr).contains("t10k-images-idx3-ubyte"));
}

#[test]
fn divergence_has_its_own_exit_code() {
    let f = fixture("");
    let text = std::fs::read_to_string(&f.config).unwrap().replace("learning_rate = 0.05\n", "learning_rate = 1e30\n");
    std::fs::write(&f.config, text).unwrap();
    assert_eq!(code(&fltrace(&f.run, &["setup", "--config", f.config.to_str().unwrap()])), 0);
    let out = fltrace(&f.run, &["train", "--strategy", "VanillaWM"]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn selftest_passes() {
    let tmp = TempDir::new().unwrap();
    let out = fltrace(tmp.path(), &["selftest"]);
    assert_eq!(code(&out), 0);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.lines().count() >= 7 && stdout.lines().all(|l| l.starts_with("PASS")));
}

#[test]
fn pipeline_traces_an_unattacked_copy_to_its_owner() {
    let f = fixture("");
    let ok = |out: Output| assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    ok(fltrace(&f.run, &["--jobs", "1", "setup", "--config", f.config.to_str().unwrap()]));
    ok(fltrace(&f.run, &["train", "--strategy", "DropoutWM"]));
    let log = std::fs::read_to_string(f.run.join("models/DropoutWM/rounds.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 5);
    assert!(f.run.join("models/DropoutWM/owner_003.tfnn").exists());

    ok(fltrace(&f.run, &["attack", "--strategy", "DropoutWM", "--colluders", "3", "--name", "leak"]));
    let attack: Value = serde_json::from_slice(&std::fs::read(f.run.join("attacks/leak.json")).unwrap()).unwrap();
    assert_eq!(attack["spec"]["colluders"][0], 3);
    assert_eq!(attack["spec"]["post_attack"]["kind"], "none");

    let suspect = f.run.join("attacks/leak.tfnn");
    let out = fltrace(&f.run, &["trace", "--suspect", suspect.to_str().unwrap(), "--mode", "both"]);
    ok(out);
    let trace: Value = serde_json::from_slice(&std::fs::read(f.run.join("traces/leak.json")).unwrap()).unwrap();
    assert_eq!(trace["blackbox"]["accused"], 3);
    assert_eq!(trace["whitebox"]["accused"], serde_json::json!([3]));

    // a second attack on two colluders, pruned, through a JSON spec file
    let spec = f.root.join("spec.json");
    std::fs::write(&spec, r#"{"colluders": [0, 2], "post_attack": {"kind": "prune", "fraction": 0.5}, "seed": 9}"#).unwrap();
    ok(fltrace(&f.run, &["attack", "--strategy", "DropoutWM", "--spec", spec.to_str().unwrap()]));
    assert!(f.run.join("attacks/DropoutWM_c2_prune_0-2.tfnn").exists());

    ok(fltrace(&f.run, &["train", "--strategy", "IndependentOwnerBaseline", "--owner", "0", "--owner", "1"]));
    let out = fltrace(&f.run, &["report"]);
    ok(out);
    let csv = std::fs::read_to_string(f.run.join("reports/DropoutWM.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 2 * 2);
    assert!(csv.starts_with("strategy,c,attack,trial,colluders,t_star"));
    let protection: Value = serde_json::from_slice(&std::fs::read(f.run.join("reports/protection.json")).unwrap()).unwrap();
    assert_eq!(protection["baseline_owners"], serde_json::json!([0, 1]));

    let manifest: Value = serde_json::from_slice(&std::fs::read(f.run.join("manifest.json")).unwrap()).unwrap();
    let commands: Vec<&str> = manifest["steps"].as_array().unwrap().iter().map(|s| s["command"].as_str().unwrap()).collect();
    assert_eq!(commands, ["setup", "train", "attack", "trace", "attack", "train", "report"]);
}

#[test]
fn unembedded_model_exhausts_the_black_box_search() {
    let f = fixture("");
    let ok = |out: Output| assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    ok(fltrace(&f.run, &["setup", "--config", f.config.to_str().unwrap()]));
    ok(fltrace(&f.run, &["train", "--strategy", "NoWM"]));
    let suspect = f.run.join("models/NoWM/global.tfnn");
    let out = fltrace(&f.run, &["trace", "--suspect", suspect.to_str().unwrap(), "--mode", "blackbox"]);
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stdout));
}
