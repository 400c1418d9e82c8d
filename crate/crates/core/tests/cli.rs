//! End-to-end runs of the binary on a tiny configuration.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = r#"
diffusion_steps = 50
batch_size = 4
steps = 3
log_every = 1
image_size = 8
base_channels = 4
channel_multipliers = [1, 2]
time_embed_dim = 8
latent_dim = 3
amn_filters = [4, 6, 8, 8]
"#;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ambiseg"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = bin(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn schema(name: &str) -> jsonschema::JSONSchema {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../schemas").join(name);
    let text = std::fs::read_to_string(&path).unwrap();
    jsonschema::JSONSchema::compile(&serde_json::from_str(&text).unwrap()).unwrap()
}

fn assert_valid(schema_name: &str, value: &Value) {
    let s = schema(schema_name);
    let msgs: Vec<String> = match s.validate(value) {
        Ok(()) => return,
        Err(errors) => errors.map(|e| format!("{e} at {}", e.instance_path)).collect(),
    };
    panic!("{schema_name}: {msgs:?}");
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

struct Run {
    dir: PathBuf,
}

impl Run {
    fn p(&self, name: &str) -> String {
        self.dir.join(name).display().to_string()
    }
}

/// generate-data, train, sample, evaluate and plot into `dir`.
fn pipeline(dir: &Path) -> Run {
    let run = Run { dir: dir.to_path_buf() };
    std::fs::write(dir.join("tiny.toml"), TINY).unwrap();
    ok(&["generate-data", "--out", &run.p("data"), "--count", "6", "--image-size", "8", "--seed", "3"]);
    ok(&["train", "--data", &run.p("data"), "--out", &run.p("run"), "--config", &run.p("tiny.toml"), "--seed", "1"]);
    let ckpt = run.p("run/model.ckpt");
    ok(&["sample", "--checkpoint", &ckpt, "--data", &run.p("data"), "--image-id", "00002", "--n", "3", "--seed", "4", "--out", &run.p("samples")]);
    ok(&["evaluate", "--checkpoint", &ckpt, "--data", &run.p("data"), "--n", "2", "--seed", "5", "--out", &run.p("report.json")]);
    ok(&["plot", "--checkpoint", &ckpt, "--data", &run.p("data"), "--image-ids", "00000,00001", "--n", "2", "--out", &run.p("grid.png")]);
    run
}

#[test]
fn full_pipeline_produces_valid_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let run = pipeline(tmp.path());

    assert_valid("evaluate-report.v1.schema.json", &read_json(&run.dir.join("report.json")));
    let manifest = read_json(&run.dir.join("samples/manifest.json"));
    assert_valid("sample-manifest.v1.schema.json", &manifest);
    assert_eq!(manifest["files"].as_array().unwrap().len(), 3);
    for i in 0..3 {
        let img = image::open(run.dir.join(format!("samples/sample_{i}.png"))).unwrap();
        assert_eq!((img.width(), img.height()), (8, 8));
    }
    let log = std::fs::read_to_string(run.dir.join("run/train.ndjson")).unwrap();
    assert_eq!(log.lines().count(), 3);
    for line in log.lines() {
        assert_valid("train-log-record.v1.schema.json", &serde_json::from_str(line).unwrap());
    }
    let grid = image::open(run.dir.join("grid.png")).unwrap();
    // 1 input + 4 raters + 2 samples, 8 px at scale 4 plus 1 px gaps.
    assert_eq!((grid.width(), grid.height()), (7 * 33 + 1, 2 * 33 + 1));
}

#[test]
fn reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path());
    pipeline(b.path());
    for f in [
        "data/00003/image.png",
        "data/00003/mask_r1.png",
        "data/dataset.json",
        "run/model.ckpt",
        "run/train.ndjson",
        "samples/sample_0.png",
        "samples/sample_2.png",
        "report.json",
        "grid.png",
    ] {
        let (x, y) = (std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap());
        assert!(x == y, "{f} differs between runs");
    }
    // The manifest embeds the checkpoint path, so compare it without that key.
    let strip = |p: &Path| {
        let mut v = read_json(&p.join("samples/manifest.json"));
        v.as_object_mut().unwrap().remove("checkpoint");
        v
    };
    assert_eq!(strip(a.path()), strip(b.path()));
}

#[test]
fn ablate_report_validates() {
    let tmp = tempfile::tempdir().unwrap();
    let run = Run { dir: tmp.path().to_path_buf() };
    std::fs::write(tmp.path().join("tiny.toml"), TINY.replace("steps = 3", "steps = 1")).unwrap();
    ok(&["generate-data", "--out", &run.p("data"), "--count", "6", "--image-size", "8"]);
    ok(&["ablate", "--data", &run.p("data"), "--test-count", "2", "--config", &run.p("tiny.toml"), "--out", &run.p("ablation.json")]);
    let report = read_json(&tmp.path().join("ablation.json"));
    assert_valid("ablation-report.v1.schema.json", &report);
}

#[test]
fn help_and_bad_flags() {
    let out = ok(&["evaluate", "--help"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("--checkpoint"));
    let out = bin(&["evaluate", "--no-such-flag"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn failures_print_one_line() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bin(&["evaluate", "--checkpoint", "/nonexistent.ckpt", "--data", &tmp.path().display().to_string()]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.starts_with("error: "));
}
