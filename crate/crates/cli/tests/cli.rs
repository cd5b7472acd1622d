//! End-to-end runs of the `lpa3d` binary on a tiny world.

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn lpa3d(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lpa3d"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok_record(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let v: Value = serde_json::from_slice(&out.stdout).expect("one JSON record on stdout");
    assert_eq!(v["status"], "ok");
    v["result"].clone()
}

fn error_record(out: &Output) -> Value {
    assert!(!out.status.success());
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text
        .lines()
        .rev()
        .find(|l| l.starts_with('{'))
        .expect("an error record on stderr");
    let v: Value = serde_json::from_str(line).unwrap();
    assert_eq!(v["status"], "error");
    v
}

fn tiny_config(root: &Path) -> String {
    let p = |s: &str| root.join(s).display().to_string();
    format!(
        r#"
[model]
image_size = 16
latent_dim = 16
plane_resolution = 8
plane_channels = 4
decoder_hidden = 8
decoder_hidden_layers = 1
gen_width = 8
disc_width = 8
backbone_width = 4
classifier_width = 4
bins = 8
render_steps = 8

[world]
scenes = 40

[segmenter]
dataset = "{data}"
fit = {{ epochs = 1, batch_size = 8, lr = 3e-3 }}

[anchor]
dataset = "{data}"
labels = 30
fit = {{ epochs = 1, batch_size = 8, lr = 2e-3 }}

[train]
dataset = "{data}"
segmenter = "{seg}"
eval_dataset = "{data}"
steps = 6
batch_size = 2
camera_batch_size = 4
warmup_gan_steps = 2
eval_every = 3

[eval]
checkpoint = "{run}"
dataset = "{data}"

[metrics]
samples = 6

[abnormality]
scenes = 3

[render]
scenes = 1
panorama_height = 8
resolution = 8
trajectory_frames = 2
"#,
        data = p("data"),
        seg = p("seg/segmenter.bin"),
        run = p("run"),
    )
}

#[test]
fn every_verb_runs_on_a_tiny_world() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = root.join("config.toml");
    std::fs::write(&cfg, tiny_config(root)).unwrap();
    let cfg = cfg.to_str().unwrap();
    let out = |d: &str| root.join(d).display().to_string();

    let world = ok_record(&lpa3d(&[
        "genworld",
        "--config",
        cfg,
        "--seed",
        "3",
        "--out",
        &out("data"),
    ]));
    assert_eq!(world["counts"]["images"], 40);
    assert!(root.join("data/poses_gt.csv").exists());

    // Same seed, same content.
    let again = ok_record(&lpa3d(&[
        "genworld",
        "--config",
        cfg,
        "--seed",
        "3",
        "--out",
        &out("data2"),
    ]));
    assert_eq!(world["content_hash"], again["content_hash"]);

    let seg = ok_record(&lpa3d(&[
        "train-segmenter",
        "--config",
        cfg,
        "--out",
        &out("seg"),
    ]));
    assert!(seg["pixel_accuracy"].as_f64().unwrap() > 0.0);

    let anchor = ok_record(&lpa3d(&[
        "train-anchor",
        "--config",
        cfg,
        "--out",
        &out("anchor"),
    ]));
    assert_eq!(anchor["labels"], 30);
    assert_eq!(anchor["held_out"], 10);

    let first = ok_record(&lpa3d(&[
        "train",
        "--config",
        cfg,
        "--seed",
        "1",
        "--out",
        &out("run"),
    ]));
    assert_eq!(first["step"], 6);
    assert!(first["resumed_from"].is_null());
    assert!(root.join("run/metrics.csv").exists());

    // A longer budget resumes from the last checkpoint.
    let resumed = ok_record(&lpa3d(&[
        "train",
        "--config",
        cfg,
        "--seed",
        "1",
        "--steps",
        "8",
        "--out",
        &out("run"),
    ]));
    assert_eq!(resumed["step"], 8);
    assert!(resumed["resumed_from"]
        .as_str()
        .unwrap()
        .ends_with("ckpt_6"));

    // A fresh run with the same seed reproduces the first one.
    let fresh = ok_record(&lpa3d(&[
        "train",
        "--config",
        cfg,
        "--seed",
        "1",
        "--fresh",
        "--out",
        &out("run_b"),
    ]));
    assert_eq!(fresh["params_hash"], first["params_hash"]);

    let pose = ok_record(&lpa3d(&[
        "eval-pose",
        "--config",
        cfg,
        "--out",
        &out("eval"),
    ]));
    assert_eq!(pose["pose_mae"]["count"], 40);
    assert!(root.join("eval/predictions.csv").exists());

    let hist = ok_record(&lpa3d(&[
        "histograms",
        "--config",
        cfg,
        "--out",
        &out("hist"),
    ]));
    assert_eq!(hist["outputs"].as_array().unwrap().len(), 2);

    let metrics = ok_record(&lpa3d(&[
        "metrics",
        "--config",
        cfg,
        "--out",
        &out("metrics"),
    ]));
    assert!(metrics["feature_distance"].as_f64().unwrap().is_finite());

    let ab = ok_record(&lpa3d(&[
        "abnormality",
        "--config",
        cfg,
        "--out",
        &out("ab"),
    ]));
    let rate = ab["abnormality_rate"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&rate));

    let render = ok_record(&lpa3d(&[
        "render",
        "--config",
        cfg,
        "--out",
        &out("render"),
    ]));
    // Panorama color and depth, then two segments of two frames plus the last key.
    assert_eq!(render["files"], 7);
    assert!(root.join("render/scene000_panorama.png").exists());
}

#[test]
fn failures_print_a_machine_readable_record() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();

    // Missing dataset.
    let cfg = root.join("missing.toml");
    std::fs::write(
        &cfg,
        format!(
            "[segmenter]\ndataset = \"{}\"\n",
            root.join("nowhere").display()
        ),
    )
    .unwrap();
    let out = lpa3d(&[
        "train-segmenter",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        root.join("o").to_str().unwrap(),
    ]);
    let rec = error_record(&out);
    assert_eq!(rec["verb"], "train-segmenter");
    assert!(rec["message"].as_str().unwrap().contains("nowhere"));

    // Malformed configuration.
    let bad = root.join("bad.toml");
    std::fs::write(&bad, "[model]\nimage_size = \"big\"\n").unwrap();
    let out = lpa3d(&[
        "genworld",
        "--config",
        bad.to_str().unwrap(),
        "--out",
        root.join("o").to_str().unwrap(),
    ]);
    assert_eq!(error_record(&out)["kind"], "config");

    // Usage errors exit with code 2.
    let out = lpa3d(&["genworld"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_record(&out)["kind"], "usage");
}
