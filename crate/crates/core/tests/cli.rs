use std::path::Path;
use std::process::{Command, Output};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use restormixer::data::{load_image, save_image};
use restormixer::model::Model;
use restormixer::verify::tiny_model_config;
use restormixer::Tensor;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_restormixer"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn zero_head_checkpoint(dir: &Path) -> String {
    let mut model = Model::new(tiny_model_config()).unwrap();
    model.zero_heads();
    let path = dir.join("identity.ckpt");
    model.to_checkpoint(None, vec![]).save(&path).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(run(&["count", "--bogus"]).status.code(), Some(2));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(run(&[]).status.code(), Some(2));
    assert_eq!(run(&["count", "--hw", "twelve"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.cfg");
    std::fs::write(&cfg, "mystery_knob = 3\n").unwrap();
    assert_eq!(
        run(&["count", "--config", cfg.to_str().unwrap()])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn io_errors_exit_3() {
    let out = run(&[
        "infer",
        "--ckpt",
        "/nonexistent/x.ckpt",
        "--input",
        "a.png",
        "--output",
        "o",
    ]);
    assert_eq!(out.status.code(), Some(3));
    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"garbage").unwrap();
    let out = run(&[
        "eval",
        "--ckpt",
        junk.to_str().unwrap(),
        "--data",
        "synthetic:rain:2:16",
    ]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn count_prints_the_resolved_config_and_totals() {
    let out = run(&["count", "--hw", "256x256"]);
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    assert!(text.contains("# resolved config"));
    assert!(text.contains("base_channels"));
    assert!(text.to_lowercase().contains("total"));
}

#[test]
fn infer_with_silent_heads_reproduces_the_input() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = zero_head_checkpoint(dir.path());
    let img = Tensor::uniform(&[3, 21, 30], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
    let input = dir.path().join("in.png");
    save_image(&img, &input).unwrap();
    let outdir = dir.path().join("out");
    let out = run(&[
        "infer",
        "--ckpt",
        &ckpt,
        "--input",
        input.to_str().unwrap(),
        "--output",
        outdir.to_str().unwrap(),
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(stdout(&out).contains("# resolved config"));
    let restored = load_image(&outdir.join("in.png")).unwrap();
    assert_eq!(restored, load_image(&input).unwrap());
    assert!(restored.max_abs_diff(&img) <= 0.5 / 255.0 + 1e-12);
}

#[test]
fn eval_scores_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = zero_head_checkpoint(dir.path());
    let out = run(&[
        "eval",
        "--ckpt",
        &ckpt,
        "--data",
        "synthetic:noise:3:16:5",
        "--ycbcr",
    ]);
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    assert!(text.contains("synth_0002"), "{text}");
}

#[test]
fn train_then_resume() {
    let dir = tempfile::tempdir().unwrap();
    let outdir = dir.path().join("run");
    let o = outdir.to_str().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    let mut text = tiny_model_config().to_kv().to_text();
    text.push_str("total_steps = 4\neval_every = 2\ncrop = 16\nholdout = 1\n");
    std::fs::write(&cfg, text).unwrap();
    let out = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        "synthetic:rain:3:16",
        "--out",
        o,
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(stdout(&out).contains("total_steps = 4"));
    assert_eq!(
        std::fs::read_to_string(outdir.join("metrics.jsonl"))
            .unwrap()
            .lines()
            .count(),
        4
    );

    let last = outdir.join("last.ckpt");
    let bad = run(&[
        "train",
        "--resume",
        last.to_str().unwrap(),
        "--set",
        "seed=3",
        "--data",
        "synthetic:rain:3:16",
        "--out",
        o,
    ]);
    assert_eq!(bad.status.code(), Some(2));
    let again = run(&[
        "train",
        "--resume",
        last.to_str().unwrap(),
        "--data",
        "synthetic:rain:3:16",
        "--out",
        o,
    ]);
    assert_eq!(again.status.code(), Some(0));
    // The run was complete, so resuming adds nothing.
    assert_eq!(
        std::fs::read_to_string(outdir.join("metrics.jsonl"))
            .unwrap()
            .lines()
            .count(),
        4
    );

    let bad_set = run(&[
        "train",
        "--set",
        "lr_init",
        "--data",
        "synthetic:rain:3:16",
        "--out",
        o,
    ]);
    assert_eq!(bad_set.status.code(), Some(2));
}

#[test]
fn verify_passes_quickly() {
    let start = std::time::Instant::now();
    let out = run(&["verify", "--suite", "all"]);
    assert_eq!(out.status.code(), Some(0), "{}", stdout(&out));
    assert!(start.elapsed().as_secs() < 300);
    assert!(stdout(&out).contains("0 failed"));
}
