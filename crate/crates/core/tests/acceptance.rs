//! End-to-end acceptance criteria. Prints one PASS/FAIL line per criterion
//! and exits non-zero if any fails.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use restormixer::data::{Dataset, DegradationTag, Split};
use restormixer::loss::{target_pyramid, total_loss, FREQ_WEIGHT};
use restormixer::metrics::{psnr, ssim};
use restormixer::model::{Model, ModelConfig};
use restormixer::mwsa::{window_merge, window_partition, Mwsa};
use restormixer::nn::{Builder, ParamStore};
use restormixer::ops::NormMode;
use restormixer::ssm::{discretize_zoh, inverse_reorder, recurrence, reorder, ScanDirection};
use restormixer::train::{
    load_training_checkpoint, save_training_checkpoint, train, train_until, OutputDir, TrainConfig,
    TrainReport,
};
use restormixer::verify::{gradient_checks, tiny_model_config};
use restormixer::{Tape, Tensor};

const LTI_TOL: f64 = 1e-9;
const LTI_BUDGET: Duration = Duration::from_secs(10);
const GRAD_BUDGET: Duration = Duration::from_secs(180);
const DESK_BUDGET: Duration = Duration::from_secs(2 * 3600);
const DESK_PAIRS: usize = 200;
const DESK_HOLDOUT: usize = 20;
const DESK_SIZE: usize = 64;
const ABLATION_STEPS: usize = 1000;
const ABLATION_SEEDS: [u64; 3] = [0, 1, 2];

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn desk_split() -> Split {
    Dataset::synthetic(DESK_PAIRS, DESK_SIZE, DESK_SIZE, &DegradationTag::Rain, 0)
        .unwrap()
        .split(DESK_HOLDOUT)
        .unwrap()
}

/// `y_t = sum_{j <= t} (sum_s c_s abar_s^j bbar_s) x_{t-j}`, written out here.
fn lti_convolution(a: &[f64], delta: f64, b: &[f64], c: &[f64], x: &[f64]) -> Vec<f64> {
    let kernel: Vec<f64> = (0..x.len())
        .map(|j| {
            (0..a.len())
                .map(|s| c[s] * (delta * a[s] * j as f64).exp() * delta * b[s])
                .sum()
        })
        .collect();
    (0..x.len())
        .map(|t| (0..=t).map(|j| kernel[j] * x[t - j]).sum())
        .collect()
}

fn criterion_lti() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let (l, n, ch) = (
            rng.random_range(1..=64),
            rng.random_range(1..=8),
            rng.random_range(1..=4),
        );
        let a: Vec<f64> = (0..ch * n).map(|_| -rng.random_range(0.05..4.0)).collect();
        let delta: Vec<f64> = (0..ch).map(|_| rng.random_range(1e-3..1.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let c: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x: Vec<f64> = (0..l * ch).map(|_| rng.random_range(-1.0..1.0)).collect();

        let delta_t = Tensor::from_fn(&[l, ch], |i| delta[i % ch]);
        let a_t = Tensor::new(vec![ch, n], a.clone()).unwrap();
        let b_t = Tensor::from_fn(&[l, ch, n], |i| b[i % n]);
        let c_t = Tensor::from_fn(&[l, ch, n], |i| c[i % n]);
        let (abar, bbar) = discretize_zoh(&delta_t, &a_t, &b_t).unwrap();
        let rec = recurrence(
            &abar,
            &bbar,
            &c_t,
            &Tensor::new(vec![l, ch], x.clone()).unwrap(),
        )
        .unwrap();
        for k in 0..ch {
            let xs: Vec<f64> = (0..l).map(|t| x[t * ch + k]).collect();
            let want = lti_convolution(&a[k * n..(k + 1) * n], delta[k], &b, &c, &xs);
            for t in 0..l {
                worst = worst.max((rec.data()[t * ch + k] - want[t]).abs());
            }
        }
    }
    let elapsed = start.elapsed();
    outcome(
        worst <= LTI_TOL && elapsed < LTI_BUDGET,
        format!("50 systems, max |recurrence - convolution| = {worst:.2e} (tol {LTI_TOL:.0e}), {elapsed:.2?}"),
    )
}

fn criterion_gradients() -> Outcome {
    let start = Instant::now();
    let checks = gradient_checks();
    let elapsed = start.elapsed();
    let names: Vec<String> = checks
        .iter()
        .map(|c| format!("{}: {}", c.name, if c.passed { "ok" } else { "FAILED" }))
        .collect();
    for c in &checks {
        println!("    {c}");
    }
    let all = checks.iter().all(|c| c.passed) && checks.len() == 5;
    outcome(
        all && elapsed < GRAD_BUDGET,
        format!("{} in {elapsed:.1?}", names.join(", ")),
    )
}

fn criterion_structure() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut failures = Vec::new();

    let tape = Tape::inference();
    for (h, w, win) in [(8, 8, 4), (16, 12, 4), (6, 9, 3)] {
        let x = Tensor::uniform(&[2, 3, h, w], -1.0, 1.0, &mut rng);
        let parts = window_partition(&tape.constant(x.clone()), win, win).unwrap();
        if window_merge(&parts, h, w, win, win).unwrap().to_tensor() != x {
            failures.push(format!("partition/merge {h}x{w}/{win}"));
        }
    }
    for dir in ScanDirection::ALL {
        let x = Tensor::uniform(&[4, 5, 7], -1.0, 1.0, &mut rng);
        if inverse_reorder(&reorder(&x, dir).unwrap(), 5, 7, dir).unwrap() != x {
            failures.push(format!("reorder {dir}"));
        }
    }

    let mut store = ParamStore::new();
    let block = Mwsa::new(&mut Builder::new(&mut store, &mut rng), "m", 8, 2, 4, 4.0);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        store.get_mut(id).data_mut().fill(0.0);
    }
    let x = Tensor::uniform(&[1, 8, 8, 8], -1.0, 1.0, &mut rng);
    let y = block
        .forward(
            &store.bind(&tape, NormMode::Eval),
            &tape.constant(x.clone()),
        )
        .unwrap();
    if y.to_tensor() != x {
        failures.push("zero-weight mwsa".into());
    }

    let mut model = Model::new(ModelConfig::default()).unwrap();
    model.zero_heads();
    for shape in [[1, 3, 32, 32], [1, 3, 50, 50]] {
        let x = Tensor::uniform(&shape, 0.0, 1.0, &mut rng);
        if model.restore(&x).unwrap() != x {
            failures.push(format!("zero-head model {shape:?}"));
        }
    }
    outcome(
        failures.is_empty(),
        if failures.is_empty() {
            "partition/merge, reorder/inverse, zero-weight mwsa, zero-head model: all bit-exact"
                .into()
        } else {
            format!("not exact: {}", failures.join(", "))
        },
    )
}

fn criterion_metrics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let gt = Tensor::uniform(&[3, 32, 32], 0.0, 0.9, &mut rng);
    let p = psnr(&gt.map(|v| v + 0.1), &gt, 1.0).unwrap();
    let s = ssim(&gt, &gt, 1.0).unwrap();
    let clean = Tensor::uniform(&[1, 3, 32, 32], 0.0, 1.0, &mut rng);
    let pyr = target_pyramid(&clean, 3).unwrap();
    let tape = Tape::inference();
    let preds: Vec<_> = pyr.iter().map(|t| tape.constant(t.clone())).collect();
    let l = total_loss(&preds, &pyr, FREQ_WEIGHT)
        .unwrap()
        .value()
        .item();
    outcome(
        (p - 20.0).abs() <= 0.01 && (s - 1.0).abs() <= 1e-6 && l == 0.0,
        format!("PSNR(+0.1) = {p:.4} dB, SSIM(x, x) = {s:.8}, loss(perfect) = {l}"),
    )
}

fn criterion_calibration() -> Outcome {
    let report = Model::new(ModelConfig::default())
        .unwrap()
        .flop_count(256, 256, 1);
    println!("{report}");
    let params = report.total_params() as f64 / 1e6;
    let flops = report.total_flops() as f64 / 1e9;
    let (dp, df) = ((params - 2.80) / 2.80, (flops - 25.16) / 25.16);
    outcome(
        dp.abs() <= 0.15 && df.abs() <= 0.15,
        format!(
            "{params:.3} M params ({:+.1}%), {flops:.3} GFLOPs at 256x256 ({:+.1}%), band +/-15%",
            dp * 100.0,
            df * 100.0
        ),
    )
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn criterion_desk(split: &Split) -> Outcome {
    let start = Instant::now();
    let mut model = Model::new(ModelConfig::default()).unwrap();
    let cfg = TrainConfig::default();
    let (report, _) = train(&mut model, split, &cfg, None, &OutputDir(None)).unwrap();
    let elapsed = start.elapsed();
    let (step, ev) = report.evals.last().expect("final evaluation");
    let input = ev.mean_input_psnr.expect("paired inputs");
    let gain = ev.mean_psnr - input;
    let initial = report.losses[0];
    // The last steps are single random crops; average them to read the level.
    let final_loss = mean(&report.losses[report.losses.len() - 20..]);
    for (s, e) in &report.evals {
        println!(
            "    step {s}: held-out PSNR {:.3} dB, SSIM {:.4}",
            e.mean_psnr, e.mean_ssim
        );
    }
    outcome(
        gain >= 5.0 && final_loss < 0.3 * initial && elapsed <= DESK_BUDGET,
        format!(
            "{} train / {} held-out pairs, {step} steps: PSNR {:.3} dB vs input {input:.3} dB (gain {gain:+.2} dB, need +5); \
             loss {initial:.4} -> {final_loss:.4} (ratio {:.3}, need < 0.3); {elapsed:.0?}",
            split.train.len(),
            split.test.len(),
            ev.mean_psnr,
            final_loss / initial
        ),
    )
}

fn ablation_psnr(split: &Split, model_cfg: ModelConfig, seed: u64) -> f64 {
    let mut model = Model::new(ModelConfig {
        init_seed: seed,
        ..model_cfg
    })
    .unwrap();
    let cfg = TrainConfig {
        total_steps: ABLATION_STEPS,
        eval_every: 0,
        seed,
        ..TrainConfig::default()
    };
    let (report, _): (TrainReport, _) =
        train(&mut model, split, &cfg, None, &OutputDir(None)).unwrap();
    report.evals.last().expect("final evaluation").1.mean_psnr
}

fn criterion_ablation(split: &Split) -> Outcome {
    let variants = [
        ("baseline (4 blocks)", ModelConfig::default()),
        (
            "no mwsa",
            ModelConfig {
                no_mwsa: true,
                ..ModelConfig::default()
            },
        ),
        (
            "2 blocks",
            ModelConfig {
                blocks_per_stage: 2,
                ..ModelConfig::default()
            },
        ),
    ];
    let mut means = Vec::new();
    for (name, cfg) in variants {
        let scores: Vec<f64> = ABLATION_SEEDS
            .iter()
            .map(|&s| ablation_psnr(split, cfg.clone(), s))
            .collect();
        println!(
            "    {name:<20} PSNR per seed {scores:.3?} mean {:.3} dB",
            mean(&scores)
        );
        means.push(mean(&scores));
    }
    let (base, no_mwsa, two) = (means[0], means[1], means[2]);
    outcome(
        no_mwsa <= base && two <= base,
        format!(
            "{ABLATION_STEPS} steps x {} seeds: baseline {base:.3}, no-mwsa {no_mwsa:.3}, 2-block {two:.3} dB",
            ABLATION_SEEDS.len()
        ),
    )
}

fn loss_bits(r: &TrainReport) -> Vec<u64> {
    r.losses.iter().map(|v| v.to_bits()).collect()
}

fn param_bits(m: &Model) -> Vec<u64> {
    m.store
        .ids()
        .flat_map(|id| {
            m.store
                .get(id)
                .data()
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>()
        })
        .collect()
}

fn criterion_determinism(split: &Split) -> Outcome {
    let cfg = TrainConfig {
        total_steps: 12,
        eval_every: 0,
        ..TrainConfig::default()
    };
    let run = || {
        let mut m = Model::new(ModelConfig::default()).unwrap();
        let (r, s) = train(&mut m, split, &cfg, None, &OutputDir(None)).unwrap();
        (m, r, s)
    };
    let (m1, r1, s1) = run();
    let (m2, r2, _) = run();
    let same_curves = loss_bits(&r1) == loss_bits(&r2) && param_bits(&m1) == param_bits(&m2);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("half.ckpt");
    let mut m = Model::new(ModelConfig::default()).unwrap();
    let (first, state) = train_until(&mut m, split, &cfg, None, &OutputDir(None), 6).unwrap();
    save_training_checkpoint(&m, &cfg, &state, &path).unwrap();
    drop(m);
    let (mut resumed, rcfg, rstate) = load_training_checkpoint(&path).unwrap();
    let (rest, final_state) =
        train(&mut resumed, split, &rcfg, Some(rstate), &OutputDir(None)).unwrap();
    let mut spliced = loss_bits(&first);
    spliced.extend(loss_bits(&rest));
    let resume_ok = spliced == loss_bits(&r1)
        && param_bits(&resumed) == param_bits(&m1)
        && final_state.adam == s1.adam;

    // Tiny model too, so the check does not hinge on one configuration.
    let tiny = || {
        let mut m = Model::new(tiny_model_config()).unwrap();
        train(&mut m, split, &cfg, None, &OutputDir(None))
            .unwrap()
            .0
    };
    let tiny_ok = loss_bits(&tiny()) == loss_bits(&tiny());
    outcome(
        same_curves && resume_ok && tiny_ok,
        format!(
            "repeat run bit-identical: {same_curves}; save at 6/12, load, resume bit-identical: {resume_ok}; tiny model repeat: {tiny_ok}"
        ),
    )
}

fn main() {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("error"))
        .try_init();
    // `cargo test` passes harness flags such as `--nocapture` or a filter; a
    // filter that does not name this target skips the heavy runs.
    let filters: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    if !filters.is_empty() && !filters.iter().any(|f| "acceptance".contains(f.as_str())) {
        return;
    }
    let split = desk_split();
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("1 lti scan-kernel identity", Box::new(criterion_lti)),
        ("2 gradient suite", Box::new(criterion_gradients)),
        ("3 structural identities", Box::new(criterion_structure)),
        ("4 metric anchors", Box::new(criterion_metrics)),
        ("5 size calibration", Box::new(criterion_calibration)),
        ("6 desk training", Box::new(|| criterion_desk(&split))),
        (
            "7 ablation direction",
            Box::new(|| criterion_ablation(&split)),
        ),
        (
            "8 determinism and resume",
            Box::new(|| criterion_determinism(&split)),
        ),
    ];
    let mut failed = 0;
    let mut lines = Vec::new();
    for (name, f) in &criteria {
        let start = Instant::now();
        let out = f();
        let line = format!(
            "[{}] criterion {name}: {} [{:.1?}]",
            if out.passed { "PASS" } else { "FAIL" },
            out.detail,
            start.elapsed()
        );
        println!("{line}");
        lines.push(line);
        failed += usize::from(!out.passed);
    }
    println!("\nacceptance summary");
    for l in &lines {
        println!("{l}");
    }
    println!("{} criteria, {failed} failed", criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
