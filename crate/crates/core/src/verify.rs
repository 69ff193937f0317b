//! Self-checks runnable from the command line: finite-difference gradient
//! checks of every block and the full model, and exact or brute-force oracles
//! for scans, window tiling, metrics and the loss.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::emvm::{Emvm, EmvmConfig};
use crate::error::Result;
use crate::gradcheck::{grad_check, grad_check_params, GradCheckOptions, GradCheckReport};
use crate::loss::total_loss;
use crate::metrics::{psnr, ssim};
use crate::model::{Model, ModelConfig};
use crate::mwsa::{window_merge, window_partition, window_schedule, Mwsa};
use crate::nn::{Builder, ParamStore};
use crate::ops::{gelu_scalar, NormMode};
use crate::rdcnn::Rdcnn;
use crate::ssm::{
    causal_convolve, discretize_zoh, inverse_reorder, lti_kernel, recurrence, reorder,
    selective_scan, Projections, ScanDirection, SsmParams,
};
use crate::tensor::Tensor;

/// Gradient checks pass below this maximum relative error.
pub const GRAD_TOLERANCE: f64 = 1e-3;
/// Recurrence and kernel forms of a frozen scan agree to this.
pub const LTI_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Grads,
    Oracles,
    All,
}

impl FromStr for Suite {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "grads" => Ok(Suite::Grads),
            "oracles" => Ok(Suite::Oracles),
            "all" => Ok(Suite::All),
            _ => Err("expected grads, oracles or all".into()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed { "PASS" } else { "FAIL" };
        write!(
            f,
            "[{status}] {:<34} {} ({:.2}s)",
            self.name, self.detail, self.seconds
        )
    }
}

fn timed(name: &str, f: impl FnOnce() -> Result<(bool, String)>) -> Check {
    let start = Instant::now();
    let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    Check {
        name: name.to_string(),
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

pub fn run(suite: Suite) -> Vec<Check> {
    let mut out = Vec::new();
    if matches!(suite, Suite::Grads | Suite::All) {
        out.extend(gradient_checks());
    }
    if matches!(suite, Suite::Oracles | Suite::All) {
        out.extend(oracle_checks());
    }
    out
}

fn describe(reports: &[(&str, GradCheckReport)]) -> (bool, String) {
    let passed = reports.iter().all(|(_, r)| r.passed());
    let detail = reports
        .iter()
        .map(|(what, r)| format!("{what} {:.2e} over {}", r.max_rel_error, r.checked))
        .collect::<Vec<_>>()
        .join(", ");
    (passed, format!("max rel err: {detail}"))
}

fn opts(coords: usize) -> GradCheckOptions {
    GradCheckOptions::with_tolerance(GRAD_TOLERANCE).sampled(coords)
}

/// Weighted sum so every output element has a distinct sensitivity.
fn weighted<'t>(y: &Var<'t>, seed: u64) -> Result<Var<'t>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::uniform(y.shape(), -1.0, 1.0, &mut rng);
    y.mul(&y.tape().constant(w))
}

pub fn small_emvm_config() -> EmvmConfig {
    EmvmConfig {
        channels: 4,
        inner: 4,
        states: 3,
        mlp_ratio: 2.0,
        downsample: true,
        share_scan_params: false,
    }
}

/// A model small enough for exhaustive checks.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        base_channels: 4,
        blocks_per_stage: 2,
        window_base: 4,
        window_step: 4,
        ssm_states: 2,
        mlp_ratio: 2.0,
        head_width: 4,
        ..ModelConfig::default()
    }
}

fn model_objective<'t>(
    model: &Model,
    p: &crate::nn::Bound<'t, '_>,
    x: &Var<'t>,
) -> Result<Var<'t>> {
    let outs = model.forward(p, x)?;
    let mut acc = weighted(&outs[0], 40)?.sum()?;
    for (i, o) in outs.iter().enumerate().skip(1) {
        acc = acc.add(&weighted(o, 40 + i as u64)?.sum()?)?;
    }
    Ok(acc)
}

/// Pins a closure to the signature `grad_check` expects.
fn input_fn<F>(f: F) -> F
where
    F: for<'t> Fn(&Var<'t>) -> Result<Var<'t>>,
{
    f
}

/// Build one block into a fresh store.
fn block<T>(seed: u64, build: impl FnOnce(&mut Builder<'_>) -> T) -> (ParamStore, T) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = build(&mut Builder::new(&mut store, &mut rng));
    (store, b)
}

pub fn gradient_checks() -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut checks = Vec::new();

    let (store, rd) = block(1, |b| Rdcnn::new(b, "rdcnn", 4));
    let x = Tensor::uniform(&[2, 4, 6, 6], -1.0, 1.0, &mut rng);
    checks.push(timed("grad rdcnn", || {
        let f = input_fn(|v| {
            let tape = v.tape();
            let p = store.bind(tape, NormMode::Train);
            weighted(&rd.forward(&p, v)?, 1)
        });
        let input = grad_check(f, &x, &opts(120))?;
        let params = grad_check_params(
            &store,
            NormMode::Train,
            |p| weighted(&rd.forward(p, &p.tape().constant(x.clone()))?, 1),
            &opts(120),
        )?;
        Ok(describe(&[("input", input), ("params", params)]))
    }));

    let (store, em) = block(2, |b| Emvm::new(b, "emvm", small_emvm_config()));
    let x = Tensor::uniform(&[1, 4, 8, 8], -1.0, 1.0, &mut rng);
    checks.push(timed("grad emvm", || {
        let f = input_fn(|v| weighted(&em.forward(&store.bind(v.tape(), NormMode::Train), v)?, 2));
        let input = grad_check(f, &x, &opts(120))?;
        let params = grad_check_params(
            &store,
            NormMode::Train,
            |p| weighted(&em.forward(p, &p.tape().constant(x.clone()))?, 2),
            &opts(150),
        )?;
        Ok(describe(&[("input", input), ("params", params)]))
    }));

    let (store, mw) = block(3, |b| Mwsa::new(b, "mwsa", 4, 2, 4, 2.0));
    let x = Tensor::uniform(&[1, 4, 8, 8], -1.0, 1.0, &mut rng);
    checks.push(timed("grad mwsa", || {
        let f = input_fn(|v| weighted(&mw.forward(&store.bind(v.tape(), NormMode::Train), v)?, 3));
        let input = grad_check(f, &x, &opts(120))?;
        let params = grad_check_params(
            &store,
            NormMode::Train,
            |p| weighted(&mw.forward(p, &p.tape().constant(x.clone()))?, 3),
            &opts(150),
        )?;
        Ok(describe(&[("input", input), ("params", params)]))
    }));

    let x = Tensor::uniform(&[1, 3, 16, 16], 0.0, 1.0, &mut rng);
    checks.push(timed("grad full model", || {
        let model = Model::new(tiny_model_config())?;
        let f =
            input_fn(|v| model_objective(&model, &model.store.bind(v.tape(), NormMode::Train), v));
        let input = grad_check(f, &x, &opts(100))?;
        let params = grad_check_params(
            &model.store,
            NormMode::Train,
            |p| model_objective(&model, p, &p.tape().constant(x.clone())),
            &opts(200),
        )?;
        Ok(describe(&[("input", input), ("params", params)]))
    }));

    let targets = [
        Tensor::uniform(&[1, 3, 8, 8], 0.0, 1.0, &mut rng),
        Tensor::uniform(&[1, 3, 4, 4], 0.0, 1.0, &mut rng),
    ];
    let other = Tensor::uniform(&[1, 3, 4, 4], 0.0, 1.0, &mut rng);
    let x = Tensor::uniform(&[1, 3, 8, 8], 0.0, 1.0, &mut rng);
    checks.push(timed("grad total_loss", || {
        let f = input_fn(|v| {
            let coarse = v.tape().constant(other.clone());
            total_loss(&[v.clone(), coarse], &targets, crate::loss::FREQ_WEIGHT)
        });
        let r = grad_check(f, &x, &GradCheckOptions::with_tolerance(GRAD_TOLERANCE))?;
        Ok(describe(&[("prediction", r)]))
    }));
    checks
}

/// `y_t = C (sum_k abar^k bbar x_{t-k})` for constant parameters, from
/// recurrence and from the unrolled kernel.
fn lti_systems(count: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..count {
        let l = rng.random_range(1..=64);
        let n = rng.random_range(1..=8);
        let c = rng.random_range(1..=4);
        let delta_c: Vec<f64> = (0..c).map(|_| rng.random_range(1e-3..1.0)).collect();
        let a = Tensor::from_fn(&[c, n], |_| -rng.random_range(0.05..4.0));
        let b_n: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let c_n: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = Tensor::from_fn(&[l, c], |_| rng.random_range(-1.0..1.0));
        let delta = Tensor::from_fn(&[l, c], |i| delta_c[i % c]);
        let b = Tensor::from_fn(&[l, c, n], |i| b_n[i % n]);
        let cm = Tensor::from_fn(&[l, c, n], |i| c_n[i % n]);
        let (abar, bbar) = discretize_zoh(&delta, &a, &b)?;
        let rec = recurrence(&abar, &bbar, &cm, &x)?;
        let conv = causal_convolve(&lti_kernel(&abar, &bbar, &cm)?, &x)?;
        worst = worst.max(rec.max_abs_diff(&conv));
        let params = SsmParams {
            a_log: a.map(|v| (-v).ln()),
            d: Tensor::zeros(&[c]),
        };
        let frozen = Projections::Frozen {
            delta: delta_c.clone(),
            b: b_n.clone(),
            c: c_n.clone(),
        };
        let scanned = selective_scan(&x, &params, &frozen)?;
        worst = worst.max(scanned.max_abs_diff(&conv));
    }
    Ok(worst)
}

/// Multi-head window attention by explicit loops.
pub fn naive_window_attention(store: &ParamStore, block: &Mwsa, windows: &Tensor) -> Tensor {
    let (bw, t, c) = (windows.shape()[0], windows.shape()[1], windows.shape()[2]);
    let lin = |l: &crate::nn::Linear, v: &[f64]| -> Vec<f64> {
        let w = store.get(l.weight).data();
        let b = l
            .bias
            .map(|b| store.get(b).data().to_vec())
            .unwrap_or(vec![0.0; l.cout]);
        (0..l.cout)
            .map(|o| b[o] + (0..l.cin).map(|i| w[o * l.cin + i] * v[i]).sum::<f64>())
            .collect()
    };
    let dk = c / block.heads;
    let mut out = vec![0.0; bw * t * c];
    for ib in 0..bw {
        let tok = |i: usize| &windows.data()[(ib * t + i) * c..][..c];
        let q: Vec<Vec<f64>> = (0..t).map(|i| lin(&block.w_q, tok(i))).collect();
        let k: Vec<Vec<f64>> = (0..t).map(|i| lin(&block.w_k, tok(i))).collect();
        let v: Vec<Vec<f64>> = (0..t).map(|i| lin(&block.w_v, tok(i))).collect();
        for i in 0..t {
            let mut heads = vec![0.0; c];
            for h in 0..block.heads {
                let r = h * dk..(h + 1) * dk;
                let scores: Vec<f64> = (0..t)
                    .map(|j| r.clone().map(|d| q[i][d] * k[j][d]).sum::<f64>() / (dk as f64).sqrt())
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for d in r {
                    heads[d] = (0..t).map(|j| e[j] / z * v[j][d]).sum();
                }
            }
            out[(ib * t + i) * c..][..c].copy_from_slice(&lin(&block.w_o, &heads));
        }
    }
    Tensor::from_parts(vec![bw, t, c], out)
}

fn zero_store(store: &mut ParamStore) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        store.get_mut(id).data_mut().fill(0.0);
    }
}

pub fn oracle_checks() -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut checks = Vec::new();

    checks.push(timed("lti scan kernel identity", || {
        let worst = lti_systems(50, 5)?;
        Ok((
            worst < LTI_TOLERANCE,
            format!("50 systems, max |diff| {worst:.2e}"),
        ))
    }));

    let x = Tensor::uniform(&[2, 3, 8, 12], -1.0, 1.0, &mut rng);
    checks.push(timed("window partition/merge round trip", || {
        let tape = Tape::inference();
        let mut exact = true;
        for (wh, ww) in [(1, 1), (2, 3), (4, 4), (8, 12), (4, 6)] {
            let v = tape.constant(x.clone());
            let back = window_merge(&window_partition(&v, wh, ww)?, 8, 12, wh, ww)?;
            exact &= back.value() == &x;
        }
        Ok((exact, "5 window shapes, bit-exact".into()))
    }));

    let img = Tensor::uniform(&[3, 5, 7], -1.0, 1.0, &mut rng);
    checks.push(timed("scan reorder round trip", || {
        let mut exact = true;
        for dir in ScanDirection::ALL {
            exact &= inverse_reorder(&reorder(&img, dir)?, 5, 7, dir)? == img;
            let tape = Tape::inference();
            let v = tape.constant(img.clone().reshape(&[1, 3, 5, 7])?);
            let back = v.reorder_spatial(dir)?.inverse_reorder_spatial(5, 7, dir)?;
            exact &= back.value().data() == img.data();
        }
        Ok((exact, "4 directions, bit-exact".into()))
    }));

    let x = Tensor::uniform(&[1, 4, 8, 8], -1.0, 1.0, &mut rng);
    checks.push(timed("zero-weight mwsa is identity", || {
        let (mut store, mw) = block(4, |b| Mwsa::new(b, "mwsa", 4, 2, 4, 2.0));
        zero_store(&mut store);
        let tape = Tape::inference();
        let y = mw.forward(
            &store.bind(&tape, NormMode::Eval),
            &tape.constant(x.clone()),
        )?;
        Ok((y.value() == &x, "output == input".into()))
    }));

    let windows = Tensor::uniform(&[3, 16, 8], -1.0, 1.0, &mut rng);
    checks.push(timed("window attention vs naive loops", || {
        let (store, mw) = block(5, |b| Mwsa::new(b, "mwsa", 8, 2, 4, 2.0));
        let tape = Tape::inference();
        let fast = mw.window_attention(
            &store.bind(&tape, NormMode::Eval),
            &tape.constant(windows.clone()),
        )?;
        let diff = fast
            .value()
            .max_abs_diff(&naive_window_attention(&store, &mw, &windows));
        Ok((diff < 1e-9, format!("max |diff| {diff:.2e}")))
    }));

    let x = Tensor::uniform(&[1, 4, 6, 6], -2.0, 2.0, &mut rng);
    checks.push(timed("zero-weight rdcnn is GELU", || {
        let (mut store, rd) = block(6, |b| Rdcnn::new(b, "rdcnn", 4));
        zero_store(&mut store);
        let tape = Tape::inference();
        let y = rd.forward(
            &store.bind(&tape, NormMode::Eval),
            &tape.constant(x.clone()),
        )?;
        let expected = x.map(gelu_scalar);
        Ok((y.value() == &expected, "output == GELU(input)".into()))
    }));

    checks.push(timed("zero heads give identity restorer", || {
        let mut model = Model::new(tiny_model_config())?;
        model.zero_heads();
        let mut exact = true;
        for (h, w) in [(16, 16), (50, 50), (20, 36)] {
            let x = Tensor::uniform(&[1, 3, h, w], 0.0, 1.0, &mut rng);
            exact &= model.restore(&x)? == x;
        }
        Ok((exact, "16x16, 50x50, 20x36 bit-exact".into()))
    }));

    checks.push(timed("window schedule", || {
        let got: Vec<usize> = (0..3).map(|i| window_schedule(i, 8, 8)).collect();
        Ok((got == [8, 16, 24], format!("{got:?}")))
    }));

    let gt = Tensor::uniform(&[3, 32, 32], 0.0, 0.9, &mut rng);
    checks.push(timed("metric anchors", || {
        let p = psnr(&gt.map(|v| v + 0.1), &gt, 1.0)?;
        let s = ssim(&gt, &gt, 1.0)?;
        let ok = (p - 20.0).abs() <= 0.01 && (s - 1.0).abs() <= 1e-6;
        Ok((ok, format!("PSNR {p:.4} dB, SSIM {s:.8}")))
    }));

    checks.push(timed("loss is zero for perfect predictions", || {
        let tape = Tape::new();
        let targets = crate::loss::target_pyramid(&gt.clone().reshape(&[1, 3, 32, 32])?, 3)?;
        let preds: Vec<Var<'_>> = targets.iter().map(|t| tape.constant(t.clone())).collect();
        let l = total_loss(&preds, &targets, crate::loss::FREQ_WEIGHT)?
            .value()
            .item();
        Ok((l == 0.0, format!("loss {l}")))
    }));
    checks
}
