use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use restormixer::emvm::{Emvm, EmvmConfig};
use restormixer::error::Error;
use restormixer::mwsa::{effective_window, window_merge, window_partition, window_schedule, Mwsa};
use restormixer::nn::{Builder, ParamStore};
use restormixer::ops::{gelu_scalar, NormMode};
use restormixer::rdcnn::Rdcnn;
use restormixer::verify::naive_window_attention;
use restormixer::{Tape, Tensor};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn build<T>(seed: u64, f: impl FnOnce(&mut Builder<'_>) -> T) -> (ParamStore, T) {
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    let block = f(&mut Builder::new(&mut store, &mut r));
    (store, block)
}

fn emvm_config(downsample: bool) -> EmvmConfig {
    EmvmConfig {
        channels: 4,
        inner: 6,
        states: 3,
        mlp_ratio: 2.0,
        downsample,
        share_scan_params: false,
    }
}

fn run_emvm(store: &ParamStore, block: &Emvm, x: &Tensor) -> Tensor {
    let tape = Tape::inference();
    block
        .forward(
            &store.bind(&tape, NormMode::Eval),
            &tape.constant(x.clone()),
        )
        .unwrap()
        .to_tensor()
}

fn transpose_hw(x: &Tensor) -> Tensor {
    let (n, c, h, w) = x.dims4("t").unwrap();
    Tensor::from_fn(&[n, c, w, h], |i| {
        let (plane, y, xx) = (i / (w * h), (i / h) % w, i % h);
        x.data()[plane * h * w + xx * w + y]
    })
}

#[test]
fn emvm_zero_weights_collapse_to_input() {
    let (mut store, block) = build(1, |b| Emvm::new(b, "e", emvm_config(true)));
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        if !name.contains("gamma") {
            store.get_mut(id).data_mut().fill(0.0);
        }
    }
    let x = Tensor::uniform(&[2, 4, 8, 6], -1.0, 1.0, &mut rng(2));
    assert_eq!(run_emvm(&store, &block, &x), x);
}

#[test]
fn emvm_zero_input_stays_finite() {
    let (store, block) = build(3, |b| Emvm::new(b, "e", emvm_config(true)));
    let y = run_emvm(&store, &block, &Tensor::zeros(&[1, 4, 8, 8]));
    assert!(y.first_non_finite().is_none());
}

#[test]
fn emvm_rejects_odd_extent() {
    let (store, block) = build(3, |b| Emvm::new(b, "e", emvm_config(true)));
    let tape = Tape::inference();
    let x = tape.constant(Tensor::zeros(&[1, 4, 7, 8]));
    let err = block
        .forward(&store.bind(&tape, NormMode::Eval), &x)
        .unwrap_err();
    assert!(
        matches!(
            err,
            Error::Divisibility {
                what: "height",
                extent: 7,
                divisor: 2,
                ..
            }
        ),
        "{err}"
    );
}

/// With every branch at one resolution, transposing the map and exchanging
/// the horizontal and vertical scan parameters transposes the output.
#[test]
fn emvm_transposition_symmetry() {
    let (store, block) = build(4, |b| Emvm::new(b, "e", emvm_config(false)));
    let mut swapped = store.clone();
    for (a, b) in [("scan_hf.", "scan_vf."), ("scan_hb.", "scan_vb.")] {
        for id in store.ids() {
            let name = store.name(id);
            if let Some(rest) = name.strip_prefix(&format!("e.{a}")) {
                let other = store.find(&format!("e.{b}{rest}")).unwrap();
                *swapped.get_mut(id) = store.get(other).clone();
                *swapped.get_mut(other) = store.get(id).clone();
            }
        }
    }
    let x = Tensor::uniform(&[1, 4, 6, 10], -1.0, 1.0, &mut rng(5));
    let direct = transpose_hw(&run_emvm(&store, &block, &x));
    let via = run_emvm(&swapped, &block, &transpose_hw(&x));
    assert!(
        direct.max_abs_diff(&via) < 1e-6,
        "{}",
        direct.max_abs_diff(&via)
    );
}

/// Constant maps survive average pooling and bilinear upsampling exactly, so
/// once the scans carry no memory between positions the half-resolution
/// branches agree with full-resolution ones.
#[test]
fn emvm_no_dsm_matches_default_on_constant_input_without_scan_memory() {
    let (mut store, default) = build(6, |b| Emvm::new(b, "e", emvm_config(true)));
    let ids: Vec<_> = store
        .ids()
        .filter(|&id| store.name(id).ends_with("a_log"))
        .collect();
    for id in ids {
        store.get_mut(id).data_mut().fill(12.0);
    }
    let mut no_dsm = default.clone();
    no_dsm.config.downsample = false;
    let x = Tensor::from_fn(&[1, 4, 8, 8], |i| [0.3, -0.7, 1.1, 0.2][i / 64]);
    let a = run_emvm(&store, &default, &x);
    let b = run_emvm(&store, &no_dsm, &x);
    assert!(a.max_abs_diff(&b) < 1e-6, "{}", a.max_abs_diff(&b));
}

#[test]
fn emvm_flops_drop_with_downsampling() {
    let (_, with) = build(7, |b| Emvm::new(b, "e", emvm_config(true)));
    let (_, without) = build(7, |b| Emvm::new(b, "e", emvm_config(false)));
    assert!(with.macs(64, 64) < without.macs(64, 64));
    let per_token = with.scans[0].macs_per_token();
    assert_eq!(
        without.macs(64, 64) - with.macs(64, 64),
        3 * per_token * (64 * 64 - 32 * 32)
    );
}

#[test]
fn emvm_param_count_matches_store() {
    for share in [false, true] {
        let cfg = EmvmConfig {
            share_scan_params: share,
            ..emvm_config(true)
        };
        let (store, block) = build(8, |b| Emvm::new(b, "e", cfg));
        assert_eq!(block.param_count(), store.num_scalars());
    }
}

fn run_mwsa(store: &ParamStore, block: &Mwsa, x: &Tensor) -> Tensor {
    let tape = Tape::inference();
    block
        .forward(
            &store.bind(&tape, NormMode::Eval),
            &tape.constant(x.clone()),
        )
        .unwrap()
        .to_tensor()
}

#[test]
fn attention_rows_sum_to_one() {
    let (store, block) = build(9, |b| Mwsa::new(b, "m", 8, 2, 4, 2.0));
    let tape = Tape::inference();
    let w = tape.constant(Tensor::uniform(&[3, 16, 8], -2.0, 2.0, &mut rng(10)));
    let probs = block
        .attention_probabilities(&store.bind(&tape, NormMode::Eval), &w)
        .unwrap();
    for row in probs.value().data().chunks(16) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(row.iter().all(|&p| p >= 0.0));
    }
}

#[test]
fn attention_matches_naive_oracle() {
    let (store, block) = build(11, |b| Mwsa::new(b, "m", 8, 2, 4, 2.0));
    let windows = Tensor::uniform(&[2, 9, 8], -1.0, 1.0, &mut rng(12));
    let tape = Tape::inference();
    let fast = block
        .window_attention(
            &store.bind(&tape, NormMode::Eval),
            &tape.constant(windows.clone()),
        )
        .unwrap();
    assert!(
        fast.value()
            .max_abs_diff(&naive_window_attention(&store, &block, &windows))
            < 1e-9
    );
}

#[test]
fn single_token_attention_returns_projected_value() {
    let (store, block) = build(13, |b| Mwsa::new(b, "m", 4, 2, 1, 2.0));
    let windows = Tensor::uniform(&[5, 1, 4], -1.0, 1.0, &mut rng(14));
    let tape = Tape::inference();
    let p = store.bind(&tape, NormMode::Eval);
    let w = tape.constant(windows);
    let out = block.window_attention(&p, &w).unwrap();
    let expected = block
        .w_o
        .forward_last(&p, &block.w_v.forward_last(&p, &w).unwrap())
        .unwrap();
    assert!(out.value().max_abs_diff(expected.value()) < 1e-15);
}

#[test]
fn zero_query_weights_give_uniform_attention() {
    let (mut store, block) = build(15, |b| Mwsa::new(b, "m", 4, 1, 2, 2.0));
    store.get_mut(block.w_q.weight).data_mut().fill(0.0);
    let tape = Tape::inference();
    let w = tape.constant(Tensor::uniform(&[2, 4, 4], -1.0, 1.0, &mut rng(16)));
    let probs = block
        .attention_probabilities(&store.bind(&tape, NormMode::Eval), &w)
        .unwrap();
    assert!(probs
        .value()
        .data()
        .iter()
        .all(|&p| (p - 0.25).abs() < 1e-15));
}

#[test]
fn no_information_crosses_windows() {
    let (store, block) = build(17, |b| Mwsa::new(b, "m", 4, 2, 4, 2.0));
    let x = Tensor::uniform(&[1, 4, 8, 8], -1.0, 1.0, &mut rng(18));
    let mut poked = x.clone();
    // Perturb one pixel of the top-left window.
    poked.data_mut()[8 + 1] += 0.5;
    let (a, b) = (
        run_mwsa(&store, &block, &x),
        run_mwsa(&store, &block, &poked),
    );
    let tape = Tape::inference();
    let wa = window_partition(&tape.constant(a), 4, 4)
        .unwrap()
        .to_tensor();
    let wb = window_partition(&tape.constant(b), 4, 4)
        .unwrap()
        .to_tensor();
    let per = 16 * 4;
    assert_ne!(wa.data()[..per], wb.data()[..per]);
    assert_eq!(wa.data()[per..], wb.data()[per..]);
}

#[test]
fn whole_window_permutation_commutes() {
    let (store, block) = build(19, |b| Mwsa::new(b, "m", 4, 2, 8, 2.0));
    let x = Tensor::uniform(&[1, 4, 16, 16], -1.0, 1.0, &mut rng(20));
    // Cycle the four 8x8 windows: (0, 1, 2, 3) -> (3, 0, 1, 2).
    let permute = |t: &Tensor| {
        let tape = Tape::inference();
        let w = window_partition(&tape.constant(t.clone()), 8, 8)
            .unwrap()
            .to_tensor();
        let per = 64 * 4;
        let mut data = Vec::with_capacity(w.numel());
        for src in [3, 0, 1, 2] {
            data.extend_from_slice(&w.data()[src * per..(src + 1) * per]);
        }
        let shuffled = tape.constant(Tensor::new(vec![4, 64, 4], data).unwrap());
        window_merge(&shuffled, 16, 16, 8, 8).unwrap().to_tensor()
    };
    let a = permute(&run_mwsa(&store, &block, &x));
    let b = run_mwsa(&store, &block, &permute(&x));
    assert_eq!(a, b);
}

#[test]
fn zero_weight_mwsa_is_identity() {
    let (mut store, block) = build(21, |b| Mwsa::new(b, "m", 8, 2, 4, 2.0));
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        store.get_mut(id).data_mut().fill(0.0);
    }
    let x = Tensor::uniform(&[2, 8, 8, 12], -1.0, 1.0, &mut rng(22));
    assert_eq!(run_mwsa(&store, &block, &x), x);
}

#[test]
fn partition_examples() {
    let tape = Tape::inference();
    let x = Tensor::from_fn(&[1, 1, 4, 4], |i| i as f64);
    let w = window_partition(&tape.constant(x.clone()), 2, 2).unwrap();
    assert_eq!(w.shape(), &[4, 4, 1]);
    assert_eq!(&w.value().data()[..4], &[0.0, 1.0, 4.0, 5.0]);
    assert_eq!(&w.value().data()[12..], &[10.0, 11.0, 14.0, 15.0]);
    let whole = window_partition(&tape.constant(x.clone()), 4, 4).unwrap();
    assert_eq!(whole.value().data(), x.data());
    let err = window_partition(&tape.constant(Tensor::zeros(&[1, 1, 6, 4])), 4, 4).unwrap_err();
    assert!(
        matches!(err, Error::InvalidArgument { .. }) && err.to_string().contains("pad by 2"),
        "{err}"
    );
}

#[test]
fn window_schedule_and_clamp() {
    assert_eq!([0, 1, 2].map(|i| window_schedule(i, 8, 8)), [8, 16, 24]);
    assert_eq!(effective_window(16, 8, 8), (8, 8));
    assert_eq!(effective_window(8, 32, 4), (8, 4));
}

#[test]
fn fitted_forward_handles_small_and_ragged_maps() {
    let (store, block) = build(23, |b| Mwsa::new(b, "m", 4, 1, 8, 2.0));
    let tape = Tape::inference();
    let p = store.bind(&tape, NormMode::Eval);
    for (h, w) in [(4, 4), (12, 20), (8, 8)] {
        let x = tape.constant(Tensor::uniform(&[1, 4, h, w], -1.0, 1.0, &mut rng(24)));
        assert_eq!(block.forward_fitted(&p, &x).unwrap().shape(), &[1, 4, h, w]);
    }
}

fn run_rdcnn(store: &ParamStore, block: &Rdcnn, x: &Tensor) -> Tensor {
    let tape = Tape::inference();
    block
        .forward(
            &store.bind(&tape, NormMode::Eval),
            &tape.constant(x.clone()),
        )
        .unwrap()
        .to_tensor()
}

#[test]
fn rdcnn_receptive_field_is_five_by_five() {
    let (store, block) = build(25, |b| Rdcnn::new(b, "r", 3));
    let x = Tensor::uniform(&[1, 3, 11, 11], -1.0, 1.0, &mut rng(26));
    let mut poked = x.clone();
    poked.data_mut()[5 * 11 + 5] += 1.0;
    let (a, b) = (
        run_rdcnn(&store, &block, &x),
        run_rdcnn(&store, &block, &poked),
    );
    let mut changed = (usize::MAX, 0, usize::MAX, 0);
    for i in 0..a.numel() {
        if a.data()[i] != b.data()[i] {
            let (y, xx) = ((i / 11) % 11, i % 11);
            changed = (
                changed.0.min(y),
                changed.1.max(y),
                changed.2.min(xx),
                changed.3.max(xx),
            );
        }
    }
    assert_eq!(changed, (3, 7, 3, 7));
}

#[test]
fn rdcnn_zero_weights_give_gelu() {
    let (mut store, block) = build(27, |b| Rdcnn::new(b, "r", 4));
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        store.get_mut(id).data_mut().fill(0.0);
    }
    let x = Tensor::uniform(&[2, 4, 5, 5], -3.0, 3.0, &mut rng(28));
    assert_eq!(run_rdcnn(&store, &block, &x), x.map(gelu_scalar));
}

#[test]
fn rdcnn_counts() {
    for c in [1, 4, 32, 64] {
        let (store, block) = build(29, |b| Rdcnn::new(b, "r", c));
        assert_eq!(
            block.param_count(),
            9 * c * c + c + 9 * c + c * c + c + 4 * c
        );
        assert_eq!(block.param_count(), store.num_scalars());
    }
    let (store, block) = build(30, |b| Rdcnn::new(b, "r", 64));
    let separable = store.get(block.dw).numel() + store.get(block.pw.weight).numel();
    assert_eq!(separable, 4672);
    assert_eq!(store.get(block.conv3.weight).numel(), 36864);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn partition_merge_round_trip(n in 1usize..3, c in 1usize..4, bh in 1usize..4, bw in 1usize..4, wh in 1usize..5, ww in 1usize..5, seed in 0u64..1000) {
        let (h, w) = (bh * wh, bw * ww);
        let x = Tensor::uniform(&[n, c, h, w], -1.0, 1.0, &mut rng(seed));
        let tape = Tape::inference();
        let v = window_partition(&tape.constant(x.clone()), wh, ww).unwrap();
        prop_assert_eq!(v.shape(), &[n * bh * bw, wh * ww, c]);
        let back = window_merge(&v, h, w, wh, ww).unwrap().to_tensor();
        prop_assert_eq!(back, x);
    }

    #[test]
    fn emvm_preserves_shape(h in 2usize..9, w in 2usize..9, seed in 0u64..100) {
        let (h, w) = (2 * (h / 2), 2 * (w / 2));
        let (store, block) = build(seed, |b| Emvm::new(b, "e", emvm_config(true)));
        let x = Tensor::uniform(&[1, 4, h, w], -1.0, 1.0, &mut rng(seed));
        let y = run_emvm(&store, &block, &x);
        prop_assert_eq!(y.shape(), x.shape());
        prop_assert!(y.first_non_finite().is_none());
    }
}
