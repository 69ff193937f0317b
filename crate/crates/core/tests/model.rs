use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use restormixer::config::KeyValues;
use restormixer::model::checkpoint::Checkpoint;
use restormixer::model::{Model, ModelConfig, Task};
use restormixer::ops::NormMode;
use restormixer::verify::tiny_model_config;
use restormixer::{Error, Tape, Tensor};

fn input(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn outputs_follow_the_scale_pyramid() {
    let model = Model::new(tiny_model_config()).unwrap();
    let outs = model.predict(&input(&[2, 3, 32, 48], 1)).unwrap();
    let shapes: Vec<_> = outs.iter().map(|t| t.shape().to_vec()).collect();
    assert_eq!(
        shapes,
        vec![vec![2, 3, 32, 48], vec![2, 3, 16, 24], vec![2, 3, 8, 12]]
    );
}

#[test]
fn odd_sizes_are_padded_and_cropped_back() {
    let model = Model::new(tiny_model_config()).unwrap();
    assert_eq!(Model::padded_extent(50, 50), (64, 64));
    let outs = model.predict(&input(&[1, 3, 50, 50], 2)).unwrap();
    assert_eq!(outs[0].shape(), &[1, 3, 50, 50]);
    assert_eq!(outs[1].shape(), &[1, 3, 25, 25]);
    assert_eq!(outs[2].shape(), &[1, 3, 13, 13]);
}

#[test]
fn zero_heads_restore_the_input_exactly() {
    let mut model = Model::new(tiny_model_config()).unwrap();
    model.zero_heads();
    for shape in [[1, 3, 16, 16], [1, 3, 50, 50], [2, 3, 17, 33]] {
        let x = input(&shape, 3);
        assert_eq!(model.restore(&x).unwrap(), x);
    }
}

#[test]
fn gradient_reaches_every_parameter() {
    let model = Model::new(tiny_model_config()).unwrap();
    let tape = Tape::new();
    let p = model.store.bind(&tape, NormMode::Train);
    let outs = model
        .forward(&p, &tape.constant(input(&[1, 3, 16, 16], 4)))
        .unwrap();
    let mut total = outs[0].abs_sum().unwrap();
    for o in &outs[1..] {
        total = total.add(&o.abs_sum().unwrap()).unwrap();
    }
    let grads = p.collect_grads(tape.backward(&total).unwrap());
    for (id, g) in model.store.ids().zip(grads) {
        let name = model.store.name(id);
        let g = g.unwrap_or_else(|| panic!("{name} received no gradient"));
        assert!(
            g.iter().any(|&v| v != 0.0),
            "{name} has an all-zero gradient"
        );
        assert!(
            g.iter().all(|v| v.is_finite()),
            "{name} has a non-finite gradient"
        );
    }
}

#[test]
fn eval_mode_is_deterministic() {
    let model = Model::new(ModelConfig {
        init_seed: 9,
        ..tiny_model_config()
    })
    .unwrap();
    let x = input(&[1, 3, 24, 24], 5);
    let a = model.predict(&x).unwrap();
    let b = model.predict(&x).unwrap();
    assert_eq!(a, b);
}

#[test]
fn init_seed_controls_parameters() {
    let a = Model::new(tiny_model_config()).unwrap();
    let b = Model::new(tiny_model_config()).unwrap();
    let c = Model::new(ModelConfig {
        init_seed: 1,
        ..tiny_model_config()
    })
    .unwrap();
    let first = a.store.ids().next().unwrap();
    assert_eq!(a.store.get(first), b.store.get(first));
    assert_ne!(a.store.get(first), c.store.get(first));
}

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    let mut model = Model::new(tiny_model_config()).unwrap();
    // Move batch-norm statistics away from their initial values.
    let tape = Tape::new();
    let p = model.store.bind(&tape, NormMode::Train);
    model
        .forward(&p, &tape.constant(input(&[2, 3, 16, 16], 6)))
        .unwrap();
    let updates = p.take_stat_updates();
    drop(p);
    model.store.apply_stat_updates(updates, 0.1);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    model.to_checkpoint(None, vec![]).save(&path).unwrap();
    let loaded = Model::from_checkpoint(&Checkpoint::load(&path).unwrap(), &[]).unwrap();
    assert_eq!(loaded.config, model.config);
    for id in model.store.ids() {
        let other = loaded.store.find(model.store.name(id)).unwrap();
        assert_eq!(
            model
                .store
                .get(id)
                .data()
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>(),
            loaded
                .store
                .get(other)
                .data()
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>()
        );
    }
    let stats_a: Vec<_> = model
        .store
        .stats_entries()
        .map(|(n, s)| (n.to_string(), s.clone()))
        .collect();
    let stats_b: Vec<_> = loaded
        .store
        .stats_entries()
        .map(|(n, s)| (n.to_string(), s.clone()))
        .collect();
    assert_eq!(stats_a, stats_b);
    let x = input(&[1, 3, 16, 16], 7);
    assert_eq!(model.predict(&x).unwrap(), loaded.predict(&x).unwrap());
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let model = Model::new(tiny_model_config()).unwrap();
    let bytes = model.to_checkpoint(None, vec![]).to_bytes();
    let mut flipped = bytes.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 0x10;
    assert!(matches!(
        Checkpoint::from_bytes(&flipped),
        Err(Error::Checkpoint(_))
    ));
    assert!(matches!(
        Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
        Err(Error::Checkpoint(_))
    ));
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    assert!(matches!(
        Checkpoint::from_bytes(&bad_magic),
        Err(Error::Checkpoint(_))
    ));

    let mut ckpt = model.to_checkpoint(None, vec![("stray".into(), Tensor::zeros(&[1]))]);
    assert!(Model::from_checkpoint(&ckpt, &[]).is_err());
    assert!(Model::from_checkpoint(&ckpt, &["stray"]).is_ok());
    ckpt.tensors.remove(0);
    assert!(Model::from_checkpoint(&ckpt, &["stray"]).is_err());
}

#[test]
fn count_report_matches_the_store() {
    for cfg in [
        tiny_model_config(),
        ModelConfig::default(),
        ModelConfig {
            blocks_per_stage: 2,
            ..ModelConfig::default()
        },
        ModelConfig {
            no_mwsa: true,
            blocks_per_stage: 3,
            ..ModelConfig::default()
        },
        ModelConfig {
            share_scan_params: true,
            ..ModelConfig::default()
        },
        ModelConfig {
            task: Task::SuperResolution(4),
            ..ModelConfig::default()
        },
    ] {
        let model = Model::new(cfg.clone()).unwrap();
        assert_eq!(
            model.param_count().total_params(),
            model.store.num_scalars(),
            "{cfg:?}"
        );
    }
}

#[test]
fn depth_variants_build() {
    for bps in [2, 4, 6] {
        let model = Model::new(ModelConfig {
            blocks_per_stage: bps,
            ..tiny_model_config()
        })
        .unwrap();
        assert_eq!(model.predict(&input(&[1, 3, 16, 16], 8)).unwrap().len(), 3);
    }
    let err = Model::new(ModelConfig {
        blocks_per_stage: 3,
        ..tiny_model_config()
    })
    .unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn ablation_switches_change_the_cost() {
    let base = Model::new(ModelConfig::default())
        .unwrap()
        .flop_count(256, 256, 1);
    let no_dsm = Model::new(ModelConfig {
        no_dsm: true,
        ..ModelConfig::default()
    })
    .unwrap()
    .flop_count(256, 256, 1);
    assert!(base.total_flops() < no_dsm.total_flops());
    assert_eq!(base.total_params(), no_dsm.total_params());
    for cfg in [
        ModelConfig {
            no_rdcnn: true,
            ..tiny_model_config()
        },
        ModelConfig {
            no_mwsa: true,
            ..tiny_model_config()
        },
    ] {
        let model = Model::new(cfg).unwrap();
        assert_eq!(
            model.predict(&input(&[1, 3, 16, 16], 9)).unwrap()[0].shape(),
            &[1, 3, 16, 16]
        );
    }
}

#[test]
fn super_resolution_upscales() {
    for r in [2, 4] {
        let mut model = Model::new(ModelConfig {
            task: Task::SuperResolution(r),
            ..tiny_model_config()
        })
        .unwrap();
        let x = input(&[1, 3, 10, 12], 10);
        let out = model.predict(&x).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].shape(), &[1, 3, 10 * r, 12 * r]);
        model.zero_heads();
        // With a silent head the output is the resampled input; constants stay constant.
        let flat = Tensor::full(&[1, 3, 16, 16], 0.25);
        let up = model.restore(&flat).unwrap();
        assert!(up.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }
}

#[test]
fn config_text_round_trip() {
    let cfg = ModelConfig {
        ssm_expand: 1.25,
        no_dsm: true,
        task: Task::SuperResolution(2),
        ..ModelConfig::default()
    };
    let text = cfg.to_kv().to_text();
    assert_eq!(
        ModelConfig::from_kv(&KeyValues::parse(&text).unwrap()).unwrap(),
        cfg
    );
    let bad = KeyValues::parse("base_channels = many\n").unwrap();
    assert!(matches!(ModelConfig::from_kv(&bad), Err(Error::Config(_))));
}

#[test]
fn default_calibration_totals() {
    let report = Model::new(ModelConfig::default())
        .unwrap()
        .flop_count(256, 256, 1);
    let params = report.total_params() as f64 / 1e6;
    let flops = report.total_flops() as f64 / 1e9;
    assert!((params - 2.80).abs() <= 0.15 * 2.80, "{params} M");
    assert!((flops - 25.16).abs() <= 0.15 * 25.16, "{flops} G");
}
