//! Command-level round trips: determinism under a fixed seed, the
//! quantizer's storage ratio and error bound, bench reporting, and the
//! documented error paths.

use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use shiftnet::nn::conv::WeightMode;
use shiftnet::nn::param::IdGen;

use shiftnet_cli::checkpoint::{self, NetMeta};
use shiftnet_cli::commands::{self, EvalSource};
use shiftnet_cli::config::{DataSpec, Domain, NetShape, SyntheticPattern, TrainConfig};

// The op counters are process-global; evaluation measures deltas, so
// tests that run kernels must not overlap.
static COUNTER_LOCK: Mutex<()> = Mutex::new(());

fn mini_net_shape() -> NetShape {
    NetShape {
        cells: 2,
        init_channels: 4,
        nodes: 4,
        reduction_positions: Some(vec![1]),
        stem_multiplier: 3,
    }
}

fn mini_train_config(dir: &std::path::Path, seed: u64, domain: Domain) -> TrainConfig {
    TrainConfig {
        seed,
        out_dir: dir.to_path_buf(),
        genotype: "builtin:cifar10-best".into(),
        domain,
        epochs: 2,
        batch_size: 16,
        optimizer: shiftnet::optim::OptKind::RAdam,
        lr: 0.01,
        weight_decay: 3e-4,
        shift_l2_lambda: 3e-4,
        ste: Default::default(),
        net: mini_net_shape(),
        data: DataSpec::Synthetic2d {
            pattern: SyntheticPattern::Gaussians,
            samples: 64,
            test_samples: 32,
            height: 8,
            width: 8,
            noise: 0.3,
        },
    }
}

#[test]
fn train_is_deterministic_under_a_fixed_seed() {
    let _guard = COUNTER_LOCK.lock().unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let a = commands::cmd_train(&mini_train_config(&tmp.path().join("a"), 5, Domain::Shift))
        .unwrap();
    let b = commands::cmd_train(&mini_train_config(&tmp.path().join("b"), 5, Domain::Shift))
        .unwrap();
    assert_eq!(
        std::fs::read(&a.checkpoint).unwrap(),
        std::fs::read(&b.checkpoint).unwrap(),
        "checkpoints differ across identical runs"
    );
    assert_eq!(
        std::fs::read(&a.metrics_path).unwrap(),
        std::fs::read(&b.metrics_path).unwrap()
    );
}

#[test]
fn eval_is_deterministic_and_untrained_nets_score_chance() {
    let _guard = COUNTER_LOCK.lock().unwrap();
    let tmp = tempfile::tempdir().unwrap();
    // untrained shift network, saved straight to a checkpoint
    let shape = mini_net_shape();
    let genotype = shiftnet::genotype::builtin("cifar10-best").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut ids = IdGen::new();
    let net = shiftnet::genotype::instantiate(
        &genotype,
        &shape.to_supernet_cfg(1, 2),
        WeightMode::ShiftQuantized {
            ste: Default::default(),
        },
        &mut ids,
        &mut rng,
    )
    .unwrap();
    let ckpt = tmp.path().join("untrained.ckpt");
    checkpoint::save(
        &ckpt,
        &NetMeta {
            domain: Domain::Shift,
            genotype,
            net: shape,
            in_channels: 1,
            classes: 2,
        },
        &net.collect_state(),
    )
    .unwrap();

    let source = EvalSource::Spec {
        spec: DataSpec::Synthetic2d {
            pattern: SyntheticPattern::Gaussians,
            samples: 4,
            test_samples: 128,
            height: 8,
            width: 8,
            noise: 0.3,
        },
        seed: 9,
    };
    let a = commands::cmd_eval(&ckpt, &source, 32).unwrap();
    let b = commands::cmd_eval(&ckpt, &source, 32).unwrap();
    assert_eq!(a.prediction_hash, b.prediction_hash);
    assert_eq!(a.predictions, b.predictions);
    // balanced two-class set: an untrained network sits at chance
    assert!(
        (0.3..=0.7).contains(&a.top1),
        "untrained accuracy {} far from chance",
        a.top1
    );
    assert_eq!(a.counts.weight_mults, 0);
}

#[test]
fn quantize_ratio_error_bound_and_round_trip() {
    let _guard = COUNTER_LOCK.lock().unwrap();
    let tmp = tempfile::tempdir().unwrap();
    // a real-domain control checkpoint with known weights
    let cfg = mini_train_config(&tmp.path().join("real"), 1, Domain::Real);
    let outcome = commands::cmd_train(&cfg).unwrap();

    let quantized = tmp.path().join("quantized.ckpt");
    let report = tmp.path().join("report.csv");
    let q = commands::cmd_quantize(&outcome.checkpoint, &quantized, Some(&report)).unwrap();
    assert!(
        (6.3..=6.45).contains(&q.compression_ratio),
        "ratio {}",
        q.compression_ratio
    );
    // per-layer error bound: inside the representable magnitude range
    // the nearest power of two is within |w| * (sqrt(2) - 1); below it
    // the error is at most 2^-15, above it the weight clamps to 1
    let per_weight_bound = |w: f64| -> f64 {
        let a = w.abs();
        if a <= 2f64.powi(-14) {
            2f64.powi(-15)
        } else if a <= 1.0 {
            a * (2f64.sqrt() - 1.0)
        } else {
            a - 1.0
        }
    };
    let (_, map) = checkpoint::load(&outcome.checkpoint).unwrap();
    for layer in &q.layers {
        let shiftnet::nn::state::TensorPayload::Real(w) = &map[&layer.name] else {
            panic!("weight tensor missing")
        };
        let bound = w.iter().fold(0.0f64, |m, &v| m.max(per_weight_bound(v)));
        assert!(
            layer.max_abs_err <= bound + 1e-12,
            "{}: err {} > bound {}",
            layer.name,
            layer.max_abs_err,
            bound
        );
    }
    let text = std::fs::read_to_string(&report).unwrap();
    assert_eq!(text.lines().count(), q.layers.len() + 1);

    // the quantized checkpoint evaluates on the fixed path
    let source = EvalSource::Spec {
        spec: cfg.data.clone(),
        seed: cfg.seed,
    };
    let e = commands::cmd_eval(&quantized, &source, 32).unwrap();
    assert_eq!(e.counts.weight_mults, 0);

    // exact powers of two survive quantization unchanged
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let exact: Vec<f64> = (0..64)
        .map(|_| {
            let p = rng.random_range(-14..=0);
            let s = if rng.random::<bool>() { 1.0 } else { -1.0 };
            s * (p as f64).exp2()
        })
        .collect();
    for &w in &exact {
        assert_eq!(shiftnet::shiftparam::nearest_shift_weight(w).w, w);
    }
}

#[test]
fn quantize_rejects_shift_input_and_eval_rejects_real_input() {
    let _guard = COUNTER_LOCK.lock().unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let shift_out =
        commands::cmd_train(&mini_train_config(&tmp.path().join("s"), 2, Domain::Shift))
            .unwrap();
    let err = commands::cmd_quantize(
        &shift_out.checkpoint,
        &tmp.path().join("x.ckpt"),
        None,
    )
    .unwrap_err()
    .to_string();
    assert!(err.contains("already in the shift domain"), "{err}");

    let real_out =
        commands::cmd_train(&mini_train_config(&tmp.path().join("r"), 2, Domain::Real))
            .unwrap();
    let source = EvalSource::Spec {
        spec: DataSpec::Synthetic2d {
            pattern: SyntheticPattern::Gaussians,
            samples: 4,
            test_samples: 16,
            height: 8,
            width: 8,
            noise: 0.3,
        },
        seed: 1,
    };
    let err = commands::cmd_eval(&real_out.checkpoint, &source, 16)
        .unwrap_err()
        .to_string();
    assert!(err.contains("real-domain"), "{err}");
}

#[test]
fn eval_rejects_mismatched_datasets() {
    let _guard = COUNTER_LOCK.lock().unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let out = commands::cmd_train(&mini_train_config(&tmp.path().join("t"), 4, Domain::Shift))
        .unwrap();
    // 3-channel data against a 1-channel checkpoint
    let dir = tmp.path().join("cifar");
    std::fs::create_dir_all(&dir).unwrap();
    let mut rec = vec![1u8];
    rec.extend(std::iter::repeat_n(7u8, 3072));
    std::fs::write(dir.join("data_batch_1.bin"), &rec).unwrap();
    let source = EvalSource::Spec {
        spec: DataSpec::RawBinaryCifar {
            dir,
            normalize_mean: vec![0.5, 0.5, 0.5],
            normalize_std: vec![0.5, 0.5, 0.5],
        },
        seed: 0,
    };
    let err = commands::cmd_eval(&out.checkpoint, &source, 8)
        .unwrap_err()
        .to_string();
    assert!(err.contains("channels"), "{err}");
}

#[test]
fn bench_writes_one_csv_row_per_size() {
    let _guard = COUNTER_LOCK.lock().unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let csv_path = tmp.path().join("bench.csv");
    let rows = commands::cmd_bench(&[16, 24, 48], 1, 3, Some(&csv_path)).unwrap();
    assert_eq!(rows.len(), 3);
    let text = std::fs::read_to_string(&csv_path).unwrap();
    assert_eq!(text.lines().count(), 4);
    for r in &rows {
        assert_eq!(r.shift_counts.weight_mults, 0);
        assert!(r.max_abs_diff <= r.tolerance);
    }
}

#[test]
fn export_genotype_round_trips_through_files() {
    let _guard = COUNTER_LOCK.lock().unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let json_path = tmp.path().join("g.json");
    commands::cmd_export("builtin:cifar10-best", "json", Some(&json_path)).unwrap();
    let text = commands::cmd_export(json_path.to_str().unwrap(), "table", None).unwrap();
    assert!(text.contains("('sep_conv_3x3', 0), ('dil_conv_5x5', 4)"));
    let err = commands::cmd_export("builtin:nope", "json", None)
        .unwrap_err()
        .to_string();
    assert!(err.contains("unknown builtin"));
}
