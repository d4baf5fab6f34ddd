//! End-to-end behavior of the search loop at toy scale.

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use shiftnet::genotype::{builtin, instantiate};
use shiftnet::nn::conv::WeightMode;
use shiftnet::nn::graph::Graph;
use shiftnet::nn::param::IdGen;
use shiftnet::optim::OptKind;
use shiftnet::search::{run_search, DataSplit, SearchRunCfg, SearchState};
use shiftnet::space::{ForwardPhase, OpKind, Supernet, SupernetCfg};

fn toy_cfg() -> SupernetCfg {
    SupernetCfg {
        cells: 2,
        init_channels: 4,
        nodes: 4,
        reduction_positions: Some(vec![1]),
        stem_multiplier: 3,
        in_channels: 1,
        classes: 2,
    }
}

fn two_blob_data(n: usize, seed: u64) -> DataSplit {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = ArrayD::zeros(IxDyn(&[n, 1, 8, 8]));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 2;
        let (cy, cx) = if class == 0 { (2.0, 2.0) } else { (5.0, 5.0) };
        for y in 0..8 {
            for x in 0..8 {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                images[[i, 0, y, x]] =
                    (-d2 / 4.0).exp() + 0.3 * rng.random_range(-1.0..1.0);
            }
        }
        labels.push(class);
    }
    DataSplit::new(images, labels).unwrap()
}

#[test]
fn zero_learning_rates_leave_parameters_unchanged() {
    let cfg = SearchRunCfg {
        operation_epochs: 1,
        topology_epochs: 1,
        batch_size: 4,
        seed: 3,
        w_optimizer: OptKind::RAdam,
        w_lr: 0.0,
        w_weight_decay: 0.0,
        shift_l2_lambda: 3e-4,
        arch_lr: 0.0,
        arch_weight_decay: 0.0,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = SearchState::new(cfg, &toy_cfg(), &mut rng).unwrap();
    let before: Vec<f64> = state
        .net
        .weight_params()
        .iter()
        .flat_map(|p| p.data.iter().cloned().collect::<Vec<_>>())
        .collect();
    let data = two_blob_data(8, 5);
    let idx: Vec<usize> = (0..4).collect();
    let (xt, yt) = data.gather(&idx);
    let idx2: Vec<usize> = (4..8).collect();
    let (xv, yv) = data.gather(&idx2);
    state.bilevel_step((&xt, &yt), (&xv, &yv)).unwrap();
    let after: Vec<f64> = state
        .net
        .weight_params()
        .iter()
        .flat_map(|p| p.data.iter().cloned().collect::<Vec<_>>())
        .collect();
    assert_eq!(before, after);
}

#[test]
fn bilevel_step_rejects_empty_batches() {
    let cfg = SearchRunCfg {
        operation_epochs: 1,
        topology_epochs: 1,
        batch_size: 4,
        seed: 3,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = SearchState::new(cfg, &toy_cfg(), &mut rng).unwrap();
    let x = ArrayD::zeros(IxDyn(&[0, 1, 8, 8]));
    let err = state.bilevel_step((&x, &[]), (&x, &[]));
    assert!(err.is_err());
}

#[test]
fn alpha_gradient_is_zero_when_all_candidates_output_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut ids = IdGen::new();
    let mut net = Supernet::new(
        SupernetCfg {
            cells: 1,
            init_channels: 4,
            nodes: 2,
            reduction_positions: Some(vec![]),
            stem_multiplier: 1,
            in_channels: 1,
            classes: 2,
        },
        &mut ids,
        &mut rng,
        WeightMode::ShiftQuantized {
            ste: Default::default(),
        },
    )
    .unwrap();
    // All-zero input: every candidate output is exactly zero, so the
    // operation logits receive exactly zero gradient.
    let mut g = Graph::new();
    let x = g.constant(ArrayD::zeros(IxDyn(&[2, 1, 6, 6])));
    let logits = net
        .forward(&mut g, x, true, ForwardPhase::Operation)
        .unwrap();
    let loss = g.cross_entropy(logits, &[0, 1]);
    g.backward(loss);
    for p in net.arch_params(false) {
        if let Some(gr) = g.param_grad(p.id) {
            assert!(gr.iter().all(|&v| v == 0.0), "nonzero alpha grad {gr:?}");
        }
    }
}

#[test]
fn shift_exponents_stay_clamped_and_alpha_normalized_after_steps() {
    let cfg = SearchRunCfg {
        operation_epochs: 1,
        topology_epochs: 1,
        batch_size: 8,
        seed: 11,
        w_lr: 0.5, // aggressive on purpose: the projection must hold anyway
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = SearchState::new(cfg, &toy_cfg(), &mut rng).unwrap();
    let data = two_blob_data(16, 13);
    for step in 0..3 {
        let ti: Vec<usize> = (0..8).collect();
        let vi: Vec<usize> = (8..16).collect();
        let (xt, yt) = data.gather(&ti);
        let (xv, yv) = data.gather(&vi);
        state.bilevel_step((&xt, &yt), (&xv, &yv)).unwrap();
        let _ = step;
    }
    state.net.visit_shift_pairs(&mut |pair| {
        for &p in pair.p.data.iter() {
            assert!((-15.0..=0.0).contains(&p), "P escaped the box: {p}");
        }
        for &s in pair.s.data.iter() {
            assert!((-1.5..=1.5).contains(&s), "S escaped the box: {s}");
        }
    });
    // per-edge, per-group softmax stays normalized after updates
    for arch in [&state.net.arch_normal, &state.net.arch_reduce] {
        for gl in &arch.edge_logits {
            for logits in [&gl.conv.data, &gl.topo.data] {
                let sm = shiftnet::nn::graph::softmax1d(logits, 1.0);
                assert!((sm.sum() - 1.0).abs() <= 1e-6);
            }
        }
    }
}

#[test]
fn toy_search_emits_valid_genotype_and_is_deterministic() {
    let run_cfg = SearchRunCfg {
        operation_epochs: 1,
        topology_epochs: 2,
        batch_size: 8,
        seed: 21,
        ..Default::default()
    };
    let data = two_blob_data(32, 9);
    let a = run_search(&run_cfg, &toy_cfg(), &data).unwrap();
    let b = run_search(&run_cfg, &toy_cfg(), &data).unwrap();
    a.genotype.validate().unwrap();
    assert_eq!(a.genotype, b.genotype);
    assert_eq!(a.metrics.len(), 3);
    assert_eq!(a.metrics[0].phase.as_str(), "operation");
    assert_eq!(a.metrics[1].phase.as_str(), "topology");
    assert!(a.metrics[1].temperature.unwrap() > a.metrics[2].temperature.unwrap());
    // derived genotype: per node exactly 2 entries, distinct predecessors
    for node in a.genotype.normal.iter().chain(a.genotype.reduce.iter()) {
        assert_eq!(node.len(), 2);
        assert_ne!(node[0].pred(), node[1].pred());
        assert_ne!(node[0].op(), OpKind::Zero);
        assert_ne!(node[1].op(), OpKind::Zero);
    }
    // phase-1 metrics carry no temperature, phase-2 ones do
    assert!(a.metrics[0].temperature.is_none());
    for m in &a.metrics {
        assert!(m.train_loss.is_finite() && m.val_loss.is_finite());
        assert!((0.0..=1.0).contains(&m.max_alpha_skip_fraction));
    }
}

#[test]
fn supernet_and_instantiated_counts_match_structural_formula() {
    // Analytic shift-pair counts per operation at channel count c.
    let sep = |c: usize, k: usize| 2 * (k * k * c + c * c);
    let dil = |c: usize, k: usize| k * k * c + c * c;

    // Toy supernet: 1 normal cell, 2 intermediate nodes, c = 4,
    // stem multiplier 1, 1 input channel, 2 classes.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut ids = IdGen::new();
    let net = Supernet::new(
        SupernetCfg {
            cells: 1,
            init_channels: 4,
            nodes: 2,
            reduction_positions: Some(vec![]),
            stem_multiplier: 1,
            in_channels: 1,
            classes: 2,
        },
        &mut ids,
        &mut rng,
        WeightMode::ShiftQuantized {
            ste: Default::default(),
        },
    )
    .unwrap();
    let c = 4;
    let per_edge = sep(c, 3) + sep(c, 5) + dil(c, 3) + dil(c, 5);
    let expected = (3 * 3) * 4          // stem
        + 2 * (4 * c)                     // two 1x1 preprocessors from 4 channels
        + 5 * per_edge                    // 5 edges, pools/skip/zero weightless
        + 2 * (2 * c);                    // classifier (2 classes, concat of 2 nodes)
    assert_eq!(net.shift_weight_count(), expected);

    // Instantiated genotype network with a reduction cell.
    let genotype = builtin("cifar10-best").unwrap();
    let cfg = SupernetCfg {
        cells: 2,
        init_channels: 4,
        nodes: 4,
        reduction_positions: Some(vec![1]),
        stem_multiplier: 3,
        in_channels: 1,
        classes: 2,
    };
    let mut ids = IdGen::new();
    let net = instantiate(
        &genotype,
        &cfg,
        WeightMode::ShiftQuantized {
            ste: Default::default(),
        },
        &mut ids,
        &mut rng,
    )
    .unwrap();

    let op_count = |name: &str, c: usize, stride: usize| -> usize {
        match name {
            "sep_conv_3x3" => sep(c, 3),
            "sep_conv_5x5" => sep(c, 5),
            "dil_conv_3x3" => dil(c, 3),
            "dil_conv_5x5" => dil(c, 5),
            "skip_connect"
                if stride == 2 => {
                    2 * (c * (c / 2))
                }
            _ => 0,
        }
    };
    // cell 0: normal at c=4, inputs 12/12; cell 1: reduction at c=8,
    // inputs 12/16 with no prev reduction.
    let mut expected = 3 * 3 * 12; // stem 1 -> 12
    expected += 12 * 4 + 12 * 4; // cell 0 preprocessors
    for (k, node) in genotype.normal.iter().enumerate() {
        let _ = k;
        for gene in node {
            expected += op_count(gene.op().name(), 4, 1);
        }
    }
    expected += 12 * 8 + 16 * 8; // cell 1 preprocessors
    for node in genotype.reduce.iter() {
        for gene in node {
            let stride = if gene.pred() < 2 { 2 } else { 1 };
            expected += op_count(gene.op().name(), 8, stride);
        }
    }
    expected += 2 * (4 * 8); // classifier
    assert_eq!(net.shift_weight_count(), expected);
}
