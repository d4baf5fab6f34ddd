//! Acceptance suite: one test per criterion, each printing a PASS line.
//!
//! Criteria that measure or mutate the global op counters (and the heavy
//! end-to-end runs) share a mutex so counter deltas stay clean when the
//! harness runs tests in parallel.

use std::path::Path;
use std::sync::Mutex;
use std::time::Instant;

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use shiftnet::fxp::{Fixed, Ternary};
use shiftnet::nn::conv::{ConvGeom, WeightMode};
use shiftnet::nn::graph::Graph;
use shiftnet::nn::layers::{
    avg_pool3, global_avg_pool, max_pool3, BatchNorm2d, ConvWeights, FactorizedReduce,
    ShiftConv2d, ShiftLinear,
};
use shiftnet::nn::param::IdGen;
use shiftnet::search::{
    self, edge_importance, lr_schedule, pair_combinations, regularized_loss,
    shift_l2_penalty, shift_l2_penalty_grad_p, temperature, theta_for, topo_softmax,
    SearchState,
};
use shiftnet::shiftparam::{self, nearest_shift_weight, quantize_parts};
use shiftnet::space::{OpKind, Supernet, SupernetCfg};

use shiftnet_cli::commands::{self, EvalSource};
use shiftnet_cli::config::{
    toy_search_config, DataSpec, Domain, NetShape, TrainConfig,
};
use shiftnet_cli::dataset::write_idx_u8;

static COUNTER_LOCK: Mutex<()> = Mutex::new(());

fn pass(n: u32, what: &str) {
    println!("acceptance {n:02} ({what}): PASS");
}

// -- criterion 1 ------------------------------------------------------------

#[test]
fn a01_shift_multiply_equivalence() {
    let t0 = Instant::now();
    let mut raws: Vec<i32> = Vec::new();
    let n_x = 2100u64;
    let span = u32::MAX as u64;
    for i in 0..n_x {
        raws.push((i32::MIN as i64 + (span * i / (n_x - 1)) as i64) as i32);
    }
    raws.extend_from_slice(&[0, 1, -1, i32::MAX, i32::MIN, 0x0001_0000, -0x0001_0000]);
    let mut checked = 0u64;
    for &raw in &raws {
        let x = Fixed::from_raw(raw);
        let xr = x.to_real();
        for p in -15..=0 {
            for s in [-1i8, 0, 1] {
                let got = x
                    .shift_mul(p, Ternary::from_i8(s).unwrap())
                    .unwrap()
                    .to_real();
                let want = s as f64 * 2f64.powi(p) * xr;
                assert!(
                    (got - want).abs() <= 2f64.powi(-16),
                    "raw={raw} p={p} s={s}: {got} vs {want}"
                );
                checked += 1;
            }
        }
    }
    assert!(checked >= 100_000, "grid too small: {checked}");
    let dt = t0.elapsed();
    assert!(dt.as_secs_f64() < 10.0, "took {dt:?}");
    pass(1, "shift-multiply equivalence");
}

// -- criterion 2 ------------------------------------------------------------

/// Scalar reference: independent implementations of round-half-away,
/// the ternary sign, and the flip composition.
fn ref_round_half_away(x: f64) -> f64 {
    if x >= 0.0 {
        (x + 0.5).floor()
    } else {
        (x - 0.5).ceil()
    }
}

fn ref_sign(s: f64) -> i8 {
    if s <= -0.5 {
        -1
    } else if s < 0.5 {
        0
    } else {
        1
    }
}

#[test]
fn a02_quantization_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let n = 10_000;
    let p: Vec<f64> = (0..n).map(|_| rng.random_range(-15.0..0.0)).collect();
    let s: Vec<f64> = (0..n).map(|_| rng.random_range(-1.5..1.5)).collect();
    let pa = ArrayD::from_shape_vec(IxDyn(&[n]), p.clone()).unwrap();
    let sa = ArrayD::from_shape_vec(IxDyn(&[n]), s.clone()).unwrap();
    let view = quantize_parts(&pa, &sa);
    for i in 0..n {
        let p_ref = ref_round_half_away(p[i]).clamp(-15.0, 0.0) as i8;
        let s_ref = ref_sign(s[i]);
        let w_ref = s_ref as f64 * (p_ref as f64).exp2();
        assert_eq!(view.p_bar[[i]], p_ref, "p={}", p[i]);
        assert_eq!(view.s_bar[[i]], s_ref, "s={}", s[i]);
        assert_eq!(view.w[[i]], w_ref);
    }
    // closed/open boundaries of the ternary sign
    assert_eq!(shiftparam::ternary_sign(0.5), 1);
    assert_eq!(shiftparam::ternary_sign(-0.5), -1);
    assert_eq!(shiftparam::ternary_sign(0.4999999), 0);
    assert_eq!(shiftparam::ternary_sign(-0.4999999), 0);
    assert_eq!(shiftparam::ternary_sign(f64::MIN_POSITIVE), 0);
    pass(2, "quantization oracle");
}

// -- criterion 3 ------------------------------------------------------------

const FD_TOL: f64 = 1e-4;
const FD_EPS: f64 = 1e-5;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

/// Probes coordinates through get/set closures against the analytic
/// gradient; returns the number of probes taken.
fn probe(
    rng: &mut ChaCha8Rng,
    analytic: &ArrayD<f64>,
    n_probes: usize,
    mut get: impl FnMut(usize) -> f64,
    mut set: impl FnMut(usize, f64),
    mut eval: impl FnMut() -> f64,
    what: &str,
) -> usize {
    let flat: Vec<f64> = analytic.iter().cloned().collect();
    let n = flat.len();
    for k in 0..n_probes {
        let i = if n_probes >= n { k % n } else { rng.random_range(0..n) };
        let v0 = get(i);
        set(i, v0 + FD_EPS);
        let fp = eval();
        set(i, v0 - FD_EPS);
        let fm = eval();
        set(i, v0);
        let num = (fp - fm) / (2.0 * FD_EPS);
        assert!(
            rel_err(flat[i], num) <= FD_TOL,
            "{what}[{i}]: analytic {} vs numeric {num}",
            flat[i]
        );
    }
    n_probes
}

#[test]
fn a03_backward_formula_and_finite_difference_oracle() {
    let _guard = COUNTER_LOCK.lock().unwrap();
    let t0 = Instant::now();

    // (a) straight-through closed forms on 1e4 random scalars
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let n = 10_000;
    let up: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    let dy: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    let p: Vec<f64> = (0..n).map(|_| rng.random_range(-15.0..0.0)).collect();
    let s: Vec<f64> = (0..n).map(|_| rng.random_range(-1.5..1.5)).collect();
    let mk = |v: &Vec<f64>| ArrayD::from_shape_vec(IxDyn(&[n]), v.clone()).unwrap();
    let (ua, da, pa, sa) = (mk(&up), mk(&dy), mk(&p), mk(&s));
    let view = quantize_parts(&pa, &sa);
    let gp = shiftparam::grad_p(&ua, &da, &view).unwrap();
    let gs = shiftparam::grad_s(&ua, &da).unwrap();
    for i in 0..n {
        let pb = ref_round_half_away(p[i]);
        let w = ref_sign(s[i]) as f64 * pb.exp2();
        let want_p = up[i] * dy[i] * w * pb.exp2() * std::f64::consts::LN_2;
        let want_s = up[i] * dy[i];
        assert!(
            rel_err(gp[[i]], want_p) <= 1e-12 || (gp[[i]] == 0.0 && want_p == 0.0),
            "grad_p[{i}]: {} vs {want_p}",
            gp[[i]]
        );
        assert!(
            rel_err(gs[[i]], want_s) <= 1e-12,
            "grad_s[{i}]: {} vs {want_s}",
            gs[[i]]
        );
    }

    // (b) continuous-surrogate finite differences, >= 100 probes per
    // layer type
    let mut probes_total = 0usize;

    // convolution (standard + depthwise dilated strided)
    for geom in [
        ConvGeom {
            in_c: 3,
            out_c: 4,
            kh: 3,
            kw: 3,
            stride: 1,
            pad: 1,
            dilation: 1,
            groups: 1,
        },
        ConvGeom {
            in_c: 4,
            out_c: 4,
            kh: 5,
            kw: 5,
            stride: 2,
            pad: 4,
            dilation: 2,
            groups: 4,
        },
    ] {
        let mut ids = IdGen::new();
        let layer = ShiftConv2d::new(
            &mut ids,
            &mut rng,
            WeightMode::ShiftSurrogate,
            geom,
            true,
            true,
        );
        let x0 = ArrayD::from_shape_fn(IxDyn(&[2, geom.in_c, 6, 6]), |_| {
            rng.random_range(-1.0..1.0)
        });
        let (oh, ow) = geom.out_hw(6, 6);
        let wsum = ArrayD::from_shape_fn(IxDyn(&[2, geom.out_c, oh, ow]), |_| {
            rng.random_range(-1.0..1.0)
        });
        let layer = std::cell::RefCell::new(layer);
        let xs = std::cell::RefCell::new(x0.clone());
        let eval = || {
            let mut g = Graph::new();
            let xn = g.constant(xs.borrow().clone());
            let y = layer.borrow().forward(&mut g, xn).unwrap();
            let l = g.weighted_sum(y, &wsum);
            g.value(l)[[]]
        };
        let (dx, dp, ds, db) = {
            let mut g = Graph::new();
            let xn = g.constant(x0.clone());
            let y = layer.borrow().forward(&mut g, xn).unwrap();
            let l = g.weighted_sum(y, &wsum);
            g.backward(l);
            let lb = layer.borrow();
            let ConvWeights::Shift(pair) = &lb.weights else {
                unreachable!()
            };
            (
                g.grad(xn).unwrap().clone(),
                g.param_grad(pair.p.id).unwrap().clone(),
                g.param_grad(pair.s.id).unwrap().clone(),
                g.param_grad(lb.bias.as_ref().unwrap().id).unwrap().clone(),
            )
        };
        probes_total += probe(
            &mut rng,
            &dx,
            40,
            |i| xs.borrow().as_slice().unwrap()[i],
            |i, v| xs.borrow_mut().as_slice_mut().unwrap()[i] = v,
            eval,
            "conv dX",
        );
        probes_total += probe(
            &mut rng,
            &dp,
            30,
            |i| {
                let lb = layer.borrow();
                let ConvWeights::Shift(pair) = &lb.weights else {
                    unreachable!()
                };
                pair.p.data.as_slice().unwrap()[i]
            },
            |i, v| {
                let mut lb = layer.borrow_mut();
                let ConvWeights::Shift(pair) = &mut lb.weights else {
                    unreachable!()
                };
                pair.p.data.as_slice_mut().unwrap()[i] = v;
            },
            eval,
            "conv dP",
        );
        probes_total += probe(
            &mut rng,
            &ds,
            30,
            |i| {
                let lb = layer.borrow();
                let ConvWeights::Shift(pair) = &lb.weights else {
                    unreachable!()
                };
                pair.s.data.as_slice().unwrap()[i]
            },
            |i, v| {
                let mut lb = layer.borrow_mut();
                let ConvWeights::Shift(pair) = &mut lb.weights else {
                    unreachable!()
                };
                pair.s.data.as_slice_mut().unwrap()[i] = v;
            },
            eval,
            "conv dS",
        );
        probes_total += probe(
            &mut rng,
            &db,
            10,
            |i| layer.borrow().bias.as_ref().unwrap().data.as_slice().unwrap()[i],
            |i, v| {
                layer.borrow_mut().bias.as_mut().unwrap().data.as_slice_mut().unwrap()[i] = v
            },
            eval,
            "conv db",
        );
    }

    // linear
    {
        let mut ids = IdGen::new();
        let layer = ShiftLinear::new(&mut ids, &mut rng, WeightMode::ShiftSurrogate, 6, 4);
        let x0 = ArrayD::from_shape_fn(IxDyn(&[4, 6]), |_| rng.random_range(-1.0..1.0));
        let wsum = ArrayD::from_shape_fn(IxDyn(&[4, 4]), |_| rng.random_range(-1.0..1.0));
        let layer = std::cell::RefCell::new(layer);
        let xs = std::cell::RefCell::new(x0.clone());
        let eval = || {
            let mut g = Graph::new();
            let xn = g.constant(xs.borrow().clone());
            let y = layer.borrow().forward(&mut g, xn).unwrap();
            let l = g.weighted_sum(y, &wsum);
            g.value(l)[[]]
        };
        let (dx, dp) = {
            let mut g = Graph::new();
            let xn = g.constant(x0.clone());
            let y = layer.borrow().forward(&mut g, xn).unwrap();
            let l = g.weighted_sum(y, &wsum);
            g.backward(l);
            let lb = layer.borrow();
            let ConvWeights::Shift(pair) = &lb.weights else {
                unreachable!()
            };
            (
                g.grad(xn).unwrap().clone(),
                g.param_grad(pair.p.id).unwrap().clone(),
            )
        };
        probes_total += probe(
            &mut rng,
            &dx,
            60,
            |i| xs.borrow().as_slice().unwrap()[i],
            |i, v| xs.borrow_mut().as_slice_mut().unwrap()[i] = v,
            eval,
            "linear dX",
        );
        probes_total += probe(
            &mut rng,
            &dp,
            60,
            |i| {
                let lb = layer.borrow();
                let ConvWeights::Shift(pair) = &lb.weights else {
                    unreachable!()
                };
                pair.p.data.as_slice().unwrap()[i]
            },
            |i, v| {
                let mut lb = layer.borrow_mut();
                let ConvWeights::Shift(pair) = &mut lb.weights else {
                    unreachable!()
                };
                pair.p.data.as_slice_mut().unwrap()[i] = v;
            },
            eval,
            "linear dP",
        );
    }

    // batch norm
    {
        let mut ids = IdGen::new();
        let bn = BatchNorm2d::new(&mut ids, 3);
        let x0 = ArrayD::from_shape_fn(IxDyn(&[4, 3, 4, 4]), |_| rng.random_range(-2.0..2.0));
        let wsum = ArrayD::from_shape_fn(IxDyn(&[4, 3, 4, 4]), |_| rng.random_range(-1.0..1.0));
        let bn = std::cell::RefCell::new(bn);
        let xs = std::cell::RefCell::new(x0.clone());
        let eval = || {
            let mut g = Graph::new();
            let xn = g.constant(xs.borrow().clone());
            let y = bn.borrow_mut().forward(&mut g, xn, true);
            let l = g.weighted_sum(y, &wsum);
            g.value(l)[[]]
        };
        let dx = {
            let mut g = Graph::new();
            let xn = g.constant(x0.clone());
            let y = bn.borrow_mut().forward(&mut g, xn, true);
            let l = g.weighted_sum(y, &wsum);
            g.backward(l);
            g.grad(xn).unwrap().clone()
        };
        probes_total += probe(
            &mut rng,
            &dx,
            100,
            |i| xs.borrow().as_slice().unwrap()[i],
            |i, v| xs.borrow_mut().as_slice_mut().unwrap()[i] = v,
            eval,
            "bn dX",
        );
    }

    // pooling, global pooling, relu, factorized reduce
    let x0 = ArrayD::from_shape_fn(IxDyn(&[2, 4, 6, 6]), |_| {
        let m: f64 = rng.random_range(0.1..1.0);
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    });
    for which in ["max", "avg", "gap", "relu", "factred"] {
        let mut ids = IdGen::new();
        let fr = std::cell::RefCell::new(
            FactorizedReduce::new(&mut ids, &mut rng, WeightMode::ShiftSurrogate, 4, 4)
                .unwrap(),
        );
        let wshape: Vec<usize> = match which {
            "gap" => vec![2, 4],
            "factred" => vec![2, 4, 3, 3],
            _ => vec![2, 4, 6, 6],
        };
        let wsum = ArrayD::from_shape_fn(IxDyn(&wshape), |_| rng.random_range(-1.0..1.0));
        let xs = std::cell::RefCell::new(x0.clone());
        let fwd = |g: &mut Graph, xn| match which {
            "max" => max_pool3(g, xn, 1),
            "avg" => avg_pool3(g, xn, 1),
            "gap" => global_avg_pool(g, xn),
            "relu" => g.relu(xn),
            _ => fr.borrow_mut().forward(g, xn, true).unwrap(),
        };
        let eval = || {
            let mut g = Graph::new();
            let xn = g.constant(xs.borrow().clone());
            let y = fwd(&mut g, xn);
            let l = g.weighted_sum(y, &wsum);
            g.value(l)[[]]
        };
        let dx = {
            let mut g = Graph::new();
            let xn = g.constant(x0.clone());
            let y = fwd(&mut g, xn);
            let l = g.weighted_sum(y, &wsum);
            g.backward(l);
            g.grad(xn).unwrap().clone()
        };
        probes_total += probe(
            &mut rng,
            &dx,
            100,
            |i| xs.borrow().as_slice().unwrap()[i],
            |i, v| xs.borrow_mut().as_slice_mut().unwrap()[i] = v,
            eval,
            which,
        );
    }

    assert!(probes_total >= 100 * 8, "only {probes_total} probes");
    let dt = t0.elapsed();
    assert!(dt.as_secs_f64() < 120.0, "took {dt:?}");
    pass(3, "backward formulas and finite differences");
}

// -- criterion 4 ------------------------------------------------------------

#[test]
fn a04_topology_algebra() {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    // |E| = C(n, 2)
    for (n, want) in [(2usize, 1usize), (3, 3), (4, 6), (5, 10)] {
        assert_eq!(pair_combinations(n).len(), want);
    }
    // gamma sums to one for 1e3 random logit/temperature draws
    for _ in 0..1000 {
        let n = rng.random_range(2..=5usize);
        let m = n * (n - 1) / 2;
        let logits: Vec<f64> = (0..m).map(|_| rng.random_range(-3.0..3.0)).collect();
        let t = rng.random_range(0.02..10.0);
        let beta = topo_softmax(&logits, t).unwrap();
        let gamma = edge_importance(&beta, n).unwrap();
        assert!((gamma.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        // brute-force enumeration oracle, exact match
        let pairs = pair_combinations(n);
        for (e, &g) in gamma.iter().enumerate() {
            let mut want = 0.0;
            for (c, &(a, b)) in pairs.iter().enumerate() {
                if a == e || b == e {
                    want += beta[c] / 2.0;
                }
            }
            assert_eq!(g, want, "edge {e} of {n}");
        }
    }

    // derivation matches exhaustive max-probability enumeration
    let mut ids = IdGen::new();
    let cfg = SupernetCfg {
        cells: 1,
        init_channels: 4,
        nodes: 4,
        reduction_positions: Some(vec![]),
        stem_multiplier: 1,
        in_channels: 1,
        classes: 2,
    };
    let net = Supernet::new(
        cfg,
        &mut ids,
        &mut rng,
        WeightMode::ShiftQuantized {
            ste: Default::default(),
        },
    )
    .unwrap();
    let run_cfg = search::SearchRunCfg {
        operation_epochs: 0,
        topology_epochs: 1,
        ..Default::default()
    };
    let mut state = SearchState {
        cfg: run_cfg,
        net,
        ids,
        topology_phase: false,
        w_opt: shiftnet::optim::Optimizer::for_weights(shiftnet::optim::OptKind::RAdam, 0.0, 0.0),
        arch_opt: shiftnet::optim::Optimizer::for_arch(0.0, 0.0),
    };
    let conv_pool = [
        OpKind::SepConv3x3,
        OpKind::SepConv5x5,
        OpKind::DilConv3x3,
        OpKind::DilConv5x5,
    ];
    let topo_pool = [OpKind::MaxPool3x3, OpKind::AvgPool3x3, OpKind::SkipConnect];
    for trial in 0..100 {
        // random survivors and logits
        let selections: Vec<[OpKind; 2]> = (0..14)
            .map(|_| {
                [
                    conv_pool[rng.random_range(0..4)],
                    topo_pool[rng.random_range(0..3)],
                ]
            })
            .collect();
        state
            .net
            .apply_pruning(&mut state.ids, selections.clone(), selections.clone())
            .unwrap();
        state.topology_phase = true;
        for p in state.net.arch_params(true) {
            p.data = ArrayD::from_shape_fn(p.data.raw_dim(), |_| rng.random_range(-2.0..2.0));
        }
        let derived = state.derive().unwrap();

        // oracle: exhaustively enumerate the full per-node choice space
        // (one combination, one operation on every incoming edge) and
        // take the configuration of maximal probability; the visible
        // architecture keeps the ops on the chosen edges
        let pruned = state.net.arch_normal.pruned.as_ref().unwrap();
        let mut edge_base = 0usize;
        for j in 0..4 {
            let n_in = 2 + j;
            let pairs = pair_combinations(n_in);
            let beta = topo_softmax(pruned.beta[j].data.as_slice().unwrap(), 1.0).unwrap();
            let alpha: Vec<Vec<f64>> = (0..n_in)
                .map(|e| {
                    topo_softmax(pruned.alpha2[edge_base + e].data.as_slice().unwrap(), 1.0)
                        .unwrap()
                })
                .collect();
            let mut best_prob = -1.0;
            let mut best: Option<Vec<(OpKind, usize)>> = None;
            for (c, &(i1, i2)) in pairs.iter().enumerate() {
                for kmask in 0..(1usize << n_in) {
                    let mut prob = beta[c];
                    for (e, a) in alpha.iter().enumerate() {
                        prob *= a[(kmask >> e) & 1];
                    }
                    if prob > best_prob {
                        best_prob = prob;
                        best = Some(vec![
                            (pruned.edge_ops[edge_base + i1][(kmask >> i1) & 1], i1),
                            (pruned.edge_ops[edge_base + i2][(kmask >> i2) & 1], i2),
                        ]);
                    }
                }
            }
            let want = best.unwrap();
            let got: Vec<(OpKind, usize)> = derived.normal[j]
                .iter()
                .map(|g| (g.op(), g.pred()))
                .collect();
            assert_eq!(got, want, "trial {trial}, node {j}");
            edge_base += n_in;
        }
    }
    pass(4, "topology algebra");
}

// -- criterion 5 ------------------------------------------------------------

#[test]
fn a05_schedules() {
    for epochs in [40usize, 5] {
        let theta = theta_for(10.0, 0.02, epochs);
        assert_eq!(theta, 0.002f64.powf(1.0 / epochs as f64));
        assert_eq!(temperature(0, 10.0, theta), 10.0);
        assert!((temperature(epochs, 10.0, theta) - 0.02).abs() <= 1e-9);
    }
    let eta0 = 0.01;
    for (e1, e2) in [(30usize, 40usize), (5, 5)] {
        assert_eq!(lr_schedule(0, e1, e2, eta0), eta0);
        assert_eq!(lr_schedule(e1, e1, e2, eta0), eta0);
        assert!(lr_schedule(e1 + e2, e1, e2, eta0) <= 1e-6);
    }
    pass(5, "schedules");
}

// -- criterion 6 ------------------------------------------------------------

#[test]
fn a06_regularizer() {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    for _ in 0..50 {
        let n = rng.random_range(1..64usize);
        let p = ArrayD::from_shape_fn(IxDyn(&[n]), |_| rng.random_range(-15.0..0.0));
        let s = ArrayD::from_shape_fn(IxDyn(&[n]), |_| rng.random_range(-1.5..1.5));
        let lambda = rng.random_range(0.0..1e-2);
        let loss = rng.random_range(0.0..5.0);

        // independent reference of the penalty value
        let mut want = 0.0;
        for i in 0..n {
            let sb = ref_sign(s[[i]]) as f64;
            let wv: f64 = sb * f64::exp2(p[[i]]);
            want += wv * wv;
        }
        let got = regularized_loss(loss, shift_l2_penalty(&p, &s), lambda);
        assert!((got - (loss + 0.5 * lambda * want)).abs() <= 1e-10);

        // analytic P-gradient matches the closed form
        let g = shift_l2_penalty_grad_p(&p, &s, lambda);
        for i in 0..n {
            let sb = ref_sign(s[[i]]) as f64;
            let want = lambda * sb * sb * (2.0 * p[[i]]).exp2() * std::f64::consts::LN_2;
            assert!((g[[i]] - want).abs() <= 1e-10);
        }
    }
    // hand example
    let p = ArrayD::from_shape_vec(IxDyn(&[1]), vec![-1.0]).unwrap();
    let s = ArrayD::from_shape_vec(IxDyn(&[1]), vec![1.0]).unwrap();
    assert!(
        (regularized_loss(1.0, shift_l2_penalty(&p, &s), 3e-4) - 1.0000375).abs() <= 1e-12
    );
    pass(6, "modified L2 regularizer");
}

// -- criterion 7 ------------------------------------------------------------

#[test]
fn a07_multiplication_freedom() {
    let _guard = COUNTER_LOCK.lock().unwrap();
    let tmp = tempfile::tempdir().unwrap();

    // bench shift path, both preset-ish sizes
    let rows = commands::cmd_bench(&[32, 96], 1, 7, None).unwrap();
    for r in &rows {
        assert_eq!(r.shift_counts.weight_mults, 0, "bench size {}", r.size);
        assert!(r.shift_counts.shifts > 0);
        assert!(r.dense_counts.weight_mults > 0);
    }

    // eval path at both preset shapes (untrained shift networks)
    for (name, shape, hw, in_c, classes) in [
        (
            "toy",
            NetShape {
                cells: 8,
                init_channels: 16,
                nodes: 4,
                reduction_positions: None,
                stem_multiplier: 3,
            },
            8usize,
            1usize,
            2usize,
        ),
        (
            "paper-cifar",
            NetShape {
                cells: 20,
                init_channels: 36,
                nodes: 4,
                reduction_positions: None,
                stem_multiplier: 3,
            },
            32,
            3,
            10,
        ),
    ] {
        let genotype = shiftnet::genotype::builtin("cifar10-best").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut ids = IdGen::new();
        let net = shiftnet::genotype::instantiate(
            &genotype,
            &shape.to_supernet_cfg(in_c, classes),
            WeightMode::ShiftQuantized {
                ste: Default::default(),
            },
            &mut ids,
            &mut rng,
        )
        .unwrap();
        let ckpt = tmp.path().join(format!("{name}.ckpt"));
        shiftnet_cli::checkpoint::save(
            &ckpt,
            &shiftnet_cli::checkpoint::NetMeta {
                domain: Domain::Shift,
                genotype,
                net: shape,
                in_channels: in_c,
                classes,
            },
            &net.collect_state(),
        )
        .unwrap();

        // tiny labeled set in IDX form
        let n = 2;
        let mut rng2 = ChaCha8Rng::seed_from_u64(11);
        let pixels: Vec<u8> = (0..n * in_c * hw * hw)
            .map(|_| rng2.random_range(0..=255u8))
            .collect();
        let img_path = tmp.path().join(format!("{name}-img.idx"));
        let lbl_path = tmp.path().join(format!("{name}-lbl.idx"));
        if in_c == 1 {
            write_idx_u8(&img_path, &[n, hw, hw], &pixels).unwrap();
        } else {
            write_idx_u8(&img_path, &[n, in_c, hw, hw], &pixels).unwrap();
        }
        write_idx_u8(&lbl_path, &[n], &vec![0u8; n]).unwrap();

        let outcome = commands::cmd_eval(
            &ckpt,
            &EvalSource::Idx {
                images: img_path,
                labels: lbl_path,
                normalize_mean: vec![0.5],
                normalize_std: vec![0.5],
            },
            2,
        )
        .unwrap();
        assert_eq!(outcome.counts.weight_mults, 0, "{name} eval");
        assert!(outcome.counts.shifts > 0);
    }
    pass(7, "multiplication freedom");
}

// -- criterion 8 ------------------------------------------------------------

#[test]
fn a08_toy_search_end_to_end() {
    let _guard = COUNTER_LOCK.lock().unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = toy_search_config();
    cfg.out_dir = tmp.path().join("run1");
    cfg.seed = 42;

    let t0 = Instant::now();
    let summary = commands::cmd_search(&cfg).unwrap();
    let dt = t0.elapsed();
    assert!(dt.as_secs_f64() < 3600.0, "toy search took {dt:?}");

    // schema-valid genotype file
    let text = std::fs::read_to_string(&summary.genotype_path).unwrap();
    let parsed = shiftnet::genotype::Genotype::from_json(&text).unwrap();
    parsed.validate().unwrap();

    // one metric row per epoch with a phase tag
    assert_eq!(summary.metrics.len(), 10);
    let csv_text = std::fs::read_to_string(&summary.metrics_path).unwrap();
    assert_eq!(csv_text.lines().count(), 11);
    assert!(csv_text.lines().nth(1).unwrap().contains("operation"));
    assert!(csv_text.lines().nth(10).unwrap().contains("topology"));

    // bit-reproducible under the same seed
    let mut cfg2 = cfg.clone();
    cfg2.out_dir = tmp.path().join("run2");
    let summary2 = commands::cmd_search(&cfg2).unwrap();
    let bytes1 = std::fs::read(&summary.genotype_path).unwrap();
    let bytes2 = std::fs::read(&summary2.genotype_path).unwrap();
    assert_eq!(bytes1, bytes2, "genotype files differ across reruns");
    let m1 = std::fs::read(&summary.metrics_path).unwrap();
    let m2 = std::fs::read(&summary2.metrics_path).unwrap();
    assert_eq!(m1, m2, "metric files differ across reruns");

    println!("toy search wall time: {:.1}s", dt.as_secs_f64());
    pass(8, "end-to-end toy search");
}

// -- criterion 9 ------------------------------------------------------------

/// Writes a 1k-sample two-class IDX dataset (plus a 400-sample test set)
/// of gaussian-blob images with pixel noise.
fn write_parity_fixture(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf, std::path::PathBuf, std::path::PathBuf) {
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let (h, w) = (8usize, 8usize);
    let mut gen = |n: usize| -> (Vec<u8>, Vec<u8>) {
        let mut pixels = Vec::with_capacity(n * h * w);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = (i % 2) as u8;
            let (cy, cx) = if class == 0 { (2.5, 2.5) } else { (4.5, 4.5) };
            for y in 0..h {
                for x in 0..w {
                    let d2: f64 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    let u1: f64 = rng.random::<f64>().max(1e-12);
                    let u2: f64 = rng.random::<f64>();
                    let noise =
                        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
                    let v = (-d2 / 7.0).exp() + 0.22 * noise;
                    pixels.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
            labels.push(class);
        }
        (pixels, labels)
    };
    let (train_px, train_lb) = gen(1000);
    let (test_px, test_lb) = gen(400);
    let ti = dir.join("train-images.idx");
    let tl = dir.join("train-labels.idx");
    let vi = dir.join("test-images.idx");
    let vl = dir.join("test-labels.idx");
    write_idx_u8(&ti, &[1000, h, w], &train_px).unwrap();
    write_idx_u8(&tl, &[1000], &train_lb).unwrap();
    write_idx_u8(&vi, &[400, h, w], &test_px).unwrap();
    write_idx_u8(&vl, &[400], &test_lb).unwrap();
    (ti, tl, vi, vl)
}

#[test]
fn a09_shift_vs_real_parity() {
    let _guard = COUNTER_LOCK.lock().unwrap();
    let t0 = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let (ti, tl, vi, vl) = write_parity_fixture(tmp.path());

    let data = DataSpec::IdxImages {
        train_images: ti,
        train_labels: tl,
        test_images: Some(vi.clone()),
        test_labels: Some(vl.clone()),
        normalize_mean: vec![0.5],
        normalize_std: vec![0.5],
    };
    let net = NetShape {
        cells: 3,
        init_channels: 8,
        nodes: 4,
        reduction_positions: None,
        stem_multiplier: 3,
    };
    let base = TrainConfig {
        seed: 0,
        out_dir: tmp.path().join("x"),
        genotype: "builtin:cifar10-best".into(),
        domain: Domain::Shift,
        epochs: 20,
        batch_size: 32,
        optimizer: shiftnet::optim::OptKind::RAdam,
        lr: 0.01,
        weight_decay: 3e-4,
        shift_l2_lambda: 3e-4,
        ste: Default::default(),
        net,
        data,
    };

    let mut gaps = Vec::new();
    for seed in [1u64, 2, 3] {
        let mut real_cfg = base.clone();
        real_cfg.seed = seed;
        real_cfg.domain = Domain::Real;
        real_cfg.out_dir = tmp.path().join(format!("real-{seed}"));
        let real = commands::cmd_train(&real_cfg).unwrap();
        let real_acc = real.final_test_acc.unwrap();

        let mut shift_cfg = base.clone();
        shift_cfg.seed = seed;
        shift_cfg.out_dir = tmp.path().join(format!("shift-{seed}"));
        let shift = commands::cmd_train(&shift_cfg).unwrap();
        // the shift model is scored on the fixed-point path from its
        // checkpoint
        let eval = commands::cmd_eval(
            &shift.checkpoint,
            &EvalSource::Idx {
                images: vi.clone(),
                labels: vl.clone(),
                normalize_mean: vec![0.5],
                normalize_std: vec![0.5],
            },
            64,
        )
        .unwrap();
        let shift_acc = eval.top1;
        println!(
            "seed {seed}: real {:.4}, shift {:.4} (gap {:+.2} points)",
            real_acc,
            shift_acc,
            100.0 * (real_acc - shift_acc)
        );
        if real_acc > 0.93 {
            assert!(
                shift_acc > 0.90,
                "seed {seed}: real {real_acc:.4} but shift only {shift_acc:.4}"
            );
        }
        gaps.push(real_acc - shift_acc);
    }
    let mean_gap = gaps.iter().sum::<f64>() / gaps.len() as f64;
    assert!(
        mean_gap <= 0.03,
        "mean accuracy gap {:.2} points exceeds 3",
        100.0 * mean_gap
    );
    let dt = t0.elapsed();
    assert!(dt.as_secs_f64() < 1800.0, "parity runs took {dt:?}");
    println!(
        "parity wall time: {:.1}s, mean gap {:+.2} points",
        dt.as_secs_f64(),
        100.0 * mean_gap
    );
    pass(9, "shift-vs-real parity");
}

// -- criterion 10 -----------------------------------------------------------

#[test]
fn a10_quantizer_nearest_bound() {
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    // the 31 representable values: zero plus +/-2^p for p in [-14, 0]
    let mut representable = vec![0.0f64];
    for m in 0..=14 {
        representable.push((-(m as f64)).exp2());
        representable.push(-(-(m as f64)).exp2());
    }
    assert_eq!(representable.len(), 31);

    let mut weights: Vec<f64> = (0..10_000).map(|_| rng.random_range(-1.3..1.3)).collect();
    weights.extend_from_slice(&[0.0, 0.25, -0.5, 1.0, -1.0, 2f64.powi(-14), 1e-9, 0.72]);
    for &w in &weights {
        let got = nearest_shift_weight(w);
        let got_err = (w - got.w).abs();
        let brute_err = representable
            .iter()
            .map(|&c| (w - c).abs())
            .fold(f64::INFINITY, f64::min);
        assert_eq!(
            got_err, brute_err,
            "w={w}: impl err {got_err} vs brute {brute_err}"
        );
        // the chosen value really is in the representable set
        assert!(representable.contains(&got.w));
    }
    // exact powers of two quantize with zero error
    for m in 0..=14 {
        let v = (-(m as f64)).exp2();
        assert_eq!(nearest_shift_weight(v).w, v);
        assert_eq!(nearest_shift_weight(-v).w, -v);
    }
    pass(10, "nearest-shift quantizer");
}
