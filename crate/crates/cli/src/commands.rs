//! Command implementations behind the CLI verbs. Each returns a summary
//! struct so the integration tests can drive them in-process.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ndarray::{ArrayD, IxDyn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use shiftnet::fxp::{self, count::OpCounts, FxTensor};
use shiftnet::genotype::{self, instantiate, EvalNet, Genotype};
use shiftnet::nn::conv::{linear_dense, shift_linear_fixed, WeightMode};
use shiftnet::nn::graph::Graph;
use shiftnet::nn::param::IdGen;
use shiftnet::nn::state::TensorPayload;
use shiftnet::optim::Optimizer;
use shiftnet::search::{run_search, DataSplit, EpochMetrics, SearchRunCfg};
use shiftnet::shiftparam::{nearest_shift_weight, pack_shift5};

use crate::checkpoint::{self, NetMeta};
use crate::config::{DataSpec, Domain, SearchConfig, TrainConfig};
use crate::dataset;

pub fn resolve_genotype(spec: &str) -> Result<Genotype> {
    if let Some(name) = spec.strip_prefix("builtin:") {
        genotype::builtin(name)
            .with_context(|| format!("unknown builtin genotype '{name}'"))
    } else {
        let text = std::fs::read_to_string(spec)
            .with_context(|| format!("reading genotype {spec}"))?;
        Ok(Genotype::from_json(&text)?)
    }
}

fn fnv1a64<I: IntoIterator<Item = u8>>(bytes: I) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

// ---------------------------------------------------------------------------
// search
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct SearchSummary {
    pub genotype: Genotype,
    pub genotype_path: PathBuf,
    pub metrics_path: PathBuf,
    pub metrics: Vec<EpochMetrics>,
}

pub fn cmd_search(cfg: &SearchConfig) -> Result<SearchSummary> {
    std::fs::create_dir_all(&cfg.out_dir)
        .with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    let data = dataset::load(&cfg.data, cfg.seed)?;
    let net_cfg = cfg
        .supernet
        .to_supernet_cfg(data.in_channels, data.classes);
    let run = SearchRunCfg {
        operation_epochs: cfg.search.operation_epochs,
        topology_epochs: cfg.search.topology_epochs,
        batch_size: cfg.search.batch_size,
        seed: cfg.seed,
        w_optimizer: cfg.search.w_optimizer,
        w_lr: cfg.search.w_lr,
        w_weight_decay: cfg.search.w_weight_decay,
        shift_l2_lambda: cfg.search.shift_l2_lambda,
        arch_lr: cfg.search.arch_lr,
        arch_weight_decay: cfg.search.arch_weight_decay,
        t0: cfg.search.t0,
        t_end: cfg.search.t_end,
        ste: cfg.search.ste,
    };
    let outcome = run_search(&run, &net_cfg, &data.train)?;

    let genotype_path = cfg.out_dir.join("genotype.json");
    std::fs::write(&genotype_path, outcome.genotype.to_json())?;
    let metrics_path = cfg.out_dir.join("metrics.csv");
    write_search_metrics(&metrics_path, &outcome.metrics)?;
    let summary = format!(
        "seed: {}\ncells: {} (init channels {})\nepochs: {} operation + {} topology\n\
         final val_acc: {:.4}\n\n{}",
        cfg.seed,
        cfg.supernet.cells,
        cfg.supernet.init_channels,
        cfg.search.operation_epochs,
        cfg.search.topology_epochs,
        outcome.metrics.last().map_or(f64::NAN, |m| m.val_acc),
        outcome.genotype.to_table()
    );
    std::fs::write(cfg.out_dir.join("summary.txt"), summary)?;
    Ok(SearchSummary {
        genotype: outcome.genotype,
        genotype_path,
        metrics_path,
        metrics: outcome.metrics,
    })
}

fn write_search_metrics(path: &Path, metrics: &[EpochMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "epoch",
        "phase",
        "lr",
        "T",
        "train_loss",
        "val_loss",
        "val_acc",
        "max_alpha_skip_fraction",
    ])?;
    for m in metrics {
        w.write_record([
            m.epoch.to_string(),
            m.phase.as_str().to_string(),
            format!("{}", m.lr),
            m.temperature.map_or(String::new(), |t| format!("{t}")),
            format!("{}", m.train_loss),
            format!("{}", m.val_loss),
            format!("{}", m.val_acc),
            format!("{}", m.max_alpha_skip_fraction),
        ])?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TrainEpochRow {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub test_loss: Option<f64>,
    pub test_acc: Option<f64>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub metrics_path: PathBuf,
    pub rows: Vec<TrainEpochRow>,
    pub final_test_acc: Option<f64>,
}

fn cosine_lr(epoch: usize, total: usize, eta0: f64) -> f64 {
    use std::f64::consts::PI;
    eta0 * 0.5 * (1.0 + (PI * epoch as f64 / total as f64).cos())
}

fn train_batch_step(
    net: &mut EvalNet,
    opt: &mut Optimizer,
    x: &ArrayD<f64>,
    labels: &[usize],
    lambda: f64,
    shift_domain: bool,
) -> Result<f64> {
    let mut g = Graph::new();
    let xn = g.constant(x.clone());
    let logits = net.forward(&mut g, xn, true)?;
    let loss = g.cross_entropy(logits, labels);
    let loss_val = g.value(loss)[[]];
    if !loss_val.is_finite() {
        bail!("training diverged: non-finite loss {loss_val}");
    }
    g.backward(loss);
    {
        let mut params = net.weight_params();
        for p in params.iter_mut() {
            if let Some(gr) = g.param_grad(p.id) {
                p.grad += gr;
            }
        }
    }
    if shift_domain {
        net.visit_shift_pairs_mut(&mut |pair| pair.add_reg_grad(lambda));
    }
    {
        let mut params = net.weight_params();
        opt.step(&mut params);
        for p in params.iter_mut() {
            p.zero_grad();
        }
    }
    if shift_domain {
        net.visit_shift_pairs_mut(&mut |pair| pair.clamp());
    }
    Ok(loss_val)
}

fn eval_graph(net: &mut EvalNet, data: &DataSplit, batch: usize) -> Result<(f64, f64)> {
    let mut total_loss = 0.0;
    let mut correct = 0usize;
    let mut seen = 0usize;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch) {
        let (x, y) = data.gather(chunk);
        let mut g = Graph::new();
        let xn = g.constant(x);
        let logits = net.forward(&mut g, xn, false)?;
        let loss = g.cross_entropy(logits, &y);
        total_loss += g.value(loss)[[]] * y.len() as f64;
        let lv = g.value(logits);
        for (i, &label) in y.iter().enumerate() {
            let row = lv.index_axis(ndarray::Axis(0), i);
            let mut best = 0;
            for k in 1..row.len() {
                if row[k] > row[best] {
                    best = k;
                }
            }
            if best == label {
                correct += 1;
            }
        }
        seen += y.len();
    }
    Ok((total_loss / seen as f64, correct as f64 / seen as f64))
}

pub fn cmd_train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    let data = dataset::load(&cfg.data, cfg.seed)?;
    if data.train.len() < cfg.batch_size {
        bail!(
            "batch size {} exceeds the training set ({} samples)",
            cfg.batch_size,
            data.train.len()
        );
    }
    let genotype = resolve_genotype(&cfg.genotype)?;
    let net_cfg = cfg.net.to_supernet_cfg(data.in_channels, data.classes);
    let shift_domain = cfg.domain == Domain::Shift;
    let mode = if shift_domain {
        WeightMode::ShiftQuantized { ste: cfg.ste }
    } else {
        WeightMode::Real
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut ids = IdGen::new();
    let mut net = instantiate(&genotype, &net_cfg, mode, &mut ids, &mut rng)?;
    let mut opt = Optimizer::for_weights(cfg.optimizer, cfg.lr, cfg.weight_decay);

    let mut rows = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, cfg.epochs, cfg.lr);
        opt.set_lr(lr);
        let mut idx: Vec<usize> = (0..data.train.len()).collect();
        idx.shuffle(&mut rng);
        let mut losses = Vec::new();
        for chunk in idx.chunks_exact(cfg.batch_size) {
            let (x, y) = data.train.gather(chunk);
            losses.push(train_batch_step(
                &mut net,
                &mut opt,
                &x,
                &y,
                cfg.shift_l2_lambda,
                shift_domain,
            )?);
        }
        let train_loss = losses.iter().sum::<f64>() / losses.len().max(1) as f64;
        let (test_loss, test_acc) = match &data.test {
            Some(t) => {
                let (l, a) = eval_graph(&mut net, t, cfg.batch_size)?;
                (Some(l), Some(a))
            }
            None => (None, None),
        };
        rows.push(TrainEpochRow {
            epoch,
            lr,
            train_loss,
            test_loss,
            test_acc,
        });
    }

    let checkpoint = cfg.out_dir.join("checkpoint.bin");
    let meta = NetMeta {
        domain: cfg.domain,
        genotype: genotype.clone(),
        net: cfg.net.clone(),
        in_channels: data.in_channels,
        classes: data.classes,
    };
    checkpoint::save(&checkpoint, &meta, &net.collect_state())?;

    let metrics_path = cfg.out_dir.join("metrics.csv");
    let mut w = csv::Writer::from_path(&metrics_path)?;
    w.write_record(["epoch", "lr", "train_loss", "test_loss", "test_acc"])?;
    for r in &rows {
        w.write_record([
            r.epoch.to_string(),
            format!("{}", r.lr),
            format!("{}", r.train_loss),
            r.test_loss.map_or(String::new(), |v| format!("{v}")),
            r.test_acc.map_or(String::new(), |v| format!("{v}")),
        ])?;
    }
    w.flush()?;
    let final_test_acc = rows.last().and_then(|r| r.test_acc);
    Ok(TrainOutcome {
        checkpoint,
        metrics_path,
        rows,
        final_test_acc,
    })
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

/// Where evaluation data comes from: explicit IDX files or a config's
/// data block (whose test split is preferred).
pub enum EvalSource {
    Idx {
        images: PathBuf,
        labels: PathBuf,
        normalize_mean: Vec<f64>,
        normalize_std: Vec<f64>,
    },
    Spec {
        spec: DataSpec,
        seed: u64,
    },
}

#[derive(Debug)]
pub struct EvalOutcome {
    pub top1: f64,
    pub samples: usize,
    pub counts: OpCounts,
    pub predictions: Vec<usize>,
    pub prediction_hash: String,
}

pub fn cmd_eval(ckpt_path: &Path, source: &EvalSource, batch: usize) -> Result<EvalOutcome> {
    let (meta, mut map) = checkpoint::load(ckpt_path)?;
    if meta.domain != Domain::Shift {
        bail!(
            "{} holds a real-domain network; evaluation runs the fixed-point shift path \
             (quantize it first)",
            ckpt_path.display()
        );
    }
    let net_cfg = meta.net.to_supernet_cfg(meta.in_channels, meta.classes);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut ids = IdGen::new();
    let mut net = instantiate(
        &meta.genotype,
        &net_cfg,
        WeightMode::ShiftQuantized {
            ste: Default::default(),
        },
        &mut ids,
        &mut rng,
    )?;
    net.load_collected_state(&mut map)?;

    let data = match source {
        EvalSource::Idx {
            images,
            labels,
            normalize_mean,
            normalize_std,
        } => dataset::load(
            &DataSpec::IdxImages {
                train_images: images.clone(),
                train_labels: labels.clone(),
                test_images: None,
                test_labels: None,
                normalize_mean: normalize_mean.clone(),
                normalize_std: normalize_std.clone(),
            },
            0,
        )?
        .train,
        EvalSource::Spec { spec, seed } => {
            let loaded = dataset::load(spec, *seed)?;
            loaded.test.unwrap_or(loaded.train)
        }
    };
    if data.images.shape()[1] != meta.in_channels {
        bail!(
            "dataset has {} channels, checkpoint expects {}",
            data.images.shape()[1],
            meta.in_channels
        );
    }
    if data.classes() > meta.classes {
        bail!(
            "dataset labels reach class {}, checkpoint has {} outputs",
            data.classes() - 1,
            meta.classes
        );
    }

    let before = fxp::count::snapshot();
    let mut predictions = Vec::with_capacity(data.len());
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch) {
        let (x, y) = data.gather(chunk);
        let fx = FxTensor::from_real_array(&x).map_err(anyhow::Error::from)?;
        let logits = net.eval_fixed(&fx)?;
        let k = logits.shape[1];
        for (i, &label) in y.iter().enumerate() {
            let row = &logits.data[i * k..(i + 1) * k];
            let mut best = 0;
            for j in 1..k {
                if row[j].raw() > row[best].raw() {
                    best = j;
                }
            }
            predictions.push(best);
            if best == label {
                correct += 1;
            }
        }
    }
    let after = fxp::count::snapshot();
    let counts = OpCounts {
        shifts: after.shifts - before.shifts,
        flips: after.flips - before.flips,
        adds: after.adds - before.adds,
        weight_mults: after.weight_mults - before.weight_mults,
    };
    if counts.weight_mults != 0 {
        bail!(
            "fixed-path evaluation executed {} weight multiplications; the shift path is broken",
            counts.weight_mults
        );
    }
    let prediction_hash = fnv1a64(predictions.iter().map(|&p| p as u8));
    Ok(EvalOutcome {
        top1: correct as f64 / data.len() as f64,
        samples: data.len(),
        counts,
        predictions,
        prediction_hash,
    })
}

// ---------------------------------------------------------------------------
// quantize
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct QuantizeLayerErr {
    pub name: String,
    pub count: usize,
    pub max_abs_err: f64,
    pub mean_abs_err: f64,
}

#[derive(Debug)]
pub struct QuantizeOutcome {
    pub output: PathBuf,
    pub layers: Vec<QuantizeLayerErr>,
    /// Weight-tensor storage ratio versus 32-bit floats.
    pub compression_ratio: f64,
}

pub fn cmd_quantize(
    input: &Path,
    output: &Path,
    report: Option<&Path>,
) -> Result<QuantizeOutcome> {
    let (meta, map) = checkpoint::load(input)?;
    if meta.domain != Domain::Real {
        bail!(
            "{} is already in the shift domain; quantize expects a real-domain checkpoint",
            input.display()
        );
    }
    let mut entries = Vec::with_capacity(meta.tensors.len());
    let mut layers = Vec::new();
    let mut float_bits = 0u64;
    let mut packed_bits = 0u64;
    for t in &meta.tensors {
        let payload = map
            .get(&t.name)
            .with_context(|| format!("tensor '{}' missing from payload", t.name))?;
        let is_weight = t.name.ends_with(".weight") && t.kind == "f64";
        if !is_weight {
            entries.push(shiftnet::nn::state::StateEntry {
                name: t.name.clone(),
                payload: payload.clone(),
            });
            continue;
        }
        let TensorPayload::Real(w) = payload else {
            bail!("weight tensor '{}' is not raw f64", t.name);
        };
        let mut p_bar = Vec::with_capacity(w.len());
        let mut s_bar = Vec::with_capacity(w.len());
        let mut max_err = 0.0f64;
        let mut sum_err = 0.0f64;
        for &v in w.iter() {
            let near = nearest_shift_weight(v);
            p_bar.push(near.p_bar);
            s_bar.push(near.s_bar);
            let err = (v - near.w).abs();
            max_err = max_err.max(err);
            sum_err += err;
        }
        layers.push(QuantizeLayerErr {
            name: t.name.clone(),
            count: w.len(),
            max_abs_err: max_err,
            mean_abs_err: sum_err / w.len() as f64,
        });
        float_bits += 32 * w.len() as u64;
        packed_bits += 8 * pack_shift5(&p_bar, &s_bar, &[w.len()])
            .map_err(anyhow::Error::from)?
            .len() as u64
            - 8 * 8; // exclude the small shape header from the ratio
        entries.push(shiftnet::nn::state::StateEntry {
            name: t.name.clone(),
            payload: TensorPayload::Shift {
                shape: t.shape.clone(),
                p_bar,
                s_bar,
            },
        });
    }
    if layers.is_empty() {
        bail!("{} holds no weight tensors to quantize", input.display());
    }
    let out_meta = NetMeta {
        domain: Domain::Shift,
        genotype: meta.genotype.clone(),
        net: meta.net.clone(),
        in_channels: meta.in_channels,
        classes: meta.classes,
    };
    checkpoint::save(output, &out_meta, &entries)?;
    if let Some(rp) = report {
        let mut w = csv::Writer::from_path(rp)?;
        w.write_record(["layer", "weights", "max_abs_err", "mean_abs_err"])?;
        for l in &layers {
            w.write_record([
                l.name.clone(),
                l.count.to_string(),
                format!("{}", l.max_abs_err),
                format!("{}", l.mean_abs_err),
            ])?;
        }
        w.flush()?;
    }
    Ok(QuantizeOutcome {
        output: output.to_path_buf(),
        layers,
        compression_ratio: float_bits as f64 / packed_bits as f64,
    })
}

// ---------------------------------------------------------------------------
// bench
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct BenchRow {
    pub size: usize,
    pub dense_ms: f64,
    pub shift_ms: f64,
    pub max_abs_diff: f64,
    pub tolerance: f64,
    pub dense_counts: OpCounts,
    pub shift_counts: OpCounts,
}

/// Matched matrix-multiply workloads: a dense real kernel against the
/// shift/flip/add kernel with the same effective weights. Reports wall
/// times and instrumented op counts; makes no claim about relative
/// hardware cost.
pub fn cmd_bench(sizes: &[usize], reps: usize, seed: u64, out: Option<&Path>) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::with_capacity(sizes.len());
    for &n in sizes {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ n as u64);
        let x_real = ArrayD::from_shape_fn(IxDyn(&[n, n]), |_| rng.random_range(-1.0..1.0));
        let x_fx = FxTensor::from_real_array(&x_real).map_err(anyhow::Error::from)?;
        let x_round = x_fx.to_real_array();
        let n_w = n * n;
        let p_bar: Vec<i8> = (0..n_w).map(|_| -(rng.random_range(0..8) as i8)).collect();
        let s_bar: Vec<i8> = (0..n_w)
            .map(|_| [-1i8, 0, 1][rng.random_range(0..3)])
            .collect();
        let w_eff = ArrayD::from_shape_vec(
            IxDyn(&[n, n]),
            p_bar
                .iter()
                .zip(&s_bar)
                .map(|(&p, &s)| s as f64 * (p as f64).exp2())
                .collect(),
        )
        .unwrap();

        let before = fxp::count::snapshot();
        let y_shift = shift_linear_fixed(&x_fx, &p_bar, &s_bar, None, n, n)
            .map_err(anyhow::Error::from)?;
        let mid = fxp::count::snapshot();
        let y_dense = linear_dense(&x_round, &w_eff, None).map_err(anyhow::Error::from)?;
        let after = fxp::count::snapshot();
        let shift_counts = OpCounts {
            shifts: mid.shifts - before.shifts,
            flips: mid.flips - before.flips,
            adds: mid.adds - before.adds,
            weight_mults: mid.weight_mults - before.weight_mults,
        };
        let dense_counts = OpCounts {
            shifts: after.shifts - mid.shifts,
            flips: after.flips - mid.flips,
            adds: after.adds - mid.adds,
            weight_mults: after.weight_mults - mid.weight_mults,
        };

        // cross-check: both kernels compute the same product up to
        // fixed-point rounding (n accumulated half-ulp roundings plus
        // the final narrow)
        let y_shift_real = y_shift.to_real_array();
        let max_abs_diff = (&y_shift_real - &y_dense)
            .iter()
            .fold(0.0f64, |m, &v| m.max(v.abs()));
        let tolerance = n as f64 * 2f64.powi(-17) + 2f64.powi(-16);
        if max_abs_diff > tolerance {
            bail!(
                "bench size {n}: kernels disagree by {max_abs_diff:e} (tolerance {tolerance:e})"
            );
        }

        let time_best = |f: &mut dyn FnMut()| -> f64 {
            let mut best = f64::INFINITY;
            for _ in 0..reps.max(1) {
                let t0 = std::time::Instant::now();
                f();
                best = best.min(t0.elapsed().as_secs_f64() * 1e3);
            }
            best
        };
        let shift_ms = time_best(&mut || {
            let _ = shift_linear_fixed(&x_fx, &p_bar, &s_bar, None, n, n).unwrap();
        });
        let dense_ms = time_best(&mut || {
            let _ = linear_dense(&x_round, &w_eff, None).unwrap();
        });

        rows.push(BenchRow {
            size: n,
            dense_ms,
            shift_ms,
            max_abs_diff,
            tolerance,
            dense_counts,
            shift_counts,
        });
    }
    if let Some(path) = out {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "size",
            "dense_ms",
            "shift_ms",
            "dense_weight_mults",
            "shift_weight_mults",
            "shifts",
            "flips",
            "adds",
            "max_abs_diff",
        ])?;
        for r in &rows {
            w.write_record([
                r.size.to_string(),
                format!("{}", r.dense_ms),
                format!("{}", r.shift_ms),
                r.dense_counts.weight_mults.to_string(),
                r.shift_counts.weight_mults.to_string(),
                r.shift_counts.shifts.to_string(),
                r.shift_counts.flips.to_string(),
                r.shift_counts.adds.to_string(),
                format!("{}", r.max_abs_diff),
            ])?;
        }
        w.flush()?;
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// export-genotype
// ---------------------------------------------------------------------------

pub fn cmd_export(spec: &str, format: &str, out: Option<&Path>) -> Result<String> {
    let g = resolve_genotype(spec)?;
    let text = match format {
        "json" => g.to_json(),
        "table" => g.to_table(),
        other => bail!("unknown format '{other}' (json, table)"),
    };
    if let Some(p) = out {
        std::fs::write(p, &text).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(text)
}
