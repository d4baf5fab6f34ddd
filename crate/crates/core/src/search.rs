//! Two-phase architecture search.
//!
//! Phase 1 (operation search) trains network weights on one half of the
//! data and per-group operation logits on the other half, alternating
//! first-order updates. At the boundary each edge keeps its per-group
//! argmax survivors. Phase 2 (topology search) relaxes each node's
//! pairwise input-edge combinations under an annealed temperature and
//! updates weights, operation logits, and topology logits jointly on the
//! full training set. Shift parameters are regularized through the
//! squared effective weight `(2^P S)^2`, and the weight learning rate is
//! cosine-annealed with a reset at the topology boundary.

use ndarray::{ArrayD, Axis, IxDyn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::genotype::{Genotype, NodeGene};
use crate::nn::conv::WeightMode;
use crate::nn::graph::{softmax1d, Graph, NodeId, OpRule};
use crate::nn::param::{IdGen, Param};
use crate::optim::{OptKind, Optimizer};
use crate::shiftparam::SteVariant;
use crate::space::{
    CellTypeArch, ForwardPhase, OpKind, Supernet, SupernetCfg, CONV_GROUP, TOPO_GROUP,
};

// ---------------------------------------------------------------------------
// Schedules
// ---------------------------------------------------------------------------

/// Annealing temperature at topology epoch `t`: `t0 * theta^t`.
pub fn temperature(t: usize, t0: f64, theta: f64) -> f64 {
    t0 * theta.powi(t as i32)
}

/// Decay rate that reaches `t_end` after `epochs` topology epochs.
pub fn theta_for(t0: f64, t_end: f64, epochs: usize) -> f64 {
    (t_end / t0).powf(1.0 / epochs as f64)
}

/// Cosine-annealed weight learning rate with a reset to `eta0` at the
/// start of the topology phase.
pub fn lr_schedule(t: usize, op_epochs: usize, topo_epochs: usize, eta0: f64) -> f64 {
    use std::f64::consts::PI;
    if t < op_epochs {
        eta0 * 0.5 * (1.0 + (PI * t as f64 / op_epochs as f64).cos())
    } else {
        let tt = (t - op_epochs).min(topo_epochs);
        eta0 * 0.5 * (1.0 + (PI * tt as f64 / topo_epochs as f64).cos())
    }
}

// ---------------------------------------------------------------------------
// Topology algebra
// ---------------------------------------------------------------------------

/// All unordered pairs of `n` incoming edges, lexicographic.
pub fn pair_combinations(n: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(n * (n - 1) / 2);
    for i1 in 0..n {
        for i2 in i1 + 1..n {
            out.push((i1, i2));
        }
    }
    out
}

/// Temperature-scaled softmax over combination logits.
pub fn topo_softmax(logits: &[f64], t: f64) -> Result<Vec<f64>> {
    if t <= 0.0 {
        return Err(Error::InvalidConfig(format!(
            "softmax temperature must be positive, got {t}"
        )));
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&v| ((v - m) / t).exp()).collect();
    let z: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / z).collect())
}

/// Edge importance: each edge accumulates half the probability of every
/// combination containing it (combinations always pair two edges).
pub fn edge_importance(beta: &[f64], n_edges: usize) -> Result<Vec<f64>> {
    let pairs = pair_combinations(n_edges);
    if beta.len() != pairs.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} combination weights for {} edges (want {})",
            beta.len(),
            n_edges,
            pairs.len()
        )));
    }
    let mut gamma = vec![0.0f64; n_edges];
    for (c, &(a, b)) in pairs.iter().enumerate() {
        gamma[a] += beta[c] / 2.0;
        gamma[b] += beta[c] / 2.0;
    }
    Ok(gamma)
}

/// Graph node mapping combination logits to per-edge importance under
/// temperature `t`.
pub struct TopoGammaRule {
    pairs: Vec<(usize, usize)>,
    temperature: f64,
}

impl OpRule for TopoGammaRule {
    fn backward(
        &self,
        grad_out: &ArrayD<f64>,
        _out: &ArrayD<f64>,
        inputs: &[&ArrayD<f64>],
    ) -> Vec<Option<ArrayD<f64>>> {
        let logits = inputs[0];
        let sm = softmax1d(logits, self.temperature);
        let mut dsm = vec![0.0f64; self.pairs.len()];
        for (c, &(a, b)) in self.pairs.iter().enumerate() {
            dsm[c] = 0.5 * (grad_out[[a]] + grad_out[[b]]);
        }
        let dot: f64 = sm.iter().zip(&dsm).map(|(&s, &d)| s * d).sum();
        let dlogits: Vec<f64> = sm
            .iter()
            .zip(&dsm)
            .map(|(&s, &d)| s * (d - dot) / self.temperature)
            .collect();
        vec![Some(ArrayD::from_shape_vec(logits.raw_dim(), dlogits).unwrap())]
    }
}

/// Pushes the edge-importance vector for one node onto the graph.
pub fn gamma_node(
    g: &mut Graph,
    beta: &Param,
    n_edges: usize,
    temperature: f64,
) -> Result<NodeId> {
    let pairs = pair_combinations(n_edges);
    if beta.data.len() != pairs.len() {
        return Err(Error::ShapeMismatch(format!(
            "beta logits {} vs combinations {}",
            beta.data.len(),
            pairs.len()
        )));
    }
    let leaf = g.param_leaf(beta);
    let sm = topo_softmax(g.value(leaf).as_slice().unwrap(), temperature)?;
    let mut gamma = vec![0.0f64; n_edges];
    for (c, &(a, b)) in pairs.iter().enumerate() {
        gamma[a] += sm[c] / 2.0;
        gamma[b] += sm[c] / 2.0;
    }
    Ok(g.push_node(
        ArrayD::from_shape_vec(IxDyn(&[n_edges]), gamma).unwrap(),
        vec![leaf],
        Some(Box::new(TopoGammaRule {
            pairs,
            temperature,
        })),
    ))
}

// ---------------------------------------------------------------------------
// Pruning and derivation
// ---------------------------------------------------------------------------

fn argmax_first(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Per-group argmax survivors for one edge, `(topology op, conv op)`.
/// The zero operation participates in the relaxation but is never
/// selected; ties keep the lowest in-group index.
pub fn select_group_ops(conv_logits: &[f64], topo_logits: &[f64]) -> (OpKind, OpKind) {
    let conv = CONV_GROUP[argmax_first(conv_logits)];
    let nonzero: Vec<usize> = (0..TOPO_GROUP.len())
        .filter(|&i| TOPO_GROUP[i] != OpKind::Zero)
        .collect();
    let mut best = nonzero[0];
    for &i in &nonzero[1..] {
        if topo_logits[i] > topo_logits[best] {
            best = i;
        }
    }
    (TOPO_GROUP[best], conv)
}

// ---------------------------------------------------------------------------
// Modified L2 regularization
// ---------------------------------------------------------------------------

/// Penalty term `sum((2^P * sign(S))^2)` over one shift/sign tensor pair
/// (continuous `P`, ternary sign of `S`).
pub fn shift_l2_penalty(p: &ArrayD<f64>, s: &ArrayD<f64>) -> f64 {
    ndarray::Zip::from(p).and(s).fold(0.0, |acc, &p, &s| {
        let sb = crate::shiftparam::ternary_sign(s) as f64;
        acc + sb * sb * (2.0 * p).exp2()
    })
}

/// Exact gradient of the penalty w.r.t. `P`:
/// `lambda * sign(S)^2 * 2^(2P) * ln 2` (the straight-through surrogate
/// applies only to the task-loss path, not to this term).
pub fn shift_l2_penalty_grad_p(p: &ArrayD<f64>, s: &ArrayD<f64>, lambda: f64) -> ArrayD<f64> {
    ndarray::Zip::from(p).and(s).map_collect(|&p, &s| {
        let sb = crate::shiftparam::ternary_sign(s) as f64;
        lambda * sb * sb * (2.0 * p).exp2() * std::f64::consts::LN_2
    })
}

/// `loss + lambda/2 * penalty_sum`.
pub fn regularized_loss(loss: f64, penalty_sum: f64, lambda: f64) -> f64 {
    loss + 0.5 * lambda * penalty_sum
}

// ---------------------------------------------------------------------------
// Data plumbing
// ---------------------------------------------------------------------------

/// In-memory labeled image set, NCHW.
#[derive(Debug, Clone)]
pub struct DataSplit {
    pub images: ArrayD<f64>,
    pub labels: Vec<usize>,
}

impl DataSplit {
    pub fn new(images: ArrayD<f64>, labels: Vec<usize>) -> Result<DataSplit> {
        if images.ndim() != 4 || images.shape()[0] != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "dataset images {:?} vs {} labels",
                images.shape(),
                labels.len()
            )));
        }
        Ok(DataSplit { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |&m| m + 1)
    }

    pub fn gather(&self, idx: &[usize]) -> (ArrayD<f64>, Vec<usize>) {
        let views: Vec<_> = idx
            .iter()
            .map(|&i| self.images.index_axis(Axis(0), i))
            .collect();
        let images = ndarray::stack(Axis(0), &views).unwrap().into_dyn();
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        (images, labels)
    }

    pub fn subset(&self, idx: &[usize]) -> DataSplit {
        let (images, labels) = self.gather(idx);
        DataSplit { images, labels }
    }
}

fn shuffled_batches(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    // Partial trailing batches are dropped: batch statistics need at
    // least two samples and fixed batch shapes keep epochs uniform.
    idx.chunks_exact(batch).map(|c| c.to_vec()).collect()
}

// ---------------------------------------------------------------------------
// Search state and loop
// ---------------------------------------------------------------------------

/// Hyperparameters of one search run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchRunCfg {
    pub operation_epochs: usize,
    pub topology_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub w_optimizer: OptKind,
    pub w_lr: f64,
    pub w_weight_decay: f64,
    /// Weight of the `(2^P S)^2` regularizer on shift parameters.
    pub shift_l2_lambda: f64,
    pub arch_lr: f64,
    pub arch_weight_decay: f64,
    pub t0: f64,
    pub t_end: f64,
    #[serde(default)]
    pub ste: SteVariant,
}

impl Default for SearchRunCfg {
    fn default() -> Self {
        SearchRunCfg {
            operation_epochs: 30,
            topology_epochs: 40,
            batch_size: 128,
            seed: 0,
            w_optimizer: OptKind::RAdam,
            w_lr: 0.01,
            w_weight_decay: 3e-4,
            shift_l2_lambda: 3e-4,
            arch_lr: 3e-4,
            arch_weight_decay: 1e-3,
            t0: 10.0,
            t_end: 0.02,
            ste: SteVariant::Standard,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchPhase {
    Operation,
    Topology,
}

impl SearchPhase {
    pub fn as_str(self) -> &'static str {
        match self {
            SearchPhase::Operation => "operation",
            SearchPhase::Topology => "topology",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub phase: SearchPhase,
    pub lr: f64,
    pub temperature: Option<f64>,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub max_alpha_skip_fraction: f64,
}

pub struct SearchOutcome {
    pub genotype: Genotype,
    pub metrics: Vec<EpochMetrics>,
}

/// Mutable state of a search: the supernet, both optimizers, and the
/// phase flag. The phase flips exactly once, at the configured boundary.
pub struct SearchState {
    pub cfg: SearchRunCfg,
    pub net: Supernet,
    pub ids: IdGen,
    pub topology_phase: bool,
    pub w_opt: Optimizer,
    pub arch_opt: Optimizer,
}

impl SearchState {
    pub fn new(cfg: SearchRunCfg, net_cfg: &SupernetCfg, rng: &mut ChaCha8Rng) -> Result<SearchState> {
        let mut ids = IdGen::new();
        let net = Supernet::new(
            net_cfg.clone(),
            &mut ids,
            rng,
            WeightMode::ShiftQuantized { ste: cfg.ste },
        )?;
        let w_opt = Optimizer::for_weights(cfg.w_optimizer, cfg.w_lr, cfg.w_weight_decay);
        let arch_opt = Optimizer::for_arch(cfg.arch_lr, cfg.arch_weight_decay);
        Ok(SearchState {
            cfg,
            net,
            ids,
            topology_phase: false,
            w_opt,
            arch_opt,
        })
    }

    fn forward_loss(
        &mut self,
        x: &ArrayD<f64>,
        labels: &[usize],
        train: bool,
        phase: ForwardPhase,
    ) -> Result<(Graph, NodeId, f64)> {
        if labels.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let mut g = Graph::new();
        let xn = g.constant(x.clone());
        let logits = self.net.forward(&mut g, xn, train, phase)?;
        let loss = g.cross_entropy(logits, labels);
        let loss_val = g.value(loss)[[]];
        if !loss_val.is_finite() {
            return Err(Error::Diverged(format!(
                "non-finite loss {loss_val} (batch of {})",
                labels.len()
            )));
        }
        Ok((g, loss, loss_val))
    }

    fn harvest_and_step_weights(&mut self, g: &Graph) {
        {
            let mut params = self.net.weight_params();
            for p in params.iter_mut() {
                if let Some(gr) = g.param_grad(p.id) {
                    p.grad += gr;
                }
            }
        }
        let lambda = self.cfg.shift_l2_lambda;
        self.net
            .visit_shift_pairs_mut(&mut |pair| pair.add_reg_grad(lambda));
        {
            let mut params = self.net.weight_params();
            self.w_opt.step(&mut params);
            for p in params.iter_mut() {
                p.zero_grad();
            }
        }
        self.net.visit_shift_pairs_mut(&mut |pair| pair.clamp());
    }

    fn harvest_and_step_arch(&mut self, g: &Graph) {
        let topology = self.topology_phase;
        let mut params = self.net.arch_params(topology);
        for p in params.iter_mut() {
            if let Some(gr) = g.param_grad(p.id) {
                p.grad += gr;
            }
        }
        self.arch_opt.step(&mut params);
        for p in params.iter_mut() {
            p.zero_grad();
        }
    }

    /// One first-order alternating update: weights on the training batch
    /// (with the shift regularizer), then operation logits on the
    /// validation batch. Returns `(train_loss, val_loss)`.
    pub fn bilevel_step(
        &mut self,
        train_batch: (&ArrayD<f64>, &[usize]),
        val_batch: (&ArrayD<f64>, &[usize]),
    ) -> Result<(f64, f64)> {
        assert!(!self.topology_phase, "bilevel updates belong to phase 1");
        let (mut g, loss, train_loss) =
            self.forward_loss(train_batch.0, train_batch.1, true, ForwardPhase::Operation)?;
        g.backward(loss);
        self.harvest_and_step_weights(&g);

        let (mut g, loss, val_loss) =
            self.forward_loss(val_batch.0, val_batch.1, true, ForwardPhase::Operation)?;
        g.backward(loss);
        self.harvest_and_step_arch(&g);
        Ok((train_loss, val_loss))
    }

    /// One joint update of `(w, alpha, beta)` on a merged-training-set
    /// batch with the annealed temperature.
    pub fn one_level_step(
        &mut self,
        batch: (&ArrayD<f64>, &[usize]),
        temp: f64,
    ) -> Result<f64> {
        assert!(self.topology_phase, "one-level updates belong to phase 2");
        let (mut g, loss, loss_val) = self.forward_loss(
            batch.0,
            batch.1,
            true,
            ForwardPhase::Topology { temperature: temp },
        )?;
        g.backward(loss);
        self.harvest_and_step_weights(&g);
        self.harvest_and_step_arch(&g);
        Ok(loss_val)
    }

    /// Keeps each edge's per-group argmax, reinitializes the two-way
    /// operation logits, and creates the topology logits.
    pub fn prune(&mut self) -> Result<()> {
        let selections = |arch: &CellTypeArch| -> Vec<[OpKind; 2]> {
            arch.edge_logits
                .iter()
                .map(|gl| {
                    let (ot, oc) = select_group_ops(
                        gl.conv.data.as_slice().unwrap(),
                        gl.topo.data.as_slice().unwrap(),
                    );
                    // canonical order: conv-group ops index lower
                    [oc, ot]
                })
                .collect()
        };
        let normal = selections(&self.net.arch_normal);
        let reduce = selections(&self.net.arch_reduce);
        self.net.apply_pruning(&mut self.ids, normal, reduce)?;
        self.arch_opt = Optimizer::for_arch(self.cfg.arch_lr, self.cfg.arch_weight_decay);
        self.topology_phase = true;
        Ok(())
    }

    /// Loss and top-1 accuracy over a split (no parameter updates).
    pub fn evaluate(
        &mut self,
        data: &DataSplit,
        batch: usize,
        phase: ForwardPhase,
    ) -> Result<(f64, f64)> {
        let mut total_loss = 0.0;
        let mut correct = 0usize;
        let mut seen = 0usize;
        let idx: Vec<usize> = (0..data.len()).collect();
        for chunk in idx.chunks(batch) {
            let (x, y) = data.gather(chunk);
            if y.len() < 2 {
                continue;
            }
            let mut g = Graph::new();
            let xn = g.constant(x);
            let logits = self.net.forward(&mut g, xn, false, phase)?;
            let loss = g.cross_entropy(logits, &y);
            total_loss += g.value(loss)[[]] * y.len() as f64;
            let lv = g.value(logits);
            for (i, &label) in y.iter().enumerate() {
                let row = lv.index_axis(Axis(0), i);
                let pred = argmax_first(row.as_slice().unwrap());
                if pred == label {
                    correct += 1;
                }
            }
            seen += y.len();
        }
        if seen == 0 {
            return Err(Error::EmptyBatch);
        }
        Ok((total_loss / seen as f64, correct as f64 / seen as f64))
    }

    /// Largest softmax weight the skip connection holds on any edge.
    pub fn max_alpha_skip(&self) -> f64 {
        let skip_idx = TOPO_GROUP
            .iter()
            .position(|&k| k == OpKind::SkipConnect)
            .unwrap();
        let mut best = 0.0f64;
        for arch in [&self.net.arch_normal, &self.net.arch_reduce] {
            if let Some(pruned) = &arch.pruned {
                for (e, a2) in pruned.alpha2.iter().enumerate() {
                    if let Some(k) = pruned.edge_ops[e]
                        .iter()
                        .position(|&op| op == OpKind::SkipConnect)
                    {
                        let sm = topo_softmax(a2.data.as_slice().unwrap(), 1.0).unwrap();
                        best = best.max(sm[k]);
                    }
                }
            } else {
                for gl in &arch.edge_logits {
                    let sm = topo_softmax(gl.topo.data.as_slice().unwrap(), 1.0).unwrap();
                    best = best.max(sm[skip_idx]);
                }
            }
        }
        best
    }

    /// Final architecture: per node the argmax edge combination, per
    /// chosen edge the argmax surviving operation. Entries are ordered
    /// by predecessor.
    pub fn derive(&self) -> Result<Genotype> {
        let nodes = self.net.cfg.nodes;
        let derive_type = |arch: &CellTypeArch| -> Result<Vec<Vec<NodeGene>>> {
            let pruned = arch.pruned.as_ref().ok_or_else(|| {
                Error::InvalidConfig("architecture derivation before the topology phase".into())
            })?;
            let mut out = Vec::with_capacity(nodes);
            let mut edge_base = 0usize;
            for j in 0..nodes {
                let n_in = 2 + j;
                let pairs = pair_combinations(n_in);
                let beta = pruned.beta[j].data.as_slice().unwrap();
                let (i1, i2) = pairs[argmax_first(beta)];
                let mut genes = Vec::with_capacity(2);
                for &i in &[i1, i2] {
                    let e = edge_base + i;
                    let a2 = pruned.alpha2[e].data.as_slice().unwrap();
                    let k = argmax_first(a2);
                    genes.push(NodeGene(pruned.edge_ops[e][k], i));
                }
                out.push(genes);
                edge_base += n_in;
            }
            Ok(out)
        };
        let g = Genotype {
            normal: derive_type(&self.net.arch_normal)?,
            normal_concat: (2..2 + nodes).collect(),
            reduce: derive_type(&self.net.arch_reduce)?,
            reduce_concat: (2..2 + nodes).collect(),
        };
        g.validate()?;
        Ok(g)
    }
}

/// Runs both phases and returns the derived genotype plus per-epoch
/// metrics. Deterministic for a fixed seed.
pub fn run_search(
    cfg: &SearchRunCfg,
    net_cfg: &SupernetCfg,
    data: &DataSplit,
) -> Result<SearchOutcome> {
    if data.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if data.len() / 2 < cfg.batch_size {
        return Err(Error::InvalidConfig(format!(
            "batch size {} exceeds half the training set ({} samples); \
             the operation phase trains on halves",
            cfg.batch_size,
            data.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = SearchState::new(cfg.clone(), net_cfg, &mut rng)?;

    // Phase 1 sees the data as two halves: weights on one, operation
    // logits on the other. Phase 2 trains on the whole set.
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(&mut rng);
    let (ti, vi) = idx.split_at(data.len() / 2);
    let d_train = data.subset(ti);
    let d_val = data.subset(vi);

    let theta = theta_for(cfg.t0, cfg.t_end, cfg.topology_epochs.max(1));
    let total = cfg.operation_epochs + cfg.topology_epochs;
    let mut metrics = Vec::with_capacity(total);
    for epoch in 0..total {
        let lr = lr_schedule(epoch, cfg.operation_epochs, cfg.topology_epochs, cfg.w_lr);
        state.w_opt.set_lr(lr);
        if epoch == cfg.operation_epochs && !state.topology_phase {
            state.prune()?;
        }
        let mut train_losses = Vec::new();
        let (phase, temp) = if state.topology_phase {
            let t = temperature(epoch - cfg.operation_epochs, cfg.t0, theta);
            (SearchPhase::Topology, Some(t))
        } else {
            (SearchPhase::Operation, None)
        };
        match phase {
            SearchPhase::Operation => {
                let bt = shuffled_batches(d_train.len(), cfg.batch_size, &mut rng);
                let bv = shuffled_batches(d_val.len(), cfg.batch_size, &mut rng);
                for (ib, vb) in bt.iter().zip(bv.iter()) {
                    let (xt, yt) = d_train.gather(ib);
                    let (xv, yv) = d_val.gather(vb);
                    let (tl, _) = state.bilevel_step((&xt, &yt), (&xv, &yv))?;
                    train_losses.push(tl);
                }
            }
            SearchPhase::Topology => {
                let batches = shuffled_batches(data.len(), cfg.batch_size, &mut rng);
                for b in &batches {
                    let (x, y) = data.gather(b);
                    train_losses.push(state.one_level_step((&x, &y), temp.unwrap())?);
                }
            }
        }
        let fw = match temp {
            Some(t) => ForwardPhase::Topology { temperature: t },
            None => ForwardPhase::Operation,
        };
        let (val_loss, val_acc) = state.evaluate(&d_val, cfg.batch_size, fw)?;
        let train_loss = if train_losses.is_empty() {
            f64::NAN
        } else {
            train_losses.iter().sum::<f64>() / train_losses.len() as f64
        };
        metrics.push(EpochMetrics {
            epoch,
            phase,
            lr,
            temperature: temp,
            train_loss,
            val_loss,
            val_acc,
            max_alpha_skip_fraction: state.max_alpha_skip(),
        });
    }
    let genotype = state.derive()?;
    Ok(SearchOutcome { genotype, metrics })
}
