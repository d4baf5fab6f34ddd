//! The shift-oriented operation search space and the cell supernet.
//!
//! Eight candidate operations, split into the convolution group (the ops
//! that carry shift/sign weights) and the topology group (pooling, skip,
//! zero). Every edge of the cell DAG holds one instance of each candidate;
//! phase 1 mixes them with per-group softmax weights, phase 2 restricts
//! each edge to its two per-group survivors and weighs whole edges by
//! their pairwise-combination importance.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fxp::FxTensor;
use crate::net::{default_reduction_positions, plan_cells, CellSlot, Stem};
use crate::nn::conv::WeightMode;
use crate::nn::graph::{Graph, NodeId};
use crate::nn::layers::{
    avg_pool3, avg_pool3_fixed, global_avg_pool, max_pool3, max_pool3_fixed, zero_fixed,
    zero_out, DilConv, FactorizedReduce, ReluConvBn, SepConv, ShiftLinear, Stateful,
};
use crate::nn::param::{IdGen, Param, ParamId, ParamKind, ShiftPair};
use crate::search;

/// The candidate operation vocabulary, in canonical order: the four
/// weighted convolution ops first, then the four topology ops.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    SepConv3x3,
    SepConv5x5,
    DilConv3x3,
    DilConv5x5,
    MaxPool3x3,
    AvgPool3x3,
    SkipConnect,
    Zero,
}

pub const CONV_GROUP: [OpKind; 4] = [
    OpKind::SepConv3x3,
    OpKind::SepConv5x5,
    OpKind::DilConv3x3,
    OpKind::DilConv5x5,
];

pub const TOPO_GROUP: [OpKind; 4] = [
    OpKind::MaxPool3x3,
    OpKind::AvgPool3x3,
    OpKind::SkipConnect,
    OpKind::Zero,
];

pub const ALL_OPS: [OpKind; 8] = [
    OpKind::SepConv3x3,
    OpKind::SepConv5x5,
    OpKind::DilConv3x3,
    OpKind::DilConv5x5,
    OpKind::MaxPool3x3,
    OpKind::AvgPool3x3,
    OpKind::SkipConnect,
    OpKind::Zero,
];

/// Which softmax group an operation belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpGroup {
    Conv,
    Topo,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::SepConv3x3 => "sep_conv_3x3",
            OpKind::SepConv5x5 => "sep_conv_5x5",
            OpKind::DilConv3x3 => "dil_conv_3x3",
            OpKind::DilConv5x5 => "dil_conv_5x5",
            OpKind::MaxPool3x3 => "max_pool_3x3",
            OpKind::AvgPool3x3 => "avg_pool_3x3",
            OpKind::SkipConnect => "skip_connect",
            OpKind::Zero => "zero",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        ALL_OPS.iter().copied().find(|k| k.name() == name)
    }

    pub fn global_index(self) -> usize {
        ALL_OPS.iter().position(|&k| k == self).unwrap()
    }

    /// Group membership and index within the group's logit vector.
    pub fn group(self) -> (OpGroup, usize) {
        if let Some(i) = CONV_GROUP.iter().position(|&k| k == self) {
            (OpGroup::Conv, i)
        } else {
            let i = TOPO_GROUP.iter().position(|&k| k == self).unwrap();
            (OpGroup::Topo, i)
        }
    }

    pub fn carries_shift_weights(self) -> bool {
        matches!(self.group(), (OpGroup::Conv, _))
    }
}

impl Serialize for OpKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for OpKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let name = String::deserialize(d)?;
        OpKind::from_name(&name)
            .ok_or_else(|| serde::de::Error::custom(format!("unknown operation '{name}'")))
    }
}

/// One instantiated candidate operation on an edge.
#[derive(Debug)]
#[allow(clippy::large_enum_variant)]
pub enum CandidateOp {
    Sep(SepConv),
    Dil(DilConv),
    MaxPool { stride: usize },
    AvgPool { stride: usize },
    Identity,
    FactRed(FactorizedReduce),
    Zero { stride: usize },
}

/// Builds the candidate for `kind` at channel count `c`; `stride` is 2 on
/// reduction-cell edges fed by the cell inputs, else 1. The skip
/// connection becomes a factorized reduce when it must change resolution.
pub fn build_candidate<R: Rng>(
    kind: OpKind,
    ids: &mut IdGen,
    rng: &mut R,
    mode: WeightMode,
    c: usize,
    stride: usize,
) -> Result<CandidateOp> {
    Ok(match kind {
        OpKind::SepConv3x3 => CandidateOp::Sep(SepConv::new(ids, rng, mode, c, 3, stride)?),
        OpKind::SepConv5x5 => CandidateOp::Sep(SepConv::new(ids, rng, mode, c, 5, stride)?),
        OpKind::DilConv3x3 => CandidateOp::Dil(DilConv::new(ids, rng, mode, c, 3, stride)?),
        OpKind::DilConv5x5 => CandidateOp::Dil(DilConv::new(ids, rng, mode, c, 5, stride)?),
        OpKind::MaxPool3x3 => CandidateOp::MaxPool { stride },
        OpKind::AvgPool3x3 => CandidateOp::AvgPool { stride },
        OpKind::SkipConnect => {
            if stride == 1 {
                CandidateOp::Identity
            } else {
                CandidateOp::FactRed(FactorizedReduce::new(ids, rng, mode, c, c)?)
            }
        }
        OpKind::Zero => CandidateOp::Zero { stride },
    })
}

impl CandidateOp {
    pub fn forward(&mut self, g: &mut Graph, x: NodeId, train: bool) -> Result<NodeId> {
        Ok(match self {
            CandidateOp::Sep(op) => op.forward(g, x, train)?,
            CandidateOp::Dil(op) => op.forward(g, x, train)?,
            CandidateOp::MaxPool { stride } => max_pool3(g, x, *stride),
            CandidateOp::AvgPool { stride } => avg_pool3(g, x, *stride),
            CandidateOp::Identity => x,
            CandidateOp::FactRed(op) => op.forward(g, x, train)?,
            CandidateOp::Zero { stride } => zero_out(g, x, *stride),
        })
    }

    pub fn eval_fixed(&self, x: &FxTensor) -> Result<FxTensor> {
        Ok(match self {
            CandidateOp::Sep(op) => op.eval_fixed(x)?,
            CandidateOp::Dil(op) => op.eval_fixed(x)?,
            CandidateOp::MaxPool { stride } => max_pool3_fixed(x, *stride),
            CandidateOp::AvgPool { stride } => avg_pool3_fixed(x, *stride),
            CandidateOp::Identity => x.clone(),
            CandidateOp::FactRed(op) => op.eval_fixed(x)?,
            CandidateOp::Zero { stride } => zero_fixed(x, *stride),
        })
    }
}

impl Stateful for CandidateOp {
    fn collect_params<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        match self {
            CandidateOp::Sep(op) => op.collect_params(out),
            CandidateOp::Dil(op) => op.collect_params(out),
            CandidateOp::FactRed(op) => op.collect_params(out),
            _ => {}
        }
    }

    fn visit_shift_pairs(&self, f: &mut dyn FnMut(&ShiftPair)) {
        match self {
            CandidateOp::Sep(op) => op.visit_shift_pairs(f),
            CandidateOp::Dil(op) => op.visit_shift_pairs(f),
            CandidateOp::FactRed(op) => op.visit_shift_pairs(f),
            _ => {}
        }
    }

    fn visit_shift_pairs_mut(&mut self, f: &mut dyn FnMut(&mut ShiftPair)) {
        match self {
            CandidateOp::Sep(op) => op.visit_shift_pairs_mut(f),
            CandidateOp::Dil(op) => op.visit_shift_pairs_mut(f),
            CandidateOp::FactRed(op) => op.visit_shift_pairs_mut(f),
            _ => {}
        }
    }

    fn collect_state(&self, prefix: &str, out: &mut Vec<crate::nn::state::StateEntry>) {
        match self {
            CandidateOp::Sep(op) => op.collect_state(prefix, out),
            CandidateOp::Dil(op) => op.collect_state(prefix, out),
            CandidateOp::FactRed(op) => op.collect_state(prefix, out),
            _ => {}
        }
    }

    fn load_state(
        &mut self,
        prefix: &str,
        map: &mut crate::nn::state::StateMap,
    ) -> Result<()> {
        match self {
            CandidateOp::Sep(op) => op.load_state(prefix, map),
            CandidateOp::Dil(op) => op.load_state(prefix, map),
            CandidateOp::FactRed(op) => op.load_state(prefix, map),
            _ => Ok(()),
        }
    }
}

/// Cell-input preprocessor.
#[derive(Debug)]
#[allow(clippy::large_enum_variant)]
pub enum Preprocess {
    Std(ReluConvBn),
    Reduce(FactorizedReduce),
}

impl Preprocess {
    fn forward(&mut self, g: &mut Graph, x: NodeId, train: bool) -> Result<NodeId> {
        match self {
            Preprocess::Std(p) => p.forward(g, x, train),
            Preprocess::Reduce(p) => p.forward(g, x, train),
        }
    }

    fn as_stateful(&self) -> &dyn Stateful {
        match self {
            Preprocess::Std(p) => p,
            Preprocess::Reduce(p) => p,
        }
    }

    fn as_stateful_mut(&mut self) -> &mut dyn Stateful {
        match self {
            Preprocess::Std(p) => p,
            Preprocess::Reduce(p) => p,
        }
    }
}

/// One supernet edge: all eight candidates feeding intermediate `node`
/// from DAG state `src`.
#[derive(Debug)]
pub struct EdgeOps {
    pub src: usize,
    pub node: usize,
    pub stride: usize,
    pub ops: Vec<CandidateOp>,
}

/// A searchable cell: 2 inputs, `nodes` intermediates, all-to-all edges
/// from lower to higher index, output = concat of the intermediates.
#[derive(Debug)]
pub struct SearchCell {
    pub reduction: bool,
    pub nodes: usize,
    pub pre0: Preprocess,
    pub pre1: Preprocess,
    pub edges: Vec<EdgeOps>,
}

/// Per-edge operation logits, one vector per group.
#[derive(Debug)]
pub struct GroupLogits {
    pub conv: Param,
    pub topo: Param,
}

/// After pruning: the two survivors per edge (ascending canonical index)
/// with fresh two-way logits, plus per-node pair-combination logits.
#[derive(Debug)]
pub struct PrunedArch {
    pub edge_ops: Vec<[OpKind; 2]>,
    pub alpha2: Vec<Param>,
    pub beta: Vec<Param>,
}

/// Architecture parameters for one cell type (shared by all cells of
/// that type).
#[derive(Debug)]
pub struct CellTypeArch {
    pub edge_logits: Vec<GroupLogits>,
    pub pruned: Option<PrunedArch>,
}

impl CellTypeArch {
    fn new(ids: &mut IdGen, n_edges: usize) -> CellTypeArch {
        let edge_logits = (0..n_edges)
            .map(|_| GroupLogits {
                conv: Param::new(
                    ids,
                    ArrayD::zeros(IxDyn(&[CONV_GROUP.len()])),
                    ParamKind::Plain { decay: true },
                ),
                topo: Param::new(
                    ids,
                    ArrayD::zeros(IxDyn(&[TOPO_GROUP.len()])),
                    ParamKind::Plain { decay: true },
                ),
            })
            .collect();
        CellTypeArch {
            edge_logits,
            pruned: None,
        }
    }
}

/// Forward-pass weighting handed to cells, precomputed per graph.
pub enum CellWeightNodes {
    /// Per-edge conv-group and topo-group softmax nodes.
    Operation { conv: Vec<NodeId>, topo: Vec<NodeId> },
    /// Per-edge two-way softmax nodes plus per-node edge-importance.
    Topology { alpha2: Vec<NodeId>, gamma: Vec<NodeId> },
}

/// Number of edges in a cell with `nodes` intermediates.
pub fn edge_count(nodes: usize) -> usize {
    (0..nodes).map(|j| 2 + j).sum()
}

impl SearchCell {
    fn new<R: Rng>(
        ids: &mut IdGen,
        rng: &mut R,
        mode: WeightMode,
        slot: &CellSlot,
        nodes: usize,
    ) -> Result<SearchCell> {
        let pre0 = if slot.prev_reduction {
            Preprocess::Reduce(FactorizedReduce::new(ids, rng, mode, slot.in0, slot.c)?)
        } else {
            Preprocess::Std(ReluConvBn::new(ids, rng, mode, slot.in0, slot.c))
        };
        let pre1 = Preprocess::Std(ReluConvBn::new(ids, rng, mode, slot.in1, slot.c));
        let mut edges = Vec::with_capacity(edge_count(nodes));
        for j in 0..nodes {
            for src in 0..2 + j {
                let stride = if slot.reduction && src < 2 { 2 } else { 1 };
                let ops = ALL_OPS
                    .iter()
                    .map(|&k| build_candidate(k, ids, rng, mode, slot.c, stride))
                    .collect::<Result<Vec<_>>>()?;
                edges.push(EdgeOps {
                    src,
                    node: j,
                    stride,
                    ops,
                });
            }
        }
        Ok(SearchCell {
            reduction: slot.reduction,
            nodes,
            pre0,
            pre1,
            edges,
        })
    }

    /// Mixed forward. In the operation phase each intermediate sums all
    /// incoming mixed edges; in the topology phase edges are restricted
    /// to their survivors and weighted by edge importance.
    fn forward(
        &mut self,
        g: &mut Graph,
        s0: NodeId,
        s1: NodeId,
        weights: &CellWeightNodes,
        pruned: Option<&PrunedArch>,
        train: bool,
    ) -> Result<NodeId> {
        let mut states = vec![
            self.pre0.forward(g, s0, train)?,
            self.pre1.forward(g, s1, train)?,
        ];
        let mut e_global = 0usize;
        for j in 0..self.nodes {
            let n_in = 2 + j;
            let mut terms = Vec::with_capacity(n_in);
            for local in 0..n_in {
                let edge = &mut self.edges[e_global];
                debug_assert_eq!(edge.node, j);
                debug_assert_eq!(edge.src, local);
                let x = states[edge.src];
                let out = match weights {
                    CellWeightNodes::Operation { conv, topo } => {
                        let mut parts = Vec::with_capacity(ALL_OPS.len());
                        for (oi, op) in edge.ops.iter_mut().enumerate() {
                            let y = op.forward(g, x, train)?;
                            let (grp, idx) = ALL_OPS[oi].group();
                            let wnode = match grp {
                                OpGroup::Conv => conv[e_global],
                                OpGroup::Topo => topo[e_global],
                            };
                            parts.push(g.scale_by_elem(y, wnode, idx));
                        }
                        g.add_n(&parts)
                    }
                    CellWeightNodes::Topology { alpha2, gamma } => {
                        let survivors = pruned.expect("pruned arch in topology phase").edge_ops
                            [e_global];
                        let mut parts = Vec::with_capacity(2);
                        for (k, kind) in survivors.iter().enumerate() {
                            let op = &mut edge.ops[kind.global_index()];
                            let y = op.forward(g, x, train)?;
                            parts.push(g.scale_by_elem(y, alpha2[e_global], k));
                        }
                        let mixed = g.add_n(&parts);
                        g.scale_by_elem(mixed, gamma[j], local)
                    }
                };
                terms.push(out);
                e_global += 1;
            }
            states.push(g.add_n(&terms));
        }
        Ok(g.concat_channels(&states[2..]))
    }
}

impl Stateful for SearchCell {
    fn collect_params<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        self.pre0.as_stateful_mut().collect_params(out);
        self.pre1.as_stateful_mut().collect_params(out);
        for e in &mut self.edges {
            for op in &mut e.ops {
                op.collect_params(out);
            }
        }
    }

    fn visit_shift_pairs(&self, f: &mut dyn FnMut(&ShiftPair)) {
        self.pre0.as_stateful().visit_shift_pairs(f);
        self.pre1.as_stateful().visit_shift_pairs(f);
        for e in &self.edges {
            for op in &e.ops {
                op.visit_shift_pairs(f);
            }
        }
    }

    fn visit_shift_pairs_mut(&mut self, f: &mut dyn FnMut(&mut ShiftPair)) {
        self.pre0.as_stateful_mut().visit_shift_pairs_mut(f);
        self.pre1.as_stateful_mut().visit_shift_pairs_mut(f);
        for e in &mut self.edges {
            for op in &mut e.ops {
                op.visit_shift_pairs_mut(f);
            }
        }
    }

    fn collect_state(&self, prefix: &str, out: &mut Vec<crate::nn::state::StateEntry>) {
        self.pre0
            .as_stateful()
            .collect_state(&format!("{prefix}.pre0"), out);
        self.pre1
            .as_stateful()
            .collect_state(&format!("{prefix}.pre1"), out);
        for (i, e) in self.edges.iter().enumerate() {
            for (oi, op) in e.ops.iter().enumerate() {
                op.collect_state(&format!("{prefix}.edge{i}.op{oi}"), out);
            }
        }
    }

    fn load_state(
        &mut self,
        prefix: &str,
        map: &mut crate::nn::state::StateMap,
    ) -> Result<()> {
        self.pre0
            .as_stateful_mut()
            .load_state(&format!("{prefix}.pre0"), map)?;
        self.pre1
            .as_stateful_mut()
            .load_state(&format!("{prefix}.pre1"), map)?;
        for (i, e) in self.edges.iter_mut().enumerate() {
            for (oi, op) in e.ops.iter_mut().enumerate() {
                op.load_state(&format!("{prefix}.edge{i}.op{oi}"), map)?;
            }
        }
        Ok(())
    }
}

/// Supernet shape configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SupernetCfg {
    pub cells: usize,
    pub init_channels: usize,
    #[serde(default = "default_nodes")]
    pub nodes: usize,
    /// Explicit reduction-cell indices; defaults to one/two thirds.
    #[serde(default)]
    pub reduction_positions: Option<Vec<usize>>,
    #[serde(default = "default_stem_multiplier")]
    pub stem_multiplier: usize,
    pub in_channels: usize,
    pub classes: usize,
}

fn default_nodes() -> usize {
    4
}

fn default_stem_multiplier() -> usize {
    3
}

impl SupernetCfg {
    pub fn reduction_positions(&self) -> Result<Vec<usize>> {
        let pos = self
            .reduction_positions
            .clone()
            .unwrap_or_else(|| default_reduction_positions(self.cells));
        if pos.iter().any(|&p| p >= self.cells) {
            return Err(Error::InvalidConfig(format!(
                "reduction positions {pos:?} out of range for {} cells",
                self.cells
            )));
        }
        Ok(pos)
    }
}

/// Which relaxation the forward pass uses.
#[derive(Debug, Clone, Copy)]
pub enum ForwardPhase {
    Operation,
    Topology { temperature: f64 },
}

/// The full over-parameterized network: stem, stacked searchable cells,
/// global pooling, classifier.
pub struct Supernet {
    pub cfg: SupernetCfg,
    pub mode: WeightMode,
    pub stem: Stem,
    pub cells: Vec<SearchCell>,
    pub classifier: ShiftLinear,
    pub arch_normal: CellTypeArch,
    pub arch_reduce: CellTypeArch,
}

impl Supernet {
    pub fn new<R: Rng>(
        cfg: SupernetCfg,
        ids: &mut IdGen,
        rng: &mut R,
        mode: WeightMode,
    ) -> Result<Supernet> {
        if cfg.cells == 0 || cfg.nodes == 0 {
            return Err(Error::InvalidConfig("cells and nodes must be positive".into()));
        }
        let positions = cfg.reduction_positions()?;
        let plan = plan_cells(
            cfg.cells,
            cfg.init_channels,
            cfg.stem_multiplier,
            cfg.nodes,
            &positions,
        );
        let stem = Stem::new(
            ids,
            rng,
            mode,
            cfg.in_channels,
            cfg.stem_multiplier * cfg.init_channels,
        );
        let mut cells = Vec::with_capacity(cfg.cells);
        for slot in &plan {
            cells.push(SearchCell::new(ids, rng, mode, slot, cfg.nodes)?);
        }
        let final_c = cfg.nodes * plan.last().unwrap().c;
        let classifier = ShiftLinear::new(ids, rng, mode, final_c, cfg.classes);
        let n_edges = edge_count(cfg.nodes);
        Ok(Supernet {
            cfg,
            mode,
            stem,
            cells,
            classifier,
            arch_normal: CellTypeArch::new(ids, n_edges),
            arch_reduce: CellTypeArch::new(ids, n_edges),
        })
    }

    fn weight_nodes_for(
        g: &mut Graph,
        arch: &CellTypeArch,
        nodes: usize,
        phase: ForwardPhase,
    ) -> Result<CellWeightNodes> {
        match phase {
            ForwardPhase::Operation => {
                let mut conv = Vec::with_capacity(arch.edge_logits.len());
                let mut topo = Vec::with_capacity(arch.edge_logits.len());
                for gl in &arch.edge_logits {
                    let cl = g.param_leaf(&gl.conv);
                    conv.push(g.softmax_vec(cl));
                    let tl = g.param_leaf(&gl.topo);
                    topo.push(g.softmax_vec(tl));
                }
                Ok(CellWeightNodes::Operation { conv, topo })
            }
            ForwardPhase::Topology { temperature } => {
                let pruned = arch.pruned.as_ref().ok_or_else(|| {
                    Error::InvalidConfig("topology forward before pruning".into())
                })?;
                let mut alpha2 = Vec::with_capacity(pruned.alpha2.len());
                for a in &pruned.alpha2 {
                    let leaf = g.param_leaf(a);
                    alpha2.push(g.softmax_vec(leaf));
                }
                let mut gamma = Vec::with_capacity(nodes);
                for (j, b) in pruned.beta.iter().enumerate() {
                    gamma.push(search::gamma_node(g, b, 2 + j, temperature)?);
                }
                Ok(CellWeightNodes::Topology { alpha2, gamma })
            }
        }
    }

    pub fn forward(
        &mut self,
        g: &mut Graph,
        x: NodeId,
        train: bool,
        phase: ForwardPhase,
    ) -> Result<NodeId> {
        let w_normal = Self::weight_nodes_for(g, &self.arch_normal, self.cfg.nodes, phase)?;
        let w_reduce = Self::weight_nodes_for(g, &self.arch_reduce, self.cfg.nodes, phase)?;
        let stem_out = self.stem.forward(g, x, train)?;
        let (mut s0, mut s1) = (stem_out, stem_out);
        for cell in &mut self.cells {
            let (w, pruned) = if cell.reduction {
                (&w_reduce, self.arch_reduce.pruned.as_ref())
            } else {
                (&w_normal, self.arch_normal.pruned.as_ref())
            };
            let out = cell.forward(g, s0, s1, w, pruned, train)?;
            s0 = s1;
            s1 = out;
        }
        let pooled = global_avg_pool(g, s1);
        self.classifier.forward(g, pooled)
    }

    /// Installs the phase-2 search state: per-edge survivor pairs with
    /// fresh zero logits, and zero-initialized pair-combination logits
    /// per intermediate node.
    pub fn apply_pruning(
        &mut self,
        ids: &mut IdGen,
        normal: Vec<[OpKind; 2]>,
        reduce: Vec<[OpKind; 2]>,
    ) -> Result<()> {
        let n_edges = edge_count(self.cfg.nodes);
        if normal.len() != n_edges || reduce.len() != n_edges {
            return Err(Error::InvalidConfig(format!(
                "pruning wants {n_edges} edge selections"
            )));
        }
        for (arch, selections) in [
            (&mut self.arch_normal, normal),
            (&mut self.arch_reduce, reduce),
        ] {
            let alpha2 = selections
                .iter()
                .map(|_| {
                    Param::new(
                        ids,
                        ArrayD::zeros(IxDyn(&[2])),
                        ParamKind::Plain { decay: true },
                    )
                })
                .collect();
            let beta = (0..self.cfg.nodes)
                .map(|j| {
                    let n_in = 2 + j;
                    let n_pairs = n_in * (n_in - 1) / 2;
                    Param::new(
                        ids,
                        ArrayD::zeros(IxDyn(&[n_pairs])),
                        ParamKind::Plain { decay: true },
                    )
                })
                .collect();
            arch.pruned = Some(PrunedArch {
                edge_ops: selections,
                alpha2,
                beta,
            });
        }
        Ok(())
    }

    /// All network weights (not architecture logits).
    pub fn weight_params(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        self.stem.collect_params(&mut out);
        for cell in &mut self.cells {
            cell.collect_params(&mut out);
        }
        self.classifier.collect_params(&mut out);
        out
    }

    /// Architecture parameters active in the given phase.
    pub fn arch_params(&mut self, topology: bool) -> Vec<&mut Param> {
        let mut out = Vec::new();
        for arch in [&mut self.arch_normal, &mut self.arch_reduce] {
            if topology {
                if let Some(p) = arch.pruned.as_mut() {
                    for a in &mut p.alpha2 {
                        out.push(a);
                    }
                    for b in &mut p.beta {
                        out.push(b);
                    }
                }
            } else {
                for gl in &mut arch.edge_logits {
                    out.push(&mut gl.conv);
                    out.push(&mut gl.topo);
                }
            }
        }
        out
    }

    pub fn visit_shift_pairs(&self, f: &mut dyn FnMut(&ShiftPair)) {
        self.stem.visit_shift_pairs(f);
        for cell in &self.cells {
            cell.visit_shift_pairs(f);
        }
        self.classifier.visit_shift_pairs(f);
    }

    pub fn visit_shift_pairs_mut(&mut self, f: &mut dyn FnMut(&mut ShiftPair)) {
        self.stem.visit_shift_pairs_mut(f);
        for cell in &mut self.cells {
            cell.visit_shift_pairs_mut(f);
        }
        self.classifier.visit_shift_pairs_mut(f);
    }

    /// Sum over all shift pairs of `(2^P * sign(S))^2`.
    pub fn shift_penalty(&self) -> f64 {
        let mut total = 0.0;
        self.visit_shift_pairs(&mut |p| total += p.sq_weight_sum());
        total
    }

    pub fn shift_weight_count(&self) -> usize {
        let mut total = 0;
        self.visit_shift_pairs(&mut |p| total += p.weight_count());
        total
    }

    pub fn arch_param_ids(&mut self, topology: bool) -> Vec<ParamId> {
        self.arch_params(topology).iter().map(|p| p.id).collect()
    }
}
