//! Derived-architecture description: per intermediate node, two
//! (operation, predecessor) choices for the normal cell and the
//! reduction cell, plus the concat range. Serialized as canonical JSON
//! and instantiable as a trainable shift-domain network.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fxp::FxTensor;
use crate::net::{plan_cells, Stem};
use crate::nn::conv::WeightMode;
use crate::nn::graph::{Graph, NodeId};
use crate::nn::layers::{
    add_fixed, global_avg_pool, global_avg_pool_fixed, FactorizedReduce, ReluConvBn,
    ShiftLinear, Stateful,
};
use crate::nn::param::{IdGen, Param, ShiftPair};
use crate::nn::state::{StateEntry, StateMap};
use crate::space::{build_candidate, CandidateOp, OpKind, SupernetCfg};

/// One chosen input of an intermediate node: `(operation, predecessor)`.
/// Predecessors are DAG indices: 0 and 1 are the cell inputs, `k + 1`
/// is intermediate node `k` (1-based).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeGene(pub OpKind, pub usize);

impl NodeGene {
    pub fn op(&self) -> OpKind {
        self.0
    }

    pub fn pred(&self) -> usize {
        self.1
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Genotype {
    pub normal: Vec<Vec<NodeGene>>,
    pub normal_concat: Vec<usize>,
    pub reduce: Vec<Vec<NodeGene>>,
    pub reduce_concat: Vec<usize>,
}

impl Genotype {
    pub fn nodes(&self) -> usize {
        self.normal.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidGenotype(msg));
        if self.normal.is_empty() || self.normal.len() != self.reduce.len() {
            return bad(format!(
                "normal/reduce node counts {} vs {}",
                self.normal.len(),
                self.reduce.len()
            ));
        }
        for (label, cell, concat) in [
            ("normal", &self.normal, &self.normal_concat),
            ("reduce", &self.reduce, &self.reduce_concat),
        ] {
            for (k, node) in cell.iter().enumerate() {
                if node.len() != 2 {
                    return bad(format!("{label} node {k} has {} entries, want 2", node.len()));
                }
                for gene in node {
                    if gene.op() == OpKind::Zero {
                        return bad(format!("{label} node {k} selects the zero operation"));
                    }
                    if gene.pred() >= k + 2 {
                        return bad(format!(
                            "{label} node {k}: predecessor {} out of range [0, {})",
                            gene.pred(),
                            k + 2
                        ));
                    }
                }
                if node[0].pred() == node[1].pred() {
                    return bad(format!("{label} node {k} repeats predecessor {}", node[0].pred()));
                }
            }
            for &c in concat.iter() {
                if c < 2 || c >= cell.len() + 2 {
                    return bad(format!("{label} concat index {c} out of range"));
                }
            }
            if concat.is_empty() {
                return bad(format!("{label} concat range empty"));
            }
        }
        Ok(())
    }

    /// Canonical pretty-printed JSON (stable key order, trailing newline).
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("genotype serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Genotype> {
        let g: Genotype = serde_json::from_str(text)
            .map_err(|e| Error::InvalidGenotype(e.to_string()))?;
        g.validate()?;
        Ok(g)
    }

    /// Human-readable table, one row per (cell, node).
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str("Cell      | Node | Choices\n");
        out.push_str("----------+------+------------------------------------------\n");
        for (label, cell) in [("Normal", &self.normal), ("Reduction", &self.reduce)] {
            for (k, node) in cell.iter().enumerate() {
                let entries: Vec<String> = node
                    .iter()
                    .map(|g| format!("('{}', {})", g.op().name(), g.pred()))
                    .collect();
                out.push_str(&format!(
                    "{:<9} | {:>4} | {}\n",
                    label,
                    k + 1,
                    entries.join(", ")
                ));
            }
        }
        out
    }
}

/// Built-in reference genotypes usable with `--genotype builtin:<name>`.
pub fn builtin(name: &str) -> Option<Genotype> {
    use OpKind::*;
    let gene = |op, pred| NodeGene(op, pred);
    match name {
        "cifar10-best" => Some(Genotype {
            normal: vec![
                vec![gene(SkipConnect, 0), gene(SkipConnect, 1)],
                vec![gene(SepConv3x3, 0), gene(SepConv3x3, 1)],
                vec![gene(SepConv3x3, 0), gene(SepConv3x3, 1)],
                vec![gene(SepConv3x3, 0), gene(DilConv5x5, 4)],
            ],
            normal_concat: vec![2, 3, 4, 5],
            reduce: vec![
                vec![gene(SkipConnect, 0), gene(SkipConnect, 1)],
                vec![gene(SepConv3x3, 0), gene(MaxPool3x3, 1)],
                vec![gene(SepConv3x3, 0), gene(SepConv5x5, 1)],
                vec![gene(SkipConnect, 0), gene(DilConv5x5, 2)],
            ],
            reduce_concat: vec![2, 3, 4, 5],
        }),
        "cifar100-best" => Some(Genotype {
            normal: vec![
                vec![gene(SepConv3x3, 0), gene(SkipConnect, 1)],
                vec![gene(SkipConnect, 0), gene(SepConv3x3, 1)],
                vec![gene(SepConv3x3, 0), gene(SepConv3x3, 1)],
                vec![gene(SepConv3x3, 0), gene(SepConv5x5, 4)],
            ],
            normal_concat: vec![2, 3, 4, 5],
            reduce: vec![
                vec![gene(MaxPool3x3, 0), gene(SkipConnect, 1)],
                vec![gene(SepConv5x5, 0), gene(SepConv5x5, 1)],
                vec![gene(MaxPool3x3, 0), gene(DilConv5x5, 3)],
                vec![gene(SepConv5x5, 0), gene(SepConv3x3, 3)],
            ],
            reduce_concat: vec![2, 3, 4, 5],
        }),
        _ => None,
    }
}

// ---------------------------------------------------------------------------
// Instantiation
// ---------------------------------------------------------------------------

struct EvalNode {
    ops: Vec<(CandidateOp, usize)>,
}

#[allow(clippy::large_enum_variant)]
enum Pre {
    Std(ReluConvBn),
    Reduce(FactorizedReduce),
}

impl Pre {
    fn forward(&mut self, g: &mut Graph, x: NodeId, train: bool) -> Result<NodeId> {
        match self {
            Pre::Std(p) => p.forward(g, x, train),
            Pre::Reduce(p) => p.forward(g, x, train),
        }
    }

    fn eval_fixed(&self, x: &FxTensor) -> Result<FxTensor> {
        match self {
            Pre::Std(p) => p.eval_fixed(x),
            Pre::Reduce(p) => p.eval_fixed(x),
        }
    }

    fn stateful(&self) -> &dyn Stateful {
        match self {
            Pre::Std(p) => p,
            Pre::Reduce(p) => p,
        }
    }

    fn stateful_mut(&mut self) -> &mut dyn Stateful {
        match self {
            Pre::Std(p) => p,
            Pre::Reduce(p) => p,
        }
    }
}

struct EvalCell {
    pre0: Pre,
    pre1: Pre,
    nodes: Vec<EvalNode>,
    concat: Vec<usize>,
}

impl EvalCell {
    fn forward(&mut self, g: &mut Graph, s0: NodeId, s1: NodeId, train: bool) -> Result<NodeId> {
        let mut states = vec![
            self.pre0.forward(g, s0, train)?,
            self.pre1.forward(g, s1, train)?,
        ];
        for node in &mut self.nodes {
            let mut parts = Vec::with_capacity(2);
            for (op, pred) in &mut node.ops {
                parts.push(op.forward(g, states[*pred], train)?);
            }
            states.push(g.add_n(&parts));
        }
        let picks: Vec<NodeId> = self.concat.iter().map(|&c| states[c]).collect();
        Ok(g.concat_channels(&picks))
    }

    fn eval_fixed(&self, s0: &FxTensor, s1: &FxTensor) -> Result<FxTensor> {
        let mut states = vec![self.pre0.eval_fixed(s0)?, self.pre1.eval_fixed(s1)?];
        for node in &self.nodes {
            let mut acc: Option<FxTensor> = None;
            for (op, pred) in &node.ops {
                let y = op.eval_fixed(&states[*pred])?;
                acc = Some(match acc {
                    None => y,
                    Some(a) => add_fixed(&a, &y),
                });
            }
            states.push(acc.expect("two ops per node"));
        }
        let picks: Vec<&FxTensor> = self.concat.iter().map(|&c| &states[c]).collect();
        Ok(crate::nn::layers::concat_channels_fixed(&picks))
    }
}

/// A derived architecture instantiated as a trainable network: stem,
/// fixed cells, global pooling, classifier.
pub struct EvalNet {
    pub cfg: SupernetCfg,
    pub genotype: Genotype,
    pub mode: WeightMode,
    pub stem: Stem,
    cells: Vec<EvalCell>,
    pub classifier: ShiftLinear,
}

/// Builds the network described by `genotype` at the shape in `cfg`.
pub fn instantiate<R: Rng>(
    genotype: &Genotype,
    cfg: &SupernetCfg,
    mode: WeightMode,
    ids: &mut IdGen,
    rng: &mut R,
) -> Result<EvalNet> {
    genotype.validate()?;
    if cfg.nodes != genotype.nodes() {
        return Err(Error::InvalidConfig(format!(
            "config wants {} intermediate nodes, genotype has {}",
            cfg.nodes,
            genotype.nodes()
        )));
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
        let (genes, concat) = if slot.reduction {
            (&genotype.reduce, &genotype.reduce_concat)
        } else {
            (&genotype.normal, &genotype.normal_concat)
        };
        let pre0 = if slot.prev_reduction {
            Pre::Reduce(FactorizedReduce::new(ids, rng, mode, slot.in0, slot.c)?)
        } else {
            Pre::Std(ReluConvBn::new(ids, rng, mode, slot.in0, slot.c))
        };
        let pre1 = Pre::Std(ReluConvBn::new(ids, rng, mode, slot.in1, slot.c));
        let mut nodes = Vec::with_capacity(genes.len());
        for gene_pair in genes {
            let mut ops = Vec::with_capacity(2);
            for gene in gene_pair {
                let stride = if slot.reduction && gene.pred() < 2 { 2 } else { 1 };
                ops.push((
                    build_candidate(gene.op(), ids, rng, mode, slot.c, stride)?,
                    gene.pred(),
                ));
            }
            nodes.push(EvalNode { ops });
        }
        cells.push(EvalCell {
            pre0,
            pre1,
            nodes,
            concat: concat.clone(),
        });
    }
    let last = plan.last().unwrap();
    let last_concat = if last.reduction {
        genotype.reduce_concat.len()
    } else {
        genotype.normal_concat.len()
    };
    let classifier = ShiftLinear::new(ids, rng, mode, last_concat * last.c, cfg.classes);
    Ok(EvalNet {
        cfg: cfg.clone(),
        genotype: genotype.clone(),
        mode,
        stem,
        cells,
        classifier,
    })
}

impl EvalNet {
    pub fn forward(&mut self, g: &mut Graph, x: NodeId, train: bool) -> Result<NodeId> {
        let stem_out = self.stem.forward(g, x, train)?;
        let (mut s0, mut s1) = (stem_out, stem_out);
        for cell in &mut self.cells {
            let out = cell.forward(g, s0, s1, train)?;
            s0 = s1;
            s1 = out;
        }
        let pooled = global_avg_pool(g, s1);
        self.classifier.forward(g, pooled)
    }

    /// Inference entirely on the fixed-point shift path; activations are
    /// relu'd fixed tensors throughout and no real weight copy is read.
    pub fn eval_fixed(&self, x: &FxTensor) -> Result<FxTensor> {
        let stem_out = self.stem.eval_fixed(x)?;
        let mut s0 = stem_out.clone();
        let mut s1 = stem_out;
        for cell in &self.cells {
            let out = cell.eval_fixed(&s0, &s1)?;
            s0 = s1;
            s1 = out;
        }
        let pooled = global_avg_pool_fixed(&s1);
        self.classifier.eval_fixed(&pooled)
    }

    pub fn weight_params(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        self.stem.collect_params(&mut out);
        for cell in &mut self.cells {
            cell.pre0.stateful_mut().collect_params(&mut out);
            cell.pre1.stateful_mut().collect_params(&mut out);
            for node in &mut cell.nodes {
                for (op, _) in &mut node.ops {
                    op.collect_params(&mut out);
                }
            }
        }
        self.classifier.collect_params(&mut out);
        out
    }

    pub fn visit_shift_pairs(&self, f: &mut dyn FnMut(&ShiftPair)) {
        self.stem.visit_shift_pairs(f);
        for cell in &self.cells {
            cell.pre0.stateful().visit_shift_pairs(f);
            cell.pre1.stateful().visit_shift_pairs(f);
            for node in &cell.nodes {
                for (op, _) in &node.ops {
                    op.visit_shift_pairs(f);
                }
            }
        }
        self.classifier.visit_shift_pairs(f);
    }

    pub fn visit_shift_pairs_mut(&mut self, f: &mut dyn FnMut(&mut ShiftPair)) {
        self.stem.visit_shift_pairs_mut(f);
        for cell in &mut self.cells {
            cell.pre0.stateful_mut().visit_shift_pairs_mut(f);
            cell.pre1.stateful_mut().visit_shift_pairs_mut(f);
            for node in &mut cell.nodes {
                for (op, _) in &mut node.ops {
                    op.visit_shift_pairs_mut(f);
                }
            }
        }
        self.classifier.visit_shift_pairs_mut(f);
    }

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

    pub fn collect_state(&self) -> Vec<StateEntry> {
        let mut out = Vec::new();
        self.stem.collect_state("stem", &mut out);
        for (i, cell) in self.cells.iter().enumerate() {
            cell.pre0
                .stateful()
                .collect_state(&format!("cells.{i}.pre0"), &mut out);
            cell.pre1
                .stateful()
                .collect_state(&format!("cells.{i}.pre1"), &mut out);
            for (j, node) in cell.nodes.iter().enumerate() {
                for (k, (op, _)) in node.ops.iter().enumerate() {
                    op.collect_state(&format!("cells.{i}.node{j}.op{k}"), &mut out);
                }
            }
        }
        self.classifier.collect_state("classifier", &mut out);
        out
    }

    pub fn load_collected_state(&mut self, map: &mut StateMap) -> Result<()> {
        self.stem.load_state("stem", map)?;
        for (i, cell) in self.cells.iter_mut().enumerate() {
            cell.pre0
                .stateful_mut()
                .load_state(&format!("cells.{i}.pre0"), map)?;
            cell.pre1
                .stateful_mut()
                .load_state(&format!("cells.{i}.pre1"), map)?;
            for (j, node) in cell.nodes.iter_mut().enumerate() {
                for (k, (op, _)) in node.ops.iter_mut().enumerate() {
                    op.load_state(&format!("cells.{i}.node{j}.op{k}"), map)?;
                }
            }
        }
        self.classifier.load_state("classifier", map)?;
        if !map.is_empty() {
            let mut names: Vec<&String> = map.keys().collect();
            names.sort();
            return Err(Error::InvalidConfig(format!(
                "checkpoint holds unknown tensors: {names:?}"
            )));
        }
        Ok(())
    }

    /// All nodes have exactly two inputs by construction.
    pub fn nodes_per_cell(&self) -> usize {
        self.genotype.nodes()
    }
}
