//! Shared network scaffolding: channel bookkeeping for stacked cells,
//! the stem, and the classifier head.

use rand::Rng;

use crate::error::Result;
use crate::fxp::FxTensor;
use crate::nn::conv::{ConvGeom, WeightMode};
use crate::nn::graph::{Graph, NodeId};
use crate::nn::layers::{BatchNorm2d, ShiftConv2d, Stateful};
use crate::nn::param::{IdGen, Param};
use crate::nn::state::{StateEntry, StateMap};

/// Default reduction placement at one and two thirds of the stack.
pub fn default_reduction_positions(cells: usize) -> Vec<usize> {
    let mut v = vec![cells / 3, 2 * cells / 3];
    v.dedup();
    v.retain(|&p| p < cells);
    v
}

/// Per-cell channel facts derived from the stack layout.
#[derive(Debug, Clone, Copy)]
pub struct CellSlot {
    pub reduction: bool,
    /// Operating channel count inside the cell.
    pub c: usize,
    /// Channels of the cell-input two steps back.
    pub in0: usize,
    /// Channels of the previous cell's output.
    pub in1: usize,
    /// Whether the previous cell reduced (input 0 needs a spatial fix).
    pub prev_reduction: bool,
}

/// Channel plan for a stack of `cells` cells with `nodes` concatenated
/// intermediates each; reduction cells double the operating channels.
pub fn plan_cells(
    cells: usize,
    init_channels: usize,
    stem_multiplier: usize,
    nodes: usize,
    reduction_positions: &[usize],
) -> Vec<CellSlot> {
    let mut plan = Vec::with_capacity(cells);
    let mut c_curr = init_channels;
    let mut c_pp = stem_multiplier * init_channels;
    let mut c_p = stem_multiplier * init_channels;
    let mut prev_reduction = false;
    for i in 0..cells {
        let reduction = reduction_positions.contains(&i);
        if reduction {
            c_curr *= 2;
        }
        plan.push(CellSlot {
            reduction,
            c: c_curr,
            in0: c_pp,
            in1: c_p,
            prev_reduction,
        });
        c_pp = c_p;
        c_p = nodes * c_curr;
        prev_reduction = reduction;
    }
    plan
}

/// Input stem: one 3x3 shift conv plus batch norm.
#[derive(Debug)]
pub struct Stem {
    pub conv: ShiftConv2d,
    pub bn: BatchNorm2d,
}

impl Stem {
    pub fn new<R: Rng>(
        ids: &mut IdGen,
        rng: &mut R,
        mode: WeightMode,
        in_c: usize,
        out_c: usize,
    ) -> Stem {
        let geom = ConvGeom {
            in_c,
            out_c,
            kh: 3,
            kw: 3,
            stride: 1,
            pad: 1,
            dilation: 1,
            groups: 1,
        };
        Stem {
            conv: ShiftConv2d::new(ids, rng, mode, geom, false, false),
            bn: BatchNorm2d::new(ids, out_c),
        }
    }

    pub fn forward(&mut self, g: &mut Graph, x: NodeId, train: bool) -> Result<NodeId> {
        let h = self.conv.forward(g, x)?;
        Ok(self.bn.forward(g, h, train))
    }

    pub fn eval_fixed(&self, x: &FxTensor) -> Result<FxTensor> {
        let h = self.conv.eval_fixed(x)?;
        self.bn.eval_fixed(&h)
    }
}

impl Stateful for Stem {
    fn collect_params<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        self.conv.collect_params(out);
        self.bn.collect_params(out);
    }

    fn visit_shift_pairs(&self, f: &mut dyn FnMut(&crate::nn::param::ShiftPair)) {
        self.conv.visit_shift_pairs(f);
    }

    fn visit_shift_pairs_mut(&mut self, f: &mut dyn FnMut(&mut crate::nn::param::ShiftPair)) {
        self.conv.visit_shift_pairs_mut(f);
    }

    fn collect_state(&self, prefix: &str, out: &mut Vec<StateEntry>) {
        self.conv.collect_state(&format!("{prefix}.conv"), out);
        self.bn.collect_state(&format!("{prefix}.bn"), out);
    }

    fn load_state(&mut self, prefix: &str, map: &mut StateMap) -> Result<()> {
        self.conv.load_state(&format!("{prefix}.conv"), map)?;
        self.bn.load_state(&format!("{prefix}.bn"), map)
    }
}
