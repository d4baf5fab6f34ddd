//! Tape-based reverse-mode autograd.
//!
//! Nodes are appended in evaluation order, so the tape order is already
//! topological; backward walks it once in reverse, which keeps gradient
//! accumulation deterministic.

use std::collections::HashMap;

use ndarray::{ArrayD, Axis, IxDyn};

use crate::nn::param::{Param, ParamId};

pub type NodeId = usize;

/// Backward rule attached to a non-leaf node. Returns one optional
/// gradient per input slot.
pub trait OpRule {
    fn backward(
        &self,
        grad_out: &ArrayD<f64>,
        out: &ArrayD<f64>,
        inputs: &[&ArrayD<f64>],
    ) -> Vec<Option<ArrayD<f64>>>;
}

struct NodeData {
    value: ArrayD<f64>,
    inputs: Vec<NodeId>,
    rule: Option<Box<dyn OpRule>>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<NodeData>,
    grads: Vec<Option<ArrayD<f64>>>,
    param_nodes: HashMap<ParamId, NodeId>,
}

impl Graph {
    pub fn new() -> Graph {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf node holding a constant (inputs, labels, zeros).
    pub fn constant(&mut self, value: ArrayD<f64>) -> NodeId {
        self.push_node(value, vec![], None)
    }

    /// Leaf node for a trainable parameter. Repeated calls for the same
    /// parameter return the original node so shared parameters accumulate
    /// one gradient buffer.
    pub fn param_leaf(&mut self, param: &Param) -> NodeId {
        if let Some(&id) = self.param_nodes.get(&param.id) {
            return id;
        }
        let id = self.push_node(param.data.clone(), vec![], None);
        self.param_nodes.insert(param.id, id);
        id
    }

    pub fn push_node(
        &mut self,
        value: ArrayD<f64>,
        inputs: Vec<NodeId>,
        rule: Option<Box<dyn OpRule>>,
    ) -> NodeId {
        debug_assert!(inputs.iter().all(|&i| i < self.nodes.len()));
        self.nodes.push(NodeData {
            value,
            inputs,
            rule,
        });
        self.nodes.len() - 1
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<f64> {
        &self.nodes[id].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&ArrayD<f64>> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    pub fn param_grad(&self, id: ParamId) -> Option<&ArrayD<f64>> {
        self.param_nodes.get(&id).and_then(|&n| self.grad(n))
    }

    /// Reverse sweep from `root`, seeding its gradient with ones. Each
    /// node is visited exactly once in reverse insertion order.
    pub fn backward(&mut self, root: NodeId) {
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        let seed = ArrayD::ones(self.nodes[root].value.raw_dim());
        self.grads[root] = Some(seed);
        for i in (0..=root).rev() {
            if self.nodes[i].rule.is_none() {
                continue;
            }
            let Some(g_out) = self.grads[i].take() else {
                continue;
            };
            let contributions = {
                let node = &self.nodes[i];
                let input_vals: Vec<&ArrayD<f64>> =
                    node.inputs.iter().map(|&j| &self.nodes[j].value).collect();
                node.rule
                    .as_ref()
                    .unwrap()
                    .backward(&g_out, &node.value, &input_vals)
            };
            debug_assert_eq!(contributions.len(), self.nodes[i].inputs.len());
            for (slot, contrib) in contributions.into_iter().enumerate() {
                if let Some(c) = contrib {
                    let j = self.nodes[i].inputs[slot];
                    debug_assert!(j < i, "tape must be topological");
                    match &mut self.grads[j] {
                        Some(acc) => *acc += &c,
                        g @ None => *g = Some(c),
                    }
                }
            }
            self.grads[i] = Some(g_out);
        }
    }

    // -- generic ops --------------------------------------------------

    /// Elementwise sum of same-shaped nodes.
    pub fn add_n(&mut self, terms: &[NodeId]) -> NodeId {
        assert!(!terms.is_empty());
        let mut value = self.nodes[terms[0]].value.clone();
        for &t in &terms[1..] {
            value += &self.nodes[t].value;
        }
        self.push_node(value, terms.to_vec(), Some(Box::new(AddN)))
    }

    /// Tensor scaled by one element of a vector node: `t * v[idx]`.
    pub fn scale_by_elem(&mut self, tensor: NodeId, vector: NodeId, idx: usize) -> NodeId {
        let s = self.nodes[vector].value[[idx]];
        let value = &self.nodes[tensor].value * s;
        self.push_node(
            value,
            vec![tensor, vector],
            Some(Box::new(ScaleByElem { idx })),
        )
    }

    /// Softmax over a 1-d logits node.
    pub fn softmax_vec(&mut self, logits: NodeId) -> NodeId {
        let value = softmax1d(&self.nodes[logits].value, 1.0);
        self.push_node(value, vec![logits], Some(Box::new(SoftmaxVec)))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x].value.mapv(|v| v.max(0.0));
        self.push_node(value, vec![x], Some(Box::new(Relu)))
    }

    /// Concatenation along the channel axis of NCHW tensors.
    pub fn concat_channels(&mut self, parts: &[NodeId]) -> NodeId {
        let views: Vec<_> = parts.iter().map(|&p| self.nodes[p].value.view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat shapes agree");
        let sizes = parts.iter().map(|&p| self.nodes[p].value.shape()[1]).collect();
        self.push_node(value, parts.to_vec(), Some(Box::new(ConcatChannels { sizes })))
    }

    /// Mean cross-entropy between logits `(B, K)` and integer labels.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> NodeId {
        let z = &self.nodes[logits].value;
        let (b, _k) = (z.shape()[0], z.shape()[1]);
        assert_eq!(b, labels.len());
        let mut loss = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = z.index_axis(Axis(0), i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
            loss += lse - row[y];
        }
        let value = ArrayD::from_elem(IxDyn(&[]), loss / b as f64);
        self.push_node(
            value,
            vec![logits],
            Some(Box::new(CrossEntropy {
                labels: labels.to_vec(),
            })),
        )
    }
}

/// Softmax of a 1-d array with logits divided by `temp`.
pub fn softmax1d(logits: &ArrayD<f64>, temp: f64) -> ArrayD<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut e = logits.mapv(|v| ((v - m) / temp).exp());
    let z: f64 = e.sum();
    e.mapv_inplace(|v| v / z);
    e
}

struct AddN;

impl OpRule for AddN {
    fn backward(
        &self,
        grad_out: &ArrayD<f64>,
        _out: &ArrayD<f64>,
        inputs: &[&ArrayD<f64>],
    ) -> Vec<Option<ArrayD<f64>>> {
        inputs.iter().map(|_| Some(grad_out.clone())).collect()
    }
}

struct ScaleByElem {
    idx: usize,
}

impl OpRule for ScaleByElem {
    fn backward(
        &self,
        grad_out: &ArrayD<f64>,
        _out: &ArrayD<f64>,
        inputs: &[&ArrayD<f64>],
    ) -> Vec<Option<ArrayD<f64>>> {
        let t = inputs[0];
        let v = inputs[1];
        let dt = grad_out * v[[self.idx]];
        let mut dv = ArrayD::zeros(v.raw_dim());
        dv[[self.idx]] = (grad_out * t).sum();
        vec![Some(dt), Some(dv)]
    }
}

struct SoftmaxVec;

impl OpRule for SoftmaxVec {
    fn backward(
        &self,
        grad_out: &ArrayD<f64>,
        out: &ArrayD<f64>,
        _inputs: &[&ArrayD<f64>],
    ) -> Vec<Option<ArrayD<f64>>> {
        let dot = (grad_out * out).sum();
        let dl = out * &(grad_out - dot);
        vec![Some(dl)]
    }
}

struct Relu;

impl OpRule for Relu {
    fn backward(
        &self,
        grad_out: &ArrayD<f64>,
        _out: &ArrayD<f64>,
        inputs: &[&ArrayD<f64>],
    ) -> Vec<Option<ArrayD<f64>>> {
        let mut dx = grad_out.clone();
        ndarray::Zip::from(&mut dx)
            .and(inputs[0])
            .for_each(|g, &x| {
                if x <= 0.0 {
                    *g = 0.0;
                }
            });
        vec![Some(dx)]
    }
}

struct ConcatChannels {
    sizes: Vec<usize>,
}

impl OpRule for ConcatChannels {
    fn backward(
        &self,
        grad_out: &ArrayD<f64>,
        _out: &ArrayD<f64>,
        _inputs: &[&ArrayD<f64>],
    ) -> Vec<Option<ArrayD<f64>>> {
        let mut grads = Vec::with_capacity(self.sizes.len());
        let mut start = 0;
        for &c in &self.sizes {
            let slice = grad_out.slice_axis(Axis(1), ndarray::Slice::from(start..start + c));
            grads.push(Some(slice.to_owned()));
            start += c;
        }
        grads
    }
}

struct CrossEntropy {
    labels: Vec<usize>,
}

impl OpRule for CrossEntropy {
    fn backward(
        &self,
        grad_out: &ArrayD<f64>,
        _out: &ArrayD<f64>,
        inputs: &[&ArrayD<f64>],
    ) -> Vec<Option<ArrayD<f64>>> {
        let z = inputs[0];
        let b = z.shape()[0];
        let scale = grad_out[[]] / b as f64;
        let mut dz = ArrayD::zeros(z.raw_dim());
        for (i, &y) in self.labels.iter().enumerate() {
            let row = z.index_axis(Axis(0), i);
            let sm = softmax1d(&row.to_owned().into_dyn(), 1.0);
            let mut drow = dz.index_axis_mut(Axis(0), i);
            for (j, d) in drow.iter_mut().enumerate() {
                *d = scale * (sm[[j]] - if j == y { 1.0 } else { 0.0 });
            }
        }
        vec![Some(dz)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn softmax_grad_matches_finite_difference() {
        let logits = arr1(&[0.3, -1.2, 0.9, 0.0]).into_dyn();
        let weights = arr1(&[1.0, -0.5, 2.0, 0.7]).into_dyn();
        // loss = sum(w * softmax(l))
        let eval = |l: &ArrayD<f64>| (softmax1d(l, 1.0) * &weights).sum();

        let mut g = Graph::new();
        let l = g.constant(logits.clone());
        let s = g.softmax_vec(l);
        let mut parts = Vec::new();
        for i in 0..4 {
            let t = g.constant(arr1(&[weights[[i]]]).into_dyn());
            parts.push(g.scale_by_elem(t, s, i));
        }
        let total = g.add_n(&parts);
        g.backward(total);
        let got = g.grad(l).unwrap().clone();

        let eps = 1e-6;
        for i in 0..4 {
            let mut lp = logits.clone();
            lp[[i]] += eps;
            let mut lm = logits.clone();
            lm[[i]] -= eps;
            let num = (eval(&lp) - eval(&lm)) / (2.0 * eps);
            assert!(
                (got[[i]] - num).abs() <= 1e-6 * num.abs().max(1.0),
                "slot {i}: {} vs {num}",
                got[[i]]
            );
        }
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut g = Graph::new();
        let z = g.constant(ArrayD::zeros(IxDyn(&[2, 4])));
        let loss = g.cross_entropy(z, &[1, 3]);
        assert!((g.value(loss)[[]] - 4.0f64.ln()).abs() < 1e-12);
        g.backward(loss);
        let dz = g.grad(z).unwrap();
        // (softmax - onehot)/B
        assert!((dz[[0, 0]] - 0.25 / 2.0).abs() < 1e-12);
        assert!((dz[[0, 1]] + 0.75 / 2.0).abs() < 1e-12);
    }

    #[test]
    fn shared_param_leaf_accumulates_once() {
        use crate::nn::param::{IdGen, Param, ParamKind};
        let mut ids = IdGen::new();
        let p = Param::new(&mut ids, arr1(&[2.0]).into_dyn(), ParamKind::Plain { decay: false });
        let mut g = Graph::new();
        let a = g.param_leaf(&p);
        let b = g.param_leaf(&p);
        assert_eq!(a, b);
        let sum = g.add_n(&[a, b]);
        g.backward(sum);
        assert_eq!(g.param_grad(p.id).unwrap()[[0]], 2.0);
    }
}
