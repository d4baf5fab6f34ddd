//! Scalar reduction used by training diagnostics and gradient checks.

use ndarray::{ArrayD, IxDyn};

use crate::nn::graph::{Graph, NodeId, OpRule};

impl Graph {
    /// Fixed-weight scalar reduction `sum(w * x)`.
    pub fn weighted_sum(&mut self, x: NodeId, weights: &ArrayD<f64>) -> NodeId {
        let v = (self.value(x) * weights).sum();
        self.push_node(
            ArrayD::from_elem(IxDyn(&[]), v),
            vec![x],
            Some(Box::new(WeightedSum {
                w: weights.clone(),
            })),
        )
    }
}

struct WeightedSum {
    w: ArrayD<f64>,
}

impl OpRule for WeightedSum {
    fn backward(
        &self,
        grad_out: &ArrayD<f64>,
        _out: &ArrayD<f64>,
        _inputs: &[&ArrayD<f64>],
    ) -> Vec<Option<ArrayD<f64>>> {
        vec![Some(&self.w * grad_out[[]])]
    }
}
