//! Trainable parameter storage shared by layers and optimizers.

use ndarray::ArrayD;

use crate::shiftparam::{self, QuantizedView};

/// Stable identity of a parameter tensor within one network; optimizer
/// state is keyed by it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Hands out consecutive parameter ids during network construction.
#[derive(Debug, Default)]
pub struct IdGen(usize);

impl IdGen {
    pub fn new() -> IdGen {
        IdGen(0)
    }

    pub fn next_id(&mut self) -> ParamId {
        let id = ParamId(self.0);
        self.0 += 1;
        id
    }
}

/// What the optimizer should do with a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Continuous shift exponents; projected to `[-15, 0]` after steps,
    /// regularized through the squared effective weight, never decayed.
    ShiftP,
    /// Continuous sign logits; projected to `[-1.5, 1.5]` after steps.
    ShiftS,
    /// Ordinary real parameter; `decay` opts into L2 weight decay.
    Plain { decay: bool },
}

#[derive(Debug, Clone)]
pub struct Param {
    pub id: ParamId,
    pub data: ArrayD<f64>,
    pub grad: ArrayD<f64>,
    pub kind: ParamKind,
}

impl Param {
    pub fn new(ids: &mut IdGen, data: ArrayD<f64>, kind: ParamKind) -> Param {
        let grad = ArrayD::zeros(data.raw_dim());
        Param {
            id: ids.next_id(),
            data,
            grad,
            kind,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// A shift/sign parameter pair backing one weight tensor.
#[derive(Debug, Clone)]
pub struct ShiftPair {
    pub p: Param,
    pub s: Param,
}

impl ShiftPair {
    pub fn new(ids: &mut IdGen, sp: shiftparam::ShiftParam) -> ShiftPair {
        ShiftPair {
            p: Param::new(ids, sp.p, ParamKind::ShiftP),
            s: Param::new(ids, sp.s, ParamKind::ShiftS),
        }
    }

    pub fn quantize(&self) -> QuantizedView {
        shiftparam::quantize_parts(&self.p.data, &self.s.data)
    }

    pub fn clamp(&mut self) {
        self.p.data.mapv_inplace(|v| v.clamp(-15.0, 0.0));
        self.s.data.mapv_inplace(|v| v.clamp(-1.5, 1.5));
    }

    pub fn weight_count(&self) -> usize {
        self.p.data.len()
    }

    /// `sum((2^P * sign(S))^2)` with continuous `P` and ternary sign.
    pub fn sq_weight_sum(&self) -> f64 {
        ndarray::Zip::from(&self.p.data)
            .and(&self.s.data)
            .fold(0.0, |acc, &p, &s| {
                let sb = shiftparam::ternary_sign(s) as f64;
                acc + sb * sb * (2.0 * p).exp2()
            })
    }

    /// Adds the regularizer's exact gradient `lambda * sign(S)^2 *
    /// 2^(2P) * ln 2` to the shift gradient buffer. The sign logits get
    /// no contribution: the penalty is piecewise constant in them.
    pub fn add_reg_grad(&mut self, lambda: f64) {
        ndarray::Zip::from(&mut self.p.grad)
            .and(&self.p.data)
            .and(&self.s.data)
            .for_each(|g, &p, &s| {
                let sb = shiftparam::ternary_sign(s) as f64;
                *g += lambda * sb * sb * (2.0 * p).exp2() * std::f64::consts::LN_2;
            });
    }
}
