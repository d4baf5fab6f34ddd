//! Adaptive optimizers: Adam and its variance-rectified variant.
//!
//! The rectified variant follows the published rectification rule: while
//! the variance estimate is intractable (`rho_t <= 4`) it takes
//! unadapted momentum steps, afterwards it scales the adaptive step by
//! the rectification factor `r_t`.

use std::collections::HashMap;

use ndarray::ArrayD;

use crate::nn::param::{Param, ParamKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptKind {
    RAdam,
    Adam,
}

#[derive(Debug)]
struct MomentState {
    m: ArrayD<f64>,
    v: ArrayD<f64>,
    t: u64,
}

#[derive(Debug)]
pub struct Optimizer {
    pub kind: OptKind,
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    /// L2 decay folded into the gradient; applied only to plain
    /// parameters that opted in (never to shift exponents or signs).
    pub weight_decay: f64,
    state: HashMap<usize, MomentState>,
}

impl Optimizer {
    pub fn new(kind: OptKind, lr: f64, betas: (f64, f64), weight_decay: f64) -> Optimizer {
        Optimizer {
            kind,
            lr,
            betas,
            eps: 1e-8,
            weight_decay,
            state: HashMap::new(),
        }
    }

    /// Network-weight optimizer defaults.
    pub fn for_weights(kind: OptKind, lr: f64, weight_decay: f64) -> Optimizer {
        Optimizer::new(kind, lr, (0.9, 0.999), weight_decay)
    }

    /// Architecture-logit optimizer defaults.
    pub fn for_arch(lr: f64, weight_decay: f64) -> Optimizer {
        Optimizer::new(OptKind::Adam, lr, (0.5, 0.999), weight_decay)
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn step(&mut self, params: &mut [&mut Param]) {
        let (b1, b2) = self.betas;
        let rho_inf = 2.0 / (1.0 - b2) - 1.0;
        for p in params.iter_mut() {
            let mut grad = p.grad.clone();
            if self.weight_decay > 0.0 && matches!(p.kind, ParamKind::Plain { decay: true }) {
                grad.scaled_add(self.weight_decay, &p.data);
            }
            let st = self.state.entry(p.id.0).or_insert_with(|| MomentState {
                m: ArrayD::zeros(p.data.raw_dim()),
                v: ArrayD::zeros(p.data.raw_dim()),
                t: 0,
            });
            st.t += 1;
            let t = st.t as f64;
            st.m.zip_mut_with(&grad, |m, &g| *m = b1 * *m + (1.0 - b1) * g);
            st.v.zip_mut_with(&grad, |v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
            let bc1 = 1.0 - b1.powf(t);
            let bc2 = 1.0 - b2.powf(t);
            match self.kind {
                OptKind::Adam => {
                    let lr = self.lr;
                    let eps = self.eps;
                    ndarray::Zip::from(&mut p.data)
                        .and(&st.m)
                        .and(&st.v)
                        .for_each(|w, &m, &v| {
                            let m_hat = m / bc1;
                            let v_hat = v / bc2;
                            *w -= lr * m_hat / (v_hat.sqrt() + eps);
                        });
                }
                OptKind::RAdam => {
                    let rho_t = rho_inf - 2.0 * t * b2.powf(t) / bc2;
                    let lr = self.lr;
                    let eps = self.eps;
                    if rho_t > 4.0 {
                        let r = (((rho_t - 4.0) * (rho_t - 2.0) * rho_inf)
                            / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t))
                            .sqrt();
                        ndarray::Zip::from(&mut p.data)
                            .and(&st.m)
                            .and(&st.v)
                            .for_each(|w, &m, &v| {
                                let m_hat = m / bc1;
                                let v_hat = (v / bc2).sqrt();
                                *w -= lr * r * m_hat / (v_hat + eps);
                            });
                    } else {
                        ndarray::Zip::from(&mut p.data).and(&st.m).for_each(|w, &m| {
                            *w -= lr * m / bc1;
                        });
                    }
                }
            }
        }
    }
}
