//! Named tensor state for checkpointing.
//!
//! Shift-parameterized weight tensors leave the process only in their
//! rounded form — a `(p_bar, s_bar)` pair destined for the packed 5-bit
//! container encoding. Everything else (biases, batch-norm parameters
//! and running statistics, real-domain control weights) is raw `f64`.

use std::collections::HashMap;

use ndarray::ArrayD;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub enum TensorPayload {
    Shift {
        shape: Vec<usize>,
        p_bar: Vec<i8>,
        s_bar: Vec<i8>,
    },
    Real(ArrayD<f64>),
}

#[derive(Debug, Clone)]
pub struct StateEntry {
    pub name: String,
    pub payload: TensorPayload,
}

pub type StateMap = HashMap<String, TensorPayload>;

pub fn take_shift(map: &mut StateMap, name: &str) -> Result<(Vec<usize>, Vec<i8>, Vec<i8>)> {
    match map.remove(name) {
        Some(TensorPayload::Shift {
            shape,
            p_bar,
            s_bar,
        }) => Ok((shape, p_bar, s_bar)),
        Some(TensorPayload::Real(_)) => Err(Error::InvalidConfig(format!(
            "tensor '{name}' holds real data where shift weights were expected"
        ))),
        None => Err(Error::InvalidConfig(format!("missing tensor '{name}'"))),
    }
}

pub fn take_real(map: &mut StateMap, name: &str) -> Result<ArrayD<f64>> {
    match map.remove(name) {
        Some(TensorPayload::Real(a)) => Ok(a),
        Some(TensorPayload::Shift { .. }) => Err(Error::InvalidConfig(format!(
            "tensor '{name}' holds shift weights where real data was expected"
        ))),
        None => Err(Error::InvalidConfig(format!("missing tensor '{name}'"))),
    }
}
