//! Multiplication-less neural networks in the shift domain.
//!
//! Weights are constrained to `flip(2^p, s)` with `p` an integer shift
//! exponent and `s` a ternary sign, so every weight application is a bit
//! shift plus a sign flip instead of a multiplication. The crate provides:
//!
//! * [`fxp`] — the saturating Q16.16 fixed-point core that emulates the
//!   target hardware precision, including the shift-based multiply.
//! * [`shiftparam`] — the trainable shift/sign parameterization, its
//!   quantized views, straight-through gradient rules, and the packed
//!   5-bit weight encoding.
//! * [`nn`] — a small reverse-mode autograd engine over shift-domain
//!   layers (convolutions, pooling, linear, batch normalization).
//! * [`space`] — the 8-operation search space, mixed-operation edges, and
//!   the cell supernet.
//! * [`search`] — the two-phase (operation, then topology) architecture
//!   search with temperature annealing, edge-importance aggregation,
//!   the modified L2 regularizer, and the learning-rate reset schedule.
//! * [`genotype`] — derived-architecture description, JSON serialization,
//!   and instantiation as a trainable shift network.

pub mod error;
pub mod fxp;
pub mod genotype;
pub mod net;
pub mod nn;
pub mod optim;
pub mod search;
pub mod shiftparam;
pub mod space;

pub use error::{Error, Result};

/// Bounds worker parallelism for the batch-parallel kernels.
///
/// Reads the `SHIFTNAS_THREADS` environment variable when `n` is `None`.
/// Must be called before the first parallel section; later calls are
/// ignored once the global pool exists.
pub fn set_global_threads(n: Option<usize>) {
    let n = n.or_else(|| {
        std::env::var("SHIFTNAS_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    });
    if let Some(n) = n {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global();
    }
}
