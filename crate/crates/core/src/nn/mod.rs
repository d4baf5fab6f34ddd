//! Reverse-mode autograd over shift-domain layers.

pub mod conv;
pub mod graph;
mod graph_ops_ext;
pub mod layers;
pub mod param;
pub mod state;

pub use conv::{ConvGeom, WeightMode};
pub use graph::{Graph, NodeId, OpRule};
pub use param::{IdGen, Param, ParamId, ParamKind, ShiftPair};
pub use state::{StateEntry, StateMap, TensorPayload};
