//! Minimal tape-based autodiff engine and the layers built on it.

mod adam;
pub mod layers;
pub mod tape;

pub use adam::{Adam, OptimizerConfig};
pub use layers::{
    Attention, Binding, Conv1d, Dropout, Gdn, LayerNorm, Linear, Mlp2, Param, ParamId, ParamStore,
    TransformerLayer, TransformerStack,
};
pub use tape::{Tape, Var, PROB_CLAMP};
