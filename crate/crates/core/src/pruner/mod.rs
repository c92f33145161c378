//! Second-order structured pruning of linear layers.

pub mod hessian;
pub mod obs;
pub mod structured;

pub use hessian::{HessianAccumulator, DEFAULT_DAMPING};
pub use obs::{groups_to_prune, prune_layer, reconstruction_error, GroupMask, ObsState, PruneResult, TraceStep};
pub use structured::{prune_attention_block, prune_mlp_block};
