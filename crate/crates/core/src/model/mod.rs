//! Recurrent decoder-only language model: configuration, weight container
//! and single-precision inference.

pub mod config;
pub mod runtime;
pub mod weights;

pub use config::{schema_param_count, tensor_schema, ModelConfig};
pub use runtime::{forward_full, forward_step, DecoderState, Logits, Model};
pub use weights::{load_weights, read_manifest, Tensor, TensorInfo, WeightSet};

/// Exact number of learned scalars in `w`.
pub fn param_count(w: &WeightSet) -> usize {
    w.param_count()
}
