//! BERT-style transformer: configuration, weights, forward and backward.

pub mod config;
pub mod forward;
pub mod weights;

pub use config::{param_count, LayerDims, Mode, ModelConfig};
pub(crate) use forward::masked_cross_entropy;
pub use forward::{
    backward, batch_loss, forward, forward_excluding, loss_and_grads, trace, trace_masked,
    trace_masked_excluding, Batch, ForwardOutput, LossAndGrads, Trace,
};
pub use weights::{init_model, LayerWeights, ModelWeights};
