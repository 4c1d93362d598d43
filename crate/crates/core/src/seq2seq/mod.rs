//! Synthetic sequence tasks and a small pre-norm encoder-decoder transformer
//! whose dense layers can be trained through the QAT operators.

mod data;
mod model;

pub use data::{
    addition_target, encode_number, generate_dataset, sequence_error_rate, truncate_at_eos, Batch, Dataset, Example,
    Task, TaskSpec, BOS, EOS, FIRST_CONTENT, PAD, PLUS,
};
pub use model::{
    forward_loss, greedy_decode, greedy_decode_batch, loss_and_grads, lsc_param_name, positional_encoding, DenseLayer,
    LayerGroup, Model, ModelConfig, ParamStore, QatPlan, QuantizeScope, StepSeed,
};
