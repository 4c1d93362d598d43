//! Fixtures shared by the benchmarks under `benches/`.

use randq_core::rng::{sample_uniform, NoiseKey};
use randq_core::seq2seq::{generate_dataset, Batch, Dataset, Model, ModelConfig, QuantizeScope, Task, TaskSpec};
use randq_core::Tensor;

/// Uniform `[-1, 1)` matrix, reproducible from `seed`.
pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
    sample_uniform(&[rows, cols], -1.0, 1.0, NoiseKey::new(seed, 0, 0)).expect("valid bounds")
}

/// The reverse task at the sizes used by the trend experiments.
pub fn toy_task() -> TaskSpec {
    TaskSpec { task: Task::Reverse, seq_len: 12, n_train: 1024, n_eval: 256, ..TaskSpec::default() }
}

pub fn toy_model(d_model: usize) -> Model {
    let config = ModelConfig { d_model, d_ff: 4 * d_model, quantize_scope: QuantizeScope::AllDense, ..ModelConfig::default() };
    Model::init(config, 0).expect("valid config")
}

pub fn toy_data() -> (Dataset, Dataset) {
    generate_dataset(&toy_task()).expect("valid task")
}

/// The first `batch_size` training examples as one padded batch.
pub fn toy_batch(data: &Dataset, batch_size: usize) -> Batch {
    let examples: Vec<_> = data.examples.iter().take(batch_size).collect();
    Batch::from_examples(&examples).expect("non-empty batch")
}
