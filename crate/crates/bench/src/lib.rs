//! Fixtures shared by the benchmarks.

use tetnp::data::{sample_tasks, InputDistribution, TaskSamplerConfig};
use tetnp::models::{Model, ModelConfig, Task, Variant};
use tetnp::train::objective_and_gradients;

/// A single SE/Matérn/periodic task with exactly `context` context points.
pub fn task(context: usize, targets: usize, seed: u64) -> Task {
    let cfg = TaskSamplerConfig {
        min_context: context,
        max_context: context,
        num_targets: targets,
        context_inputs: InputDistribution::Uniform { low: -2.0, high: 2.0 },
        seed,
        ..TaskSamplerConfig::default()
    };
    sample_tasks(&cfg, 1).expect("fixture task").remove(0)
}

pub fn desk_model(variant: Variant) -> Model {
    Model::new(ModelConfig::new(variant), 0).expect("fixture model")
}

/// Loss and parameter gradients for one task, as one training step needs.
pub fn gradient_step(model: &Model, task: &Task) -> f64 {
    objective_and_gradients(model, std::slice::from_ref(task), 1)
        .expect("gradients")
        .0
}
