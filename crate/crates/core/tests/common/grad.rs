//! Fixtures for gradient checks on a width-8 model.

use intent_reward::model::{ModelDims, ModelParams};
use intent_reward::objective::{combined_loss, grad_check, GradCheckReport, LossConfig};
use intent_reward::store::{TaskCompletion, Trajectory};
use intent_reward::trainer::{assemble_batch, StageConfig, StageData};
use rand::Rng;

use super::{rng, trajectory};

pub fn batch_trajectories(d: usize) -> Vec<Trajectory> {
    let labels: [&[bool]; 4] = [
        &[true, true, true, true, true],
        &[true, false, true, true, false, true],
        &[true, true, false, true],
        &[true, true, true],
    ];
    let outcomes = [TaskCompletion::Completed, TaskCompletion::Failed, TaskCompletion::Unknown, TaskCompletion::Completed];
    labels
        .iter()
        .zip(outcomes)
        .enumerate()
        .map(|(i, (l, o))| Trajectory { task_completion: o, ..trajectory(&format!("t{i}"), l, d, d, 100 + i as u64) })
        .collect()
}

/// Seeded weights plus random biases and gains. With zero biases a padding
/// slot reaches the step layernorm with zero variance, where the central
/// difference at 1e-4 is dominated by curvature.
pub fn generic_point(dims: ModelDims, seed: u64) -> ModelParams<f64> {
    let mut p = ModelParams::<f64>::seeded(dims, seed);
    let mut r = rng(seed + 1);
    for (name, values) in p.tensors_mut() {
        if name.ends_with("bias") {
            values.iter_mut().for_each(|v| *v = r.gen_range(-0.5..0.5));
        } else if name.ends_with("gain") {
            values.iter_mut().for_each(|v| *v = r.gen_range(0.8..1.2));
        }
    }
    p
}

/// Gradient check of the combined loss at `lambda` with a fixed dropout mask.
pub fn check_combined(lambda: f64) -> GradCheckReport {
    let trajs = batch_trajectories(8);
    let data = StageData { train: trajs.iter().collect(), val: Vec::new() };
    let config = StageConfig { aug_prob: 0.5, ..StageConfig::pretrain() };
    let batch = assemble_batch(&data, &data.anchors(), &config, &mut rng(3)).unwrap();
    let params = generic_point(ModelDims::uniform(8), 21);
    let loss = LossConfig::new(0.2, lambda);
    let loss_fn = |p: &ModelParams<f64>| {
        let mut dropout = rng(77);
        let out = combined_loss(p, &batch, &loss, Some(&mut dropout)).unwrap();
        (out.loss, out.grads)
    };
    grad_check(loss_fn, &params, 1e-4, 20, 5)
}
