//! End-to-end runs on the synthetic suite: the desk training recipe and the
//! comparison arms used by the ablations.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::eval::{evaluate, EvalConfig, EvalError, EvalReport};
use crate::model::{ModelDims, ModelParams};
use crate::synthetic::{Part, Suite};
use crate::trainer::{StageConfig, StageData, StageResult, StageRunner, TrainError};

/// The world whose held-out tasks are scored.
pub const TARGET_WORLD: &str = "C";
pub const SOURCE_WORLDS: [&str; 2] = ["A", "B"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    /// Pretrain on the source worlds, finetune on the target.
    Full,
    /// [`Arm::Full`] with λ = 0 in both stages.
    AlignmentOnly,
    /// One pretrain-recipe stage on the target world alone.
    TargetOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recipe {
    pub dims: ModelDims,
    pub pretrain: StageConfig,
    pub finetune: StageConfig,
}

impl Recipe {
    /// Stage defaults with batch sizes cut to match the synthetic dataset size.
    pub fn desk(seed: u64) -> Self {
        let worlds = |w: &[&str]| w.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        Self {
            dims: ModelDims::desk(),
            pretrain: StageConfig { batch_size: 256, seed, dataset_filter: worlds(&SOURCE_WORLDS), ..StageConfig::pretrain() },
            finetune: StageConfig { batch_size: 64, seed, dataset_filter: worlds(&[TARGET_WORLD]), ..StageConfig::finetune() },
        }
    }

    /// Stage configs the arm actually runs; `None` skips the second stage.
    pub fn stages(&self, arm: Arm) -> (StageConfig, Option<StageConfig>) {
        match arm {
            Arm::Full => (self.pretrain.clone(), Some(self.finetune.clone())),
            Arm::AlignmentOnly => (
                StageConfig { lambda: 0.0, ..self.pretrain.clone() },
                Some(StageConfig { lambda: 0.0, ..self.finetune.clone() }),
            ),
            Arm::TargetOnly => (StageConfig { dataset_filter: self.finetune.dataset_filter.clone(), ..self.pretrain.clone() }, None),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

pub struct ArmResult {
    pub params: ModelParams<f32>,
    pub stages: Vec<StageResult>,
    pub report: EvalReport,
}

/// Trains `arm` from a seeded init and scores it on the target world's test tasks.
/// Checkpoints and logs land in `out_dir/{stage}` when given.
pub fn run_arm(suite: &Suite, recipe: &Recipe, arm: Arm, out_dir: Option<&Path>) -> Result<ArmResult, ExperimentError> {
    let (first, second) = recipe.stages(arm);
    let mut params = ModelParams::<f32>::seeded(recipe.dims, first.seed);
    let mut stages = Vec::new();
    for config in std::iter::once(first).chain(second) {
        let data = StageData::from_split(&suite.trajectories, &suite.split, &config.dataset_filter);
        let mut runner = StageRunner { out_dir: out_dir.map(|d| d.join(config.name.as_str())), hook: None };
        let result = runner.run(&config, &data, params)?;
        log::info!("{:?} {}: best epoch {:?} score {:?}", arm, config.name.as_str(), result.best_epoch, result.best_score);
        params = result.params.clone();
        stages.push(result);
    }
    let test = suite.tasks(Part::Test, &[TARGET_WORLD]);
    let seed = recipe.pretrain.seed;
    let report = evaluate(&params, &test, &EvalConfig { seed, ..EvalConfig::default() })?;
    Ok(ArmResult { params, stages, report })
}

/// `out_dir/{arm}` as a path fragment.
pub fn arm_dir(out_dir: &Path, arm: Arm) -> PathBuf {
    let name = match arm {
        Arm::Full => "full",
        Arm::AlignmentOnly => "alignment_only",
        Arm::TargetOnly => "target_only",
    };
    out_dir.join(name)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arms_differ_only_where_intended() {
        let r = Recipe::desk(3);
        let (p, f) = r.stages(Arm::AlignmentOnly);
        assert_eq!((p.lambda, f.as_ref().unwrap().lambda), (0.0, 0.0));
        assert_eq!(StageConfig { lambda: r.pretrain.lambda, ..p }, r.pretrain);
        let (t, none) = r.stages(Arm::TargetOnly);
        assert!(none.is_none());
        assert_eq!(t.dataset_filter, vec!["C".to_string()]);
        assert_eq!((t.lr, t.epochs, t.batch_size), (r.pretrain.lr, r.pretrain.epochs, r.pretrain.batch_size));
    }
}
