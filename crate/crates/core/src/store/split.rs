use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{StoreError, Trajectory};

pub const DEFAULT_SPLIT_RATIOS: (f64, f64, f64) = (0.85, 0.10, 0.05);

/// Task-level partition. Steps of one task never straddle two splits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: BTreeSet<String>,
    pub val: BTreeSet<String>,
    pub test: BTreeSet<String>,
    pub seed: u64,
}

impl DatasetSplit {
    pub fn is_disjoint(&self) -> bool {
        self.train.is_disjoint(&self.val) && self.train.is_disjoint(&self.test) && self.val.is_disjoint(&self.test)
    }

    /// Adds tasks to the training side only (auxiliary pretraining data).
    pub fn extend_train<'a>(&mut self, tasks: impl IntoIterator<Item = &'a str>) {
        self.train.extend(tasks.into_iter().map(str::to_string));
    }

    pub fn read(path: &Path) -> Result<Self, StoreError> {
        let text = std::fs::read_to_string(path).map_err(|e| StoreError::io(path.display(), e))?;
        serde_json::from_str(&text).map_err(|e| StoreError::schema(path.display().to_string(), e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<(), StoreError> {
        let text = serde_json::to_string_pretty(self).expect("split serializes");
        std::fs::write(path, text).map_err(|e| StoreError::io(path.display(), e))
    }
}

/// Shuffles task ids under `seed` and cuts them by `ratios` (train, val, test).
/// Validation and test sizes round to nearest and are at least one task each.
pub fn split_by_task(trajectories: &[Trajectory], ratios: (f64, f64, f64), seed: u64) -> Result<DatasetSplit, StoreError> {
    let (rt, rv, rs) = ratios;
    if [rt, rv, rs].iter().any(|r| !(0.0..=1.0).contains(r)) || (rt + rv + rs - 1.0).abs() > 1e-9 {
        return Err(StoreError::InvalidRatios(format!("{ratios:?} must be in [0, 1] and sum to 1")));
    }
    let mut ids: Vec<String> = trajectories.iter().map(|t| t.task_id.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let n = ids.len();
    let n_val = ((n as f64 * rv).round() as usize).max(1);
    let n_test = ((n as f64 * rs).round() as usize).max(1);
    if n < 3 || n_val + n_test >= n {
        return Err(StoreError::TooFewTasks(format!("{n} tasks cannot fill train/val/test")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let test: BTreeSet<String> = ids.drain(..n_test).collect();
    let val: BTreeSet<String> = ids.drain(..n_val).collect();
    let train: BTreeSet<String> = ids.into_iter().collect();
    Ok(DatasetSplit { train, val, test, seed })
}
