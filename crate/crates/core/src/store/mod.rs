//! Trajectory data model: steps, trajectories, on-disk format and task-level splits.

mod io;
pub mod sidecar;
mod split;

pub use io::{load_dataset, save_dataset, ChainMismatch, LoadedDataset, DATA_FILE, SIDECAR_FILE};
pub use split::{split_by_task, DatasetSplit, DEFAULT_SPLIT_RATIOS};

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance on the unit-norm invariant for stored vectors.
pub const NORM_TOLERANCE: f32 = 1e-4;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("schema error at {location}: {message}")]
    Schema { location: String, message: String },
    #[error("missing embedding for task {task_id} step {step_index} field {field}")]
    MissingEmbedding { task_id: String, step_index: u32, field: String },
    #[error("embedding {emb_ref} has norm {norm} (expected 1 ± {NORM_TOLERANCE})")]
    NormViolation { emb_ref: String, norm: f32 },
    #[error("task {task_id} has non-contiguous step indices: expected {expected}, found {found}")]
    NonContiguousSteps { task_id: String, expected: u32, found: u32 },
    #[error("embedding {emb_ref} has dimension {found}, expected {expected}")]
    DimensionMismatch { emb_ref: String, expected: usize, found: usize },
    #[error("unknown embedding reference {0}")]
    UnknownRef(String),
    #[error("split error: {0}")]
    TooFewTasks(String),
    #[error("invalid split ratios: {0}")]
    InvalidRatios(String),
}

impl StoreError {
    pub(crate) fn io(path: impl fmt::Display, source: std::io::Error) -> Self {
        Self::Io { path: path.to_string(), source }
    }

    pub(crate) fn schema(location: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Schema { location: location.into(), message: message.into() }
    }
}

/// World or operating-system family a trajectory was recorded in.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct OsTag(pub String);

impl OsTag {
    pub fn new(tag: impl Into<String>) -> Self {
        Self(tag.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for OsTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskCompletion {
    Completed,
    Failed,
    Unknown,
}

impl TaskCompletion {
    /// Confidence weight applied to positives drawn from tasks with this outcome.
    pub fn weight(self) -> f64 {
        match self {
            TaskCompletion::Completed => 1.0,
            TaskCompletion::Failed => 0.3,
            TaskCompletion::Unknown => 0.7,
        }
    }
}

/// One text field of a step: optional raw text, its embedding, and
/// pre-embedded augmentation variants (action and code only).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TextField {
    pub text: Option<String>,
    pub embedding: Option<Vec<f32>>,
    pub variants: Vec<Vec<f32>>,
}

impl TextField {
    pub fn new(text: Option<String>, embedding: Option<Vec<f32>>) -> Self {
        Self { text, embedding, variants: Vec::new() }
    }

    pub fn absent() -> Self {
        Self::default()
    }

    pub fn is_present(&self) -> bool {
        self.embedding.is_some()
    }

    /// The embedding, or `None` when the field is absent (consumers substitute zeros).
    pub fn emb(&self) -> Option<&[f32]> {
        self.embedding.as_deref()
    }

    /// Variant `k` if it exists, otherwise the base embedding.
    pub fn view(&self, variant: Option<usize>) -> Option<&[f32]> {
        match variant.and_then(|k| self.variants.get(k)) {
            Some(v) => Some(v),
            None => self.emb(),
        }
    }
}

/// One recorded step of a trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub step_index: u32,
    pub screenshot_before: Vec<f32>,
    pub screenshot_after: Option<Vec<f32>>,
    pub observation: TextField,
    pub action: TextField,
    pub code: TextField,
    pub thought: TextField,
    pub reflection: TextField,
    pub instruction: TextField,
    pub xy: [f32; 2],
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub task_id: String,
    pub os_tag: OsTag,
    pub task_completion: TaskCompletion,
    pub steps: Vec<Step>,
}

impl Trajectory {
    pub fn weight(&self) -> f64 {
        self.task_completion.weight()
    }

    pub fn step(&self, index: usize) -> &Step {
        &self.steps[index]
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn incorrect_steps(&self) -> impl Iterator<Item = usize> + '_ {
        self.steps.iter().enumerate().filter(|(_, s)| !s.correct).map(|(i, _)| i)
    }
}

/// Indices `i` where `screenshot_after[i] != screenshot_before[i + 1]`; pairs
/// lacking `screenshot_after` are skipped.
pub fn verify_chain(trajectory: &Trajectory) -> Vec<usize> {
    trajectory
        .steps
        .windows(2)
        .enumerate()
        .filter_map(|(i, pair)| match &pair[0].screenshot_after {
            Some(after) if after != &pair[1].screenshot_before => Some(i),
            _ => None,
        })
        .collect()
}

pub fn l2_norm(v: &[f32]) -> f32 {
    v.iter().map(|x| x * x).sum::<f32>().sqrt()
}
