//! Borrowed encoder inputs and their dense batch layout.

use ndarray::{s, Array2, ArrayViewMut1};

use super::{ModelDims, ModelError, HISTORY_LEN};
use crate::nn::Scalar;
use crate::store::{Step, Trajectory};

/// One previous step as seen by the history encoder.
#[derive(Debug, Clone, Copy)]
pub struct HistoryStep<'a> {
    pub screenshot: &'a [f32],
    pub observation: Option<&'a [f32]>,
    pub action: Option<&'a [f32]>,
    pub code: Option<&'a [f32]>,
    pub xy: [f32; 2],
}

impl<'a> HistoryStep<'a> {
    pub fn from_step(step: &'a Step) -> Self {
        Self {
            screenshot: &step.screenshot_before,
            observation: step.observation.emb(),
            action: step.action.emb(),
            code: step.code.emb(),
            xy: step.xy,
        }
    }
}

/// The `HISTORY_LEN` most recent steps, oldest first. Leading `None` entries
/// are padding and encode as all-zero step vectors.
#[derive(Debug, Clone, Copy, Default)]
pub struct HistoryWindow<'a> {
    pub steps: [Option<HistoryStep<'a>>; HISTORY_LEN],
}

impl<'a> HistoryWindow<'a> {
    pub fn empty() -> Self {
        Self { steps: [None; HISTORY_LEN] }
    }

    /// Keeps the last `HISTORY_LEN` of `recent` (oldest first) and front-pads.
    pub fn from_recent(recent: &[HistoryStep<'a>]) -> Self {
        let mut window = Self::empty();
        let take = recent.len().min(HISTORY_LEN);
        let pad = HISTORY_LEN - take;
        for (slot, step) in window.steps[pad..].iter_mut().zip(&recent[recent.len() - take..]) {
            *slot = Some(*step);
        }
        window
    }

    pub fn is_padding(&self, k: usize) -> bool {
        self.steps[k].is_none()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StateInput<'a> {
    pub screenshot: &'a [f32],
    pub observation: Option<&'a [f32]>,
    pub instruction: Option<&'a [f32]>,
    pub reflection: Option<&'a [f32]>,
    pub history: HistoryWindow<'a>,
}

impl<'a> StateInput<'a> {
    /// State of step `t` (0-based) with the preceding steps as history.
    pub fn from_trajectory(trajectory: &'a Trajectory, t: usize) -> Self {
        let step = &trajectory.steps[t];
        let start = t.saturating_sub(HISTORY_LEN);
        let recent: Vec<HistoryStep<'a>> = trajectory.steps[start..t].iter().map(HistoryStep::from_step).collect();
        Self {
            screenshot: &step.screenshot_before,
            observation: step.observation.emb(),
            instruction: step.instruction.emb(),
            reflection: step.reflection.emb(),
            history: HistoryWindow::from_recent(&recent),
        }
    }
}

/// A candidate action. `None` fields (absent thought) encode as zeros.
#[derive(Debug, Clone, Copy)]
pub struct ActionInput<'a> {
    pub thought: Option<&'a [f32]>,
    pub action: Option<&'a [f32]>,
    pub code: Option<&'a [f32]>,
    pub xy: [f32; 2],
}

impl<'a> ActionInput<'a> {
    pub fn from_step(step: &'a Step) -> Self {
        Self::with_views(step, None, None)
    }

    /// The step's action with the given augmentation variants for action text and code.
    pub fn with_views(step: &'a Step, action_view: Option<usize>, code_view: Option<usize>) -> Self {
        Self {
            thought: step.thought.emb(),
            action: step.action.view(action_view),
            code: step.code.view(code_view),
            xy: step.xy,
        }
    }
}

/// Dense layout of a batch of states.
#[derive(Debug, Clone)]
pub struct StateBatch<T> {
    /// `[screenshot ‖ observation ‖ instruction ‖ reflection]`, one row per state.
    pub context: Array2<T>,
    /// Per history slot: `[screenshot ‖ observation ‖ action]`.
    pub hist_main: Vec<Array2<T>>,
    /// Per history slot: raw code embedding, compressed inside the model.
    pub hist_code: Vec<Array2<T>>,
    pub hist_xy: Vec<Array2<T>>,
}

impl<T: Scalar> StateBatch<T> {
    pub fn build(dims: &ModelDims, inputs: &[StateInput<'_>]) -> Result<Self, ModelError> {
        let (v, d) = (dims.vision, dims.text);
        let b = inputs.len();
        let mut context = Array2::zeros((b, v + 3 * d));
        let mut hist_main: Vec<Array2<T>> = (0..HISTORY_LEN).map(|_| Array2::zeros((b, v + 2 * d))).collect();
        let mut hist_code: Vec<Array2<T>> = (0..HISTORY_LEN).map(|_| Array2::zeros((b, d))).collect();
        let mut hist_xy: Vec<Array2<T>> = (0..HISTORY_LEN).map(|_| Array2::zeros((b, 2))).collect();
        for (i, input) in inputs.iter().enumerate() {
            let mut row = context.row_mut(i);
            put(&mut row, 0, Some(input.screenshot), v, "screenshot")?;
            put(&mut row, v, input.observation, d, "observation")?;
            put(&mut row, v + d, input.instruction, d, "instruction")?;
            put(&mut row, v + 2 * d, input.reflection, d, "reflection")?;
            for (k, slot) in input.history.steps.iter().enumerate() {
                let Some(h) = slot else { continue };
                let mut main = hist_main[k].row_mut(i);
                put(&mut main, 0, Some(h.screenshot), v, "history screenshot")?;
                put(&mut main, v, h.observation, d, "history observation")?;
                put(&mut main, v + d, h.action, d, "history action")?;
                put(&mut hist_code[k].row_mut(i), 0, h.code, d, "history code")?;
                put(&mut hist_xy[k].row_mut(i), 0, Some(&h.xy), 2, "history xy")?;
            }
        }
        Ok(Self { context, hist_main, hist_code, hist_xy })
    }

    pub fn len(&self) -> usize {
        self.context.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Dense `[thought ‖ action ‖ code ‖ xy]` rows.
#[derive(Debug, Clone)]
pub struct ActionBatch<T> {
    pub features: Array2<T>,
}

impl<T: Scalar> ActionBatch<T> {
    pub fn build(dims: &ModelDims, inputs: &[ActionInput<'_>]) -> Result<Self, ModelError> {
        let d = dims.text;
        let mut features = Array2::zeros((inputs.len(), dims.action_input()));
        for (i, input) in inputs.iter().enumerate() {
            let mut row = features.row_mut(i);
            put(&mut row, 0, input.thought, d, "thought")?;
            put(&mut row, d, input.action, d, "action")?;
            put(&mut row, 2 * d, input.code, d, "code")?;
            put(&mut row, 3 * d, Some(&input.xy), 2, "xy")?;
        }
        Ok(Self { features })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn put<T: Scalar>(
    row: &mut ArrayViewMut1<'_, T>,
    offset: usize,
    src: Option<&[f32]>,
    dim: usize,
    field: &'static str,
) -> Result<(), ModelError> {
    let Some(src) = src else { return Ok(()) };
    if src.len() != dim {
        return Err(ModelError::DimensionMismatch { field, expected: dim, found: src.len() });
    }
    for (dst, &x) in row.slice_mut(s![offset..offset + dim]).iter_mut().zip(src) {
        *dst = T::of(x as f64);
    }
    Ok(())
}
