//! Symmetric weighted InfoNCE, margin ranking over hard negatives, their
//! analytic gradients, and a finite-difference checker.

use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{reborrow, ActionBatch, ActionInput, ModelError, ModelParams, StateBatch, StateInput};
use crate::nn::Scalar;
use crate::store::Trajectory;

/// Upper bound on negatives per anchor.
pub const MAX_NEGATIVES: usize = 4;

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),
    #[error("margin loss needs at least one negative")]
    EmptyNegatives,
    #[error("no negatives available for task {task_id} step {step_index}")]
    NoNegativesAvailable { task_id: String, step_index: u32 },
    #[error("step {0} is labeled incorrect and cannot be an anchor")]
    IncorrectAnchor(u32),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeSource {
    Adjacent,
    LabeledIncorrect,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub margin: f64,
    pub lambda: f64,
}

impl LossConfig {
    pub fn new(margin: f64, lambda: f64) -> Self {
        assert!(margin > 0.0 && lambda >= 0.0, "margin must be positive and lambda non-negative");
        Self { margin, lambda }
    }
}

/// Hard-negative candidates for anchor step `t` (0-based).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NegativePools {
    pub adjacent: Vec<usize>,
    pub incorrect: Vec<usize>,
}

impl NegativePools {
    pub fn for_step(trajectory: &Trajectory, t: usize) -> Result<Self, ObjectiveError> {
        let step = &trajectory.steps[t];
        if !step.correct {
            return Err(ObjectiveError::IncorrectAnchor(step.step_index));
        }
        let incorrect: Vec<usize> = trajectory.incorrect_steps().filter(|&i| i != t).collect();
        let adjacent: Vec<usize> = [t.checked_sub(1), Some(t + 1)]
            .into_iter()
            .flatten()
            .filter(|&i| i < trajectory.len() && !incorrect.contains(&i))
            .collect();
        Ok(Self { adjacent, incorrect })
    }

    pub fn is_empty(&self) -> bool {
        self.adjacent.is_empty() && self.incorrect.is_empty()
    }
}

/// Draws up to [`MAX_NEGATIVES`] step indices. With both pools nonempty,
/// `mix` is the share of slots reserved for labeled-incorrect steps; slots a
/// pool cannot fill pass to the other pool.
pub fn mine_negatives<R: Rng + ?Sized>(
    trajectory: &Trajectory,
    t: usize,
    mix: f64,
    rng: &mut R,
) -> Result<Vec<(usize, NegativeSource)>, ObjectiveError> {
    let pools = NegativePools::for_step(trajectory, t)?;
    if pools.is_empty() {
        return Err(ObjectiveError::NoNegativesAvailable {
            task_id: trajectory.task_id.clone(),
            step_index: trajectory.steps[t].step_index,
        });
    }
    let want_inc = if pools.adjacent.is_empty() {
        MAX_NEGATIVES
    } else if pools.incorrect.is_empty() {
        0
    } else {
        ((MAX_NEGATIVES as f64 * mix).round() as usize).clamp(1, MAX_NEGATIVES - 1)
    };
    let n_inc = want_inc.min(pools.incorrect.len());
    let n_adj = (MAX_NEGATIVES - n_inc).min(pools.adjacent.len());
    let n_inc = (MAX_NEGATIVES - n_adj).min(pools.incorrect.len());
    let mut out: Vec<(usize, NegativeSource)> =
        pools.adjacent.choose_multiple(rng, n_adj).map(|&i| (i, NegativeSource::Adjacent)).collect();
    out.extend(pools.incorrect.choose_multiple(rng, n_inc).map(|&i| (i, NegativeSource::LabeledIncorrect)));
    out.sort_unstable();
    Ok(out)
}

/// One optimization batch: positives from correct steps plus per-anchor negatives.
#[derive(Debug, Clone, Default)]
pub struct TrainBatch<'a> {
    pub states: Vec<StateInput<'a>>,
    pub positives: Vec<ActionInput<'a>>,
    pub weights: Vec<f64>,
    pub negatives: Vec<Vec<(ActionInput<'a>, NegativeSource)>>,
    /// `(trajectory index, step index)` of each anchor, for auditing.
    pub anchors: Vec<(usize, usize)>,
}

impl<'a> TrainBatch<'a> {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// Softmax of each lane plus its log-sum-exp.
fn softmax_lanes<'a, T: Scalar>(lanes: impl Iterator<Item = ndarray::ArrayViewMut1<'a, T>>) -> Vec<T> {
    let mut lse = Vec::new();
    for mut lane in lanes {
        let max = lane.iter().copied().fold(T::neg_infinity(), T::max);
        lane.mapv_inplace(|v| (v - max).exp());
        let z = lane.iter().copied().sum::<T>();
        lane.mapv_inplace(|v| v / z);
        lse.push(max + z.ln());
    }
    lse
}

/// Loss value and gradients with respect to `S`, `A` and `log τ`.
#[derive(Debug, Clone)]
pub struct AlignGrad<T> {
    pub loss: T,
    pub ds: Array2<T>,
    pub da: Array2<T>,
    pub dlog_tau: T,
}

/// `(1/2B) Σᵢ wᵢ [−log softmax_row(SAᵀ/τ)ᵢᵢ − log softmax_col(SAᵀ/τ)ᵢᵢ]` with gradients.
pub fn align_loss_grad<T: Scalar>(s: &Array2<T>, a: &Array2<T>, w: &[T], tau: T) -> Result<AlignGrad<T>, ObjectiveError> {
    let b = s.nrows();
    if b == 0 {
        return Err(ObjectiveError::DegenerateBatch("empty batch".into()));
    }
    if a.nrows() != b || w.len() != b {
        return Err(ObjectiveError::DegenerateBatch(format!("{b} states, {} actions, {} weights", a.nrows(), w.len())));
    }
    let logits = s.dot(&a.t()).mapv(|v| v / tau);
    let mut p = logits.clone();
    let row_lse = softmax_lanes(p.outer_iter_mut());
    let mut q = logits.clone();
    let col_lse = softmax_lanes(q.columns_mut().into_iter());
    let inv_2b = T::one() / T::of(2.0 * b as f64);
    let mut loss = T::zero();
    for i in 0..b {
        loss += w[i] * (row_lse[i] + col_lse[i] - logits[[i, i]] - logits[[i, i]]);
    }
    loss *= inv_2b;
    let mut g = Array2::zeros((b, b));
    for i in 0..b {
        for j in 0..b {
            let delta = if i == j { T::one() } else { T::zero() };
            g[[i, j]] = (w[i] * (p[[i, j]] - delta) + w[j] * (q[[i, j]] - delta)) * inv_2b;
        }
    }
    let dlog_tau = -(g.iter().zip(logits.iter()).map(|(gi, li)| *gi * *li).sum::<T>());
    let ds = g.dot(a).mapv(|v| v / tau);
    let da = g.t().dot(s).mapv(|v| v / tau);
    Ok(AlignGrad { loss, ds, da, dlog_tau })
}

pub fn align_loss<T: Scalar>(s: &Array2<T>, a: &Array2<T>, w: &[T], tau: T) -> Result<T, ObjectiveError> {
    Ok(align_loss_grad(s, a, w, tau)?.loss)
}

/// `(1/|N|) Σ max(0, m − f(s,a⁺) + f(s,a⁻))` with `f = sᵀa/τ`.
pub fn margin_loss<T: Scalar>(s: &[T], a_plus: &[T], negatives: &[&[T]], margin: T, tau: T) -> Result<T, ObjectiveError> {
    if negatives.is_empty() {
        return Err(ObjectiveError::EmptyNegatives);
    }
    let f_pos = crate::nn::dot(s, a_plus) / tau;
    let total = negatives
        .iter()
        .map(|a_neg| (margin - f_pos + crate::nn::dot(s, a_neg) / tau).max(T::zero()))
        .sum::<T>();
    Ok(total / T::of(negatives.len() as f64))
}

#[derive(Debug, Clone)]
pub struct LossOutput<T> {
    pub loss: T,
    pub align: T,
    pub margin: T,
    /// Anchors that contributed to the margin term.
    pub margin_anchors: usize,
    pub grads: ModelParams<T>,
}

/// `L_align + λ·L_margin` and its gradient over every parameter. The margin
/// term averages per-anchor hinge means over anchors that have negatives.
/// `rng` enables training-mode dropout.
pub fn combined_loss<T: Scalar>(
    params: &ModelParams<T>,
    batch: &TrainBatch<'_>,
    config: &LossConfig,
    mut rng: Option<&mut dyn RngCore>,
) -> Result<LossOutput<T>, ObjectiveError> {
    let b = batch.len();
    if b == 0 {
        return Err(ObjectiveError::DegenerateBatch("empty batch".into()));
    }
    let dims = params.dims;
    let state_batch = StateBatch::<T>::build(&dims, &batch.states)?;
    let mut actions: Vec<ActionInput<'_>> = batch.positives.clone();
    let mut offsets = Vec::with_capacity(b);
    for negs in &batch.negatives {
        offsets.push(actions.len());
        actions.extend(negs.iter().map(|(a, _)| *a));
    }
    let action_batch = ActionBatch::<T>::build(&dims, &actions)?;

    let (s, s_cache) = params.forward_states(&state_batch, reborrow(&mut rng))?;
    let (a_all, a_cache) = params.forward_actions(&action_batch, reborrow(&mut rng))?;
    let a = a_all.slice(s![..b, ..]).to_owned();
    let tau = params.tau();
    let w: Vec<T> = batch.weights.iter().map(|&x| T::of(x)).collect();

    let align = align_loss_grad(&s, &a, &w, tau)?;
    let mut ds = align.ds;
    let mut da_all = Array2::zeros(a_all.dim());
    da_all.slice_mut(s![..b, ..]).assign(&align.da);
    let mut dlog_tau = align.dlog_tau;

    let lambda = T::of(config.lambda);
    let m = T::of(config.margin);
    let margin_anchors = batch.negatives.iter().filter(|n| !n.is_empty()).count();
    let mut margin = T::zero();
    if margin_anchors > 0 {
        let anchor_scale = T::one() / T::of(margin_anchors as f64);
        for (i, negs) in batch.negatives.iter().enumerate() {
            if negs.is_empty() {
                continue;
            }
            let c = anchor_scale / T::of(negs.len() as f64);
            let si = s.row(i).to_owned();
            let f_pos = si.dot(&a.row(i)) / tau;
            for k in 0..negs.len() {
                let row = offsets[i] + k;
                let f_neg = si.dot(&a_all.row(row)) / tau;
                let hinge = m - f_pos + f_neg;
                if hinge <= T::zero() {
                    continue;
                }
                margin += c * hinge;
                // d hinge = -df⁺ + df⁻
                let gs = lambda * c / tau;
                let a_pos = a_all.row(i).to_owned();
                let a_neg = a_all.row(row).to_owned();
                ds.row_mut(i).scaled_add(gs, &(&a_neg - &a_pos));
                da_all.row_mut(i).scaled_add(-gs, &si);
                da_all.row_mut(row).scaled_add(gs, &si);
                dlog_tau += lambda * c * (f_pos - f_neg);
            }
        }
    }

    let mut grads = params.zeros_like();
    params.backward_states(&s_cache, &state_batch, &ds, &mut grads);
    params.backward_actions(&a_cache, &da_all, &mut grads);
    grads.log_tau = dlog_tau;
    let loss = align.loss + lambda * margin;
    if !loss.is_finite() {
        return Err(ModelError::NonFiniteActivation("loss").into());
    }
    Ok(LossOutput { loss, align: align.loss, margin, margin_anchors, grads })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub samples: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn tensor(&self, name: &str) -> Option<&TensorCheck> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

/// Central-difference check of `loss_fn`'s analytic gradient on `n_samples`
/// random entries per tensor (every entry for smaller tensors). `loss_fn` must
/// be deterministic, e.g. by reseeding any dropout generator on each call.
pub fn grad_check<F>(mut loss_fn: F, params: &ModelParams<f64>, eps: f64, n_samples: usize, seed: u64) -> GradCheckReport
where
    F: FnMut(&ModelParams<f64>) -> (f64, ModelParams<f64>),
{
    assert!((1e-6..=1e-3).contains(&eps), "epsilon {eps} outside [1e-6, 1e-3]");
    let (_, analytic) = loss_fn(params);
    let analytic_values: Vec<(String, Vec<f64>)> =
        analytic.tensors().into_iter().map(|(name, _, v)| (name, v.to_vec())).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = params.clone();
    let mut report = GradCheckReport { max_rel_error: 0.0, tensors: Vec::new() };
    for (t, (name, grad)) in analytic_values.iter().enumerate() {
        let len = grad.len();
        let picks: Vec<usize> = if len <= n_samples {
            (0..len).collect()
        } else {
            rand::seq::index::sample(&mut rng, len, n_samples).into_vec()
        };
        let mut worst = 0.0f64;
        for &k in &picks {
            let original = work.tensors()[t].2[k];
            work.tensors_mut()[t].1[k] = original + eps;
            let (up, _) = loss_fn(&work);
            work.tensors_mut()[t].1[k] = original - eps;
            let (down, _) = loss_fn(&work);
            work.tensors_mut()[t].1[k] = original;
            let numeric = (up - down) / (2.0 * eps);
            let err = (grad[k] - numeric).abs() / numeric.abs().max(1e-8);
            worst = worst.max(err);
        }
        report.max_rel_error = report.max_rel_error.max(worst);
        report.tensors.push(TensorCheck { name: name.clone(), samples: picks.len(), max_rel_error: worst });
    }
    report
}
