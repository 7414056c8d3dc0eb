//! Offline metrics: pairwise discrimination, score gaps, in-batch retrieval,
//! the raw correct/incorrect gap probe and paraphrase style sensitivity.
//!
//! Every score here is a raw cosine (deployment mode).

use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ActionInput, ModelError, ModelParams, StateInput};
use crate::objective::NegativePools;
use crate::store::Trajectory;

/// Override threshold used for the gap fraction.
pub const GAP_THRESHOLD: f64 = 0.10;
const ENCODE_CHUNK: usize = 512;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("requested {requested} pairs but only {available} are available")]
    InsufficientPairs { requested: usize, available: usize },
    #[error("no pairs to evaluate")]
    NoPairs,
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),
    #[error("test set has no labeled-incorrect steps")]
    NoIncorrectSteps,
    #[error("missing paraphrase view for pair {0}")]
    MissingVariant(usize),
    #[error("validation set is empty")]
    EmptyValidationSet,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairKind {
    HardAdjacent,
    RealIncorrect,
}

/// A scoring test: the positive must outscore the negative for the same state.
#[derive(Debug, Clone, Copy)]
pub struct PairCase<'a> {
    pub state: StateInput<'a>,
    pub positive: ActionInput<'a>,
    pub negative: ActionInput<'a>,
    pub kind: PairKind,
    /// `(trajectory index, positive step, negative step)` in the input slice.
    pub origin: (usize, usize, usize),
}

/// Every qualifying `(task, step, negative step)` triple, in corpus order.
pub fn pair_triples(tasks: &[&Trajectory], kind: PairKind) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    for (ti, traj) in tasks.iter().enumerate() {
        for t in 0..traj.len() {
            let Ok(pools) = NegativePools::for_step(traj, t) else { continue };
            let negs = match kind {
                PairKind::HardAdjacent => pools.adjacent,
                PairKind::RealIncorrect => pools.incorrect,
            };
            out.extend(negs.into_iter().map(|n| (ti, t, n)));
        }
    }
    out
}

/// Samples `n` distinct triples of `kind` under `seed`.
pub fn build_pairs<'a>(tasks: &[&'a Trajectory], kind: PairKind, n: usize, seed: u64) -> Result<Vec<PairCase<'a>>, EvalError> {
    let triples = pair_triples(tasks, kind);
    if n > triples.len() {
        return Err(EvalError::InsufficientPairs { requested: n, available: triples.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<usize> = index::sample(&mut rng, triples.len(), n).into_vec();
    picked.sort_unstable();
    Ok(picked
        .into_iter()
        .map(|i| {
            let (ti, t, neg) = triples[i];
            let traj = tasks[ti];
            PairCase {
                state: StateInput::from_trajectory(traj, t),
                positive: ActionInput::from_step(&traj.steps[t]),
                negative: ActionInput::from_step(&traj.steps[neg]),
                kind,
                origin: (ti, t, neg),
            }
        })
        .collect())
}

/// Like [`build_pairs`] but takes every available triple when fewer than `n` exist.
pub fn build_pairs_up_to<'a>(tasks: &[&'a Trajectory], kind: PairKind, n: usize, seed: u64) -> Vec<PairCase<'a>> {
    match build_pairs(tasks, kind, n, seed) {
        Ok(p) => p,
        Err(EvalError::InsufficientPairs { available, .. }) => {
            log::warn!("{kind:?}: only {available} pairs available (wanted {n})");
            build_pairs(tasks, kind, available, seed).expect("available count is achievable")
        }
        Err(e) => unreachable!("{e}"),
    }
}

fn encode_states_chunked(params: &ModelParams<f32>, inputs: &[StateInput<'_>]) -> Result<Vec<Vec<f32>>, ModelError> {
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(ENCODE_CHUNK) {
        out.extend(params.encode_states(chunk)?.rows().into_iter().map(|r| r.to_vec()));
    }
    Ok(out)
}

fn encode_actions_chunked(params: &ModelParams<f32>, inputs: &[ActionInput<'_>]) -> Result<Vec<Vec<f32>>, ModelError> {
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(ENCODE_CHUNK) {
        out.extend(params.encode_actions(chunk)?.rows().into_iter().map(|r| r.to_vec()));
    }
    Ok(out)
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
}

/// `(score⁺, score⁻)` per pair.
pub fn pair_scores(params: &ModelParams<f32>, pairs: &[PairCase<'_>]) -> Result<Vec<(f64, f64)>, EvalError> {
    let states: Vec<StateInput<'_>> = pairs.iter().map(|p| p.state).collect();
    let actions: Vec<ActionInput<'_>> = pairs.iter().flat_map(|p| [p.positive, p.negative]).collect();
    let s = encode_states_chunked(params, &states)?;
    let a = encode_actions_chunked(params, &actions)?;
    Ok(s.iter().enumerate().map(|(i, si)| (dot(si, &a[2 * i]), dot(si, &a[2 * i + 1]))).collect())
}

/// Fraction of pairs with `score⁺ > score⁻`; ties fail.
pub fn accuracy(scores: &[(f64, f64)]) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    scores.iter().filter(|(p, n)| p > n).count() as f64 / scores.len() as f64
}

pub fn pairwise_eval(params: &ModelParams<f32>, pairs: &[PairCase<'_>]) -> Result<f64, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::NoPairs);
    }
    Ok(accuracy(&pair_scores(params, pairs)?))
}

/// Mean gap and the fraction strictly above `threshold`.
pub fn gap_stats(scores: &[(f64, f64)], threshold: f64) -> (f64, f64) {
    if scores.is_empty() {
        return (0.0, 0.0);
    }
    let n = scores.len() as f64;
    let mean = scores.iter().map(|(p, q)| p - q).sum::<f64>() / n;
    let over = scores.iter().filter(|(p, q)| p - q > threshold).count() as f64 / n;
    (mean, over)
}

/// Top-1 retrieval over one batch of matched pairs; ties with the diagonal fail.
pub fn inbatch_retrieval(params: &ModelParams<f32>, states: &[StateInput<'_>], actions: &[ActionInput<'_>]) -> Result<f64, EvalError> {
    if states.len() < 2 || states.len() != actions.len() {
        return Err(EvalError::DegenerateBatch(format!("{} states, {} actions", states.len(), actions.len())));
    }
    let s = params.encode_states(states)?;
    let a = params.encode_actions(actions)?;
    Ok(retrieval_top1(&s.dot(&a.t())))
}

/// Top-1 accuracy of a square similarity matrix with matches on the diagonal.
pub fn retrieval_top1(sim: &ndarray::Array2<f32>) -> f64 {
    let hits = sim
        .rows()
        .into_iter()
        .enumerate()
        .filter(|(i, row)| row.iter().enumerate().all(|(j, &v)| j == *i || v < row[*i]))
        .count();
    hits as f64 / sim.nrows() as f64
}

/// Every correct step of `tasks` as a matched `(state, action)` pair.
pub fn matched_pairs<'a>(tasks: &[&'a Trajectory]) -> Vec<(StateInput<'a>, ActionInput<'a>)> {
    tasks
        .iter()
        .flat_map(|traj| {
            traj.steps
                .iter()
                .enumerate()
                .filter(|(_, s)| s.correct)
                .map(move |(t, s)| (StateInput::from_trajectory(traj, t), ActionInput::from_step(s)))
        })
        .collect()
}

/// Mean top-1 retrieval over shuffled batches of `batch` matched pairs; a
/// trailing batch smaller than 2 is dropped.
pub fn split_retrieval(params: &ModelParams<f32>, tasks: &[&Trajectory], batch: usize, seed: u64) -> Result<f64, EvalError> {
    let mut pairs = matched_pairs(tasks);
    pairs.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (mut hits, mut total) = (0.0, 0usize);
    for chunk in pairs.chunks(batch.max(2)).filter(|c| c.len() >= 2) {
        let (s, a): (Vec<_>, Vec<_>) = chunk.iter().copied().unzip();
        hits += inbatch_retrieval(params, &s, &a)? * chunk.len() as f64;
        total += chunk.len();
    }
    if total == 0 {
        return Err(EvalError::DegenerateBatch("fewer than 2 matched pairs".into()));
    }
    Ok(hits / total as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RawGap {
    pub mean_correct: f64,
    pub mean_incorrect: f64,
    pub gap: f64,
}

/// Cosine of each step's state with its own executed action, averaged by label.
pub fn raw_gap_probe(params: &ModelParams<f32>, tasks: &[&Trajectory]) -> Result<RawGap, EvalError> {
    let mut states = Vec::new();
    let mut actions = Vec::new();
    let mut labels = Vec::new();
    for traj in tasks {
        for (t, step) in traj.steps.iter().enumerate() {
            states.push(StateInput::from_trajectory(traj, t));
            actions.push(ActionInput::from_step(step));
            labels.push(step.correct);
        }
    }
    if !labels.iter().any(|c| !c) {
        return Err(EvalError::NoIncorrectSteps);
    }
    let s = encode_states_chunked(params, &states)?;
    let a = encode_actions_chunked(params, &actions)?;
    let (mut sum, mut count) = ([0.0f64; 2], [0usize; 2]);
    for ((si, ai), &c) in s.iter().zip(&a).zip(&labels) {
        sum[c as usize] += dot(si, ai);
        count[c as usize] += 1;
    }
    let mean_correct = if count[1] == 0 { 0.0 } else { sum[1] / count[1] as f64 };
    let mean_incorrect = sum[0] / count[0] as f64;
    Ok(RawGap { mean_correct, mean_incorrect, gap: mean_correct - mean_incorrect })
}

/// Fraction of pairs whose ordering flips between two renderings of their
/// candidates. `view_a[i]` and `view_b[i]` are `(positive, negative)` for `pairs[i]`.
pub fn style_sensitivity<'a>(
    params: &ModelParams<f32>,
    pairs: &[PairCase<'a>],
    view_a: &[(ActionInput<'a>, ActionInput<'a>)],
    view_b: &[(ActionInput<'a>, ActionInput<'a>)],
) -> Result<f64, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::NoPairs);
    }
    let shortest = view_a.len().min(view_b.len());
    if shortest < pairs.len() {
        return Err(EvalError::MissingVariant(shortest));
    }
    fn with<'a>(pairs: &[PairCase<'a>], view: &[(ActionInput<'a>, ActionInput<'a>)]) -> Vec<PairCase<'a>> {
        pairs.iter().zip(view).map(|(p, &(pos, neg))| PairCase { positive: pos, negative: neg, ..*p }).collect()
    }
    let a = pair_scores(params, &with(pairs, view_a))?;
    let b = pair_scores(params, &with(pairs, view_b))?;
    let flips = a.iter().zip(&b).filter(|((pa, na), (pb, nb))| (pa > na) != (pb > nb)).count();
    Ok(flips as f64 / pairs.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub n_pairs: usize,
    pub seed: u64,
    pub threshold: f64,
    pub retrieval_batch: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { n_pairs: 2000, seed: 0, threshold: GAP_THRESHOLD, retrieval_batch: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub hard_acc: f64,
    pub real_inc_acc: f64,
    pub gap1_mean: f64,
    pub gap_over_threshold: f64,
    pub retrieval_top1: f64,
    pub style_sensitivity: Option<f64>,
    pub raw_gap: RawGap,
    pub hard_pairs: usize,
    pub real_inc_pairs: usize,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "hard,real_inc,gap1_mean,gap1_over_0.10";

    pub fn csv_row(&self) -> String {
        format!("{:.4},{:.4},{:.4},{:.4}", self.hard_acc, self.real_inc_acc, self.gap1_mean, self.gap_over_threshold)
    }

    pub fn write(&self, json: &Path, csv: Option<&Path>) -> Result<(), EvalError> {
        fn io(path: &Path) -> impl FnOnce(std::io::Error) -> EvalError + '_ {
            move |source| EvalError::Io { path: path.display().to_string(), source }
        }
        std::fs::write(json, serde_json::to_string_pretty(self).expect("report serializes")).map_err(io(json))?;
        if let Some(csv) = csv {
            std::fs::write(csv, format!("{}\n{}\n", Self::CSV_HEADER, self.csv_row())).map_err(io(csv))?;
        }
        Ok(())
    }
}

/// Full offline report on `tasks`. Pair sets are capped at what the tasks support.
pub fn evaluate(params: &ModelParams<f32>, tasks: &[&Trajectory], config: &EvalConfig) -> Result<EvalReport, EvalError> {
    let hard = build_pairs_up_to(tasks, PairKind::HardAdjacent, config.n_pairs, config.seed);
    let real = build_pairs_up_to(tasks, PairKind::RealIncorrect, config.n_pairs, config.seed ^ 1);
    if hard.is_empty() {
        return Err(EvalError::NoPairs);
    }
    let hard_scores = pair_scores(params, &hard)?;
    let real_scores = pair_scores(params, &real)?;
    let (gap1_mean, gap_over_threshold) = gap_stats(&hard_scores, config.threshold);
    Ok(EvalReport {
        hard_acc: accuracy(&hard_scores),
        real_inc_acc: accuracy(&real_scores),
        gap1_mean,
        gap_over_threshold,
        retrieval_top1: split_retrieval(params, tasks, config.retrieval_batch, config.seed)?,
        style_sensitivity: None,
        raw_gap: raw_gap_probe(params, tasks)?,
        hard_pairs: hard.len(),
        real_inc_pairs: real.len(),
    })
}

/// `0.3 · retrieval + 0.7 · hard accuracy`.
pub fn combine_validation(retrieval: f64, hard_acc: f64) -> f64 {
    0.3 * retrieval + 0.7 * hard_acc
}

/// Validation score on `tasks`, with hard pairs capped at `n_pairs`.
pub fn validation_score(params: &ModelParams<f32>, tasks: &[&Trajectory], config: &EvalConfig) -> Result<f64, EvalError> {
    if tasks.is_empty() {
        return Err(EvalError::EmptyValidationSet);
    }
    let hard = build_pairs_up_to(tasks, PairKind::HardAdjacent, config.n_pairs, config.seed);
    if hard.is_empty() {
        return Err(EvalError::EmptyValidationSet);
    }
    let hard_acc = pairwise_eval(params, &hard)?;
    let retrieval = split_retrieval(params, tasks, config.retrieval_batch, config.seed)?;
    Ok(combine_validation(retrieval, hard_acc))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn gap_statistics() {
        let (mean, over) = gap_stats(&[(0.55, 0.5), (0.65, 0.5), (0.8, 0.5)], 0.10);
        assert_abs_diff_eq!(mean, 0.5 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(over, 2.0 / 3.0, epsilon = 1e-12);
        assert_eq!(gap_stats(&[(0.3, 0.3), (0.1, 0.1)], 0.10), (0.0, 0.0));
    }

    #[test]
    fn ties_count_as_failures() {
        assert_eq!(accuracy(&[(0.2, 0.2), (0.4, 0.4)]), 0.0);
        assert_eq!(accuracy(&[(0.3, 0.2), (0.1, 0.4)]), 0.5);
    }

    #[test]
    fn retrieval_on_fixed_similarities() {
        let eye = ndarray::arr2(&[[1.0f32, 0.0], [0.0, 1.0]]);
        assert_eq!(retrieval_top1(&eye), 1.0);
        let swapped = ndarray::arr2(&[[0.0f32, 1.0], [1.0, 0.0]]);
        assert_eq!(retrieval_top1(&swapped), 0.0);
    }

    #[test]
    fn validation_weights() {
        assert_abs_diff_eq!(combine_validation(0.80, 0.90), 0.87, epsilon = 1e-12);
        assert_eq!(combine_validation(1.0, 1.0), 1.0);
        assert_eq!(combine_validation(0.0, 0.0), 0.0);
    }
}
