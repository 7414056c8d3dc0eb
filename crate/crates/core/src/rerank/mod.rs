//! Best-of-N re-ranking of agent candidates at deployment time.
//!
//! Candidates are merged into groups (identical code, or clicks landing within
//! [`MERGE_DISTANCE_PX`] of each other), each group's representative is scored
//! against the state in raw cosine units, and the agent's default (index 0) is
//! replaced only when another group wins with a score of at least σ.

pub mod fields;
pub mod wire;

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::model::{ActionInput, HistoryStep, HistoryWindow, ModelError, ModelParams, ScoreMode, StateInput, HISTORY_LEN};
use crate::store::{Step, TextField, Trajectory};

pub const DEFAULT_SIGMA: f64 = 0.10;
pub const MERGE_DISTANCE_PX: f64 = 20.0;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum RerankError {
    #[error("empty candidate set")]
    EmptyCandidateSet,
    #[error("resolution must be positive, got {0}x{1}")]
    BadResolution(u32, u32),
}

/// One previous step of the state's history, embeddings owned.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct HistoryEmbeddings {
    pub screenshot: Vec<f32>,
    pub observation: Option<Vec<f32>>,
    pub action: Option<Vec<f32>>,
    pub code: Option<Vec<f32>>,
    pub xy: [f32; 2],
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct StateEmbeddings {
    pub screenshot: Vec<f32>,
    pub observation: Option<Vec<f32>>,
    pub instruction: Option<Vec<f32>>,
    pub reflection: Option<Vec<f32>>,
    /// Oldest first; only the most recent steps are used.
    pub history: Vec<HistoryEmbeddings>,
}

impl StateEmbeddings {
    /// The state before step `t`, with up to [`HISTORY_LEN`] earlier steps.
    pub fn from_trajectory(trajectory: &Trajectory, t: usize) -> Self {
        let step = &trajectory.steps[t];
        let owned = |f: &TextField| f.emb().map(<[f32]>::to_vec);
        Self {
            screenshot: step.screenshot_before.clone(),
            observation: owned(&step.observation),
            instruction: owned(&step.instruction),
            reflection: owned(&step.reflection),
            history: trajectory.steps[t.saturating_sub(HISTORY_LEN)..t]
                .iter()
                .map(|h| HistoryEmbeddings {
                    screenshot: h.screenshot_before.clone(),
                    observation: owned(&h.observation),
                    action: owned(&h.action),
                    code: owned(&h.code),
                    xy: h.xy,
                })
                .collect(),
        }
    }

    pub fn input(&self) -> StateInput<'_> {
        let recent: Vec<HistoryStep<'_>> = self
            .history
            .iter()
            .map(|h| HistoryStep {
                screenshot: &h.screenshot,
                observation: h.observation.as_deref(),
                action: h.action.as_deref(),
                code: h.code.as_deref(),
                xy: h.xy,
            })
            .collect();
        StateInput {
            screenshot: &self.screenshot,
            observation: self.observation.as_deref(),
            instruction: self.instruction.as_deref(),
            reflection: self.reflection.as_deref(),
            history: HistoryWindow::from_recent(&recent),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Candidate {
    pub thought: Option<Vec<f32>>,
    pub action: Option<Vec<f32>>,
    pub code: Option<Vec<f32>>,
    pub code_text: String,
    /// Normalized to `[0, 1]²` by the screen resolution.
    pub xy: [f32; 2],
}

impl Candidate {
    pub fn from_step(step: &Step) -> Self {
        Self {
            thought: step.thought.emb().map(<[f32]>::to_vec),
            action: step.action.emb().map(<[f32]>::to_vec),
            code: step.code.emb().map(<[f32]>::to_vec),
            code_text: step.code.text.clone().unwrap_or_default(),
            xy: step.xy,
        }
    }

    pub fn input(&self) -> ActionInput<'_> {
        ActionInput { thought: self.thought.as_deref(), action: self.action.as_deref(), code: self.code.as_deref(), xy: self.xy }
    }

    pub fn is_click(&self) -> bool {
        is_click_code(&self.code_text)
    }
}

/// `true` when the code invokes a click or tap.
pub fn is_click_code(code: &str) -> bool {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\b\w*(click|tap)\w*\s*\(").expect("valid pattern")).is_match(code)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CandidateSet {
    pub state: StateEmbeddings,
    /// Index 0 is the agent's own choice.
    pub candidates: Vec<Candidate>,
    pub resolution: [u32; 2],
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Group index for every candidate. Groups are numbered by their lowest member,
/// which is also the representative, so group 0 always holds the default.
pub fn dedup(candidates: &[Candidate], resolution: [u32; 2]) -> Vec<usize> {
    let n = candidates.len();
    let mut parent: Vec<usize> = (0..n).collect();
    let (w, h) = (resolution[0] as f64, resolution[1] as f64);
    for i in 0..n {
        for j in i + 1..n {
            let (a, b) = (&candidates[i], &candidates[j]);
            let same_code = a.code_text == b.code_text;
            let near = a.is_click() && b.is_click() && {
                let dx = (a.xy[0] as f64 - b.xy[0] as f64) * w;
                let dy = (a.xy[1] as f64 - b.xy[1] as f64) * h;
                dx.hypot(dy) < MERGE_DISTANCE_PX
            };
            if same_code || near {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                // keep the lower index as root so roots are representatives
                let (lo, hi) = if ri < rj { (ri, rj) } else { (rj, ri) };
                parent[hi] = lo;
            }
        }
    }
    let mut group_of_root = vec![usize::MAX; n];
    let mut next = 0;
    (0..n)
        .map(|i| {
            let r = find(&mut parent, i);
            if group_of_root[r] == usize::MAX {
                group_of_root[r] = next;
                next += 1;
            }
            group_of_root[r]
        })
        .collect()
}

/// Lowest original index in each group, in group order.
pub fn representatives(groups: &[usize]) -> Vec<usize> {
    let n_groups = groups.iter().map(|g| g + 1).max().unwrap_or(0);
    let mut reps = vec![usize::MAX; n_groups];
    for (i, &g) in groups.iter().enumerate() {
        reps[g] = reps[g].min(i);
    }
    reps
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionKind {
    DedupSingle,
    SingleCandidate,
    Agree,
    Defer,
    Override,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankDecision {
    pub kind: DecisionKind,
    pub selected_index: usize,
    /// One score per unique group; empty when nothing was scored.
    pub scores: Vec<f64>,
    pub top_gap: f64,
    /// Original candidate index → unique group index.
    pub merged_groups: Vec<usize>,
    /// Why a scoring failure forced a defer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fallback: Option<String>,
}

impl RerankDecision {
    pub fn selected_score(&self) -> Option<f64> {
        self.scores.get(*self.merged_groups.get(self.selected_index)?).copied()
    }

    pub fn unique_candidates(&self) -> usize {
        self.merged_groups.iter().map(|g| g + 1).max().unwrap_or(0)
    }

    fn fail_safe(groups: Vec<usize>, reason: String) -> Self {
        Self { kind: DecisionKind::Defer, selected_index: 0, scores: Vec::new(), top_gap: 0.0, merged_groups: groups, fallback: Some(reason) }
    }
}

/// The decision rule given group scores. Assumes `groups` came from [`dedup`]
/// and there are at least two groups.
pub fn decide(groups: Vec<usize>, scores: Vec<f64>, sigma: f64) -> RerankDecision {
    let reps = representatives(&groups);
    if reps.is_empty() || scores.len() != reps.len() || scores.iter().any(|s| !s.is_finite()) {
        return RerankDecision::fail_safe(groups, "scores missing or non-finite".into());
    }
    // first maximum wins, i.e. the lowest original index
    let mut best = 0;
    for (g, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = g;
        }
    }
    let runner_up = scores.iter().enumerate().filter(|&(g, _)| g != best).map(|(_, &s)| s).fold(f64::NEG_INFINITY, f64::max);
    let top_gap = if scores.len() < 2 { 0.0 } else { scores[best] - runner_up };
    let (kind, selected_index) = if scores[best] < sigma {
        (DecisionKind::Defer, 0)
    } else if best == groups[0] {
        (DecisionKind::Agree, 0)
    } else {
        (DecisionKind::Override, reps[best])
    };
    RerankDecision { kind, selected_index, scores, top_gap, merged_groups: groups, fallback: None }
}

/// Dedups, scores each group representative in deployment mode and decides.
/// Only an empty set or a bad resolution is an error; scoring failures defer.
pub fn rerank(set: &CandidateSet, params: &ModelParams<f32>, sigma: f64) -> Result<RerankDecision, RerankError> {
    if set.candidates.is_empty() {
        return Err(RerankError::EmptyCandidateSet);
    }
    if set.resolution.contains(&0) {
        return Err(RerankError::BadResolution(set.resolution[0], set.resolution[1]));
    }
    let groups = dedup(&set.candidates, set.resolution);
    let single = |kind| RerankDecision { kind, selected_index: 0, scores: Vec::new(), top_gap: 0.0, merged_groups: groups.clone(), fallback: None };
    if set.candidates.len() == 1 {
        return Ok(single(DecisionKind::SingleCandidate));
    }
    let reps = representatives(&groups);
    if reps.len() == 1 {
        return Ok(single(DecisionKind::DedupSingle));
    }
    match score_groups(set, &reps, params) {
        Ok(scores) => Ok(decide(groups, scores, sigma)),
        Err(e) => Ok(RerankDecision::fail_safe(groups, e.to_string())),
    }
}

fn score_groups(set: &CandidateSet, reps: &[usize], params: &ModelParams<f32>) -> Result<Vec<f64>, ModelError> {
    let s = params.encode_states(&[set.state.input()])?;
    let inputs: Vec<ActionInput<'_>> = reps.iter().map(|&i| set.candidates[i].input()).collect();
    let a = params.encode_actions(&inputs)?;
    let s = s.row(0);
    let s = s.as_slice().expect("row-major state embedding");
    Ok(a.rows().into_iter().map(|row| params.score(s, row.as_slice().expect("row-major action embedding"), ScoreMode::Deployment) as f64).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BehaviorStats {
    pub total_steps: usize,
    /// Several candidates that all merged into one group.
    pub dedup_count: usize,
    pub single_count: usize,
    /// `agree + defer + override`.
    pub scored_count: usize,
    pub agree: usize,
    pub defer: usize,
    pub override_count: usize,
    /// Over scored steps that produced scores.
    pub mean_selected_score: f64,
    pub mean_top_gap: f64,
    /// Over all steps.
    pub mean_unique_candidates: f64,
    #[serde(skip)]
    sums: (f64, f64, usize, f64),
}

impl BehaviorStats {
    pub fn record(&mut self, d: &RerankDecision) {
        self.total_steps += 1;
        match d.kind {
            DecisionKind::DedupSingle => self.dedup_count += 1,
            DecisionKind::SingleCandidate => self.single_count += 1,
            DecisionKind::Agree => self.agree += 1,
            DecisionKind::Defer => self.defer += 1,
            DecisionKind::Override => self.override_count += 1,
        }
        self.scored_count = self.agree + self.defer + self.override_count;
        let (sel, gap, n, unique) = &mut self.sums;
        if let (true, Some(s)) = (!d.scores.is_empty(), d.selected_score()) {
            *sel += s;
            *gap += d.top_gap;
            *n += 1;
        }
        *unique += d.unique_candidates() as f64;
        let per = |x: f64, k: usize| if k == 0 { 0.0 } else { x / k as f64 };
        self.mean_selected_score = per(*sel, *n);
        self.mean_top_gap = per(*gap, *n);
        self.mean_unique_candidates = per(*unique, self.total_steps);
    }

    pub fn accumulate<'a>(decisions: impl IntoIterator<Item = &'a RerankDecision>) -> Self {
        let mut stats = Self::default();
        for d in decisions {
            stats.record(d);
        }
        stats
    }
}
