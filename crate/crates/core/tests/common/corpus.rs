//! Hand-scripted re-ranker decisions with hand-computed statistics.

use intent_reward::model::{ModelDims, ModelParams};
use intent_reward::rerank::{decide, dedup, rerank, BehaviorStats, Candidate, CandidateSet, DecisionKind, RerankDecision, StateEmbeddings};

pub const RES: [u32; 2] = [1920, 1080];

pub fn click(x: f32, y: f32) -> Candidate {
    let code_text = format!("pyautogui.click({}, {})", (x * RES[0] as f32).round(), (y * RES[1] as f32).round());
    Candidate { code_text, xy: [x, y], ..Candidate::default() }
}

pub fn typed(text: &str, x: f32) -> Candidate {
    Candidate { code_text: format!("pyautogui.typewrite('{text}')"), xy: [x, 0.5], ..Candidate::default() }
}

pub struct Case {
    pub name: &'static str,
    pub decision: RerankDecision,
    pub kind: DecisionKind,
    pub selected: usize,
    pub groups: Vec<usize>,
    pub top_gap: f64,
}

fn unscored(candidates: Vec<Candidate>) -> RerankDecision {
    let dims = ModelDims::uniform(4);
    let set = CandidateSet { state: StateEmbeddings { screenshot: vec![0.0; 4], ..Default::default() }, candidates, resolution: RES };
    rerank(&set, &ModelParams::seeded(dims, 0), 0.10).expect("no scoring needed")
}

fn scored(candidates: &[Candidate], scores: &[f64]) -> RerankDecision {
    decide(dedup(candidates, RES), scores.to_vec(), 0.10)
}

/// Three dedup, three agree, one defer, three override.
pub fn scripted() -> Vec<Case> {
    use DecisionKind::*;
    let far = |k: f32| click(0.1 + 0.2 * k, 0.8);
    let case = |name, decision, kind, selected, groups: &[usize], top_gap| Case { name, decision, kind, selected, groups: groups.to_vec(), top_gap };
    vec![
        // 0.005 · 1920 = 9.6 px apart
        case("merge at 9.6 px", unscored(vec![click(0.500, 0.500), click(0.505, 0.500)]), DedupSingle, 0, &[0, 0], 0.0),
        case("identical code, distant xy", unscored(vec![typed("hi", 0.1), typed("hi", 0.9)]), DedupSingle, 0, &[0, 0], 0.0),
        // neighbors 15.36 px apart, ends 30.72 px apart: merged through the middle
        case("transitive chain", unscored(vec![click(0.500, 0.5), click(0.508, 0.5), click(0.516, 0.5)]), DedupSingle, 0, &[0, 0, 0], 0.0),
        case("default wins", scored(&[far(0.0), far(1.0)], &[0.50, 0.30]), Agree, 0, &[0, 1], 0.20),
        case("tie goes to the default", scored(&[click(0.5, 0.5), click(0.505, 0.5), far(2.0)], &[0.40, 0.40]), Agree, 0, &[0, 0, 1], 0.0),
        case("best exactly at sigma", scored(&[far(0.0), far(1.0)], &[0.10, 0.05]), Agree, 0, &[0, 1], 0.05),
        case("all below sigma", scored(&[far(0.0), far(1.0)], &[0.05, 0.08]), Defer, 0, &[0, 1], 0.03),
        case("case study", scored(&[far(0.0), far(1.0), far(2.0)], &[0.401, 0.637, 0.308]), Override, 1, &[0, 1, 2], 0.236),
        case(
            "representative of a merged group",
            scored(&[click(0.5, 0.5), click(0.505, 0.5), far(0.0), far(1.0)], &[0.30, 0.70, 0.20]),
            Override,
            2,
            &[0, 0, 1, 2],
            0.40,
        ),
        case("tie among alternatives", scored(&[far(0.0), far(1.0), far(2.0)], &[0.20, 0.50, 0.50]), Override, 1, &[0, 1, 2], 0.0),
    ]
}

/// Expected aggregate of [`scripted`], worked out by hand.
pub fn scripted_stats() -> BehaviorStats {
    let mut s = BehaviorStats::default();
    (s.total_steps, s.dedup_count, s.single_count, s.scored_count) = (10, 3, 0, 7);
    (s.agree, s.defer, s.override_count) = (3, 1, 3);
    // selected: 0.50 0.40 0.10 0.05 0.637 0.70 0.50; gaps: 0.20 0 0.05 0.03 0.236 0.40 0
    s.mean_selected_score = 2.887 / 7.0;
    s.mean_top_gap = 0.916 / 7.0;
    // unique groups: 1 1 1 2 2 2 2 3 3 3
    s.mean_unique_candidates = 2.0;
    s
}

pub fn single_candidate() -> RerankDecision {
    unscored(vec![click(0.3, 0.3)])
}

/// Failures of `cases` against their expectations, empty when all match.
pub fn check(cases: &[Case]) -> Vec<String> {
    let mut bad = Vec::new();
    for c in cases {
        let d = &c.decision;
        let ok = d.kind == c.kind && d.selected_index == c.selected && d.merged_groups == c.groups && (d.top_gap - c.top_gap).abs() < 1e-12;
        if !ok {
            bad.push(format!("{}: got {:?} {} {:?} gap {}", c.name, d.kind, d.selected_index, d.merged_groups, d.top_gap));
        }
    }
    bad
}

pub fn stats_match(got: &BehaviorStats, want: &BehaviorStats) -> bool {
    let counts = |s: &BehaviorStats| (s.total_steps, s.dedup_count, s.single_count, s.scored_count, s.agree, s.defer, s.override_count);
    counts(got) == counts(want)
        && (got.mean_selected_score - want.mean_selected_score).abs() < 1e-12
        && (got.mean_top_gap - want.mean_top_gap).abs() < 1e-12
        && (got.mean_unique_candidates - want.mean_unique_candidates).abs() < 1e-12
}

/// A full-history state with `n` distinct click candidates at `dims`.
pub fn timing_set(dims: ModelDims, n: usize, seed: u64) -> CandidateSet {
    use intent_reward::rerank::HistoryEmbeddings;
    let mut r = super::rng(seed);
    let mut text = || Some(super::unit(&mut r, dims.text));
    let (obs, ins, refl) = (text(), text(), text());
    let history: Vec<HistoryEmbeddings> = (0..3)
        .map(|k| HistoryEmbeddings { screenshot: vec![], observation: text(), action: text(), code: text(), xy: [0.1 * k as f32, 0.5] })
        .collect();
    let candidates = (0..n).map(|k| Candidate { thought: text(), action: text(), code: text(), ..click(0.1 + 0.8 * k as f32 / n as f32, 0.5) }).collect();
    let mut r = super::rng(seed ^ 1);
    let history = history.into_iter().map(|h| HistoryEmbeddings { screenshot: super::unit(&mut r, dims.vision), ..h }).collect();
    let state = StateEmbeddings { screenshot: super::unit(&mut r, dims.vision), observation: obs, instruction: ins, reflection: refl, history };
    CandidateSet { state, candidates, resolution: RES }
}

/// Median wall time of `f` over `n` calls, in milliseconds.
pub fn median_ms(n: usize, mut f: impl FnMut()) -> f64 {
    let mut times: Vec<f64> = (0..n)
        .map(|_| {
            let t = std::time::Instant::now();
            f();
            t.elapsed().as_secs_f64() * 1e3
        })
        .collect();
    times.sort_by(f64::total_cmp);
    times[n / 2]
}
