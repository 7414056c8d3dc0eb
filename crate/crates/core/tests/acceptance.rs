//! Acceptance run: one PASS/FAIL line per criterion at its stated tolerance.
//!
//! Runs sequentially (no libtest harness) so the timing checks are not
//! competing with other tests for the core. Exits nonzero when a criterion
//! outside `KNOWN_FAILING` fails.

mod common;

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use common::corpus;
use intent_reward::eval::{build_pairs, pairwise_eval, EvalReport, PairKind};
use intent_reward::experiment::{run_arm, Arm, Recipe, TARGET_WORLD};
use intent_reward::model::{ActionInput, ModelDims, ModelParams, ScoreMode};
use intent_reward::rerank::{rerank, BehaviorStats, DecisionKind};
use intent_reward::synthetic::{Part, Suite, SuiteConfig};
use intent_reward::trainer::{clip_gradients, cosine_lr, grad_norm, AdamHyper, AdamW, StageConfig};

/// Criteria expected to fail on the synthetic suite; see the project notes.
const KNOWN_FAILING: &[u32] = &[4];

const SEEDS: [u64; 3] = [0, 1, 2];

struct Outcome {
    id: u32,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn grad_check() -> Outcome {
    let start = Instant::now();
    let reports: Vec<_> = [0.0, 2.0].into_iter().map(common::grad::check_combined).collect();
    let secs = start.elapsed().as_secs_f64();
    let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let min_samples = reports.iter().flat_map(|r| r.tensors.iter().map(|t| t.samples)).min().unwrap_or(0);
    let tensors = reports[0].tensors.len();
    let p = ModelParams::<f64>::zeros(ModelDims::uniform(8));
    let short = p.tensors().iter().filter(|t| t.2.len() < 20).count();
    let sampled_enough = reports.iter().all(|r| {
        r.tensors.iter().all(|t| t.samples >= 20.min(p.tensors().iter().find(|x| x.0 == t.name).unwrap().2.len()))
    });
    Outcome {
        id: 1,
        name: "gradient check at width 8",
        pass: worst < 1e-4 && sampled_enough && secs < 30.0,
        detail: format!(
            "max rel err {worst:.2e} (< 1e-4), {tensors} tensors, min samples {min_samples} ({short} tensors under 20 elements), {secs:.1}s (< 30s)"
        ),
    }
}

fn param_count() -> Outcome {
    let n = ModelParams::<f32>::zeros(ModelDims::full()).param_count();
    Outcome {
        id: 2,
        name: "parameter count at full size",
        pass: (11_000_000..=15_000_000).contains(&n),
        detail: format!("{n} in [11M, 15M]"),
    }
}

fn scoring_latency() -> Outcome {
    let dims = ModelDims::full();
    let mut r = common::rng(0);
    let params = ModelParams::<f32>::seeded(dims, 0);
    let state = common::unit(&mut r, dims.embed);
    let (thought, action, code) = (common::unit(&mut r, dims.text), common::unit(&mut r, dims.text), common::unit(&mut r, dims.text));
    let input = ActionInput { thought: Some(&thought), action: Some(&action), code: Some(&code), xy: [0.3, 0.7] };
    let ms = corpus::median_ms(1000, || {
        let a = params.encode_actions(&[input]).unwrap();
        std::hint::black_box(params.score(&state, a.as_slice().unwrap(), ScoreMode::Deployment));
    });
    Outcome { id: 3, name: "per-candidate scoring latency", pass: ms < 1.0, detail: format!("median {ms:.3} ms over 1000 calls (< 1 ms)") }
}

fn serve_latency_info() -> String {
    let dims = ModelDims::full();
    let params = ModelParams::<f32>::seeded(dims, 0);
    let set = corpus::timing_set(dims, 3, 9);
    let ms = corpus::median_ms(200, || {
        std::hint::black_box(rerank(&set, &params, 0.1).unwrap());
    });
    format!("INFO full-size three-candidate rerank p50 {ms:.2} ms (state encoder plus three actions)")
}

struct ArmRuns {
    reports: BTreeMap<&'static str, Vec<EvalReport>>,
}

impl ArmRuns {
    fn med(&self, arm: &str, f: impl Fn(&EvalReport) -> f64) -> f64 {
        median(self.reports[arm].iter().map(f).collect())
    }
}

fn train_arms() -> (ArmRuns, Suite) {
    let mut reports: BTreeMap<&'static str, Vec<EvalReport>> = BTreeMap::new();
    let mut first = None;
    for seed in SEEDS {
        let suite = Suite::generate(SuiteConfig::standard(seed)).unwrap();
        let recipe = Recipe::desk(seed);
        for (name, arm) in [("full", Arm::Full), ("alignment_only", Arm::AlignmentOnly), ("target_only", Arm::TargetOnly)] {
            let start = Instant::now();
            let report = run_arm(&suite, &recipe, arm, None).unwrap().report;
            println!(
                "  seed {seed} {name:14} hard {:.4} real_inc {:.4} gap>0.10 {:.4} raw gap {:+.4} ({:.0}s)",
                report.hard_acc,
                report.real_inc_acc,
                report.gap_over_threshold,
                report.raw_gap.gap,
                start.elapsed().as_secs_f64()
            );
            reports.entry(name).or_default().push(report);
        }
        if first.is_none() {
            first = Some(suite);
        }
    }
    (ArmRuns { reports }, first.unwrap())
}

fn collapse(runs: &ArmRuns) -> Outcome {
    let off = runs.med("alignment_only", |r| r.raw_gap.gap);
    let on = runs.med("full", |r| r.raw_gap.gap);
    Outcome {
        id: 4,
        name: "raw-gap collapse without margin",
        pass: off.abs() < 0.02 && on >= 5.0 * off.abs() && on >= 0.03,
        detail: format!("median raw gap λ=0 {off:+.4} (|·| < 0.02), λ>0 {on:+.4} (≥ 5x and ≥ 0.03)"),
    }
}

fn margin_ablation(runs: &ArmRuns) -> Outcome {
    let (hf, ha) = (runs.med("full", |r| r.hard_acc), runs.med("alignment_only", |r| r.hard_acc));
    let (gf, ga) = (runs.med("full", |r| r.gap_over_threshold), runs.med("alignment_only", |r| r.gap_over_threshold));
    Outcome {
        id: 5,
        name: "margin term improves hard pairs",
        pass: hf - ha >= 0.01 && gf > ga,
        detail: format!(
            "hard {:.2} vs {:.2} (+{:.2} pts, ≥ 1), frac gap>0.10 {gf:.4} vs {ga:.4}",
            100.0 * hf,
            100.0 * ha,
            100.0 * (hf - ha)
        ),
    }
}

fn transfer(runs: &ArmRuns) -> Outcome {
    let (hf, ht) = (runs.med("full", |r| r.hard_acc), runs.med("target_only", |r| r.hard_acc));
    Outcome {
        id: 6,
        name: "source-world pretraining transfers",
        pass: hf - ht >= 0.01,
        detail: format!("hard {:.2} vs target-only {:.2} (+{:.2} pts, ≥ 1)", 100.0 * hf, 100.0 * ht, 100.0 * (hf - ht)),
    }
}

fn headline(runs: &ArmRuns) -> Outcome {
    let (h, r) = (runs.med("full", |r| r.hard_acc), runs.med("full", |r| r.real_inc_acc));
    Outcome {
        id: 7,
        name: "held-out accuracy",
        pass: h >= 0.90 && r >= 0.92,
        detail: format!("median hard {h:.4} (≥ 0.90), real-inc {r:.4} (≥ 0.92)"),
    }
}

fn random_init(suite: &Suite) -> Outcome {
    let test = suite.tasks(Part::Test, &[TARGET_WORLD]);
    let pairs = build_pairs(&test, PairKind::HardAdjacent, 2000, 0).unwrap();
    let params = ModelParams::<f32>::seeded(ModelDims::desk(), 12345);
    let acc = pairwise_eval(&params, &pairs).unwrap();
    Outcome {
        id: 8,
        name: "random init is at chance",
        pass: (acc - 0.5).abs() <= 0.05,
        detail: format!("hard {acc:.4} on {} pairs (0.5 ± 0.05)", pairs.len()),
    }
}

fn scripted_corpus() -> Outcome {
    let cases = corpus::scripted();
    let mut problems = corpus::check(&cases);
    let stats = BehaviorStats::accumulate(cases.iter().map(|c| &c.decision));
    if !corpus::stats_match(&stats, &corpus::scripted_stats()) {
        problems.push(format!("stats {stats:?}"));
    }
    let single = corpus::single_candidate();
    if single.kind != DecisionKind::SingleCandidate || single.selected_index != 0 {
        problems.push("single candidate".into());
    }
    Outcome {
        id: 9,
        name: "scripted reranker corpus",
        pass: problems.is_empty(),
        detail: if problems.is_empty() { format!("{} cases plus single candidate match", cases.len()) } else { problems.join("; ") },
    }
}

/// Epoch logs record elapsed seconds; every other field must match.
fn strip_wall_time(bytes: &[u8]) -> Vec<u8> {
    let text = std::str::from_utf8(bytes).unwrap();
    let lines: Vec<String> = text
        .lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("wall_time_s");
            v.to_string()
        })
        .collect();
    lines.join("\n").into_bytes()
}

fn collect_files(dir: &Path, out: &mut BTreeMap<String, Vec<u8>>, root: &Path) {
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            collect_files(&path, out, root);
        } else {
            let mut bytes = std::fs::read(&path).unwrap();
            if path.extension().is_some_and(|x| x == "jsonl") {
                bytes = strip_wall_time(&bytes);
            }
            out.insert(path.strip_prefix(root).unwrap().display().to_string(), bytes);
        }
    }
}

fn determinism() -> Outcome {
    let suite = Suite::generate(SuiteConfig::standard(5).scaled(0.1)).unwrap();
    let mut recipe = Recipe::desk(5);
    recipe.pretrain = StageConfig { epochs: 2, ..recipe.pretrain };
    recipe.finetune = StageConfig { epochs: 2, ..recipe.finetune };
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let result = run_arm(&suite, &recipe, Arm::Full, Some(dir.path())).unwrap();
        let mut files = BTreeMap::new();
        collect_files(dir.path(), &mut files, dir.path());
        (files, serde_json::to_string(&result.report).unwrap())
    };
    let (a, b) = (run(), run());
    let checkpoints = a.0.keys().filter(|k| k.ends_with(".iscr")).count();
    Outcome {
        id: 10,
        name: "bit-identical reruns",
        pass: a == b && checkpoints > 0,
        detail: format!("{} files ({checkpoints} checkpoints, logs without wall time) and report {}", a.0.len(), if a == b { "identical" } else { "differ" }),
    }
}

fn numerics() -> Outcome {
    let mut problems = Vec::new();
    if cosine_lr(0, 100, 5e-4, 1e-6) != 5e-4 || cosine_lr(100, 100, 5e-4, 1e-6) != 1e-6 {
        problems.push("cosine endpoints".to_string());
    }
    let dims = ModelDims::uniform(8);
    let mut g = ModelParams::<f32>::zeros(dims);
    let n = g.param_count() as f64;
    for (_, v) in g.tensors_mut() {
        v.iter_mut().for_each(|x| *x = (4.0 / n.sqrt()) as f32);
    }
    clip_gradients(&mut g, 1.0);
    let clipped = grad_norm(&g);
    if (clipped - 1.0).abs() > 1e-6 {
        problems.push(format!("clipped norm {clipped}"));
    }
    let mut params = ModelParams::<f32>::seeded(dims, 0);
    let mut opt = AdamW::new(&params, AdamHyper::default());
    let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
    for sign in [1.0f32, -1.0] {
        for _ in 0..2000 {
            let mut g = ModelParams::<f32>::zeros(dims);
            g.log_tau = sign * 1e6;
            opt.step(&mut params, &g, 0.5, 0.0).unwrap();
            lo = lo.min(params.tau());
            hi = hi.max(params.tau());
        }
    }
    if lo < 0.01 || hi > 1.0 {
        problems.push(format!("tau range [{lo}, {hi}]"));
    }
    Outcome {
        id: 11,
        name: "schedule, clipping and temperature clamp",
        pass: problems.is_empty(),
        detail: if problems.is_empty() {
            format!("lr endpoints exact, clipped norm {clipped:.7}, tau in [{lo:.4}, {hi:.4}]")
        } else {
            problems.join("; ")
        },
    }
}

fn main() {
    // `cargo test -- --list` and filters from other targets should not start a long run
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let start = Instant::now();
    let mut outcomes = vec![grad_check(), param_count(), scoring_latency()];
    let serve = serve_latency_info();
    println!("training three arms on {} seeds", SEEDS.len());
    let (runs, suite) = train_arms();
    outcomes.extend([collapse(&runs), margin_ablation(&runs), transfer(&runs), headline(&runs)]);
    outcomes.extend([random_init(&suite), scripted_corpus(), determinism(), numerics()]);
    outcomes.sort_by_key(|o| o.id);

    let mut unexpected = 0;
    for o in &outcomes {
        let tag = match (o.pass, KNOWN_FAILING.contains(&o.id)) {
            (true, _) => "PASS",
            (false, true) => "FAIL (known)",
            (false, false) => {
                unexpected += 1;
                "FAIL"
            }
        };
        println!("{tag} [{}] {}: {}", o.id, o.name, o.detail);
    }
    println!("{serve}");
    println!("acceptance finished in {:.0}s", start.elapsed().as_secs_f64());
    if unexpected > 0 {
        std::process::exit(1);
    }
}
