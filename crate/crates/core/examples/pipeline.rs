//! Trains one comparison arm on the default synthetic suite and prints the
//! held-out report plus per-kind cosines.
//!
//! `cargo run --release --example pipeline -- [seed] [scale] [full|alignment_only|target_only]`

use intent_reward::experiment::{run_arm, Arm, Recipe, TARGET_WORLD};
use intent_reward::model::ModelParams;
use intent_reward::model::{ActionInput, StateInput};
use intent_reward::store::Trajectory;
use intent_reward::synthetic::{Part, StepKind, Suite, SuiteConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let scale: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1.0);
    let arm: Arm = match args.get(3) {
        Some(a) => serde_json::from_value(serde_json::Value::String(a.clone())).expect("unknown arm"),
        None => Arm::Full,
    };
    let t0 = std::time::Instant::now();
    let suite = Suite::generate(SuiteConfig::standard(seed).scaled(scale)).unwrap();
    let result = run_arm(&suite, &Recipe::desk(seed), arm, None).unwrap();
    for s in &result.stages {
        println!("stage best {:?} {:?}", s.best_epoch, s.best_score);
    }
    println!("{}", serde_json::to_string(&result.report).unwrap());
    diagnose(&result.params, &suite, &suite.tasks(Part::Test, &[TARGET_WORLD]));
    println!("total {:.1}s", t0.elapsed().as_secs_f64());
}

fn diagnose(params: &ModelParams<f32>, suite: &Suite, test: &[&Trajectory]) {
    let mut sums: std::collections::BTreeMap<&str, (f64, usize)> = Default::default();
    let mut add = |k: &'static str, v: f32| {
        let e = sums.entry(k).or_insert((0.0, 0));
        e.0 += v as f64;
        e.1 += 1;
    };
    for t in test {
        let metas = &suite.metas[&t.task_id];
        let states: Vec<StateInput> = (0..t.len()).map(|i| StateInput::from_trajectory(t, i)).collect();
        let actions: Vec<ActionInput> = t.steps.iter().map(ActionInput::from_step).collect();
        let s = params.encode_states(&states).unwrap();
        let a = params.encode_actions(&actions).unwrap();
        let cos = |i: usize, j: usize| s.row(i).dot(&a.row(j));
        for (i, m) in metas.iter().enumerate() {
            match m.kind {
                StepKind::OnPath => add("on_path", cos(i, i)),
                StepKind::Corrective => add("corrective", cos(i, i)),
                StepKind::Wrong => {
                    add("wrong", cos(i, i));
                    if i + 2 < t.len() {
                        add("wrong_state_vs_retry", cos(i, i + 2));
                        add("retry_state_vs_wrong", cos(i + 2, i));
                        add("retry_own", cos(i + 2, i + 2));
                    }
                }
            }
            if i + 1 < t.len() && m.kind == StepKind::OnPath && metas[i + 1].kind == StepKind::OnPath {
                add("state_vs_next", cos(i, i + 1));
            }
        }
    }
    for (k, (sum, n)) in sums {
        println!("  {k:24} {:.4} (n={n})", sum / n as f64);
    }
}
