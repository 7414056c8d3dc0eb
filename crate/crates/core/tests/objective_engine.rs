//! Loss values, gradients and negative mining.

mod common;

use std::collections::BTreeSet;
use std::time::Instant;

use common::grad::{batch_trajectories, generic_point};
use common::{rng, trajectory, unit};
use intent_reward::model::{ModelDims, ModelParams};
use intent_reward::objective::{
    align_loss, combined_loss, grad_check, margin_loss, mine_negatives, LossConfig, NegativeSource, ObjectiveError, MAX_NEGATIVES,
};
use intent_reward::store::{TaskCompletion, Trajectory};
use intent_reward::trainer::{assemble_batch, StageConfig, StageData};
use ndarray::Array2;
use proptest::prelude::*;
use rand::seq::SliceRandom;

fn data(trajs: &[Trajectory]) -> StageData<'_> {
    StageData { train: trajs.iter().collect(), val: Vec::new() }
}

fn stage(aug_prob: f64) -> StageConfig {
    StageConfig { aug_prob, ..StageConfig::pretrain() }
}

#[test]
fn analytic_gradients_match_central_differences_at_width_8() {
    let start = Instant::now();
    let dims = ModelDims::uniform(8);
    let trajs = batch_trajectories(8);
    let data = data(&trajs);
    let anchors = data.anchors();
    let batch = assemble_batch(&data, &anchors, &stage(0.5), &mut rng(3)).unwrap();
    assert!(batch.negatives.iter().flatten().any(|n| n.1 == NegativeSource::LabeledIncorrect));
    let params = generic_point(dims, 21);
    for lambda in [0.0, 2.0] {
        let config = LossConfig::new(0.2, lambda);
        let loss_fn = |p: &ModelParams<f64>| {
            let mut dropout = rng(77);
            let out = combined_loss(p, &batch, &config, Some(&mut dropout)).unwrap();
            (out.loss, out.grads)
        };
        let report = grad_check(loss_fn, &params, 1e-4, 20, 5);
        for t in &report.tensors {
            let len = params.tensors().iter().find(|x| x.0 == t.name).unwrap().2.len();
            assert!(t.samples >= 20.min(len), "{} sampled {}", t.name, t.samples);
        }
        assert!(report.max_rel_error < 1e-4, "lambda {lambda}: {:?}", report.tensors);
    }
    assert!(start.elapsed().as_secs_f64() < 30.0);
}

#[test]
fn grad_check_catches_a_missing_gradient() {
    let dims = ModelDims::uniform(8);
    let trajs = batch_trajectories(8);
    let data = data(&trajs);
    let batch = assemble_batch(&data, &data.anchors(), &stage(0.0), &mut rng(1)).unwrap();
    let params = ModelParams::<f64>::seeded(dims, 2);
    let config = LossConfig::new(0.2, 1.0);
    let report = grad_check(
        |p| {
            let mut g = combined_loss(p, &batch, &config, None).unwrap();
            g.grads.action_mlp.fc2.weight.fill(0.0);
            (g.loss, g.grads)
        },
        &params,
        1e-4,
        20,
        0,
    );
    let bad = report.tensor("action_mlp.fc2.weight").expect("tensor is checked");
    assert!((bad.max_rel_error - 1.0).abs() < 1e-6, "{}", bad.max_rel_error);
    assert!(report.tensor("state_mlp.fc2.weight").unwrap().max_rel_error < 1e-4);
}

#[test]
fn without_margin_the_loss_is_alignment_on_encoded_pairs() {
    let dims = ModelDims::uniform(8);
    let trajs = batch_trajectories(8);
    let data = data(&trajs);
    let batch = assemble_batch(&data, &data.anchors(), &stage(0.0), &mut rng(4)).unwrap();
    let params = ModelParams::<f64>::seeded(dims, 5);
    let out = combined_loss(&params, &batch, &LossConfig::new(0.2, 0.0), None).unwrap();
    let s = params.encode_states(&batch.states).unwrap();
    let a = params.encode_actions(&batch.positives).unwrap();
    let expect = align_loss(&s, &a, &batch.weights, params.tau()).unwrap();
    assert!((out.loss - expect).abs() < 1e-12);
    assert_eq!(out.loss, out.align);
    assert!(out.margin > 0.0, "margin is reported even when unweighted");
}

/// Term-by-term weighted symmetric cross entropy.
fn naive_align(s: &Array2<f64>, a: &Array2<f64>, w: &[f64], tau: f64) -> f64 {
    let b = s.nrows();
    let f = |i: usize, j: usize| s.row(i).dot(&a.row(j)) / tau;
    let mut total = 0.0;
    for i in 0..b {
        let row: f64 = (0..b).map(|j| f(i, j).exp()).sum();
        let col: f64 = (0..b).map(|j| f(j, i).exp()).sum();
        total += w[i] * (-(f(i, i).exp() / row).ln() - (f(i, i).exp() / col).ln());
    }
    total / (2.0 * b as f64)
}

fn unit_rows(seed: u64, b: usize, d: usize) -> Array2<f64> {
    let mut r = rng(seed);
    let v: Vec<f64> = (0..b).flat_map(|_| unit(&mut r, d)).map(f64::from).collect();
    Array2::from_shape_vec((b, d), v).unwrap()
}

#[test]
fn weights_follow_task_outcome() {
    let trajs = batch_trajectories(8);
    let data = data(&trajs);
    let batch = assemble_batch(&data, &data.anchors(), &stage(0.0), &mut rng(0)).unwrap();
    for (w, (ti, _)) in batch.weights.iter().zip(&batch.anchors) {
        let expect = match trajs[*ti].task_completion {
            TaskCompletion::Completed => 1.0,
            TaskCompletion::Failed => 0.3,
            TaskCompletion::Unknown => 0.7,
        };
        assert_eq!(*w, expect);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn alignment_matches_naive_sum_and_is_symmetric(seed in 0u64..1000, b in 1usize..9, tau in 0.02f64..1.0) {
        let s = unit_rows(seed, b, 6);
        let a = unit_rows(seed + 5000, b, 6);
        let w: Vec<f64> = (0..b).map(|i| 0.3 + 0.1 * i as f64).collect();
        let got = align_loss(&s, &a, &w, tau).unwrap();
        prop_assert!((got - naive_align(&s, &a, &w, tau)).abs() < 1e-9 * got.abs().max(1.0));
        prop_assert!((got - align_loss(&a, &s, &w, tau).unwrap()).abs() < 1e-9 * got.abs().max(1.0));
    }

    #[test]
    fn alignment_ignores_joint_permutation(seed in 0u64..1000, b in 2usize..12) {
        let s = unit_rows(seed, b, 5);
        let a = unit_rows(seed ^ 0xabc, b, 5);
        let w: Vec<f64> = (0..b).map(|i| [1.0, 0.3, 0.7][i % 3]).collect();
        let base = align_loss(&s, &a, &w, 0.07).unwrap();
        let mut r = rng(seed);
        for _ in 0..50 {
            let mut perm: Vec<usize> = (0..b).collect();
            perm.shuffle(&mut r);
            let ps = s.select(ndarray::Axis(0), &perm);
            let pa = a.select(ndarray::Axis(0), &perm);
            let pw: Vec<f64> = perm.iter().map(|&i| w[i]).collect();
            prop_assert!((align_loss(&ps, &pa, &pw, 0.07).unwrap() - base).abs() < 1e-9);
        }
    }

    #[test]
    fn margin_grows_with_margin_and_shrinks_as_negatives_fall(
        seed in 0u64..1000, n in 1usize..5, m1 in 0.01f64..1.0, m2 in 0.01f64..1.0, push in 0.0f64..2.0,
    ) {
        let mut r = rng(seed);
        let s: Vec<f64> = unit(&mut r, 6).into_iter().map(f64::from).collect();
        let pos: Vec<f64> = unit(&mut r, 6).into_iter().map(f64::from).collect();
        let negs: Vec<Vec<f64>> = (0..n).map(|_| unit(&mut r, 6).into_iter().map(f64::from).collect()).collect();
        let refs: Vec<&[f64]> = negs.iter().map(Vec::as_slice).collect();
        let (lo, hi) = (m1.min(m2), m1.max(m2));
        let l_lo = margin_loss(&s, &pos, &refs, lo, 0.1).unwrap();
        prop_assert!(l_lo <= margin_loss(&s, &pos, &refs, hi, 0.1).unwrap() + 1e-12);
        // moving a negative against the state lowers its score by push·|s|²
        let mut lowered = negs.clone();
        for (x, si) in lowered[0].iter_mut().zip(&s) {
            *x -= push * si;
        }
        let lrefs: Vec<&[f64]> = lowered.iter().map(Vec::as_slice).collect();
        prop_assert!(margin_loss(&s, &pos, &lrefs, lo, 0.1).unwrap() <= l_lo + 1e-12);
        let f = |a: &[f64]| s.iter().zip(a).map(|(x, y)| x * y).sum::<f64>() / 0.1;
        let oracle = refs.iter().map(|a| (lo - f(&pos) + f(a)).max(0.0)).sum::<f64>() / n as f64;
        prop_assert!((l_lo - oracle).abs() < 1e-12);
    }

    #[test]
    fn mined_negatives_are_valid_and_cover_every_incorrect_step(labels in prop::collection::vec(prop::bool::weighted(0.7), 2..10), seed in 0u64..1000) {
        let traj = trajectory("p", &labels, 4, 4, seed);
        let mut r = rng(seed);
        for t in (0..labels.len()).filter(|&t| labels[t]) {
            let mut seen = BTreeSet::new();
            for _ in 0..60 {
                match mine_negatives(&traj, t, 0.5, &mut r) {
                    Ok(negs) => {
                        prop_assert!(negs.len() <= MAX_NEGATIVES && !negs.is_empty());
                        let idx: BTreeSet<usize> = negs.iter().map(|n| n.0).collect();
                        prop_assert_eq!(idx.len(), negs.len());
                        prop_assert!(!idx.contains(&t));
                        for (i, src) in &negs {
                            match src {
                                NegativeSource::Adjacent => prop_assert!(labels[*i] && i.abs_diff(t) == 1),
                                NegativeSource::LabeledIncorrect => prop_assert!(!labels[*i]),
                            }
                        }
                        seen.extend(idx);
                    }
                    Err(ObjectiveError::NoNegativesAvailable { .. }) => {
                        prop_assert!(labels.iter().enumerate().all(|(i, &c)| i == t || (c && i.abs_diff(t) > 1)));
                        break;
                    }
                    Err(e) => return Err(TestCaseError::fail(e.to_string())),
                }
            }
            for i in (0..labels.len()).filter(|&i| !labels[i]) {
                prop_assert!(seen.contains(&i), "incorrect step {} never mined for anchor {}", i, t);
            }
        }
    }
}

#[test]
fn mining_quota_cases() {
    let all_correct = trajectory("a", &[true; 5], 4, 4, 0);
    let mut r = rng(0);
    let n = mine_negatives(&all_correct, 2, 0.5, &mut r).unwrap();
    assert_eq!(n, vec![(1, NegativeSource::Adjacent), (3, NegativeSource::Adjacent)]);
    assert_eq!(mine_negatives(&all_correct, 0, 0.5, &mut r).unwrap(), vec![(1, NegativeSource::Adjacent)]);

    // step 1 is incorrect, so it is not an adjacent negative for step 2
    let mixed = trajectory("b", &[true, false, true, true, false, false, true], 4, 4, 1);
    let n = mine_negatives(&mixed, 2, 0.5, &mut r).unwrap();
    assert_eq!(n.iter().filter(|x| x.1 == NegativeSource::Adjacent).count(), 1);
    assert_eq!(n.iter().filter(|x| x.1 == NegativeSource::LabeledIncorrect).count(), 3);

    let many = trajectory("c", &[false, false, false, true, true, true, false, false], 4, 4, 2);
    for (mix, inc) in [(0.0, 2), (0.5, 2), (1.0, 3)] {
        let n = mine_negatives(&many, 4, mix, &mut r).unwrap();
        assert_eq!(n.len(), MAX_NEGATIVES);
        assert_eq!(n.iter().filter(|x| x.1 == NegativeSource::LabeledIncorrect).count(), inc, "mix {mix}");
    }

    let single = trajectory("d", &[true], 4, 4, 3);
    assert!(matches!(mine_negatives(&single, 0, 0.5, &mut r), Err(ObjectiveError::NoNegativesAvailable { .. })));
    assert!(matches!(mine_negatives(&mixed, 1, 0.5, &mut r), Err(ObjectiveError::IncorrectAnchor(2))));
}

