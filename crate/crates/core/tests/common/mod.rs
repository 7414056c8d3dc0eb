#![allow(dead_code)]

use intent_reward::store::{OsTag, Step, TaskCompletion, TextField, Trajectory};
use intent_reward::synthetic::{EmbedConfig, Suite, SuiteConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn unit<R: Rng>(rng: &mut R, d: usize) -> Vec<f32> {
    let v: Vec<f32> = (0..d).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn field<R: Rng>(rng: &mut R, d: usize, text: &str) -> TextField {
    TextField::new(Some(text.to_string()), Some(unit(rng, d)))
}

/// A step with random unit embeddings everywhere and a thought present.
pub fn random_step<R: Rng>(rng: &mut R, index: u32, correct: bool, text: usize, vision: usize) -> Step {
    Step {
        step_index: index,
        screenshot_before: unit(rng, vision),
        screenshot_after: None,
        observation: field(rng, text, "obs"),
        action: TextField { variants: (0..3).map(|_| unit(rng, text)).collect(), ..field(rng, text, "act") },
        code: TextField { variants: (0..3).map(|_| unit(rng, text)).collect(), ..field(rng, text, &format!("pyautogui.click({index}, 1)")) },
        thought: field(rng, text, "thought"),
        reflection: field(rng, text, "reflection"),
        instruction: field(rng, text, "instruction"),
        xy: [rng.gen(), rng.gen()],
        correct,
    }
}

/// Trajectory with one step per label, 1-based step indices.
pub fn trajectory(id: &str, labels: &[bool], text: usize, vision: usize, seed: u64) -> Trajectory {
    let mut r = rng(seed);
    Trajectory {
        task_id: id.to_string(),
        os_tag: OsTag::new("A"),
        task_completion: TaskCompletion::Completed,
        steps: labels.iter().enumerate().map(|(i, &c)| random_step(&mut r, i as u32 + 1, c, text, vision)).collect(),
    }
}

/// The standard suite, shrunk, with the given embedding widths.
pub fn small_suite(text: usize, vision: usize, scale: f64, seed: u64) -> Suite {
    let mut config = SuiteConfig::standard(seed).scaled(scale);
    config.embed = EmbedConfig { text_dim: text, vision_dim: vision, ..config.embed };
    Suite::generate(config).expect("suite generates")
}

pub mod corpus;
pub mod grad;
