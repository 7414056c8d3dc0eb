//! Median per-candidate deployment scoring time at full size.

use std::time::Instant;

use intent_reward::model::{ActionInput, ModelDims, ModelParams, ScoreMode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn unit(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let v: Vec<f32> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn main() {
    let dims = ModelDims::full();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let params = ModelParams::<f32>::init(dims, &mut rng);
    let state = unit(dims.embed, &mut rng);
    let (thought, action, code) = (unit(dims.text, &mut rng), unit(dims.text, &mut rng), unit(dims.text, &mut rng));
    let input = ActionInput { thought: Some(&thought), action: Some(&action), code: Some(&code), xy: [0.3, 0.7] };
    let mut times = Vec::with_capacity(1000);
    for _ in 0..1000 {
        let start = Instant::now();
        let a = params.encode_actions(&[input]).expect("encode");
        let s = params.score(&state, a.as_slice().expect("contiguous"), ScoreMode::Deployment);
        std::hint::black_box(s);
        times.push(start.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(f64::total_cmp);
    println!("median {:.4} ms  p90 {:.4} ms", times[500], times[900]);
}
