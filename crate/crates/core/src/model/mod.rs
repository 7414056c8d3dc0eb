//! The trainable scorer: history encoder, state encoder, intent-aware action
//! encoder, and temperature-scaled cosine scoring.

mod checkpoint;
mod input;

pub use checkpoint::{checkpoint_bytes, checkpoint_from_bytes, load_checkpoint, save_checkpoint, CheckpointMeta, TensorSpec, CHECKPOINT_MAGIC};
pub use input::{ActionBatch, ActionInput, HistoryStep, HistoryWindow, StateBatch, StateInput};

use ndarray::{s, Array2, ArrayView2};
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{
    dropout_mask, gelu_backward, gelu_forward, hconcat, l2_normalize_backward, l2_normalize_rows, GruStack,
    GruStackCache, LayerNorm, LayerNormCache, Linear, Scalar,
};

pub const HISTORY_LEN: usize = 3;
pub const TAU_INIT: f64 = 0.07;
pub const TAU_MIN: f64 = 0.01;
pub const TAU_MAX: f64 = 1.0;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("{field} has dimension {found}, expected {expected}")]
    DimensionMismatch { field: &'static str, expected: usize, found: usize },
    #[error("non-finite activation in {0}")]
    NonFiniteActivation(&'static str),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Architecture sizes. [`ModelDims::full`] is the full-size network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    pub text: usize,
    pub vision: usize,
    pub code_compress: usize,
    pub step_proj: usize,
    pub gru_hidden: usize,
    pub gru_layers: usize,
    pub state_hidden: [usize; 2],
    pub action_hidden: [usize; 2],
    pub embed: usize,
    pub dropout: f64,
}

impl ModelDims {
    pub fn full() -> Self {
        Self {
            text: 768,
            vision: 1152,
            code_compress: 384,
            step_proj: 512,
            gru_hidden: 384,
            gru_layers: 2,
            state_hidden: [1024, 768],
            action_hidden: [1024, 512],
            embed: 384,
            dropout: 0.1,
        }
    }

    /// Small enough to train on one core in minutes.
    pub fn desk() -> Self {
        Self {
            text: 64,
            vision: 96,
            code_compress: 32,
            step_proj: 64,
            gru_hidden: 48,
            gru_layers: 2,
            state_hidden: [128, 96],
            action_hidden: [128, 64],
            embed: 48,
            dropout: 0.1,
        }
    }

    /// Every width set to `n`; used for gradient checks.
    pub fn uniform(n: usize) -> Self {
        Self {
            text: n,
            vision: n,
            code_compress: n,
            step_proj: n,
            gru_hidden: n,
            gru_layers: 2,
            state_hidden: [n, n],
            action_hidden: [n, n],
            embed: n,
            dropout: 0.1,
        }
    }

    pub fn with_text_vision(mut self, text: usize, vision: usize) -> Self {
        self.text = text;
        self.vision = vision;
        self
    }

    /// `[screenshot ‖ observation ‖ action ‖ compressed code ‖ xy]`.
    pub fn history_step_input(&self) -> usize {
        self.vision + 2 * self.text + self.code_compress + 2
    }

    /// `[screenshot ‖ observation ‖ instruction ‖ reflection ‖ history]`.
    pub fn state_input(&self) -> usize {
        self.vision + 3 * self.text + self.gru_hidden
    }

    /// `[thought ‖ action ‖ code ‖ xy]`.
    pub fn action_input(&self) -> usize {
        3 * self.text + 2
    }
}

/// Linear → GELU → LayerNorm → dropout → Linear → GELU → Linear.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    pub fc1: Linear<T>,
    pub norm: LayerNorm<T>,
    pub fc2: Linear<T>,
    pub fc3: Linear<T>,
}

#[derive(Debug, Clone)]
pub struct MlpCache<T> {
    x: Array2<T>,
    z1: Array2<T>,
    norm: LayerNormCache<T>,
    mask: Option<Array2<T>>,
    d1: Array2<T>,
    z2: Array2<T>,
    g2: Array2<T>,
}

impl<T: Scalar> Mlp<T> {
    fn init<R: Rng + ?Sized>(input: usize, hidden: [usize; 2], output: usize, rng: &mut R) -> Self {
        Self {
            fc1: Linear::init(input, hidden[0], rng),
            norm: LayerNorm::new(hidden[0]),
            fc2: Linear::init(hidden[0], hidden[1], rng),
            fc3: Linear::init(hidden[1], output, rng),
        }
    }

    fn zeros(input: usize, hidden: [usize; 2], output: usize) -> Self {
        Self {
            fc1: Linear::zeros(input, hidden[0]),
            norm: LayerNorm::zeros(hidden[0]),
            fc2: Linear::zeros(hidden[0], hidden[1]),
            fc3: Linear::zeros(hidden[1], output),
        }
    }

    /// Pre-normalization output and the cache for [`Mlp::backward`].
    pub fn forward(&self, x: Array2<T>, dropout: f64, rng: Option<&mut dyn RngCore>) -> (Array2<T>, MlpCache<T>) {
        let z1 = self.fc1.forward(x.view());
        let g1 = gelu_forward(&z1);
        let (n1, norm) = self.norm.forward(g1.view());
        let (d1, mask) = match rng {
            Some(r) if dropout > 0.0 => {
                let m = dropout_mask(n1.dim(), dropout, r);
                (&n1 * &m, Some(m))
            }
            _ => (n1, None),
        };
        let z2 = self.fc2.forward(d1.view());
        let g2 = gelu_forward(&z2);
        let out = self.fc3.forward(g2.view());
        (out, MlpCache { x, z1, norm, mask, d1, z2, g2 })
    }

    pub fn backward(&self, cache: &MlpCache<T>, d_out: &Array2<T>, grad: &mut Mlp<T>) -> Array2<T> {
        let dg2 = self.fc3.backward(cache.g2.view(), d_out.view(), &mut grad.fc3);
        let dz2 = gelu_backward(&cache.z2, &dg2);
        let mut dd1 = self.fc2.backward(cache.d1.view(), dz2.view(), &mut grad.fc2);
        if let Some(m) = &cache.mask {
            dd1 *= m;
        }
        let dg1 = self.norm.backward(&cache.norm, dd1.view(), &mut grad.norm);
        let dz1 = gelu_backward(&cache.z1, &dg1);
        self.fc1.backward(cache.x.view(), dz1.view(), &mut grad.fc1)
    }

    fn param_count(&self) -> usize {
        self.fc1.param_count() + self.norm.param_count() + self.fc2.param_count() + self.fc3.param_count()
    }
}

/// All trainable tensors plus the log-temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub dims: ModelDims,
    pub step_proj: Linear<T>,
    pub step_norm: LayerNorm<T>,
    pub code_compress: Linear<T>,
    pub gru: GruStack<T>,
    pub state_mlp: Mlp<T>,
    pub action_mlp: Mlp<T>,
    pub log_tau: T,
}

#[derive(Debug, Clone)]
pub struct HistoryCache<T> {
    step_inputs: Vec<Array2<T>>,
    pre: Vec<Array2<T>>,
    norms: Vec<LayerNormCache<T>>,
    gru: GruStackCache<T>,
}

#[derive(Debug, Clone)]
pub struct StateCache<T> {
    history: HistoryCache<T>,
    mlp: MlpCache<T>,
    out: Array2<T>,
    out_norms: ndarray::Array1<T>,
}

#[derive(Debug, Clone)]
pub struct ActionCache<T> {
    mlp: MlpCache<T>,
    out: Array2<T>,
    out_norms: ndarray::Array1<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreMode {
    /// `sᵀa / τ`, the quantity the losses see.
    Training,
    /// Raw cosine in `[-1, 1]`.
    Deployment,
}

fn check_finite<T: Scalar>(x: &Array2<T>, stage: &'static str) -> Result<(), ModelError> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(ModelError::NonFiniteActivation(stage))
    }
}

impl<T: Scalar> ModelParams<T> {
    pub fn init<R: Rng + ?Sized>(dims: ModelDims, rng: &mut R) -> Self {
        let step_proj = Linear::init(dims.history_step_input(), dims.step_proj, rng);
        let code_compress = Linear::init(dims.text, dims.code_compress, rng);
        let gru = GruStack::init(dims.step_proj, dims.gru_hidden, dims.gru_layers, rng);
        let state_mlp = Mlp::init(dims.state_input(), dims.state_hidden, dims.embed, rng);
        let action_mlp = Mlp::init(dims.action_input(), dims.action_hidden, dims.embed, rng);
        Self {
            dims,
            step_proj,
            step_norm: LayerNorm::new(dims.step_proj),
            code_compress,
            gru,
            state_mlp,
            action_mlp,
            log_tau: T::of(TAU_INIT.ln()),
        }
    }

    /// [`ModelParams::init`] from a ChaCha8 stream seeded with `seed`.
    pub fn seeded(dims: ModelDims, seed: u64) -> Self {
        use rand::SeedableRng;
        Self::init(dims, &mut rand_chacha::ChaCha8Rng::seed_from_u64(seed))
    }

    /// Same shapes, all zeros (gradient accumulators, optimizer moments).
    pub fn zeros(dims: ModelDims) -> Self {
        Self {
            dims,
            step_proj: Linear::zeros(dims.history_step_input(), dims.step_proj),
            step_norm: LayerNorm::zeros(dims.step_proj),
            code_compress: Linear::zeros(dims.text, dims.code_compress),
            gru: GruStack::zeros(dims.step_proj, dims.gru_hidden, dims.gru_layers),
            state_mlp: Mlp::zeros(dims.state_input(), dims.state_hidden, dims.embed),
            action_mlp: Mlp::zeros(dims.action_input(), dims.action_hidden, dims.embed),
            log_tau: T::zero(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.dims)
    }

    pub fn tau(&self) -> T {
        self.log_tau.exp().max(T::of(TAU_MIN)).min(T::of(TAU_MAX))
    }

    /// Projects `log_tau` back into `[ln 0.01, ln 1]`.
    pub fn clamp_tau(&mut self) {
        self.log_tau = self.log_tau.max(T::of(TAU_MIN.ln())).min(T::of(TAU_MAX.ln()));
    }

    pub fn param_count(&self) -> usize {
        self.step_proj.param_count()
            + self.step_norm.param_count()
            + self.code_compress.param_count()
            + self.gru.param_count()
            + self.state_mlp.param_count()
            + self.action_mlp.param_count()
            + 1
    }

    /// Every tensor as `(name, shape, values)` in canonical order.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[T])> {
        let mut out = Vec::new();
        push_linear(&mut out, "step_proj", &self.step_proj);
        push_norm(&mut out, "step_norm", &self.step_norm);
        push_linear(&mut out, "code_compress", &self.code_compress);
        for (l, layer) in self.gru.layers.iter().enumerate() {
            push_linear(&mut out, &format!("gru.{l}.input"), &layer.input);
            push_linear(&mut out, &format!("gru.{l}.hidden"), &layer.hidden);
        }
        for (prefix, mlp) in [("state_mlp", &self.state_mlp), ("action_mlp", &self.action_mlp)] {
            push_linear(&mut out, &format!("{prefix}.fc1"), &mlp.fc1);
            push_norm(&mut out, &format!("{prefix}.norm"), &mlp.norm);
            push_linear(&mut out, &format!("{prefix}.fc2"), &mlp.fc2);
            push_linear(&mut out, &format!("{prefix}.fc3"), &mlp.fc3);
        }
        out.push(("log_tau".to_string(), Vec::new(), std::slice::from_ref(&self.log_tau)));
        out
    }

    /// Mutable views in the same order as [`ModelParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [T])> {
        let mut out: Vec<(String, &mut [T])> = Vec::new();
        fn lin<'a, T>(out: &mut Vec<(String, &'a mut [T])>, name: &str, l: &'a mut Linear<T>) {
            out.push((format!("{name}.weight"), l.weight.as_slice_mut().expect("standard layout")));
            out.push((format!("{name}.bias"), l.bias.as_slice_mut().expect("standard layout")));
        }
        fn norm<'a, T>(out: &mut Vec<(String, &'a mut [T])>, name: &str, n: &'a mut LayerNorm<T>) {
            out.push((format!("{name}.gain"), n.gain.as_slice_mut().expect("standard layout")));
            out.push((format!("{name}.bias"), n.bias.as_slice_mut().expect("standard layout")));
        }
        lin(&mut out, "step_proj", &mut self.step_proj);
        norm(&mut out, "step_norm", &mut self.step_norm);
        lin(&mut out, "code_compress", &mut self.code_compress);
        for (l, layer) in self.gru.layers.iter_mut().enumerate() {
            lin(&mut out, &format!("gru.{l}.input"), &mut layer.input);
            lin(&mut out, &format!("gru.{l}.hidden"), &mut layer.hidden);
        }
        for (prefix, mlp) in [("state_mlp", &mut self.state_mlp), ("action_mlp", &mut self.action_mlp)] {
            lin(&mut out, &format!("{prefix}.fc1"), &mut mlp.fc1);
            norm(&mut out, &format!("{prefix}.norm"), &mut mlp.norm);
            lin(&mut out, &format!("{prefix}.fc2"), &mut mlp.fc2);
            lin(&mut out, &format!("{prefix}.fc3"), &mut mlp.fc3);
        }
        out.push(("log_tau".to_string(), std::slice::from_mut(&mut self.log_tau)));
        out
    }

    /// Converts every value to another scalar type.
    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let mut out = ModelParams::<U>::zeros(self.dims);
        for ((_, _, src), (_, dst)) in self.tensors().into_iter().zip(out.tensors_mut()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d = U::of(s.to_f64().expect("finite scalar"));
            }
        }
        out
    }

    /// Runs the step projection and the recurrent stack over the history slots.
    pub fn encode_history(
        &self,
        batch: &StateBatch<T>,
        mut rng: Option<&mut dyn RngCore>,
    ) -> (Array2<T>, HistoryCache<T>) {
        let mut step_inputs = Vec::with_capacity(HISTORY_LEN);
        let mut pre = Vec::with_capacity(HISTORY_LEN);
        let mut norms = Vec::with_capacity(HISTORY_LEN);
        let mut projected = Vec::with_capacity(HISTORY_LEN);
        for k in 0..HISTORY_LEN {
            let code = self.code_compress.forward(batch.hist_code[k].view());
            let x = hconcat(&[batch.hist_main[k].view(), code.view(), batch.hist_xy[k].view()]);
            let z = self.step_proj.forward(x.view());
            let g = gelu_forward(&z);
            let (p, cache) = self.step_norm.forward(g.view());
            step_inputs.push(x);
            pre.push(z);
            norms.push(cache);
            projected.push(p);
        }
        let (h, gru) = self.gru.forward(&projected, self.dims.dropout, reborrow(&mut rng));
        (h, HistoryCache { step_inputs, pre, norms, gru })
    }

    fn backward_history(&self, cache: &HistoryCache<T>, batch: &StateBatch<T>, dh: ArrayView2<'_, T>, grad: &mut Self) {
        let d_steps = self.gru.backward(&cache.gru, dh, &mut grad.gru);
        let main = batch.hist_main[0].ncols();
        let cc = self.dims.code_compress;
        for k in 0..HISTORY_LEN {
            let dg = self.step_norm.backward(&cache.norms[k], d_steps[k].view(), &mut grad.step_norm);
            let dz = gelu_backward(&cache.pre[k], &dg);
            let dx = self.step_proj.backward(cache.step_inputs[k].view(), dz.view(), &mut grad.step_proj);
            let dcode = dx.slice(s![.., main..main + cc]);
            self.code_compress.backward(batch.hist_code[k].view(), dcode, &mut grad.code_compress);
        }
    }

    /// Unit state embeddings. Passing `rng` enables training-mode dropout.
    pub fn forward_states(
        &self,
        batch: &StateBatch<T>,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<(Array2<T>, StateCache<T>), ModelError> {
        let (h, history) = self.encode_history(batch, reborrow(&mut rng));
        let x = hconcat(&[batch.context.view(), h.view()]);
        let (z, mlp) = self.state_mlp.forward(x, self.dims.dropout, rng);
        check_finite(&z, "state encoder")?;
        let (out, out_norms) = l2_normalize_rows(&z);
        Ok((out.clone(), StateCache { history, mlp, out, out_norms }))
    }

    pub fn backward_states(&self, cache: &StateCache<T>, batch: &StateBatch<T>, ds: &Array2<T>, grad: &mut Self) {
        let dz = l2_normalize_backward(&cache.out, &cache.out_norms, ds);
        let dx = self.state_mlp.backward(&cache.mlp, &dz, &mut grad.state_mlp);
        let ctx = batch.context.ncols();
        self.backward_history(&cache.history, batch, dx.slice(s![.., ctx..]), grad);
    }

    /// Unit action embeddings. Passing `rng` enables training-mode dropout.
    pub fn forward_actions(
        &self,
        batch: &ActionBatch<T>,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<(Array2<T>, ActionCache<T>), ModelError> {
        let (z, mlp) = self.action_mlp.forward(batch.features.clone(), self.dims.dropout, rng);
        check_finite(&z, "action encoder")?;
        let (out, out_norms) = l2_normalize_rows(&z);
        Ok((out.clone(), ActionCache { mlp, out, out_norms }))
    }

    pub fn backward_actions(&self, cache: &ActionCache<T>, da: &Array2<T>, grad: &mut Self) {
        let dz = l2_normalize_backward(&cache.out, &cache.out_norms, da);
        self.action_mlp.backward(&cache.mlp, &dz, &mut grad.action_mlp);
    }

    /// Eval-mode state embeddings.
    pub fn encode_states(&self, inputs: &[StateInput<'_>]) -> Result<Array2<T>, ModelError> {
        let batch = StateBatch::build(&self.dims, inputs)?;
        Ok(self.forward_states(&batch, None)?.0)
    }

    /// Eval-mode action embeddings.
    pub fn encode_actions(&self, inputs: &[ActionInput<'_>]) -> Result<Array2<T>, ModelError> {
        let batch = ActionBatch::build(&self.dims, inputs)?;
        Ok(self.forward_actions(&batch, None)?.0)
    }

    pub fn score(&self, s: &[T], a: &[T], mode: ScoreMode) -> T {
        let cos = crate::nn::dot(s, a);
        match mode {
            ScoreMode::Training => cos / self.tau(),
            // rounding can push unit-vector dots a hair past ±1
            ScoreMode::Deployment => cos.max(-T::one()).min(T::one()),
        }
    }
}

/// Shortens the trait-object lifetime so the generator can be lent repeatedly.
pub(crate) fn reborrow<'b>(rng: &'b mut Option<&mut dyn RngCore>) -> Option<&'b mut dyn RngCore> {
    match rng {
        Some(r) => Some(&mut **r),
        None => None,
    }
}

fn push_linear<'a, T>(out: &mut Vec<(String, Vec<usize>, &'a [T])>, name: &str, l: &'a Linear<T>) {
    out.push((format!("{name}.weight"), l.weight.shape().to_vec(), l.weight.as_slice().expect("standard layout")));
    out.push((format!("{name}.bias"), l.bias.shape().to_vec(), l.bias.as_slice().expect("standard layout")));
}

fn push_norm<'a, T>(out: &mut Vec<(String, Vec<usize>, &'a [T])>, name: &str, n: &'a LayerNorm<T>) {
    out.push((format!("{name}.gain"), n.gain.shape().to_vec(), n.gain.as_slice().expect("standard layout")));
    out.push((format!("{name}.bias"), n.bias.shape().to_vec(), n.bias.as_slice().expect("standard layout")));
}
