use ndarray::{s, Array2, ArrayView2, Zip};
use rand::{Rng, RngCore};

use super::{dropout_mask, Linear, Scalar};

/// One gated recurrent layer, gate order `[reset, update, candidate]`:
///
/// ```text
/// r  = σ(W_ir x + b_ir + W_hr h + b_hr)
/// z  = σ(W_iz x + b_iz + W_hz h + b_hz)
/// n  = tanh(W_in x + b_in + r ⊙ (W_hn h + b_hn))
/// h' = (1 - z) ⊙ n + z ⊙ h
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct GruLayer<T> {
    pub input: Linear<T>,
    pub hidden: Linear<T>,
}

#[derive(Debug, Clone)]
struct StepCache<T> {
    x: Array2<T>,
    h_prev: Array2<T>,
    r: Array2<T>,
    z: Array2<T>,
    n: Array2<T>,
    hn: Array2<T>,
}

#[derive(Debug, Clone)]
pub struct GruCache<T> {
    steps: Vec<StepCache<T>>,
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: Scalar> GruLayer<T> {
    pub fn init<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        Self { input: Linear::init(input, 3 * hidden, rng), hidden: Linear::init(hidden, 3 * hidden, rng) }
    }

    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self { input: Linear::zeros(input, 3 * hidden), hidden: Linear::zeros(hidden, 3 * hidden) }
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden.input_dim()
    }

    /// Runs the layer over `seq` from a zero initial state; returns every hidden state.
    pub fn forward(&self, seq: &[Array2<T>]) -> (Vec<Array2<T>>, GruCache<T>) {
        let hd = self.hidden_dim();
        let rows = seq.first().map_or(0, |x| x.nrows());
        let mut h = Array2::zeros((rows, hd));
        let mut outputs = Vec::with_capacity(seq.len());
        let mut steps = Vec::with_capacity(seq.len());
        for x in seq {
            let gi = self.input.forward(x.view());
            let gh = self.hidden.forward(h.view());
            let r = (&gi.slice(s![.., 0..hd]) + &gh.slice(s![.., 0..hd])).mapv(sigmoid);
            let z = (&gi.slice(s![.., hd..2 * hd]) + &gh.slice(s![.., hd..2 * hd])).mapv(sigmoid);
            let hn = gh.slice(s![.., 2 * hd..]).to_owned();
            let mut n = gi.slice(s![.., 2 * hd..]).to_owned();
            Zip::from(&mut n).and(&r).and(&hn).for_each(|n, &r, &hn| *n = (*n + r * hn).tanh());
            let mut next = n.clone();
            Zip::from(&mut next).and(&z).and(&h).for_each(|o, &z, &hp| *o = (T::one() - z) * *o + z * hp);
            steps.push(StepCache { x: x.clone(), h_prev: h, r, z, n, hn });
            outputs.push(next.clone());
            h = next;
        }
        (outputs, GruCache { steps })
    }

    /// Backpropagation through time. `d_outputs[t]` is the external gradient on
    /// the hidden state emitted at step `t`. Returns the gradient for each input.
    pub fn backward(&self, cache: &GruCache<T>, d_outputs: &[Array2<T>], grad: &mut GruLayer<T>) -> Vec<Array2<T>> {
        let hd = self.hidden_dim();
        let mut dxs = vec![Array2::zeros((0, 0)); cache.steps.len()];
        let mut carry: Option<Array2<T>> = None;
        for t in (0..cache.steps.len()).rev() {
            let c = &cache.steps[t];
            let mut dh = d_outputs[t].clone();
            if let Some(carry) = carry.take() {
                dh += &carry;
            }
            let rows = dh.nrows();
            let mut dgi = Array2::zeros((rows, 3 * hd));
            let mut dgh = Array2::zeros((rows, 3 * hd));
            let mut dh_prev = Array2::zeros((rows, hd));
            for b in 0..rows {
                for j in 0..hd {
                    let g = dh[[b, j]];
                    let (r, z, n, hn, hp) = (c.r[[b, j]], c.z[[b, j]], c.n[[b, j]], c.hn[[b, j]], c.h_prev[[b, j]]);
                    let dn_pre = g * (T::one() - z) * (T::one() - n * n);
                    let dz_pre = g * (hp - n) * z * (T::one() - z);
                    let dr_pre = dn_pre * hn * r * (T::one() - r);
                    dgi[[b, j]] = dr_pre;
                    dgi[[b, hd + j]] = dz_pre;
                    dgi[[b, 2 * hd + j]] = dn_pre;
                    dgh[[b, j]] = dr_pre;
                    dgh[[b, hd + j]] = dz_pre;
                    dgh[[b, 2 * hd + j]] = dn_pre * r;
                    dh_prev[[b, j]] = g * z;
                }
            }
            dxs[t] = self.input.backward(c.x.view(), dgi.view(), &mut grad.input);
            dh_prev += &self.hidden.backward(c.h_prev.view(), dgh.view(), &mut grad.hidden);
            carry = Some(dh_prev);
        }
        dxs
    }

    pub fn param_count(&self) -> usize {
        self.input.param_count() + self.hidden.param_count()
    }
}

/// Stacked layers with inverted dropout between consecutive layers.
#[derive(Debug, Clone, PartialEq)]
pub struct GruStack<T> {
    pub layers: Vec<GruLayer<T>>,
}

#[derive(Debug, Clone)]
pub struct GruStackCache<T> {
    layers: Vec<GruCache<T>>,
    /// `masks[l][t]` applied to the output of layer `l` before layer `l + 1`.
    masks: Vec<Vec<Option<Array2<T>>>>,
}

impl<T: Scalar> GruStack<T> {
    pub fn init<R: Rng + ?Sized>(input: usize, hidden: usize, layers: usize, rng: &mut R) -> Self {
        let layers = (0..layers).map(|l| GruLayer::init(if l == 0 { input } else { hidden }, hidden, rng)).collect();
        Self { layers }
    }

    pub fn zeros(input: usize, hidden: usize, layers: usize) -> Self {
        let layers = (0..layers).map(|l| GruLayer::zeros(if l == 0 { input } else { hidden }, hidden)).collect();
        Self { layers }
    }

    /// Final hidden state of the top layer.
    pub fn forward(
        &self,
        seq: &[Array2<T>],
        dropout: f64,
        mut rng: Option<&mut dyn RngCore>,
    ) -> (Array2<T>, GruStackCache<T>) {
        let mut current: Vec<Array2<T>> = seq.to_vec();
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut masks = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let (mut outs, cache) = layer.forward(&current);
            caches.push(cache);
            let last = l + 1 == self.layers.len();
            let mut layer_masks = Vec::with_capacity(outs.len());
            for out in outs.iter_mut() {
                match rng.as_deref_mut() {
                    Some(r) if !last && dropout > 0.0 => {
                        let m = dropout_mask::<T, _>(out.dim(), dropout, r);
                        *out *= &m;
                        layer_masks.push(Some(m));
                    }
                    _ => layer_masks.push(None),
                }
            }
            masks.push(layer_masks);
            current = outs;
        }
        let top = current.pop().unwrap_or_else(|| Array2::zeros((0, 0)));
        (top, GruStackCache { layers: caches, masks })
    }

    /// Gradient w.r.t. each input step given `d_top` on the final hidden state.
    pub fn backward(&self, cache: &GruStackCache<T>, d_top: ArrayView2<'_, T>, grad: &mut GruStack<T>) -> Vec<Array2<T>> {
        let steps = cache.layers.first().map_or(0, |c| c.steps.len());
        let mut d_out: Vec<Array2<T>> = (0..steps).map(|_| Array2::zeros(d_top.dim())).collect();
        if let Some(last) = d_out.last_mut() {
            last.assign(&d_top);
        }
        for l in (0..self.layers.len()).rev() {
            if l + 1 < self.layers.len() {
                for (d, m) in d_out.iter_mut().zip(&cache.masks[l]) {
                    if let Some(m) = m {
                        *d *= m;
                    }
                }
            }
            d_out = self.layers[l].backward(&cache.layers[l], &d_out, &mut grad.layers[l]);
        }
        d_out
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(GruLayer::param_count).sum()
    }
}
