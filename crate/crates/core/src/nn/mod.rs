//! Dense building blocks with hand-written backward passes.
//!
//! Everything here is generic over [`Scalar`] so the same code runs in `f32`
//! for training and in `f64` for finite-difference gradient checks. Batches
//! are row-major `Array2` with one example per row.

mod gru;

pub use gru::{GruCache, GruLayer, GruStack, GruStackCache};

use std::fmt::Debug;

use ndarray::{linalg::general_mat_mul, Array1, Array2, ArrayView2, Axis, LinalgScalar, ScalarOperand, Zip};
use num_traits::{Float, FromPrimitive, NumAssign};
use rand::Rng;

/// Floating point type the model can be instantiated with.
pub trait Scalar:
    Float + NumAssign + FromPrimitive + LinalgScalar + ScalarOperand + Send + Sync + Debug + Default + std::iter::Sum + 'static
{
    fn erf(self) -> Self;

    #[inline]
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("finite constant")
    }
}

impl Scalar for f32 {
    #[inline]
    fn erf(self) -> Self {
        libm::erff(self)
    }
}

impl Scalar for f64 {
    #[inline]
    fn erf(self) -> Self {
        libm::erf(self)
    }
}

/// Rows at or below this count use the vector kernel instead of a packed GEMM.
const GEMV_MAX_ROWS: usize = 4;

/// Dot product with independent accumulator lanes so the loop vectorizes.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    const LANES: usize = 16;
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); LANES];
    let mut ca = a.chunks_exact(LANES);
    let mut cb = b.chunks_exact(LANES);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..LANES {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail = tail + *x * *y;
    }
    // pairwise reduction keeps the result independent of call site
    let mut width = LANES;
    while width > 1 {
        width /= 2;
        for l in 0..width {
            acc[l] = acc[l] + acc[l + width];
        }
    }
    acc[0] + tail
}

/// Affine map `y = x Wᵀ + b` with `W` stored as `(out, in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self { weight: Array2::zeros((output, input)), bias: Array1::zeros(output) }
    }

    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero bias.
    pub fn init<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let mut layer = Self::zeros(input, output);
        fill_uniform(layer.weight.as_slice_mut().expect("standard layout"), input, rng);
        layer
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward(&self, x: ArrayView2<'_, T>) -> Array2<T> {
        debug_assert_eq!(x.ncols(), self.input_dim());
        let rows = x.nrows();
        if rows <= GEMV_MAX_ROWS {
            let mut y = Array2::zeros((rows, self.output_dim()));
            for (xr, mut yr) in x.outer_iter().zip(y.outer_iter_mut()) {
                let xs = xr.to_vec();
                for (o, (wr, b)) in yr.iter_mut().zip(self.weight.outer_iter().zip(self.bias.iter())) {
                    *o = dot(wr.as_slice().expect("standard layout"), &xs) + *b;
                }
            }
            y
        } else {
            let mut y = x.dot(&self.weight.t());
            y += &self.bias;
            y
        }
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: ArrayView2<'_, T>, dy: ArrayView2<'_, T>, grad: &mut Linear<T>) -> Array2<T> {
        general_mat_mul(T::one(), &dy.t(), &x, T::one(), &mut grad.weight);
        grad.bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight)
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Layer normalization over the feature axis.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<T> {
    pub gain: Array1<T>,
    pub bias: Array1<T>,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct LayerNormCache<T> {
    normalized: Array2<T>,
    inv_std: Array1<T>,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(dim: usize) -> Self {
        Self { gain: Array1::ones(dim), bias: Array1::zeros(dim) }
    }

    pub fn zeros(dim: usize) -> Self {
        Self { gain: Array1::zeros(dim), bias: Array1::zeros(dim) }
    }

    pub fn forward(&self, x: ArrayView2<'_, T>) -> (Array2<T>, LayerNormCache<T>) {
        let n = T::of(x.ncols() as f64);
        let eps = T::of(LAYER_NORM_EPS);
        let mut normalized = x.to_owned();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, is) in normalized.outer_iter_mut().zip(inv_std.iter_mut()) {
            let mean = row.iter().copied().sum::<T>() / n;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| *v * *v).sum::<T>() / n;
            *is = T::one() / (var + eps).sqrt();
            let s = *is;
            row.mapv_inplace(|v| v * s);
        }
        let mut y = &normalized * &self.gain;
        y += &self.bias;
        (y, LayerNormCache { normalized, inv_std })
    }

    pub fn backward(&self, cache: &LayerNormCache<T>, dy: ArrayView2<'_, T>, grad: &mut LayerNorm<T>) -> Array2<T> {
        grad.gain += &(&dy * &cache.normalized).sum_axis(Axis(0));
        grad.bias += &dy.sum_axis(Axis(0));
        let n = T::of(dy.ncols() as f64);
        let mut dx = &dy * &self.gain;
        for ((mut row, xhat), is) in dx.outer_iter_mut().zip(cache.normalized.outer_iter()).zip(cache.inv_std.iter()) {
            let sum_d = row.iter().copied().sum::<T>();
            let sum_dx = row.iter().zip(xhat.iter()).map(|(d, x)| *d * *x).sum::<T>();
            let scale = *is / n;
            Zip::from(&mut row).and(&xhat).for_each(|d, &x| {
                *d = scale * (n * *d - sum_d - x * sum_dx);
            });
        }
        dx
    }

    pub fn param_count(&self) -> usize {
        self.gain.len() + self.bias.len()
    }
}

/// Exact (erf based) GELU.
#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    half * x * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let cdf = T::of(0.5) * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * T::of(0.5)).exp() * T::of(0.398_942_280_401_432_7);
    cdf + x * pdf
}

pub fn gelu_forward<T: Scalar>(x: &Array2<T>) -> Array2<T> {
    x.mapv(gelu)
}

/// `dy * gelu'(pre)`.
pub fn gelu_backward<T: Scalar>(pre: &Array2<T>, dy: &Array2<T>) -> Array2<T> {
    let mut dx = dy.clone();
    Zip::from(&mut dx).and(pre).for_each(|d, &p| *d = *d * gelu_grad(p));
    dx
}

/// Inverted dropout mask: kept entries carry `1 / keep`, dropped entries zero.
pub fn dropout_mask<T: Scalar, R: Rng + ?Sized>(shape: (usize, usize), rate: f64, rng: &mut R) -> Array2<T> {
    let keep = 1.0 - rate;
    let scale = T::of(1.0 / keep);
    Array2::from_shape_simple_fn(shape, || if rng.gen::<f64>() < keep { scale } else { T::zero() })
}

const NORM_FLOOR: f64 = 1e-12;

/// Row-wise L2 normalization. Returns the normalized rows and the row norms.
pub fn l2_normalize_rows<T: Scalar>(x: &Array2<T>) -> (Array2<T>, Array1<T>) {
    let floor = T::of(NORM_FLOOR);
    let mut y = x.clone();
    let mut norms = Array1::zeros(x.nrows());
    for (mut row, n) in y.outer_iter_mut().zip(norms.iter_mut()) {
        let norm = row.iter().map(|v| *v * *v).sum::<T>().sqrt().max(floor);
        *n = norm;
        row.mapv_inplace(|v| v / norm);
    }
    (y, norms)
}

/// Backward of [`l2_normalize_rows`] given the normalized output `y`.
pub fn l2_normalize_backward<T: Scalar>(y: &Array2<T>, norms: &Array1<T>, dy: &Array2<T>) -> Array2<T> {
    let mut dx = dy.clone();
    for ((mut d, yr), n) in dx.outer_iter_mut().zip(y.outer_iter()).zip(norms.iter()) {
        let proj = d.iter().zip(yr.iter()).map(|(a, b)| *a * *b).sum::<T>();
        let inv = T::one() / *n;
        Zip::from(&mut d).and(&yr).for_each(|g, &v| *g = (*g - v * proj) * inv);
    }
    dx
}

pub(crate) fn fill_uniform<T: Scalar, R: Rng + ?Sized>(values: &mut [T], fan_in: usize, rng: &mut R) {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    for v in values {
        *v = T::of(rng.gen_range(-bound..bound));
    }
}

/// Horizontal concatenation of equally tall blocks.
pub fn hconcat<T: Scalar>(blocks: &[ArrayView2<'_, T>]) -> Array2<T> {
    let rows = blocks.first().map_or(0, |b| b.nrows());
    let cols = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = Array2::zeros((rows, cols));
    let mut offset = 0;
    for b in blocks {
        debug_assert_eq!(b.nrows(), rows);
        out.slice_mut(ndarray::s![.., offset..offset + b.ncols()]).assign(b);
        offset += b.ncols();
    }
    out
}
