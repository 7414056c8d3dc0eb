//! Sources of fixed-dimension unit-norm embeddings.
//!
//! Real vectors come from an `ISEB` sidecar; at desk scale the
//! [`PseudoEmbedder`] stands in for the frozen encoders by summing
//! hash-seeded random unit vectors, one per token.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;

use crate::store::sidecar::{variant_ref, Sidecar};
use crate::store::{l2_norm, StoreError, NORM_TOLERANCE};

/// Upper bound on stored augmentation variants per field.
pub const MAX_VARIANTS: usize = 3;

/// A base embedding plus its pre-embedded augmentation variants.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBundle {
    pub base: Vec<f32>,
    pub variants: Vec<Vec<f32>>,
}

impl EmbeddingBundle {
    pub fn new(base: Vec<f32>, variants: Vec<Vec<f32>>) -> Result<Self, StoreError> {
        if variants.len() > MAX_VARIANTS {
            return Err(StoreError::schema("bundle", format!("{} variants exceeds {MAX_VARIANTS}", variants.len())));
        }
        for v in std::iter::once(&base).chain(&variants) {
            if v.len() != base.len() {
                return Err(StoreError::DimensionMismatch { emb_ref: "bundle".into(), expected: base.len(), found: v.len() });
            }
            let norm = l2_norm(v);
            if (norm - 1.0).abs() > NORM_TOLERANCE {
                return Err(StoreError::NormViolation { emb_ref: "bundle".into(), norm });
            }
        }
        Ok(Self { base, variants })
    }

    pub fn get(&self, variant: Option<usize>) -> &[f32] {
        variant.and_then(|k| self.variants.get(k)).unwrap_or(&self.base)
    }
}

/// Read-only embedding lookup backed by a sidecar file.
#[derive(Debug, Clone)]
pub struct EmbeddingStore {
    sidecar: Sidecar,
}

impl EmbeddingStore {
    pub fn open(path: &Path) -> Result<Self, StoreError> {
        Ok(Self { sidecar: Sidecar::read(path)? })
    }

    pub fn from_sidecar(sidecar: Sidecar) -> Self {
        Self { sidecar }
    }

    /// The vector for `reference`, or its variant `k` when it exists. A variant
    /// index with no stored vector falls back to the base.
    pub fn get(&self, reference: &str, variant: Option<usize>) -> Result<&[f32], StoreError> {
        let base = self.sidecar.get(reference).ok_or_else(|| StoreError::UnknownRef(reference.to_string()))?;
        Ok(variant
            .and_then(|k| variant_ref(reference, k))
            .and_then(|r| self.sidecar.get(&r))
            .unwrap_or(base))
    }

    pub fn bundle(&self, reference: &str) -> Result<EmbeddingBundle, StoreError> {
        let base = self.get(reference, None)?.to_vec();
        let variants = (0..MAX_VARIANTS)
            .map_while(|k| variant_ref(reference, k).and_then(|r| self.sidecar.get(&r)).map(<[f32]>::to_vec))
            .collect();
        Ok(EmbeddingBundle { base, variants })
    }
}

/// 64-bit FNV-1a.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// SplitMix64 step; the integer source behind every token vector.
fn splitmix(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn unit_uniform(state: &mut u64) -> f64 {
    // 53 random bits in (0, 1)
    ((splitmix(state) >> 11) as f64 + 0.5) / (1u64 << 53) as f64
}

/// Random unit direction for one token, a pure function of (token, dim, seed).
fn token_vector(token: &str, dim: usize, seed: u64) -> Vec<f64> {
    let mut state = fnv1a(token.as_bytes()) ^ seed.wrapping_mul(0xd6e8_feb8_6659_fd93) ^ (dim as u64).rotate_left(32);
    let mut v = Vec::with_capacity(dim + 1);
    while v.len() < dim {
        let u1 = unit_uniform(&mut state);
        let u2 = unit_uniform(&mut state);
        let r = libm::sqrt(-2.0 * libm::log(u1));
        let theta = 2.0 * std::f64::consts::PI * u2;
        v.push(r * libm::cos(theta));
        v.push(r * libm::sin(theta));
    }
    v.truncate(dim);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

const EMPTY_TOKEN: &str = "\u{0}<empty>";

/// Normalized sum of per-token random unit vectors. Deterministic in the token
/// multiset, `dim` and `seed`; an empty list maps to a fixed seeded vector.
pub fn pseudo_embed<S: AsRef<str>>(tokens: &[S], dim: usize, seed: u64) -> Vec<f32> {
    PseudoEmbedder::new(dim, seed).embed(tokens)
}

/// [`pseudo_embed`] with a per-token cache.
#[derive(Debug, Clone)]
pub struct PseudoEmbedder {
    dim: usize,
    seed: u64,
    cache: HashMap<String, Vec<f64>>,
}

impl PseudoEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { dim, seed, cache: HashMap::new() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn embed<S: AsRef<str>>(&mut self, tokens: &[S]) -> Vec<f32> {
        let mut sorted: Vec<&str> = tokens.iter().map(AsRef::as_ref).collect();
        if sorted.is_empty() {
            sorted.push(EMPTY_TOKEN);
        }
        // summation order fixed by sorting so the result depends on the multiset only
        sorted.sort_unstable();
        let mut acc = vec![0.0f64; self.dim];
        for t in sorted {
            let (dim, seed) = (self.dim, self.seed);
            let v = self.cache.entry(t.to_string()).or_insert_with(|| token_vector(t, dim, seed));
            acc.iter_mut().zip(v.iter()).for_each(|(a, b)| *a += b);
        }
        let norm = acc.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-12 {
            // exact cancellation is measure-zero; fall back to the empty vector
            return self.embed::<&str>(&[]);
        }
        acc.iter().map(|x| (x / norm) as f32).collect()
    }
}

/// Removes `ceil(rate * n)` uniformly chosen tokens, always keeping at least one.
/// Survivors keep their original order.
pub fn word_dropout_variant<S: Clone, R: Rng + ?Sized>(tokens: &[S], rate: f64, rng: &mut R) -> Vec<S> {
    assert!((0.30..=0.50).contains(&rate), "dropout rate {rate} outside [0.30, 0.50]");
    let n = tokens.len();
    if n <= 1 {
        return tokens.to_vec();
    }
    // guard against 0.3 * 10 = 3.0000000000000004
    let drop = ((rate * n as f64 - 1e-9).ceil() as usize).min(n - 1);
    let mut removed = vec![false; n];
    for i in sample(rng, n, drop).iter() {
        removed[i] = true;
    }
    tokens.iter().zip(removed).filter(|(_, r)| !r).map(|(t, _)| t.clone()).collect()
}

/// Splits text into whitespace-separated words.
pub fn words(text: &str) -> Vec<&str> {
    text.split_whitespace().collect()
}

pub fn cosine(a: &[f32], b: &[f32]) -> f32 {
    let dot: f32 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = l2_norm(a);
    let nb = l2_norm(b);
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}
