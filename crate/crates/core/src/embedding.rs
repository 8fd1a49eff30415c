//! Fixed-dimension embedding vectors, the diagonal Gaussian prior estimated
//! from a set of them, and the seeded deterministic RNG every stochastic
//! operation in this crate draws from.
//!
//! All arithmetic is f64. Every public constructor validates: embeddings are
//! non-empty and finite, priors carry non-negative finite scales.

use rand::RngCore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A single embedding vector (one row of a visual prompt, a region feature,
/// or a vocabulary entry). Length is the embedding dimension `C >= 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    /// Wraps a vector, rejecting empty or non-finite input.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyInput("embedding must have dimension >= 1".into()));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("embedding".into()));
        }
        Ok(Embedding(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    /// Mutable access for in-place parameter updates. Callers keep the
    /// finiteness invariant; file savers re-validate.
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_values(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Per-dimension mean and standard deviation of an embedding population.
/// `sigma` stores standard deviations (not variances); the population
/// convention (divide by the set size) is used when estimating.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianPrior {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl GaussianPrior {
    pub fn new(mu: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        if mu.is_empty() {
            return Err(Error::EmptyInput("prior must have dimension >= 1".into()));
        }
        if mu.len() != sigma.len() {
            return Err(Error::dim(mu.len(), sigma.len(), "prior mu vs sigma"));
        }
        if !mu.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("prior mu".into()));
        }
        if !sigma.iter().all(|v| v.is_finite() && *v >= 0.0) {
            return Err(Error::param("sigma", "scales must be finite and >= 0"));
        }
        Ok(GaussianPrior { mu, sigma })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// Deterministic seeded generator. Identical seed and identical call sequence
/// reproduce identical draws. Parallel callers must not share one generator;
/// they split children on distinct stream indices instead.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// An independent generator derived from this generator's seed and a
    /// stream index. Children with distinct indices never overlap; index 0
    /// is the parent's own stream, so children should use indices >= 1.
    pub fn child(&self, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream);
        SeededRng { seed: self.seed, inner }
    }

    /// One standard-normal draw.
    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// One uniform draw from the open interval (0, 1).
    pub fn open01(&mut self) -> f64 {
        rand::distr::Open01.sample(&mut self.inner)
    }

    /// One uniform draw from `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        rand::Rng::random(&mut self.inner)
    }

    /// Uniform integer in `[0, n)`. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        rand::Rng::random_range(&mut self.inner, 0..n)
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// Inner product of two embeddings of equal dimension.
pub fn dot(a: &Embedding, b: &Embedding) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::dim(a.dim(), b.dim(), "dot"));
    }
    Ok(a.values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| x * y)
        .sum())
}

/// Cosine similarity; rejects zero-norm operands.
pub fn cosine(a: &Embedding, b: &Embedding) -> Result<f64> {
    let d = dot(a, b)?;
    let na = a.norm();
    let nb = b.norm();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm("cosine".into()));
    }
    Ok(d / (na * nb))
}

/// Per-dimension mean and population standard deviation (divide by the set
/// size, not size - 1) of a non-empty, dimension-uniform embedding set.
pub fn estimate_gaussian_prior(set: &[Embedding]) -> Result<GaussianPrior> {
    if set.is_empty() {
        return Err(Error::EmptyInput("prior estimation needs at least one embedding".into()));
    }
    let dim = set[0].dim();
    for (i, e) in set.iter().enumerate() {
        if e.dim() != dim {
            return Err(Error::dim(dim, e.dim(), format!("prior estimation, embedding {i}")));
        }
    }
    let n = set.len() as f64;
    let mut mu = vec![0.0; dim];
    for e in set {
        for (m, v) in mu.iter_mut().zip(e.values()) {
            *m += v;
        }
    }
    for m in mu.iter_mut() {
        *m /= n;
    }
    let mut sigma = vec![0.0; dim];
    for e in set {
        for (s, (v, m)) in sigma.iter_mut().zip(e.values().iter().zip(&mu)) {
            let d = v - m;
            *s += d * d;
        }
    }
    for s in sigma.iter_mut() {
        *s = (*s / n).sqrt();
    }
    GaussianPrior::new(mu, sigma)
}

/// Draws `count` embeddings from the diagonal Gaussian `N(mu, diag(sigma^2))`.
/// Draw order is row-major: embedding by embedding, dimension by dimension.
/// With `sigma = 0` every sample equals `mu` exactly.
pub fn sample_gaussian(prior: &GaussianPrior, count: usize, rng: &mut SeededRng) -> Vec<Embedding> {
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let values: Vec<f64> = prior
            .mu
            .iter()
            .zip(&prior.sigma)
            .map(|(m, s)| m + s * rng.standard_normal())
            .collect();
        out.push(Embedding(values));
    }
    out
}

/// Per-dimension arithmetic mean of a non-empty, dimension-uniform set.
pub fn mean_of_set(set: &[Embedding]) -> Result<Embedding> {
    if set.is_empty() {
        return Err(Error::EmptyInput("mean of an empty embedding set".into()));
    }
    let dim = set[0].dim();
    let mut acc = vec![0.0; dim];
    for (i, e) in set.iter().enumerate() {
        if e.dim() != dim {
            return Err(Error::dim(dim, e.dim(), format!("mean_of_set, embedding {i}")));
        }
        for (a, v) in acc.iter_mut().zip(e.values()) {
            *a += v;
        }
    }
    let n = set.len() as f64;
    for a in acc.iter_mut() {
        *a /= n;
    }
    Ok(Embedding(acc))
}
