//! Visual prompt construction.
//!
//! A visual prompt is a small set of `N` learnable embedding rows standing in
//! for one object category. Rows are initialized from the Gaussian prior of
//! the text vocabulary and then passed through a stochastic similarity step:
//! each row is, with some probability, fused with another row by
//!
//! ```text
//! row_i' = a * row_i + sqrt(1 - a^2) * row_j        (0 <= a <= 1)
//! ```
//!
//! which preserves variance for independent rows (`a^2 + (1 - a^2) = 1`),
//! followed by a re-centering that subtracts the per-dimension drift between
//! the post-fusion mean and the pre-fusion mean, so the row-set mean is
//! unchanged. `a` close to 1 keeps rows nearly independent; smaller `a`
//! blends more shared structure into the set.

use serde::{Deserialize, Serialize};

use crate::data::CategoryId;
use crate::embedding::{sample_gaussian, Embedding, GaussianPrior, SeededRng};
use crate::error::{Error, Result};

/// Construction parameters recorded on the prompt: row count, the
/// independence coefficient `a`, and the per-row fusion probability.
/// Initialization alone records the identity values `a = 1`, probability 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PromptParams {
    pub n_vectors: usize,
    pub independence: f64,
    pub fusion_probability: f64,
}

/// A learnable category representation: `N` embedding rows plus the
/// parameters they were constructed with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualPrompt {
    pub category_id: CategoryId,
    pub vectors: Vec<Embedding>,
    pub params_used: PromptParams,
}

impl VisualPrompt {
    pub fn new(
        category_id: CategoryId,
        vectors: Vec<Embedding>,
        params_used: PromptParams,
    ) -> Result<Self> {
        if vectors.is_empty() {
            return Err(Error::EmptyInput("visual prompt needs at least one row".into()));
        }
        let dim = vectors[0].dim();
        for (i, v) in vectors.iter().enumerate() {
            if v.dim() != dim {
                return Err(Error::dim(dim, v.dim(), format!("prompt row {i}")));
            }
        }
        Ok(VisualPrompt { category_id, vectors, params_used })
    }

    pub fn n_vectors(&self) -> usize {
        self.vectors.len()
    }

    pub fn dim(&self) -> usize {
        self.vectors[0].dim()
    }
}

fn check_unit_interval(name: &str, v: f64) -> Result<()> {
    if !v.is_finite() || !(0.0..=1.0).contains(&v) {
        return Err(Error::param(name, format!("must lie in [0, 1], got {v}")));
    }
    Ok(())
}

/// Draws `n_vectors` rows i.i.d. from the prior. Row draw order is row-major,
/// so the same seed always produces the same prompt.
pub fn init_visual_prompt(
    prior: &GaussianPrior,
    n_vectors: usize,
    category_id: CategoryId,
    rng: &mut SeededRng,
) -> Result<VisualPrompt> {
    if n_vectors == 0 {
        return Err(Error::param("n_vectors", "must be >= 1"));
    }
    let vectors = sample_gaussian(prior, n_vectors, rng);
    VisualPrompt::new(
        category_id,
        vectors,
        PromptParams { n_vectors, independence: 1.0, fusion_probability: 0.0 },
    )
}

/// A prompt whose rows are all copies of one frozen text embedding — the
/// text-initialized baseline against which statistical construction is
/// compared.
pub fn text_init_prompt(
    text_embedding: &Embedding,
    n_vectors: usize,
    category_id: CategoryId,
) -> Result<VisualPrompt> {
    if n_vectors == 0 {
        return Err(Error::param("n_vectors", "must be >= 1"));
    }
    VisualPrompt::new(
        category_id,
        vec![text_embedding.clone(); n_vectors],
        PromptParams { n_vectors, independence: 1.0, fusion_probability: 0.0 },
    )
}

/// The fusion pass alone, without re-centering. Exposed separately so the
/// variance-preservation property of the fusion formula can be measured
/// directly on its output.
///
/// Rows are visited in index order. Per visited row (only when `N >= 2`):
/// one uniform draw decides whether the row fuses (`u < fusion_probability`);
/// if it does, one more uniform draw picks the donor index `j != i`. Donors
/// are always read from the pre-update snapshot of the row set; the visited
/// row itself is read in its current state (rows are written in index order,
/// so row `i` is still untouched when it is visited). With `N = 1` the pass
/// is skipped silently and consumes no randomness.
pub fn stochastic_fusion(
    prompt: &VisualPrompt,
    independence: f64,
    fusion_probability: f64,
    rng: &mut SeededRng,
) -> Result<VisualPrompt> {
    check_unit_interval("independence", independence)?;
    check_unit_interval("fusion_probability", fusion_probability)?;

    let n = prompt.n_vectors();
    let mut rows: Vec<Embedding> = prompt.vectors.clone();
    if n >= 2 {
        let snapshot = prompt.vectors.clone();
        let blend = (1.0 - independence * independence).sqrt();
        for i in 0..n {
            if rng.uniform() < fusion_probability {
                let mut j = rng.below(n - 1);
                if j >= i {
                    j += 1;
                }
                let donor = snapshot[j].values();
                let row = rows[i].values_mut();
                for (x, d) in row.iter_mut().zip(donor) {
                    *x = independence * *x + blend * *d;
                }
            }
        }
    }
    VisualPrompt::new(
        prompt.category_id,
        rows,
        PromptParams {
            n_vectors: n,
            independence,
            fusion_probability,
        },
    )
}

/// Stochastic similarity: the fusion pass followed by mean re-centering.
/// Every row has the drift `mean(after) - mean(before)` subtracted, so the
/// per-dimension mean of the row set is preserved to floating-point accuracy.
/// `independence = 1` or `fusion_probability = 0` leave the rows exactly
/// unchanged (fusion with `a = 1` is the identity; with probability 0 it
/// never triggers).
pub fn stochastic_similarity(
    prompt: &VisualPrompt,
    independence: f64,
    fusion_probability: f64,
    rng: &mut SeededRng,
) -> Result<VisualPrompt> {
    let before = row_means(&prompt.vectors);
    let mut fused = stochastic_fusion(prompt, independence, fusion_probability, rng)?;
    let after = row_means(&fused.vectors);
    for row in fused.vectors.iter_mut() {
        for (x, (m2, m1)) in row.values_mut().iter_mut().zip(after.iter().zip(&before)) {
            *x -= m2 - m1;
        }
    }
    Ok(fused)
}

fn row_means(rows: &[Embedding]) -> Vec<f64> {
    let dim = rows[0].dim();
    let mut mean = vec![0.0; dim];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r.values()) {
            *m += v;
        }
    }
    let n = rows.len() as f64;
    for m in mean.iter_mut() {
        *m /= n;
    }
    mean
}
