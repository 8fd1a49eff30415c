//! Similarity dictionary: mining the text vocabulary for phrases that are
//! confusable with a category, and sampling them as negative prompts.
//!
//! The dictionary for a category is built once, before training: the context
//! features of the category's ground-truth instances are average-pooled into
//! a query, the whole vocabulary is ranked by similarity to that query, the
//! top `K` are kept, and near-duplicates are removed by a greedy
//! non-maximum-suppression walk. During training, `sample_negatives` draws a
//! fresh (possibly empty) subset of the dictionary per step.

use serde::{Deserialize, Serialize};

use crate::data::{CategoryId, Dataset};
use crate::embedding::{cosine, dot, mean_of_set, Embedding, SeededRng};
use crate::error::{Error, Result};

/// How two embeddings are compared when ranking and deduplicating.
/// `Cosine` (the default) normalizes; `Dot` ranks by raw inner product and
/// exists for fidelity comparisons.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityMode {
    #[default]
    Cosine,
    Dot,
}

/// One phrase of the text vocabulary with its frozen embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabEntry {
    pub phrase: String,
    pub embedding: Embedding,
}

/// The full text vocabulary available for mining.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub entries: Vec<VocabEntry>,
}

impl Vocabulary {
    /// Non-empty, dimension-uniform, unique phrases, no zero-norm embeddings.
    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::EmptyInput("vocabulary has no entries".into()));
        }
        let dim = self.entries[0].embedding.dim();
        let mut seen = std::collections::BTreeSet::new();
        for (i, e) in self.entries.iter().enumerate() {
            if e.embedding.dim() != dim {
                return Err(Error::dim(dim, e.embedding.dim(), format!("entries[{i}]")));
            }
            if e.embedding.norm() == 0.0 {
                return Err(Error::ZeroNorm(format!("entries[{i}] (`{}`)", e.phrase)));
            }
            if !seen.insert(e.phrase.as_str()) {
                return Err(Error::param(
                    format!("entries[{i}].phrase"),
                    format!("duplicate phrase `{}`", e.phrase),
                ));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.entries[0].embedding.dim()
    }

    pub fn lookup(&self, phrase: &str) -> Option<&VocabEntry> {
        self.entries.iter().find(|e| e.phrase == phrase)
    }
}

/// A vocabulary entry ranked against a query.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedCandidate {
    /// Index into the vocabulary the ranking ran over.
    pub vocab_index: usize,
    pub phrase: String,
    pub embedding: Embedding,
    pub similarity: f64,
}

/// Parameters a dictionary was built with.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DictBuildParams {
    pub top_k: usize,
    pub nms_threshold: f64,
    pub mode: SimilarityMode,
}

/// One mined negative phrase with its similarity to the build query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DictEntry {
    pub phrase: String,
    pub embedding: Embedding,
    pub query_similarity: f64,
}

/// The per-category store of confusable phrases, sorted by descending
/// query similarity, with pairwise similarity at most the NMS threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityDictionary {
    pub category_id: CategoryId,
    pub build_params: DictBuildParams,
    pub entries: Vec<DictEntry>,
}

impl SimilarityDictionary {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// An empty dictionary (used when training without negative mining).
    pub fn empty(category_id: CategoryId) -> Self {
        SimilarityDictionary {
            category_id,
            build_params: DictBuildParams {
                top_k: 0,
                nms_threshold: 0.0,
                mode: SimilarityMode::Cosine,
            },
            entries: Vec::new(),
        }
    }

    /// Sorted order and the pairwise-similarity bound.
    pub fn validate(&self) -> Result<()> {
        for w in self.entries.windows(2) {
            if w[0].query_similarity < w[1].query_similarity {
                return Err(Error::param(
                    "entries",
                    "must be sorted by descending query similarity",
                ));
            }
        }
        let q = self.build_params.nms_threshold;
        for i in 0..self.entries.len() {
            for j in (i + 1)..self.entries.len() {
                let s = similarity(
                    &self.entries[i].embedding,
                    &self.entries[j].embedding,
                    self.build_params.mode,
                )?;
                // Tolerance covers floating-point noise at the boundary.
                if s > q + 1e-12 {
                    return Err(Error::param(
                        "entries",
                        format!("entries {i} and {j} have similarity {s} above threshold {q}"),
                    ));
                }
            }
        }
        Ok(())
    }
}

fn similarity(a: &Embedding, b: &Embedding, mode: SimilarityMode) -> Result<f64> {
    match mode {
        SimilarityMode::Cosine => cosine(a, b),
        SimilarityMode::Dot => dot(a, b),
    }
}

/// Average-pools a non-empty set of context features into one query feature.
pub fn pool_query_feature(context_features: &[Embedding]) -> Result<Embedding> {
    if context_features.is_empty() {
        return Err(Error::EmptyInput("pooling needs at least one context feature".into()));
    }
    mean_of_set(context_features)
}

/// Ranks the whole vocabulary against `query` and returns the top
/// `min(k, B)` candidates by descending similarity; equal similarities keep
/// the lower vocabulary index first. `k` must be at least 1.
pub fn top_k_similar(
    query: &Embedding,
    vocab: &Vocabulary,
    k: usize,
    mode: SimilarityMode,
) -> Result<Vec<RankedCandidate>> {
    if k == 0 {
        return Err(Error::param("k", "must be >= 1"));
    }
    vocab.validate()?;
    if query.dim() != vocab.dim() {
        return Err(Error::dim(vocab.dim(), query.dim(), "top_k_similar query"));
    }
    if mode == SimilarityMode::Cosine && query.norm() == 0.0 {
        return Err(Error::ZeroNorm("top_k_similar query".into()));
    }
    let mut ranked: Vec<RankedCandidate> = Vec::with_capacity(vocab.entries.len());
    for (i, e) in vocab.entries.iter().enumerate() {
        ranked.push(RankedCandidate {
            vocab_index: i,
            phrase: e.phrase.clone(),
            embedding: e.embedding.clone(),
            similarity: similarity(query, &e.embedding, mode)?,
        });
    }
    // Stable order: descending similarity, ties by ascending vocab index.
    ranked.sort_by(|a, b| {
        b.similarity
            .partial_cmp(&a.similarity)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.vocab_index.cmp(&b.vocab_index))
    });
    ranked.truncate(k);
    Ok(ranked)
}

/// Greedy near-duplicate removal: walk candidates in rank order and keep one
/// only if its similarity to every already-kept candidate is at most
/// `threshold`. Rank order is preserved; the walk is idempotent.
pub fn dedup_nms(
    candidates: &[RankedCandidate],
    threshold: f64,
    mode: SimilarityMode,
) -> Result<Vec<RankedCandidate>> {
    if !threshold.is_finite() {
        return Err(Error::param("threshold", "must be finite"));
    }
    let mut kept: Vec<RankedCandidate> = Vec::new();
    for cand in candidates {
        let mut ok = true;
        for k in &kept {
            if similarity(&cand.embedding, &k.embedding, mode)? > threshold {
                ok = false;
                break;
            }
        }
        if ok {
            kept.push(cand.clone());
        }
    }
    Ok(kept)
}

/// Builds the similarity dictionary for one category: pools the context
/// features of every ground-truth instance of that category across the
/// dataset (image order, instance order), ranks the vocabulary minus the
/// excluded phrases, and deduplicates the top `k`.
///
/// Errors: category missing from the table, no ground-truth instances of the
/// category, no context features, or an empty vocabulary after exclusion.
pub fn build_similarity_dictionary(
    dataset: &Dataset,
    vocab: &Vocabulary,
    category_id: CategoryId,
    k: usize,
    nms_threshold: f64,
    mode: SimilarityMode,
    exclude: &[String],
) -> Result<SimilarityDictionary> {
    if !dataset.categories.iter().any(|c| c.id == category_id) {
        return Err(Error::UnknownCategory {
            id: category_id.0,
            context: "build_similarity_dictionary".into(),
        });
    }
    let mut context: Vec<Embedding> = Vec::new();
    for img in &dataset.images {
        for gt in &img.gt_instances {
            if gt.category_id == category_id {
                context.extend(gt.context_features.iter().cloned());
            }
        }
    }
    if context.is_empty() {
        return Err(Error::EmptyInput(format!(
            "no context features for category {category_id} in the dataset"
        )));
    }
    let query = pool_query_feature(&context)?;

    let excluded: std::collections::BTreeSet<&str> =
        exclude.iter().map(|s| s.as_str()).collect();
    let filtered = Vocabulary {
        entries: vocab
            .entries
            .iter()
            .filter(|e| !excluded.contains(e.phrase.as_str()))
            .cloned()
            .collect(),
    };
    if filtered.entries.is_empty() {
        return Err(Error::EmptyInput("vocabulary is empty after exclusion".into()));
    }

    let ranked = top_k_similar(&query, &filtered, k, mode)?;
    let kept = dedup_nms(&ranked, nms_threshold, mode)?;
    Ok(SimilarityDictionary {
        category_id,
        build_params: DictBuildParams { top_k: k, nms_threshold, mode },
        entries: kept
            .into_iter()
            .map(|c| DictEntry {
                phrase: c.phrase,
                embedding: c.embedding,
                query_similarity: c.similarity,
            })
            .collect(),
    })
}

/// Draws this step's negative prompts. With probability `1 - neg_probability`
/// the draw is empty; otherwise a length `L` is drawn uniformly from
/// `{0, ..., min(max_len, |dict|)}` and `L` distinct entries are sampled
/// without replacement. One uniform draw decides the branch; entering it
/// costs one more draw for `L` plus the index sampling.
pub fn sample_negatives(
    dict: &SimilarityDictionary,
    max_len: usize,
    neg_probability: f64,
    rng: &mut SeededRng,
) -> Result<Vec<Embedding>> {
    if !neg_probability.is_finite() || !(0.0..=1.0).contains(&neg_probability) {
        return Err(Error::param("neg_probability", "must lie in [0, 1]"));
    }
    if rng.uniform() >= neg_probability {
        return Ok(Vec::new());
    }
    let cap = max_len.min(dict.len());
    let len = if cap == 0 { 0 } else { rng.below(cap + 1) };
    if len == 0 {
        return Ok(Vec::new());
    }
    let picked = rand::seq::index::sample(rng, dict.len(), len);
    Ok(picked
        .iter()
        .map(|i| dict.entries[i].embedding.clone())
        .collect())
}
