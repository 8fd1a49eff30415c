//! Deterministic generator of synthetic embedding-space detection tasks.
//!
//! A task plants unit-norm category archetypes in feature space, surrounds
//! each with "confuser" vocabulary entries at a controlled cosine, and emits
//! images whose proposals are noisy copies of an archetype (labeled), a
//! confuser, or a random filler (background). Because the generator records
//! exactly what it planted, tests can ask pointed questions — does the mined
//! dictionary contain the planted confusers, does a trained prompt separate
//! archetype from confuser — without any external data.

use serde::{Deserialize, Serialize};

use crate::data::{Box2D, Category, CategoryId, Dataset, GtInstance, ImageSample, Proposal};
use crate::dictionary::{VocabEntry, Vocabulary};
use crate::embedding::{Embedding, SeededRng};
use crate::error::{Error, Result};

/// Noisy context views attached to each ground-truth instance (stand-ins for
/// pre-extracted crops around the object).
const CONTEXT_FEATURES_PER_INSTANCE: usize = 3;


/// Per-image probability that a paired task's image receives one extra
/// unlabeled proposal drawn from the *other* task's categories.
const CROSS_PLANT_RATE: f64 = 0.6;

/// Archetype placement accepts pairwise cosines inside
/// `[separation - ARCHETYPE_BAND, separation]`: close enough to the bound to
/// keep categories confusable, never above it.
const ARCHETYPE_BAND: f64 = 0.25;

const MAX_ARCHETYPE_ATTEMPTS: usize = 10_000;

/// Generator parameters. `archetype_separation` bounds the pairwise cosine
/// between category archetypes; `confuser_similarity` is the exact cosine
/// between a planted confuser and its archetype; `text_alignment` is the
/// exact cosine between a category's *name* embedding in the vocabulary and
/// its visual archetype (1.0 makes them identical — the text modality then
/// carries no gap to the visual one).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TestbedSpec {
    pub dimension: usize,
    pub categories: usize,
    pub archetype_separation: f64,
    pub noise_sigma: f64,
    pub confusers_per_category: usize,
    pub confuser_similarity: f64,
    /// Fraction of background proposals that reuse a planted confuser
    /// embedding instead of a fresh random filler, when confusers exist.
    /// Kept well below the labeled share so hard negatives season the
    /// background rather than dominate it.
    pub confuser_background_share: f64,
    /// How much of a confuser's off-archetype component points along its
    /// category name's off-archetype direction (0 = random, 1 = fully).
    /// Confusable objects trip a text-prompted detector exactly because they
    /// resemble what the *name* points at rather than the category's true
    /// appearance; this dials that resemblance while the cosine to the
    /// archetype stays pinned at `confuser_similarity`. Inert when
    /// `text_alignment` is 1.0.
    pub confuser_name_affinity: f64,
    pub text_alignment: f64,
    pub images: usize,
    /// Inclusive range of base proposals per image; cross-planted extras in
    /// paired tasks come on top of this.
    pub proposals_per_image: (usize, usize),
    pub background_fraction: f64,
    pub vocab_fillers: usize,
    pub seed: u64,
}

impl Default for TestbedSpec {
    fn default() -> Self {
        Self {
            dimension: 32,
            categories: 2,
            archetype_separation: 0.5,
            noise_sigma: 0.06,
            confusers_per_category: 4,
            confuser_similarity: 0.8,
            confuser_background_share: 0.35,
            confuser_name_affinity: 0.75,
            text_alignment: 0.7,
            images: 300,
            proposals_per_image: (3, 8),
            background_fraction: 0.35,
            vocab_fillers: 40,
            seed: 0,
        }
    }
}

impl TestbedSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dimension == 0 {
            return Err(Error::param("dimension", "must be >= 1"));
        }
        if self.categories == 0 {
            return Err(Error::param("categories", "must be >= 1"));
        }
        if self.images == 0 {
            return Err(Error::param("images", "must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.confuser_similarity) {
            return Err(Error::param("confuser_similarity", "must lie in [0, 1)"));
        }
        if self.confusers_per_category > 0 && self.dimension < 2 {
            return Err(Error::param(
                "confusers_per_category",
                "confusers need dimension >= 2 for an orthogonal component",
            ));
        }
        if !(0.0..=1.0).contains(&self.text_alignment) || self.text_alignment == 0.0 {
            return Err(Error::param("text_alignment", "must lie in (0, 1]"));
        }
        if self.text_alignment < 1.0 && self.dimension < 2 {
            return Err(Error::param(
                "text_alignment",
                "a text-visual gap needs dimension >= 2 for an orthogonal component",
            ));
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return Err(Error::param("noise_sigma", "must be finite and >= 0"));
        }
        if !(0.0..=1.0).contains(&self.archetype_separation) {
            return Err(Error::param("archetype_separation", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.background_fraction) {
            return Err(Error::param("background_fraction", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.confuser_background_share) {
            return Err(Error::param("confuser_background_share", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.confuser_name_affinity) {
            return Err(Error::param("confuser_name_affinity", "must lie in [0, 1]"));
        }
        let (lo, hi) = self.proposals_per_image;
        if lo == 0 || lo > hi {
            return Err(Error::param(
                "proposals_per_image",
                format!("range ({lo}, {hi}) must satisfy 1 <= min <= max"),
            ));
        }
        Ok(())
    }
}

/// Where a generated proposal's feature came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposalOrigin {
    /// Noisy copy of this category's archetype, labeled as ground truth.
    Labeled { category_id: CategoryId },
    /// Noisy copy of a planted confuser — background, never labeled.
    Confuser { category_id: CategoryId, confuser: usize },
    /// Unlabeled instance of another task's category (paired tasks only).
    CrossPlant { category_id: CategoryId },
    /// Fresh random direction.
    Filler,
}

/// One confuser vocabulary entry and which category it shadows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedConfuser {
    pub category_id: CategoryId,
    pub vocab_index: usize,
    pub phrase: String,
    pub embedding: Embedding,
}

/// A generated task plus the complete planting record.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedTask {
    pub dataset: Dataset,
    pub vocabulary: Vocabulary,
    pub archetypes: Vec<(CategoryId, Embedding)>,
    pub planted_confusers: Vec<PlantedConfuser>,
    /// Parallel to `dataset.images[i].proposals`.
    pub proposal_origins: Vec<Vec<ProposalOrigin>>,
}

fn random_unit_vector(dim: usize, rng: &mut SeededRng) -> Embedding {
    loop {
        let raw: Vec<f64> = (0..dim).map(|_| rng.standard_normal()).collect();
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return Embedding::new(raw.into_iter().map(|v| v / norm).collect()).unwrap();
        }
    }
}

/// Draws unit archetypes whose pairwise cosines land in
/// `[separation - ARCHETYPE_BAND, separation]` by rejection sampling.
fn draw_archetypes(spec: &TestbedSpec, rng: &mut SeededRng) -> Result<Vec<Embedding>> {
    let lo = spec.archetype_separation - ARCHETYPE_BAND;
    let mut archetypes: Vec<Embedding> = Vec::with_capacity(spec.categories);
    for k in 0..spec.categories {
        let mut attempts = 0;
        loop {
            attempts += 1;
            if attempts > MAX_ARCHETYPE_ATTEMPTS {
                return Err(Error::param(
                    "archetype_separation",
                    format!(
                        "could not place archetype {} of {} with pairwise cosine in \
                         [{lo:.3}, {:.3}] in {} dimensions after {MAX_ARCHETYPE_ATTEMPTS} attempts",
                        k + 1,
                        spec.categories,
                        spec.archetype_separation,
                        spec.dimension
                    ),
                ));
            }
            let candidate = random_unit_vector(spec.dimension, rng);
            let ok = archetypes.iter().all(|a| {
                let c = crate::embedding::dot(a, &candidate).unwrap();
                lo <= c && c <= spec.archetype_separation
            });
            if ok {
                archetypes.push(candidate);
                break;
            }
        }
    }
    Ok(archetypes)
}

/// Random unit vector orthogonal to `base` (assumed unit-norm), by drawing,
/// de-projecting, and renormalizing.
fn random_orthogonal_unit(base: &Embedding, rng: &mut SeededRng) -> Vec<f64> {
    loop {
        let raw = random_unit_vector(base.dim(), rng);
        let proj = crate::embedding::dot(&raw, base).unwrap();
        let mut ortho: Vec<f64> = raw
            .values()
            .iter()
            .zip(base.values())
            .map(|(r, b)| r - proj * b)
            .collect();
        let norm = ortho.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-9 {
            for v in &mut ortho {
                *v /= norm;
            }
            return ortho;
        }
        // drew (anti)parallel to the base; retry
    }
}

/// `cosine * base + sqrt(1 - cosine^2) * ortho` for a unit `ortho` ⊥ `base`,
/// hitting the target cosine exactly.
fn compose_at_cosine(base: &Embedding, cosine: f64, ortho: &[f64]) -> Embedding {
    let coeff = (1.0 - cosine * cosine).sqrt();
    let values = base
        .values()
        .iter()
        .zip(ortho)
        .map(|(b, o)| cosine * b + coeff * o)
        .collect();
    Embedding::new(values).unwrap()
}

/// Off-archetype direction for one confuser: a blend of the category name's
/// off-archetype direction `name_ortho` (weight `affinity`) with a fresh
/// random direction orthogonal to both. Falls back to `name_ortho` alone
/// when the dimension leaves no room for a third independent direction.
fn confuser_ortho(
    archetype: &Embedding,
    name_ortho: Option<&[f64]>,
    affinity: f64,
    rng: &mut SeededRng,
) -> Vec<f64> {
    let Some(w) = name_ortho else {
        return random_orthogonal_unit(archetype, rng);
    };
    if affinity <= 0.0 {
        return random_orthogonal_unit(archetype, rng);
    }
    if affinity >= 1.0 {
        return w.to_vec();
    }
    for _ in 0..MAX_ARCHETYPE_ATTEMPTS {
        let x = random_orthogonal_unit(archetype, rng);
        let along: f64 = x.iter().zip(w).map(|(xi, wi)| xi * wi).sum();
        let mut resid: Vec<f64> = x.iter().zip(w).map(|(xi, wi)| xi - along * wi).collect();
        let norm = resid.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= 1e-9 {
            continue; // complement of {archetype, name} is empty or unlucky
        }
        for v in &mut resid {
            *v /= norm;
        }
        let spread = (1.0 - affinity * affinity).sqrt();
        return w
            .iter()
            .zip(&resid)
            .map(|(wi, ri)| affinity * wi + spread * ri)
            .collect();
    }
    w.to_vec()
}

fn noisy_copy(base: &Embedding, sigma: f64, rng: &mut SeededRng) -> Embedding {
    let values = base.values().iter().map(|v| v + sigma * rng.standard_normal()).collect();
    Embedding::new(values).unwrap()
}

/// Random non-degenerate rectangle inside the unit square. Draw order:
/// width, height, x1, y1.
fn random_box(rng: &mut SeededRng) -> Box2D {
    let w = 0.1 + 0.2 * rng.uniform();
    let h = 0.1 + 0.2 * rng.uniform();
    let x1 = rng.uniform() * (1.0 - w);
    let y1 = rng.uniform() * (1.0 - h);
    Box2D::new(x1, y1, x1 + w, y1 + h).unwrap()
}

fn category_name(id: CategoryId) -> String {
    format!("category_{id}")
}

fn build_vocabulary(
    spec: &TestbedSpec,
    categories: &[(CategoryId, Embedding)],
    rng: &mut SeededRng,
) -> (Vocabulary, Vec<PlantedConfuser>) {
    let mut entries = Vec::new();
    let mut name_orthos: Vec<Option<Vec<f64>>> = Vec::with_capacity(categories.len());
    for (id, archetype) in categories {
        // The name embedding is the text modality's (imperfect) view of the
        // visual archetype; at alignment 1.0 the two coincide.
        if spec.text_alignment >= 1.0 {
            entries.push(VocabEntry { phrase: category_name(*id), embedding: archetype.clone() });
            name_orthos.push(None);
        } else {
            let ortho = random_orthogonal_unit(archetype, rng);
            let embedding = compose_at_cosine(archetype, spec.text_alignment, &ortho);
            entries.push(VocabEntry { phrase: category_name(*id), embedding });
            name_orthos.push(Some(ortho));
        }
    }
    let mut planted = Vec::new();
    for ((id, archetype), name_ortho) in categories.iter().zip(&name_orthos) {
        for c in 0..spec.confusers_per_category {
            let ortho = confuser_ortho(
                archetype,
                name_ortho.as_deref(),
                spec.confuser_name_affinity,
                rng,
            );
            let embedding = compose_at_cosine(archetype, spec.confuser_similarity, &ortho);
            planted.push(PlantedConfuser {
                category_id: *id,
                vocab_index: entries.len(),
                phrase: format!("confuser_{id}_{c}"),
                embedding: embedding.clone(),
            });
            entries.push(VocabEntry { phrase: format!("confuser_{id}_{c}"), embedding });
        }
    }
    for f in 0..spec.vocab_fillers {
        entries.push(VocabEntry {
            phrase: format!("filler_{f}"),
            embedding: random_unit_vector(spec.dimension, rng),
        });
    }
    (Vocabulary { entries }, planted)
}

/// Generates the images of one task. `cross` optionally plants unlabeled
/// instances of foreign categories (the paired-task confusion mechanism).
#[allow(clippy::too_many_arguments)]
fn generate_images(
    spec: &TestbedSpec,
    categories: &[(CategoryId, Embedding)],
    confusers: &[PlantedConfuser],
    cross: Option<&[(CategoryId, Embedding)]>,
    image_id_base: u64,
    rng: &mut SeededRng,
) -> (Vec<ImageSample>, Vec<Vec<ProposalOrigin>>) {
    let (lo, hi) = spec.proposals_per_image;
    let mut images = Vec::with_capacity(spec.images);
    let mut origins = Vec::with_capacity(spec.images);
    for i in 0..spec.images {
        let mut proposals = Vec::new();
        let mut gt_instances = Vec::new();
        let mut image_origins = Vec::new();
        let n_props = lo + rng.below(hi - lo + 1);
        for _ in 0..n_props {
            let box2d = random_box(rng);
            if rng.uniform() < spec.background_fraction {
                // background: planted confuser or fresh filler
                let use_confuser =
                    !confusers.is_empty() && rng.uniform() < spec.confuser_background_share;
                let (base, origin) = if use_confuser {
                    let pick = &confusers[rng.below(confusers.len())];
                    let index = pick.vocab_index;
                    (
                        pick.embedding.clone(),
                        ProposalOrigin::Confuser {
                            category_id: pick.category_id,
                            confuser: index,
                        },
                    )
                } else {
                    (random_unit_vector(spec.dimension, rng), ProposalOrigin::Filler)
                };
                proposals.push(Proposal {
                    feature: noisy_copy(&base, spec.noise_sigma, rng),
                    box2d,
                    assigned: None,
                });
                image_origins.push(origin);
            } else {
                let (id, archetype) = &categories[rng.below(categories.len())];
                let feature = noisy_copy(archetype, spec.noise_sigma, rng);
                let context = (0..CONTEXT_FEATURES_PER_INSTANCE)
                    .map(|_| noisy_copy(&feature, spec.noise_sigma, rng))
                    .collect();
                proposals.push(Proposal {
                    feature,
                    box2d,
                    assigned: Some(*id),
                });
                gt_instances.push(GtInstance {
                    category_id: *id,
                    box2d,
                    context_features: context,
                });
                image_origins.push(ProposalOrigin::Labeled { category_id: *id });
            }
        }
        if let Some(foreign) = cross {
            if rng.uniform() < CROSS_PLANT_RATE {
                let (id, archetype) = &foreign[rng.below(foreign.len())];
                proposals.push(Proposal {
                    feature: noisy_copy(archetype, spec.noise_sigma, rng),
                    box2d: random_box(rng),
                    assigned: None,
                });
                image_origins.push(ProposalOrigin::CrossPlant { category_id: *id });
            }
        }
        images.push(ImageSample {
            image_id: image_id_base + i as u64,
            proposals,
            gt_instances,
        });
        origins.push(image_origins);
    }

    // Every category must own at least one ground-truth instance; at tiny
    // image counts the background coin can starve one, so plant a labeled
    // proposal deterministically.
    for (k, (id, archetype)) in categories.iter().enumerate() {
        let covered = images.iter().any(|img| {
            img.gt_instances.iter().any(|gt| gt.category_id == *id)
        });
        if !covered {
            let at = k % images.len();
            let box2d = random_box(rng);
            let feature = noisy_copy(archetype, spec.noise_sigma, rng);
            let context = (0..CONTEXT_FEATURES_PER_INSTANCE)
                .map(|_| noisy_copy(&feature, spec.noise_sigma, rng))
                .collect();
            images[at].proposals.push(Proposal {
                feature,
                box2d,
                assigned: Some(*id),
            });
            images[at].gt_instances.push(GtInstance {
                category_id: *id,
                box2d,
                context_features: context,
            });
            origins[at].push(ProposalOrigin::Labeled { category_id: *id });
        }
    }
    (images, origins)
}

fn assemble(
    spec: &TestbedSpec,
    categories: Vec<(CategoryId, Embedding)>,
    vocabulary: Vocabulary,
    planted: Vec<PlantedConfuser>,
    cross: Option<&[(CategoryId, Embedding)]>,
    image_id_base: u64,
    rng: &mut SeededRng,
) -> Result<GeneratedTask> {
    let (images, origins) =
        generate_images(spec, &categories, &planted, cross, image_id_base, rng);
    let dataset = Dataset {
        dimension: spec.dimension,
        categories: categories
            .iter()
            .map(|(id, _)| Category { id: *id, name: category_name(*id) })
            .collect(),
        images,
    };
    dataset.validate()?;
    vocabulary.validate()?;
    Ok(GeneratedTask {
        dataset,
        vocabulary,
        archetypes: categories,
        planted_confusers: planted,
        proposal_origins: origins,
    })
}

/// Generates one self-contained task. The caller seeds the generator
/// (typically from `spec.seed`); identical (spec, rng state) reproduce the
/// task exactly.
pub fn generate(spec: &TestbedSpec, rng: &mut SeededRng) -> Result<GeneratedTask> {
    spec.validate()?;
    let archetypes = draw_archetypes(spec, rng)?;
    let categories: Vec<(CategoryId, Embedding)> = archetypes
        .into_iter()
        .enumerate()
        .map(|(k, a)| (CategoryId(k as u32 + 1), a))
        .collect();
    let (vocabulary, planted) = build_vocabulary(spec, &categories, rng);
    assemble(spec, categories, vocabulary, planted, None, 0, rng)
}

/// Two tasks over disjoint category and image ids that share one vocabulary
/// and one embedding space err on the side of confusion: each task's images
/// also contain unlabeled instances of the other task's categories, and the
/// background confusable objects are drawn from the pooled lookalikes of
/// both tasks, so prompts evaluated jointly meet objects their own task
/// never labeled.
pub fn make_paired_tasks(
    spec: &TestbedSpec,
    rng: &mut SeededRng,
) -> Result<(GeneratedTask, GeneratedTask)> {
    spec.validate()?;
    if spec.categories < 2 {
        return Err(Error::param("categories", "paired tasks need at least 2 categories"));
    }
    let archetypes = draw_archetypes(spec, rng)?;
    let all: Vec<(CategoryId, Embedding)> = archetypes
        .into_iter()
        .enumerate()
        .map(|(k, a)| (CategoryId(k as u32 + 1), a))
        .collect();
    let (vocabulary, planted) = build_vocabulary(spec, &all, rng);
    let half = spec.categories.div_ceil(2);
    let (cats_a, cats_b) = all.split_at(half);
    // Both tasks draw background confusable objects from the full shared
    // pool: lookalikes of task A's categories also turn up (unlabeled) in
    // task B's images and vice versa, so combined inference meets the same
    // hard negatives each prompt was trained against.
    let task_a = assemble(
        spec,
        cats_a.to_vec(),
        vocabulary.clone(),
        planted.clone(),
        Some(cats_b),
        0,
        rng,
    )?;
    let task_b = assemble(
        spec,
        cats_b.to_vec(),
        vocabulary,
        planted,
        Some(cats_a),
        spec.images as u64,
        rng,
    )?;
    Ok((task_a, task_b))
}

/// Splits a dataset's images at `train_images` into (train, eval) parts that
/// share the category table.
pub fn split_dataset(dataset: &Dataset, train_images: usize) -> Result<(Dataset, Dataset)> {
    if train_images == 0 || train_images >= dataset.images.len() {
        return Err(Error::param(
            "train_images",
            format!(
                "must satisfy 1 <= n < {} to leave both splits non-empty",
                dataset.images.len()
            ),
        ));
    }
    let train = Dataset {
        dimension: dataset.dimension,
        categories: dataset.categories.clone(),
        images: dataset.images[..train_images].to_vec(),
    };
    let eval = Dataset {
        dimension: dataset.dimension,
        categories: dataset.categories.clone(),
        images: dataset.images[train_images..].to_vec(),
    };
    Ok((train, eval))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::cosine;

    fn small_spec() -> TestbedSpec {
        TestbedSpec {
            dimension: 16,
            categories: 2,
            images: 30,
            proposals_per_image: (2, 5),
            vocab_fillers: 10,
            ..TestbedSpec::default()
        }
    }

    #[test]
    fn noiseless_task_reproduces_archetypes_exactly() {
        let spec = TestbedSpec {
            noise_sigma: 0.0,
            confusers_per_category: 0,
            ..small_spec()
        };
        let task = generate(&spec, &mut SeededRng::new(5)).unwrap();
        for (img, origins) in task.dataset.images.iter().zip(&task.proposal_origins) {
            for (prop, origin) in img.proposals.iter().zip(origins) {
                if let ProposalOrigin::Labeled { category_id } = origin {
                    let archetype = &task
                        .archetypes
                        .iter()
                        .find(|(id, _)| id == category_id)
                        .unwrap()
                        .1;
                    assert_eq!(prop.feature, *archetype);
                    assert_eq!(prop.assigned, Some(*category_id));
                }
            }
        }
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let spec = small_spec();
        let a = generate(&spec, &mut SeededRng::new(42)).unwrap();
        let b = generate(&spec, &mut SeededRng::new(42)).unwrap();
        assert_eq!(a, b);
        let c = generate(&spec, &mut SeededRng::new(43)).unwrap();
        assert_ne!(a.dataset, c.dataset);
    }

    #[test]
    fn planted_confusers_hit_the_target_cosine() {
        let spec = small_spec();
        let task = generate(&spec, &mut SeededRng::new(7)).unwrap();
        assert_eq!(
            task.planted_confusers.len(),
            spec.categories * spec.confusers_per_category
        );
        for planted in &task.planted_confusers {
            let archetype = &task
                .archetypes
                .iter()
                .find(|(id, _)| *id == planted.category_id)
                .unwrap()
                .1;
            let c = cosine(&planted.embedding, archetype).unwrap();
            assert!(
                (c - spec.confuser_similarity).abs() < 1e-9,
                "confuser {} cosine {c}",
                planted.phrase
            );
            // the record points at the right vocabulary entry
            let entry = &task.vocabulary.entries[planted.vocab_index];
            assert_eq!(entry.phrase, planted.phrase);
            assert_eq!(entry.embedding, planted.embedding);
        }
    }

    #[test]
    fn name_embeddings_sit_at_the_text_alignment_cosine() {
        let spec = small_spec();
        let task = generate(&spec, &mut SeededRng::new(17)).unwrap();
        for (id, archetype) in &task.archetypes {
            let entry = task.vocabulary.lookup(&category_name(*id)).unwrap();
            let c = cosine(&entry.embedding, archetype).unwrap();
            assert!(
                (c - spec.text_alignment).abs() < 1e-9,
                "category {id} name cosine {c}, want {}",
                spec.text_alignment
            );
            assert!((entry.embedding.norm() - 1.0).abs() < 1e-9);
        }

        // at alignment 1.0 the text and visual modalities coincide
        let aligned = TestbedSpec { text_alignment: 1.0, ..small_spec() };
        let task = generate(&aligned, &mut SeededRng::new(17)).unwrap();
        for (id, archetype) in &task.archetypes {
            let entry = task.vocabulary.lookup(&category_name(*id)).unwrap();
            assert_eq!(&entry.embedding, archetype);
        }
    }

    #[test]
    fn confusers_lean_toward_the_name_embedding() {
        let spec = small_spec();
        let task = generate(&spec, &mut SeededRng::new(23)).unwrap();
        // cos(confuser, name) = c·g + sqrt(1-c^2)·sqrt(1-g^2)·affinity, all
        // three factors planted exactly
        let c = spec.confuser_similarity;
        let g = spec.text_alignment;
        let want = c * g
            + (1.0 - c * c).sqrt() * (1.0 - g * g).sqrt() * spec.confuser_name_affinity;
        for planted in &task.planted_confusers {
            let id = planted.category_id;
            let name = task.vocabulary.lookup(&category_name(id)).unwrap();
            let got = cosine(&planted.embedding, &name.embedding).unwrap();
            assert!(
                (got - want).abs() < 1e-9,
                "confuser {} to name cosine {got}, want {want}",
                planted.phrase
            );
        }

        // with a random (zero-affinity) tilt the lean disappears on average
        let spread = TestbedSpec { confuser_name_affinity: 0.0, ..small_spec() };
        let task = generate(&spread, &mut SeededRng::new(23)).unwrap();
        let mean: f64 = task
            .planted_confusers
            .iter()
            .map(|p| {
                let name = task.vocabulary.lookup(&category_name(p.category_id)).unwrap();
                cosine(&p.embedding, &name.embedding).unwrap()
            })
            .sum::<f64>()
            / task.planted_confusers.len() as f64;
        assert!((mean - c * g).abs() < 0.15, "mean cosine {mean} should hover near {}", c * g);
    }

    #[test]
    fn archetypes_respect_the_separation_bound() {
        for seed in 0..5 {
            let task = generate(&small_spec(), &mut SeededRng::new(seed)).unwrap();
            for (i, (_, a)) in task.archetypes.iter().enumerate() {
                assert!((a.norm() - 1.0).abs() < 1e-12);
                for (_, b) in &task.archetypes[i + 1..] {
                    let c = cosine(a, b).unwrap();
                    assert!(c <= small_spec().archetype_separation + 1e-12, "cosine {c}");
                }
            }
        }
    }

    #[test]
    fn infeasible_archetype_spec_errors_with_the_bound() {
        let spec = TestbedSpec {
            dimension: 2,
            categories: 8,
            archetype_separation: 0.05,
            confusers_per_category: 0,
            ..small_spec()
        };
        let err = generate(&spec, &mut SeededRng::new(1)).unwrap_err();
        let text = err.to_string();
        assert!(text.contains("archetype"), "unexpected error: {text}");
    }

    #[test]
    fn labeled_features_stay_closest_to_their_own_archetype() {
        // noise well below the archetype gap
        let spec = TestbedSpec { noise_sigma: 0.02, ..small_spec() };
        let task = generate(&spec, &mut SeededRng::new(3)).unwrap();
        for img in &task.dataset.images {
            for prop in &img.proposals {
                let Some(own) = prop.assigned else { continue };
                let own_cos = cosine(
                    &prop.feature,
                    &task.archetypes.iter().find(|(id, _)| *id == own).unwrap().1,
                )
                .unwrap();
                for (other, archetype) in &task.archetypes {
                    if *other != own {
                        let c = cosine(&prop.feature, archetype).unwrap();
                        assert!(own_cos > c, "labeled {own} closer to {other}");
                    }
                }
            }
        }
    }

    #[test]
    fn planting_record_covers_every_proposal() {
        let task = generate(&small_spec(), &mut SeededRng::new(11)).unwrap();
        assert_eq!(task.proposal_origins.len(), task.dataset.images.len());
        for (img, origins) in task.dataset.images.iter().zip(&task.proposal_origins) {
            assert_eq!(img.proposals.len(), origins.len());
            for (prop, origin) in img.proposals.iter().zip(origins) {
                match origin {
                    ProposalOrigin::Labeled { category_id } => {
                        assert_eq!(prop.assigned, Some(*category_id));
                    }
                    _ => assert_eq!(prop.assigned, None),
                }
            }
            for gt in &img.gt_instances {
                assert_eq!(gt.context_features.len(), CONTEXT_FEATURES_PER_INSTANCE);
            }
        }
        // structural validity of everything generated
        task.dataset.validate().unwrap();
        task.vocabulary.validate().unwrap();
    }

    #[test]
    fn proposals_per_image_range_is_respected() {
        let spec = small_spec();
        let task = generate(&spec, &mut SeededRng::new(13)).unwrap();
        let (lo, hi) = spec.proposals_per_image;
        for img in &task.dataset.images {
            // the zero-GT fix-up may add one labeled proposal
            assert!(img.proposals.len() >= lo && img.proposals.len() <= hi + 1);
        }
    }

    #[test]
    fn starved_categories_get_a_deterministic_gt_fixup() {
        let spec = TestbedSpec {
            images: 1,
            categories: 2,
            background_fraction: 1.0,
            proposals_per_image: (1, 1),
            ..small_spec()
        };
        let task = generate(&spec, &mut SeededRng::new(2)).unwrap();
        let with_gt = task.dataset.categories_with_gt();
        assert_eq!(with_gt.len(), 2, "fix-up must cover all categories");
    }

    #[test]
    fn paired_tasks_are_disjoint_and_share_the_vocabulary() {
        let spec = small_spec();
        let (a, b) = make_paired_tasks(&spec, &mut SeededRng::new(21)).unwrap();
        assert_eq!(a.vocabulary, b.vocabulary);
        let ids_a: Vec<_> = a.dataset.categories.iter().map(|c| c.id).collect();
        let ids_b: Vec<_> = b.dataset.categories.iter().map(|c| c.id).collect();
        assert!(ids_a.iter().all(|id| !ids_b.contains(id)));
        let imgs_a: std::collections::BTreeSet<_> =
            a.dataset.images.iter().map(|i| i.image_id).collect();
        assert!(b.dataset.images.iter().all(|i| !imgs_a.contains(&i.image_id)));
        // merging must therefore succeed
        Dataset::merge(&[a.dataset.clone(), b.dataset.clone()]).unwrap();

        // determinism of the pair
        let (a2, b2) = make_paired_tasks(&spec, &mut SeededRng::new(21)).unwrap();
        assert_eq!((a, b), (a2, b2));
    }

    #[test]
    fn paired_tasks_cross_plant_at_least_half_the_images() {
        let spec = TestbedSpec { images: 100, ..small_spec() };
        let (a, b) = make_paired_tasks(&spec, &mut SeededRng::new(8)).unwrap();
        for task in [&a, &b] {
            let planted = task
                .proposal_origins
                .iter()
                .filter(|origins| {
                    origins.iter().any(|o| matches!(o, ProposalOrigin::CrossPlant { .. }))
                })
                .count();
            assert!(
                planted * 2 >= task.dataset.images.len(),
                "only {planted} of {} images carry a cross-plant",
                task.dataset.images.len()
            );
        }
        // cross-plants reference the other task's categories
        for origins in &a.proposal_origins {
            for origin in origins {
                if let ProposalOrigin::CrossPlant { category_id } = origin {
                    assert!(b.dataset.categories.iter().any(|c| c.id == *category_id));
                }
            }
        }
    }

    #[test]
    fn split_dataset_partitions_images() {
        let task = generate(&small_spec(), &mut SeededRng::new(31)).unwrap();
        let (train, eval) = split_dataset(&task.dataset, 20).unwrap();
        assert_eq!(train.images.len(), 20);
        assert_eq!(eval.images.len(), task.dataset.images.len() - 20);
        assert_eq!(train.categories, task.dataset.categories);
        assert_eq!(eval.categories, task.dataset.categories);
        assert_eq!(train.images[..], task.dataset.images[..20]);
        assert!(split_dataset(&task.dataset, 0).is_err());
        assert!(split_dataset(&task.dataset, task.dataset.images.len()).is_err());
    }

    #[test]
    fn spec_validation_rejects_bad_fields() {
        let ok = small_spec();
        assert!(ok.validate().is_ok());
        assert!(TestbedSpec { dimension: 0, ..ok.clone() }.validate().is_err());
        assert!(TestbedSpec { categories: 0, ..ok.clone() }.validate().is_err());
        assert!(TestbedSpec { images: 0, ..ok.clone() }.validate().is_err());
        assert!(TestbedSpec { confuser_similarity: 1.0, ..ok.clone() }.validate().is_err());
        assert!(TestbedSpec { noise_sigma: -0.1, ..ok.clone() }.validate().is_err());
        assert!(TestbedSpec { background_fraction: 1.5, ..ok.clone() }.validate().is_err());
        assert!(TestbedSpec { proposals_per_image: (0, 3), ..ok.clone() }.validate().is_err());
        assert!(TestbedSpec { proposals_per_image: (4, 3), ..ok.clone() }.validate().is_err());
        assert!(TestbedSpec { text_alignment: 0.0, ..ok.clone() }.validate().is_err());
        assert!(TestbedSpec { text_alignment: 1.2, ..ok.clone() }.validate().is_err());
        assert!(
            TestbedSpec { dimension: 1, confusers_per_category: 1, ..ok }.validate().is_err()
        );
        assert!(make_paired_tasks(
            &TestbedSpec { categories: 1, ..small_spec() },
            &mut SeededRng::new(0)
        )
        .is_err());
    }
}
