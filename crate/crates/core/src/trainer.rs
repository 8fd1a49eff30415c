//! The training loop: sample negative prompts, score regions with Gumbel
//! noise, take the alignment loss, push analytic gradients into the prompt
//! rows, and apply AdamW. Everything else — region features, boxes,
//! assignments, dictionary entries — stays frozen.
//!
//! Randomness is consumed in a fixed, documented order so a (dataset,
//! config, seed) triple reproduces training bit for bit: per epoch one image
//! shuffle; per batch first the negative draws (prompt order), then per image
//! in batch order the forward pass's Gumbel noise. The gradient chain is
//! `dL/dE_m = dL/dS * w_m * (1 + (W_m - S)/tau) * f` for each region feature
//! `f`, which the end-to-end finite-difference check validates.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{Box2D, Category, CategoryId, Dataset, ImageSample};
use crate::dictionary::{sample_negatives, SimilarityDictionary, SimilarityMode, Vocabulary};
use crate::embedding::{estimate_gaussian_prior, Embedding, SeededRng};
use crate::error::{Error, Result};
use crate::loss::{alignment_loss, iou, localization_loss, AlignmentForm, RegionTarget};
use crate::optim::{AdamW, AdamWParams};
use crate::prompt::{init_visual_prompt, stochastic_similarity, VisualPrompt};
use crate::scoring::{detector_forward, CategorySlot, ScoreMode};

/// Every scalar the pipeline needs, with the adopted defaults. Probabilities
/// and thresholds live in [0, 1]; `learning_rate` may be 0 for an identity
/// diagnostic run; `temperature` must be positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Rows per visual prompt (N).
    pub n_vectors: usize,
    /// Fusion mixing coefficient (a); 1 keeps rows fully independent.
    pub independence: f64,
    /// Probability that a step draws any negative prompts (p1).
    pub neg_probability: f64,
    /// Per-row fusion trigger probability (p2).
    pub fusion_probability: f64,
    /// Dictionary dedup threshold (q).
    pub nms_threshold: f64,
    /// Dictionary candidate pool size (K).
    pub top_k: usize,
    /// Upper bound on negatives drawn per step (Z).
    pub neg_max_len: usize,
    /// Gumbel-softmax temperature.
    pub temperature: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Which per-category term the alignment loss uses.
    pub loss_form: AlignmentForm,
    /// Similarity measure for dictionary construction.
    pub similarity_mode: SimilarityMode,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_vectors: 20,
            independence: 0.99,
            neg_probability: 0.7,
            fusion_probability: 0.5,
            nms_threshold: 0.7,
            top_k: 50,
            neg_max_len: 20,
            temperature: 1.0,
            learning_rate: 0.1,
            epochs: 12,
            batch_size: 16,
            seed: 0,
            loss_form: AlignmentForm::default(),
            similarity_mode: SimilarityMode::default(),
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("independence", self.independence),
            ("neg_probability", self.neg_probability),
            ("fusion_probability", self.fusion_probability),
            ("nms_threshold", self.nms_threshold),
        ] {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(Error::param(name, format!("must lie in [0, 1], got {v}")));
            }
        }
        if self.n_vectors == 0 {
            return Err(Error::param("n_vectors", "must be >= 1"));
        }
        if self.top_k == 0 {
            return Err(Error::param("top_k", "must be >= 1"));
        }
        if !self.temperature.is_finite() || self.temperature <= 0.0 {
            return Err(Error::param("temperature", "must be finite and > 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::param("batch_size", "must be >= 1"));
        }
        self.adamw_params().validate()
    }

    pub fn adamw_params(&self) -> AdamWParams {
        AdamWParams {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
            weight_decay: self.weight_decay,
        }
    }
}

/// Loss terms of one epoch. The localization terms are monitoring only:
/// boxes are frozen pass-throughs, so they are constants of the dataset and
/// carry no gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub alignment: f64,
    pub l1_box: f64,
    pub giou_loss: f64,
}

/// Training output: the config echo (which carries the seed), the loss
/// curve, and the final prompts. Wall-clock goes to stderr progress lines
/// only, keeping the report a pure function of (dataset, config, seed).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub epoch_losses: Vec<EpochStats>,
    pub steps: usize,
    pub prompts: Vec<VisualPrompt>,
}

/// Result of the end-to-end finite-difference validation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub checked_parameters: usize,
}

/// The canonical construction step: estimate a Gaussian prior from the
/// vocabulary's text embeddings, initialize each category's rows from it,
/// then apply stochastic similarity fusion. Consumes randomness per category
/// in table order (initialization first, then fusion).
pub fn construct_prompts(
    categories: &[Category],
    vocabulary: &Vocabulary,
    config: &TrainConfig,
    rng: &mut SeededRng,
) -> Result<Vec<VisualPrompt>> {
    config.validate()?;
    vocabulary.validate()?;
    let embeddings: Vec<Embedding> =
        vocabulary.entries.iter().map(|e| e.embedding.clone()).collect();
    let prior = estimate_gaussian_prior(&embeddings)?;
    let mut prompts = Vec::with_capacity(categories.len());
    for category in categories {
        let initialized = init_visual_prompt(&prior, config.n_vectors, category.id, rng)?;
        prompts.push(stochastic_similarity(
            &initialized,
            config.independence,
            config.fusion_probability,
            rng,
        )?);
    }
    Ok(prompts)
}

/// Checks prompts and dictionaries against the dataset and each other;
/// returns the dictionaries re-ordered to match the prompt order.
fn validate_setup<'a>(
    dataset: &Dataset,
    prompts: &[VisualPrompt],
    dictionaries: &'a [SimilarityDictionary],
) -> Result<Vec<&'a SimilarityDictionary>> {
    if prompts.is_empty() {
        return Err(Error::EmptyInput("training needs at least one prompt".into()));
    }
    if dataset.images.is_empty() {
        return Err(Error::EmptyInput("training needs at least one image".into()));
    }
    let mut seen = std::collections::BTreeSet::new();
    for prompt in prompts {
        if !seen.insert(prompt.category_id) {
            return Err(Error::DuplicateCategory {
                id: prompt.category_id.0,
                context: "training prompts".into(),
            });
        }
        if prompt.dim() != dataset.dimension {
            return Err(Error::dim(
                dataset.dimension,
                prompt.dim(),
                format!("prompt for category {}", prompt.category_id),
            ));
        }
        if !dataset.categories.iter().any(|c| c.id == prompt.category_id) {
            return Err(Error::UnknownCategory {
                id: prompt.category_id.0,
                context: "training prompts".into(),
            });
        }
    }
    if dictionaries.len() != prompts.len() {
        return Err(Error::dim(prompts.len(), dictionaries.len(), "dictionaries per prompt"));
    }
    let mut ordered = Vec::with_capacity(prompts.len());
    for prompt in prompts {
        let matches: Vec<&SimilarityDictionary> = dictionaries
            .iter()
            .filter(|d| d.category_id == prompt.category_id)
            .collect();
        match matches.as_slice() {
            [one] => {
                for (i, entry) in one.entries.iter().enumerate() {
                    if entry.embedding.dim() != dataset.dimension {
                        return Err(Error::dim(
                            dataset.dimension,
                            entry.embedding.dim(),
                            format!("dictionary {} entry {i}", prompt.category_id),
                        ));
                    }
                }
                ordered.push(*one);
            }
            [] => {
                return Err(Error::param(
                    "dictionaries",
                    format!("no dictionary for category {}", prompt.category_id),
                ))
            }
            _ => {
                return Err(Error::DuplicateCategory {
                    id: prompt.category_id.0,
                    context: "training dictionaries".into(),
                })
            }
        }
    }
    Ok(ordered)
}

/// Forward + loss + analytic prompt gradients over one batch of images.
///
/// Gumbel noise is drawn by the forward pass per (image, proposal, slot,
/// row); the draw count never depends on parameter values, so replaying the
/// same generator state replays the noise — which is what the finite
/// -difference check exploits. Returns the batch alignment loss, one
/// gradient block per prompt (rows × dims), and the region count.
fn eval_batch(
    images: &[&ImageSample],
    prompts: &[VisualPrompt],
    negatives: &[Embedding],
    tau: f64,
    form: AlignmentForm,
    rng: &mut SeededRng,
) -> Result<(f64, Vec<Vec<Vec<f64>>>, usize)> {
    let d_p = prompts.len();
    let d_n = negatives.len();
    let mut slots: Vec<CategorySlot> =
        prompts.iter().cloned().map(CategorySlot::Visual).collect();
    slots.extend(negatives.iter().cloned().map(CategorySlot::NegativeText));
    let slot_of: std::collections::BTreeMap<CategoryId, usize> = prompts
        .iter()
        .enumerate()
        .map(|(i, p)| (p.category_id, i))
        .collect();

    let mut logits: Vec<Vec<f64>> = Vec::new();
    let mut targets: Vec<RegionTarget> = Vec::new();
    let mut cells_by_region = Vec::new();
    for image in images {
        let fwd = detector_forward(image, &slots, ScoreMode::Train, tau, rng)?;
        for (proposal, region) in image.proposals.iter().zip(fwd.regions) {
            logits.push(region.cells.iter().map(|c| c.logit).collect());
            targets.push(match proposal.assigned {
                Some(id) => {
                    let slot = *slot_of.get(&id).ok_or_else(|| Error::UnknownCategory {
                        id: id.0,
                        context: "proposal assigned to a category without a prompt".into(),
                    })?;
                    RegionTarget::Category(slot)
                }
                None => RegionTarget::Background,
            });
            cells_by_region.push((proposal.feature.clone(), region.cells));
        }
    }
    let regions = logits.len();
    let (loss, grad_s) = alignment_loss(&logits, &targets, d_p, d_n, form)?;

    let mut grads: Vec<Vec<Vec<f64>>> = prompts
        .iter()
        .map(|p| vec![vec![0.0; p.dim()]; p.n_vectors()])
        .collect();
    for (r, (feature, cells)) in cells_by_region.iter().enumerate() {
        for c in 0..d_p {
            let g = grad_s[r][c];
            if g == 0.0 {
                continue;
            }
            let cell = &cells[c];
            let weights = cell.weights.as_ref().expect("train mode records weights");
            for m in 0..weights.len() {
                let coef = weights[m] * (1.0 + (cell.similarities[m] - cell.logit) / tau);
                if coef == 0.0 {
                    continue;
                }
                let scale = g * coef;
                for (out, f) in grads[c][m].iter_mut().zip(feature.values()) {
                    *out += scale * f;
                }
            }
        }
    }
    Ok((loss, grads, regions))
}

/// Monitoring-only localization terms of the whole dataset: each labeled
/// proposal is matched to the same-category ground-truth box in its image
/// with the highest IoU. Constant across epochs because boxes are frozen.
fn dataset_localization(dataset: &Dataset) -> Result<(f64, f64)> {
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    let mut matches = Vec::new();
    for image in &dataset.images {
        for proposal in &image.proposals {
            let Some(category) = proposal.assigned else { continue };
            let mut best: Option<(Box2D, f64)> = None;
            for gt in &image.gt_instances {
                if gt.category_id != category {
                    continue;
                }
                let overlap = iou(&proposal.box2d, &gt.box2d)?;
                if best.map_or(true, |(_, b)| overlap > b) {
                    best = Some((gt.box2d, overlap));
                }
            }
            if let Some((gt_box, _)) = best {
                matches.push((preds.len(), gts.len()));
                preds.push(proposal.box2d);
                gts.push(gt_box);
            }
        }
    }
    localization_loss(&preds, &gts, &matches)
}

/// Runs the full loop and returns the report. Only the prompt rows change;
/// the dataset and dictionaries are read-only throughout. Progress (with
/// wall-clock) goes to stderr.
pub fn train_visual_prompts(
    dataset: &Dataset,
    initial_prompts: &[VisualPrompt],
    dictionaries: &[SimilarityDictionary],
    config: &TrainConfig,
    rng: &mut SeededRng,
) -> Result<TrainReport> {
    config.validate()?;
    dataset.validate()?;
    let dicts = validate_setup(dataset, initial_prompts, dictionaries)?;

    let mut prompts = initial_prompts.to_vec();
    let params = config.adamw_params();
    let mut optimizers = prompts
        .iter()
        .map(|p| AdamW::new(params, p.n_vectors() * p.dim()))
        .collect::<Result<Vec<_>>>()?;
    let (l1_box, giou_loss) = dataset_localization(dataset)?;

    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut steps = 0;
    for epoch in 0..config.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..dataset.images.len()).collect();
        order.shuffle(rng);
        let mut batch_losses = Vec::new();
        for chunk in order.chunks(config.batch_size) {
            let images: Vec<&ImageSample> = chunk.iter().map(|&i| &dataset.images[i]).collect();
            let mut negatives = Vec::new();
            for dict in &dicts {
                negatives.extend(sample_negatives(
                    dict,
                    config.neg_max_len,
                    config.neg_probability,
                    rng,
                )?);
            }
            let (loss, grads, regions) = eval_batch(
                &images,
                &prompts,
                &negatives,
                config.temperature,
                config.loss_form,
                rng,
            )?;
            batch_losses.push(loss);
            if regions == 0 {
                continue; // nothing scored: no data, no update
            }
            for ((prompt, optimizer), grad) in
                prompts.iter_mut().zip(&mut optimizers).zip(&grads)
            {
                let mut rows: Vec<Vec<f64>> =
                    prompt.vectors.iter().map(|v| v.values().to_vec()).collect();
                optimizer.step_matrix(&mut rows, grad)?;
                for (vector, row) in prompt.vectors.iter_mut().zip(rows) {
                    if !row.iter().all(|v| v.is_finite()) {
                        return Err(Error::NonFinite(format!(
                            "prompt {} rows after update step {}",
                            prompt.category_id,
                            steps + 1
                        )));
                    }
                    vector.values_mut().copy_from_slice(&row);
                }
            }
            steps += 1;
        }
        let alignment = batch_losses.iter().sum::<f64>() / batch_losses.len().max(1) as f64;
        epoch_losses.push(EpochStats { alignment, l1_box, giou_loss });
        eprintln!(
            "epoch {}/{}: alignment {alignment:.6} l1 {l1_box:.6} giou {giou_loss:.6} ({:.2}s)",
            epoch + 1,
            config.epochs,
            started.elapsed().as_secs_f64()
        );
    }

    Ok(TrainReport { config: config.clone(), epoch_losses, steps, prompts })
}

/// Compares the analytic prompt gradients against central finite differences
/// of the batch alignment loss on up to the first four images, with the
/// Gumbel noise and negative draws frozen across all evaluations. Relative
/// error uses an absolute floor of 1e-4 so near-zero gradient pairs are
/// judged at finite-difference noise scale.
pub fn end_to_end_gradient_check(
    dataset: &Dataset,
    prompts: &[VisualPrompt],
    dictionaries: &[SimilarityDictionary],
    config: &TrainConfig,
    rng: &mut SeededRng,
) -> Result<GradCheckReport> {
    config.validate()?;
    dataset.validate()?;
    let dicts = validate_setup(dataset, prompts, dictionaries)?;
    let images: Vec<&ImageSample> = dataset.images.iter().take(4).collect();

    let mut negatives = Vec::new();
    for dict in &dicts {
        negatives.extend(sample_negatives(
            dict,
            config.neg_max_len,
            config.neg_probability,
            rng,
        )?);
    }
    // Freeze the noise: every evaluation below replays this generator state.
    let noise = rng.clone();
    let (_, analytic, _) = eval_batch(
        &images,
        prompts,
        &negatives,
        config.temperature,
        config.loss_form,
        rng,
    )?;

    let mut work = prompts.to_vec();
    let h = 1e-6;
    let mut max_relative_error = 0.0f64;
    let mut checked_parameters = 0;
    for p in 0..work.len() {
        for m in 0..work[p].n_vectors() {
            for d in 0..work[p].dim() {
                let original = work[p].vectors[m].values()[d];
                work[p].vectors[m].values_mut()[d] = original + h;
                let (up, _, _) = eval_batch(
                    &images,
                    &work,
                    &negatives,
                    config.temperature,
                    config.loss_form,
                    &mut noise.clone(),
                )?;
                work[p].vectors[m].values_mut()[d] = original - h;
                let (down, _, _) = eval_batch(
                    &images,
                    &work,
                    &negatives,
                    config.temperature,
                    config.loss_form,
                    &mut noise.clone(),
                )?;
                work[p].vectors[m].values_mut()[d] = original;
                let fd = (up - down) / (2.0 * h);
                let a = analytic[p][m][d];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-4);
                max_relative_error = max_relative_error.max(rel);
                checked_parameters += 1;
            }
        }
    }
    Ok(GradCheckReport { max_relative_error, checked_parameters })
}
