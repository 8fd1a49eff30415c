//! Region-vs-category scoring.
//!
//! A region feature `f` is scored against a category slot by taking the
//! inner product with each of the slot's rows, `w_k = f . row_k`, and
//! reducing the vector `w` to one logit `S`:
//!
//! * train mode: a stochastic soft reduction. Per row, i.i.d. Gumbel noise
//!   `g_k = -ln(-ln u_k)` is added, soft weights are
//!   `softmax((w + g) / tau)`, and `S = sum_k weight_k * w_k`. The weights
//!   are kept so the trainer can push gradients through the reduction.
//! * eval mode: the deterministic hard reduction `S = max_k w_k`, consuming
//!   no randomness.
//!
//! The per-category probability is `logistic(S)`. Slots are scored
//! independently of each other; concatenating more slots never changes the
//! scores of existing ones.

use serde::{Deserialize, Serialize};

use crate::data::{Box2D, CategoryId, ImageSample};
use crate::embedding::{dot, Embedding, SeededRng};
use crate::error::{Error, Result};
use crate::prompt::VisualPrompt;

/// One scored category: a learnable visual prompt, or a frozen negative text
/// embedding behaving as a single-row prompt.
#[derive(Debug, Clone, PartialEq)]
pub enum CategorySlot {
    Visual(VisualPrompt),
    NegativeText(Embedding),
}

impl CategorySlot {
    pub fn rows(&self) -> &[Embedding] {
        match self {
            CategorySlot::Visual(p) => &p.vectors,
            CategorySlot::NegativeText(e) => std::slice::from_ref(e),
        }
    }

    pub fn dim(&self) -> usize {
        self.rows()[0].dim()
    }

    pub fn category_id(&self) -> Option<CategoryId> {
        match self {
            CategorySlot::Visual(p) => Some(p.category_id),
            CategorySlot::NegativeText(_) => None,
        }
    }

    pub fn is_visual(&self) -> bool {
        matches!(self, CategorySlot::Visual(_))
    }
}

/// Which reduction `detector_forward` applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    Train,
    Eval,
}

/// Scores of one region against one slot. `weights` is present in train mode
/// only; it always sums to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreCell {
    /// Per-row inner products `w`.
    pub similarities: Vec<f64>,
    /// The reduced logit `S`.
    pub logit: f64,
    /// `logistic(S)`.
    pub probability: f64,
    /// Soft reduction weights (train mode).
    pub weights: Option<Vec<f64>>,
}

/// All slot scores for one region, with the region's box passed through
/// unchanged (boxes are frozen; nothing here refines them).
#[derive(Debug, Clone, PartialEq)]
pub struct RegionScores {
    pub box2d: Box2D,
    pub cells: Vec<ScoreCell>,
}

/// The forward pass over one image: per region, per slot.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardResult {
    pub image_id: u64,
    pub regions: Vec<RegionScores>,
}

/// Numerically stable logistic function.
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inner products of a region feature with every row of a prompt.
pub fn similarity_vector(feature: &Embedding, prompt: &VisualPrompt) -> Result<Vec<f64>> {
    rows_similarity(feature, &prompt.vectors)
}

fn rows_similarity(feature: &Embedding, rows: &[Embedding]) -> Result<Vec<f64>> {
    rows.iter().map(|r| dot(feature, r)).collect()
}

/// The stochastic train-mode reduction. Draws one Gumbel variate per row
/// (row order), then delegates to [`score_train_with_noise`]. Returns the
/// logit and the soft weights.
pub fn score_train(similarities: &[f64], tau: f64, rng: &mut SeededRng) -> Result<(f64, Vec<f64>)> {
    let gumbel: Vec<f64> = similarities.iter().map(|_| gumbel_draw(rng)).collect();
    score_train_with_noise(similarities, &gumbel, tau)
}

/// One standard Gumbel variate, `-ln(-ln u)` with `u` uniform on (0, 1).
pub fn gumbel_draw(rng: &mut SeededRng) -> f64 {
    let u = rng.open01();
    -(-u.ln()).ln()
}

/// The train-mode reduction with the noise supplied by the caller — the
/// deterministic core used both by [`score_train`] and by gradient checking,
/// where the same draws must be replayed under parameter perturbations.
///
/// `S = sum_k weight_k * w_k` with `weight = softmax((w + g) / tau)`; the
/// logit is a convex combination of the inputs, so it always lies within
/// `[min(w), max(w)]`. A single-row slot gets weight exactly 1 and
/// `S = w_0` exactly, for any noise and temperature.
pub fn score_train_with_noise(
    similarities: &[f64],
    gumbel: &[f64],
    tau: f64,
) -> Result<(f64, Vec<f64>)> {
    if similarities.is_empty() {
        return Err(Error::EmptyInput("score reduction over zero rows".into()));
    }
    if gumbel.len() != similarities.len() {
        return Err(Error::dim(similarities.len(), gumbel.len(), "gumbel noise"));
    }
    if !tau.is_finite() || tau <= 0.0 {
        return Err(Error::param("tau", format!("must be > 0, got {tau}")));
    }
    let z: Vec<f64> = similarities
        .iter()
        .zip(gumbel)
        .map(|(w, g)| (w + g) / tau)
        .collect();
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let total: f64 = exps.iter().sum();
    let weights: Vec<f64> = exps.iter().map(|e| e / total).collect();
    let s = weights
        .iter()
        .zip(similarities)
        .map(|(wt, w)| wt * w)
        .sum();
    Ok((s, weights))
}

/// The deterministic eval-mode reduction: the maximum similarity.
pub fn score_eval(similarities: &[f64]) -> Result<f64> {
    if similarities.is_empty() {
        return Err(Error::EmptyInput("score reduction over zero rows".into()));
    }
    Ok(similarities.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
}

/// Scores every proposal of an image against every slot. Boxes pass through
/// frozen. In train mode, Gumbel noise is drawn per (proposal, slot, row) in
/// that nesting order and `tau` must be positive; in eval mode no randomness
/// is consumed and `tau` is ignored.
///
/// Slots must be non-empty, dimension-consistent with the image features,
/// and visual slots must carry distinct category ids.
pub fn detector_forward(
    image: &ImageSample,
    slots: &[CategorySlot],
    mode: ScoreMode,
    tau: f64,
    rng: &mut SeededRng,
) -> Result<ForwardResult> {
    if slots.is_empty() {
        return Err(Error::EmptyInput("detector_forward needs at least one slot".into()));
    }
    let dim = slots[0].dim();
    let mut seen = std::collections::BTreeSet::new();
    for (i, slot) in slots.iter().enumerate() {
        if slot.dim() != dim {
            return Err(Error::dim(dim, slot.dim(), format!("slot {i}")));
        }
        if let Some(id) = slot.category_id() {
            if !seen.insert(id) {
                return Err(Error::DuplicateCategory {
                    id: id.0,
                    context: "detector_forward slots".into(),
                });
            }
        }
    }
    if mode == ScoreMode::Train && (!tau.is_finite() || tau <= 0.0) {
        return Err(Error::param("tau", format!("must be > 0 in train mode, got {tau}")));
    }

    let mut regions = Vec::with_capacity(image.proposals.len());
    for (p, prop) in image.proposals.iter().enumerate() {
        if prop.feature.dim() != dim {
            return Err(Error::dim(dim, prop.feature.dim(), format!("proposal {p} feature")));
        }
        let mut cells = Vec::with_capacity(slots.len());
        for slot in slots {
            let w = rows_similarity(&prop.feature, slot.rows())?;
            let (logit, weights) = match mode {
                ScoreMode::Train => {
                    let (s, wt) = score_train(&w, tau, rng)?;
                    (s, Some(wt))
                }
                ScoreMode::Eval => (score_eval(&w)?, None),
            };
            cells.push(ScoreCell {
                probability: logistic(logit),
                similarities: w,
                logit,
                weights,
            });
        }
        regions.push(RegionScores { box2d: prop.box2d, cells });
    }
    Ok(ForwardResult { image_id: image.image_id, regions })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{CategoryId, Proposal};
    use crate::prompt::{PromptParams, VisualPrompt};
    use proptest::prelude::*;
    use rand::RngCore;

    fn emb(v: &[f64]) -> Embedding {
        Embedding::new(v.to_vec()).unwrap()
    }

    fn prompt(id: u32, rows: &[&[f64]]) -> VisualPrompt {
        VisualPrompt::new(
            CategoryId(id),
            rows.iter().map(|r| emb(r)).collect(),
            PromptParams { n_vectors: rows.len(), independence: 1.0, fusion_probability: 0.0 },
        )
        .unwrap()
    }

    fn image(features: &[&[f64]]) -> ImageSample {
        ImageSample {
            image_id: 0,
            proposals: features
                .iter()
                .map(|f| Proposal {
                    feature: emb(f),
                    box2d: Box2D::new(0.1, 0.1, 0.5, 0.5).unwrap(),
                    assigned: None,
                })
                .collect(),
            gt_instances: vec![],
        }
    }

    #[test]
    fn similarity_vector_is_per_row_inner_product() {
        let p = prompt(0, &[&[1.0, 0.0], &[0.0, 2.0], &[1.0, 1.0]]);
        let w = similarity_vector(&emb(&[3.0, 4.0]), &p).unwrap();
        assert_eq!(w, vec![3.0, 8.0, 7.0]);
        assert!(similarity_vector(&emb(&[1.0]), &p).is_err());
    }

    #[test]
    fn eval_reduction_is_the_maximum() {
        assert_eq!(score_eval(&[0.2, 0.7, -0.1]).unwrap(), 0.7);
        assert!(score_eval(&[]).is_err());
        // scan oracle on a longer vector
        let w: Vec<f64> = (0..50).map(|i| ((i * 37 % 17) as f64) - 8.0).collect();
        let mut best = w[0];
        for v in &w {
            if *v > best {
                best = *v;
            }
        }
        assert_eq!(score_eval(&w).unwrap(), best);
    }

    #[test]
    fn train_reduction_stays_within_similarity_bounds() {
        let mut rng = SeededRng::new(3);
        let w = [0.3, -1.0, 2.5, 0.0];
        for _ in 0..1000 {
            let (s, weights) = score_train(&w, 1.0, &mut rng).unwrap();
            assert!(s >= -1.0 && s <= 2.5, "s = {s}");
            let total: f64 = weights.iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
            assert!(weights.iter().all(|x| (0.0..=1.0).contains(x)));
        }
    }

    #[test]
    fn single_row_reduction_is_exact_for_any_temperature() {
        let mut rng = SeededRng::new(5);
        for tau in [1e-3, 0.1, 1.0, 10.0] {
            for _ in 0..100 {
                let w0 = rng.standard_normal() * 3.0;
                let (s, weights) = score_train(&[w0], tau, &mut rng).unwrap();
                assert_eq!(s, w0);
                assert_eq!(weights, vec![1.0]);
            }
        }
    }

    #[test]
    fn low_temperature_concentrates_on_the_maximum() {
        // Two rows, top gap 0.5: at tau = 1e-3 the reduction returns the row
        // picked by the Gumbel-max draw, which is the larger one in the
        // majority of draws, so the median deviation from max(w) is ~0.
        let mut rng = SeededRng::new(8);
        let w = [1.0, 0.5];
        let mut devs: Vec<f64> = (0..1000)
            .map(|_| {
                let (s, _) = score_train(&w, 1e-3, &mut rng).unwrap();
                (s - 1.0).abs()
            })
            .collect();
        devs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!(devs[500] < 1e-2, "median deviation = {}", devs[500]);
    }

    #[test]
    fn train_reduction_validates_inputs() {
        let mut rng = SeededRng::new(0);
        assert!(score_train(&[], 1.0, &mut rng).is_err());
        assert!(score_train(&[1.0], 0.0, &mut rng).is_err());
        assert!(score_train(&[1.0], -0.5, &mut rng).is_err());
        assert!(score_train_with_noise(&[1.0, 2.0], &[0.0], 1.0).is_err());
    }

    #[test]
    fn logistic_is_calibrated_and_stable() {
        assert_eq!(logistic(0.0), 0.5);
        assert!(logistic(40.0) > 1.0 - 1e-12);
        assert!(logistic(-40.0) < 1e-12);
        assert!((logistic(2.0) + logistic(-2.0) - 1.0).abs() < 1e-15);
        assert!(logistic(-800.0) >= 0.0 && logistic(800.0) <= 1.0);
    }

    #[test]
    fn forward_zero_feature_scores_half_probability() {
        let slots = vec![
            CategorySlot::Visual(prompt(0, &[&[1.0, 0.0], &[0.5, 0.5]])),
            CategorySlot::NegativeText(emb(&[0.3, 0.3])),
        ];
        let img = image(&[&[0.0, 0.0]]);
        let mut rng = SeededRng::new(0);
        let out = detector_forward(&img, &slots, ScoreMode::Eval, 1.0, &mut rng).unwrap();
        for cell in &out.regions[0].cells {
            assert_eq!(cell.logit, 0.0);
            assert_eq!(cell.probability, 0.5);
            assert!(cell.weights.is_none());
        }
    }

    #[test]
    fn eval_mode_consumes_no_randomness_and_is_deterministic() {
        let slots = vec![CategorySlot::Visual(prompt(0, &[&[1.0, 0.0], &[0.0, 1.0]]))];
        let img = image(&[&[0.4, 0.6], &[-1.0, 2.0]]);
        let mut rng = SeededRng::new(17);
        let mut before = rng.clone();
        let a = detector_forward(&img, &slots, ScoreMode::Eval, 1.0, &mut rng).unwrap();
        let b = detector_forward(&img, &slots, ScoreMode::Eval, 1.0, &mut rng).unwrap();
        assert_eq!(a, b);
        assert_eq!(rng.next_u64(), before.next_u64());
    }

    #[test]
    fn extra_negative_slots_leave_visual_scores_unchanged() {
        let visual = CategorySlot::Visual(prompt(0, &[&[1.0, 0.0], &[0.2, 0.9]]));
        let img = image(&[&[0.7, 0.1], &[0.0, 1.0]]);
        let mut rng = SeededRng::new(2);
        let solo = detector_forward(&img, std::slice::from_ref(&visual), ScoreMode::Eval, 1.0, &mut rng).unwrap();
        let slots = vec![
            visual,
            CategorySlot::NegativeText(emb(&[0.5, 0.5])),
            CategorySlot::NegativeText(emb(&[-0.5, 0.25])),
        ];
        let both = detector_forward(&img, &slots, ScoreMode::Eval, 1.0, &mut rng).unwrap();
        for (r_solo, r_both) in solo.regions.iter().zip(&both.regions) {
            assert_eq!(r_solo.cells[0], r_both.cells[0]);
        }
    }

    #[test]
    fn forward_validates_slots() {
        let img = image(&[&[1.0, 0.0]]);
        let mut rng = SeededRng::new(0);
        assert!(detector_forward(&img, &[], ScoreMode::Eval, 1.0, &mut rng).is_err());

        let dup = vec![
            CategorySlot::Visual(prompt(3, &[&[1.0, 0.0]])),
            CategorySlot::Visual(prompt(3, &[&[0.0, 1.0]])),
        ];
        let err = detector_forward(&img, &dup, ScoreMode::Eval, 1.0, &mut rng).unwrap_err();
        assert!(matches!(err, Error::DuplicateCategory { id: 3, .. }));

        let ragged = vec![
            CategorySlot::Visual(prompt(0, &[&[1.0, 0.0]])),
            CategorySlot::NegativeText(emb(&[1.0, 0.0, 0.0])),
        ];
        assert!(detector_forward(&img, &ragged, ScoreMode::Eval, 1.0, &mut rng).is_err());

        let slots = vec![CategorySlot::Visual(prompt(0, &[&[1.0, 0.0]]))];
        assert!(detector_forward(&img, &slots, ScoreMode::Train, 0.0, &mut rng).is_err());
    }

    #[test]
    fn train_mode_records_weights_per_cell() {
        let slots = vec![
            CategorySlot::Visual(prompt(0, &[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]])),
            CategorySlot::NegativeText(emb(&[0.1, 0.1])),
        ];
        let img = image(&[&[0.3, 0.4]]);
        let mut rng = SeededRng::new(9);
        let out = detector_forward(&img, &slots, ScoreMode::Train, 0.7, &mut rng).unwrap();
        let cells = &out.regions[0].cells;
        assert_eq!(cells[0].weights.as_ref().unwrap().len(), 3);
        assert_eq!(cells[1].weights.as_ref().unwrap().len(), 1);
        assert_eq!(cells[1].logit, cells[1].similarities[0]);
    }

    proptest! {
        #[test]
        fn train_logit_is_convex_combination(
            seed in 0u64..300,
            tau in 0.05f64..5.0,
            w in proptest::collection::vec(-5.0f64..5.0, 1..10),
        ) {
            let mut rng = SeededRng::new(seed);
            let (s, weights) = score_train(&w, tau, &mut rng).unwrap();
            let lo = w.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(s >= lo - 1e-12 && s <= hi + 1e-12);
            prop_assert!((weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
