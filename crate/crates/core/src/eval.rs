//! Detection metrics: per-category average precision over a sweep of IoU
//! thresholds, mAP / mAP50 summaries, and combined inference over several
//! independently trained prompt sets.
//!
//! The protocol is the COCO convention: detections are ranked by score,
//! greedily matched to the unmatched same-category ground truth with the
//! highest IoU at or above the threshold, and the precision-recall curve is
//! summarized by 101-point interpolated AP. Categories without any ground
//! truth have undefined AP and are excluded from the means.

use serde::{Deserialize, Serialize};

use crate::data::{Box2D, CategoryId, Dataset, ImageId};
use crate::error::{Error, Result};
use crate::loss::iou;
use crate::prompt::VisualPrompt;
use crate::scoring::{detector_forward, CategorySlot, ScoreMode};
use crate::embedding::SeededRng;

/// The IoU sweep, written out as literals: deriving them as `0.50 + 0.05*i`
/// drifts to values like 0.6000000000000001 and silently flips detections
/// whose overlap lands exactly on a threshold.
pub const IOU_THRESHOLDS: [f64; 10] =
    [0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95];

/// One scored candidate detection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: ImageId,
    pub category_id: CategoryId,
    #[serde(rename = "box")]
    pub box2d: Box2D,
    pub score: f64,
}

/// Per-category evaluation row. `ap_per_threshold` follows [`IOU_THRESHOLDS`]
/// and is `None` for categories with no ground truth (undefined AP).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryEval {
    pub category_id: CategoryId,
    pub gt_count: usize,
    pub detection_count: usize,
    pub ap_per_threshold: Option<Vec<f64>>,
}

/// Full metrics report: `map` averages AP over thresholds and the categories
/// that have ground truth; `map50` is the same at threshold 0.50 only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub iou_thresholds: Vec<f64>,
    pub categories: Vec<CategoryEval>,
    pub map: f64,
    pub map50: f64,
    pub gt_total: usize,
    pub detection_total: usize,
}

/// Combined-inference comparison: each prompt set evaluated alone on its own
/// split, then all sets together on the merged split. `map_drop` is
/// `mean_solo_map - combined.map`, the cost of inferring jointly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CombinedReport {
    pub solo: Vec<EvalReport>,
    pub mean_solo_map: f64,
    pub combined: EvalReport,
    pub map_drop: f64,
}

/// Runs the frozen detector surrogate over every image and emits one scored
/// detection per (proposal, prompt) pair, with the proposal's box passed
/// through unchanged. Eval-mode scoring is deterministic.
pub fn detect(dataset: &Dataset, prompts: &[VisualPrompt]) -> Result<Vec<Detection>> {
    if prompts.is_empty() {
        return Err(Error::EmptyInput("detect needs at least one prompt".into()));
    }
    let slots: Vec<CategorySlot> =
        prompts.iter().cloned().map(CategorySlot::Visual).collect();
    // Eval mode consumes no randomness; the generator is only a signature fit.
    let mut rng = SeededRng::new(0);
    let mut detections = Vec::new();
    for image in &dataset.images {
        let fwd = detector_forward(image, &slots, ScoreMode::Eval, 1.0, &mut rng)?;
        for region in &fwd.regions {
            for (slot, cell) in region.cells.iter().enumerate() {
                detections.push(Detection {
                    image_id: image.image_id,
                    category_id: prompts[slot].category_id,
                    box2d: region.box2d,
                    score: cell.probability,
                });
            }
        }
    }
    Ok(detections)
}

fn validate_detections(detections: &[Detection], dataset: &Dataset) -> Result<()> {
    let known: std::collections::BTreeSet<CategoryId> =
        dataset.categories.iter().map(|c| c.id).collect();
    let images: std::collections::BTreeSet<ImageId> =
        dataset.images.iter().map(|img| img.image_id).collect();
    for (i, det) in detections.iter().enumerate() {
        let loc = format!("detections[{i}]");
        if !det.score.is_finite() || !(0.0..=1.0).contains(&det.score) {
            return Err(Error::param(format!("{loc}.score"), "must lie in [0, 1]"));
        }
        det.box2d.check(&format!("{loc}.box"))?;
        if !known.contains(&det.category_id) {
            return Err(Error::UnknownCategory { id: det.category_id.0, context: loc });
        }
        if !images.contains(&det.image_id) {
            return Err(Error::param(
                format!("{loc}.image_id"),
                format!("image {} is not in the dataset", det.image_id),
            ));
        }
    }
    Ok(())
}

/// Ranking order: score descending, then image id, then box corners, then
/// the caller's insertion index (via stable sort). The content keys make the
/// result — and therefore every metric — invariant to permutations of the
/// input detection list.
fn rank_order(a: &Detection, b: &Detection) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.image_id.cmp(&b.image_id))
        .then(a.box2d.x1.total_cmp(&b.box2d.x1))
        .then(a.box2d.y1.total_cmp(&b.box2d.y1))
        .then(a.box2d.x2.total_cmp(&b.box2d.x2))
        .then(a.box2d.y2.total_cmp(&b.box2d.y2))
}

/// Greedy matching of ranked detections against ground truth at one IoU
/// threshold; returns a true/false-positive flag per detection in rank order.
fn match_greedy(
    ranked: &[&Detection],
    gts: &[(ImageId, Box2D)],
    iou_threshold: f64,
) -> Result<Vec<bool>> {
    let mut taken = vec![false; gts.len()];
    let mut flags = Vec::with_capacity(ranked.len());
    for det in ranked {
        let mut best: Option<(usize, f64)> = None;
        for (g, (img, gt_box)) in gts.iter().enumerate() {
            if taken[g] || *img != det.image_id {
                continue;
            }
            let overlap = iou(&det.box2d, gt_box)?;
            if overlap >= iou_threshold && best.map_or(true, |(_, b)| overlap > b) {
                best = Some((g, overlap));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
            flags.push(true);
        } else {
            flags.push(false);
        }
    }
    Ok(flags)
}

/// 101-point interpolated AP from the rank-ordered true-positive flags.
fn interpolated_ap(tp_flags: &[bool], gt_count: usize) -> f64 {
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(tp_flags.len());
    let mut recall = Vec::with_capacity(tp_flags.len());
    for (k, &hit) in tp_flags.iter().enumerate() {
        tp += hit as usize;
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(tp as f64 / gt_count as f64);
    }
    let mut sum = 0.0;
    for i in 0..=100 {
        let level = i as f64 / 100.0;
        let mut best = 0.0;
        for k in 0..tp_flags.len() {
            if recall[k] >= level && precision[k] > best {
                best = precision[k];
            }
        }
        sum += best;
    }
    sum / 101.0
}

fn category_gts(dataset: &Dataset, category_id: CategoryId) -> Vec<(ImageId, Box2D)> {
    let mut gts = Vec::new();
    for img in &dataset.images {
        for gt in &img.gt_instances {
            if gt.category_id == category_id {
                gts.push((img.image_id, gt.box2d));
            }
        }
    }
    gts
}

fn ranked_for_category<'a>(
    detections: &'a [Detection],
    category_id: CategoryId,
) -> Vec<&'a Detection> {
    let mut ranked: Vec<&Detection> =
        detections.iter().filter(|d| d.category_id == category_id).collect();
    ranked.sort_by(|a, b| rank_order(a, b));
    ranked
}

/// AP of one category at one threshold, or `None` when the category has no
/// ground truth in the dataset (undefined; excluded from means).
pub fn average_precision(
    detections: &[Detection],
    dataset: &Dataset,
    category_id: CategoryId,
    iou_threshold: f64,
) -> Result<Option<f64>> {
    if !iou_threshold.is_finite() || !(0.0 < iou_threshold && iou_threshold <= 1.0) {
        return Err(Error::param("iou_threshold", "must lie in (0, 1]"));
    }
    if !dataset.categories.iter().any(|c| c.id == category_id) {
        return Err(Error::UnknownCategory {
            id: category_id.0,
            context: "average_precision".into(),
        });
    }
    validate_detections(detections, dataset)?;
    let gts = category_gts(dataset, category_id);
    if gts.is_empty() {
        return Ok(None);
    }
    let ranked = ranked_for_category(detections, category_id);
    let flags = match_greedy(&ranked, &gts, iou_threshold)?;
    Ok(Some(interpolated_ap(&flags, gts.len())))
}

/// Scores detections against the dataset over the full IoU sweep.
pub fn evaluate(detections: &[Detection], dataset: &Dataset) -> Result<EvalReport> {
    if dataset.images.is_empty() {
        return Err(Error::EmptyInput("evaluate: dataset has no images".into()));
    }
    validate_detections(detections, dataset)?;

    let mut categories = Vec::with_capacity(dataset.categories.len());
    let mut gt_total = 0;
    for cat in &dataset.categories {
        let gts = category_gts(dataset, cat.id);
        gt_total += gts.len();
        let ranked = ranked_for_category(detections, cat.id);
        let ap_per_threshold = if gts.is_empty() {
            None
        } else {
            let mut aps = Vec::with_capacity(IOU_THRESHOLDS.len());
            for &threshold in &IOU_THRESHOLDS {
                let flags = match_greedy(&ranked, &gts, threshold)?;
                aps.push(interpolated_ap(&flags, gts.len()));
            }
            Some(aps)
        };
        categories.push(CategoryEval {
            category_id: cat.id,
            gt_count: gts.len(),
            detection_count: ranked.len(),
            ap_per_threshold,
        });
    }

    let scored: Vec<&Vec<f64>> =
        categories.iter().filter_map(|c| c.ap_per_threshold.as_ref()).collect();
    if scored.is_empty() {
        return Err(Error::EmptyInput("evaluate: dataset has no ground-truth instances".into()));
    }
    let per_cat_mean =
        |aps: &Vec<f64>| aps.iter().sum::<f64>() / aps.len() as f64;
    let map = scored.iter().map(|aps| per_cat_mean(aps)).sum::<f64>() / scored.len() as f64;
    let map50 = scored.iter().map(|aps| aps[0]).sum::<f64>() / scored.len() as f64;

    Ok(EvalReport {
        iou_thresholds: IOU_THRESHOLDS.to_vec(),
        categories,
        map,
        map50,
        gt_total,
        detection_total: detections.len(),
    })
}

/// Evaluates each prompt set alone on its own split, then all sets
/// concatenated on the merged split. Category ids must be unique within and
/// across sets; splits must have disjoint image ids.
pub fn combined_inference(
    prompt_sets: &[Vec<VisualPrompt>],
    splits: &[Dataset],
) -> Result<CombinedReport> {
    if prompt_sets.is_empty() {
        return Err(Error::EmptyInput("combined_inference needs at least one prompt set".into()));
    }
    if prompt_sets.len() != splits.len() {
        return Err(Error::dim(
            prompt_sets.len(),
            splits.len(),
            "combined_inference prompt sets vs dataset splits",
        ));
    }
    let mut seen = std::collections::BTreeSet::new();
    for set in prompt_sets {
        for prompt in set {
            if !seen.insert(prompt.category_id) {
                return Err(Error::DuplicateCategory {
                    id: prompt.category_id.0,
                    context: "combined_inference prompt sets".into(),
                });
            }
        }
    }

    let mut solo = Vec::with_capacity(prompt_sets.len());
    for (set, split) in prompt_sets.iter().zip(splits) {
        let detections = detect(split, set)?;
        solo.push(evaluate(&detections, split)?);
    }
    let mean_solo_map = solo.iter().map(|r| r.map).sum::<f64>() / solo.len() as f64;

    let union = Dataset::merge(splits)?;
    let all_prompts: Vec<VisualPrompt> = prompt_sets.iter().flatten().cloned().collect();
    let detections = detect(&union, &all_prompts)?;
    let combined = evaluate(&detections, &union)?;
    let map_drop = mean_solo_map - combined.map;

    Ok(CombinedReport { solo, mean_solo_map, combined, map_drop })
}
