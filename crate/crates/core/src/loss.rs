//! Losses: the region-category alignment loss that trains visual prompts,
//! and the box-overlap terms (L1 + generalized IoU) that are computed for
//! monitoring only — region boxes are frozen, so no gradient flows there.
//!
//! Alignment is per-category binary cross-entropy on the reduced logits.
//! Regions matched to a ground-truth object take terms over *all* scored
//! categories (visual and negative-text), averaged over `d_p + d_n`;
//! background regions take terms over the visual categories only, averaged
//! over `d_p` — negative-text phrases may describe unlabeled objects that
//! are genuinely present, so background must not push them down. The batch
//! loss is the mean over regions.

use serde::{Deserialize, Serialize};

use crate::data::{Box2D, CategoryId};
use crate::error::{Error, Result};
use crate::scoring::logistic;

/// Which form of the per-category term the alignment loss uses.
/// `FullBce` (the default) scores every category against its 0/1 target;
/// `TargetTermOnly` keeps only the matched-category term (targets with
/// `y = 0` contribute nothing), for fidelity comparisons.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignmentForm {
    #[default]
    FullBce,
    TargetTermOnly,
}

/// Ground-truth assignment of one region: matched to the visual category at
/// a slot index (`0 <= index < d_p`), or background.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegionTarget {
    Category(usize),
    Background,
}

/// Per-category gradient block: one row of partials per prompt row.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptGradient {
    pub category_id: CategoryId,
    pub rows: Vec<Vec<f64>>,
}

/// One training step's loss terms. `total` sums all three; only `alignment`
/// carries gradient (boxes are frozen).
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub alignment: f64,
    pub l1_box: f64,
    pub giou_loss: f64,
    pub total: f64,
    pub gradients: Vec<PromptGradient>,
}

/// Stable binary cross-entropy from a logit: `max(s,0) - s*y + ln(1+e^-|s|)`.
fn bce(logit: f64, target: f64) -> f64 {
    logit.max(0.0) - logit * target + (-logit.abs()).exp().ln_1p()
}

/// Alignment loss over a batch of regions.
///
/// `logits[r]` holds the reduced scores of region `r` against the `d_p`
/// visual categories followed by the `d_n` negative-text categories.
/// Returns the scalar loss and `dL/dlogit` with the same shape. The mean
/// over regions and the per-branch normalizers are folded into the gradient,
/// so it is exactly the derivative of the returned scalar. An empty batch
/// yields loss 0 and no gradient.
pub fn alignment_loss(
    logits: &[Vec<f64>],
    targets: &[RegionTarget],
    d_p: usize,
    d_n: usize,
    form: AlignmentForm,
) -> Result<(f64, Vec<Vec<f64>>)> {
    if d_p == 0 {
        return Err(Error::param("d_p", "needs at least one visual category"));
    }
    if logits.len() != targets.len() {
        return Err(Error::dim(targets.len(), logits.len(), "alignment_loss regions"));
    }
    let width = d_p + d_n;
    for (r, row) in logits.iter().enumerate() {
        if row.len() != width {
            return Err(Error::dim(width, row.len(), format!("alignment_loss logits[{r}]")));
        }
        if !row.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("alignment_loss logits[{r}]")));
        }
    }
    if logits.is_empty() {
        return Ok((0.0, Vec::new()));
    }

    let r_total = logits.len() as f64;
    let mut loss = 0.0;
    let mut grad: Vec<Vec<f64>> = logits.iter().map(|row| vec![0.0; row.len()]).collect();
    for (r, (row, target)) in logits.iter().zip(targets).enumerate() {
        match *target {
            RegionTarget::Category(t) => {
                if t >= d_p {
                    return Err(Error::param(
                        format!("targets[{r}]"),
                        format!("category index {t} out of range (d_p = {d_p})"),
                    ));
                }
                let norm = width as f64;
                for (c, &s) in row.iter().enumerate() {
                    let y = if c == t { 1.0 } else { 0.0 };
                    match form {
                        AlignmentForm::FullBce => {
                            loss += bce(s, y) / norm;
                            grad[r][c] = (logistic(s) - y) / norm / r_total;
                        }
                        AlignmentForm::TargetTermOnly => {
                            if c == t {
                                loss += bce(s, y) / norm;
                                grad[r][c] = (logistic(s) - y) / norm / r_total;
                            }
                        }
                    }
                }
            }
            RegionTarget::Background => {
                // Terms over the visual categories only.
                let norm = d_p as f64;
                for c in 0..d_p {
                    let s = row[c];
                    match form {
                        AlignmentForm::FullBce => {
                            loss += bce(s, 0.0) / norm;
                            grad[r][c] = logistic(s) / norm / r_total;
                        }
                        AlignmentForm::TargetTermOnly => {} // all targets are 0
                    }
                }
            }
        }
    }
    Ok((loss / r_total, grad))
}

/// Intersection over union of two valid boxes; 0 when they are disjoint.
pub fn iou(a: &Box2D, b: &Box2D) -> Result<f64> {
    a.check("iou lhs")?;
    b.check("iou rhs")?;
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    Ok(inter / union)
}

/// Generalized IoU: `iou - (hull - union) / hull` where `hull` is the area
/// of the smallest enclosing box. Always in `(-1, 1]`, equal to plain IoU
/// whenever the union fills the hull, and 1 exactly for identical boxes.
pub fn giou(a: &Box2D, b: &Box2D) -> Result<f64> {
    a.check("giou lhs")?;
    b.check("giou rhs")?;
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    let hull = (a.x2.max(b.x2) - a.x1.min(b.x1)) * (a.y2.max(b.y2) - a.y1.min(b.y1));
    Ok(inter / union - (hull - union) / hull)
}

/// Monitoring-only localization terms over matched (prediction, ground
/// truth) box pairs: mean L1 distance over the four corner coordinates and
/// mean `1 - giou`. No matches means both terms are 0.
pub fn localization_loss(
    predictions: &[Box2D],
    ground_truth: &[Box2D],
    matches: &[(usize, usize)],
) -> Result<(f64, f64)> {
    if matches.is_empty() {
        return Ok((0.0, 0.0));
    }
    let mut l1 = 0.0;
    let mut g = 0.0;
    for &(pi, gi) in matches {
        let p = predictions.get(pi).ok_or_else(|| {
            Error::param("matches", format!("prediction index {pi} out of range"))
        })?;
        let t = ground_truth.get(gi).ok_or_else(|| {
            Error::param("matches", format!("ground-truth index {gi} out of range"))
        })?;
        l1 += (p.x1 - t.x1).abs() + (p.y1 - t.y1).abs() + (p.x2 - t.x2).abs() + (p.y2 - t.y2).abs();
        g += 1.0 - giou(p, t)?;
    }
    let n = matches.len() as f64;
    Ok((l1 / n, g / n))
}
