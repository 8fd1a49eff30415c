//! Dataset domain types: axis-aligned boxes, frozen region proposals, and
//! ground-truth instances grouped into images.
//!
//! A `Dataset` is the frozen world the trainer and evaluator operate on:
//! features and boxes are produced elsewhere (here, by the synthetic testbed)
//! and are never modified by training. Each proposal carries its assignment
//! (a category id, or background), so no matching heuristics run at train
//! time.

use serde::{Deserialize, Serialize};

use crate::embedding::Embedding;
use crate::error::{Error, Result};

/// Identifier of an object category. Ids are dense-ish small integers chosen
/// by the testbed; nothing relies on contiguity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CategoryId(pub u32);

impl std::fmt::Display for CategoryId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Identifier of an image within a dataset (unique per dataset).
pub type ImageId = u64;

/// Axis-aligned box with corners `(x1, y1)` top-left and `(x2, y2)`
/// bottom-right in normalized `[0, 1]` image coordinates. Width and height
/// are strictly positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box2D {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl Box2D {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Box2D { x1, y1, x2, y2 };
        b.check("Box2D::new")?;
        Ok(b)
    }

    /// Validates finiteness and strictly positive extent.
    pub fn check(&self, context: &str) -> Result<()> {
        let finite = [self.x1, self.y1, self.x2, self.y2]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.x1 >= self.x2 || self.y1 >= self.y2 {
            return Err(Error::InvalidBox {
                x1: self.x1,
                y1: self.y1,
                x2: self.x2,
                y2: self.y2,
                context: context.to_string(),
            });
        }
        Ok(())
    }

    /// True when all corners lie in `[0, 1]`.
    pub fn in_unit_square(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2]
            .iter()
            .all(|v| (0.0..=1.0).contains(v))
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }
}

/// One entry of a dataset's category table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Category {
    pub id: CategoryId,
    pub name: String,
}

/// A frozen region proposal: detector feature, box, and its pre-computed
/// assignment (`Some(category)` for a labeled object, `None` for background).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub feature: Embedding,
    #[serde(rename = "box")]
    pub box2d: Box2D,
    pub assigned: Option<CategoryId>,
}

/// A labeled ground-truth object with the context features used when mining
/// the similarity dictionary (noisy views of the object's region feature).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtInstance {
    pub category_id: CategoryId,
    #[serde(rename = "box")]
    pub box2d: Box2D,
    pub context_features: Vec<Embedding>,
}

/// All frozen per-image inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageSample {
    pub image_id: ImageId,
    pub proposals: Vec<Proposal>,
    pub gt_instances: Vec<GtInstance>,
}

/// A complete task split: category table plus images. `dimension` is the
/// embedding dimension every feature in the dataset must match.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub dimension: usize,
    pub categories: Vec<Category>,
    pub images: Vec<ImageSample>,
}

impl Dataset {
    /// Checks every structural invariant, reporting the first violation with
    /// a field path such as `images[3].proposals[1].box`.
    pub fn validate(&self) -> Result<()> {
        if self.dimension == 0 {
            return Err(Error::param("dimension", "must be >= 1"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for (i, c) in self.categories.iter().enumerate() {
            if !seen.insert(c.id) {
                return Err(Error::DuplicateCategory {
                    id: c.id.0,
                    context: format!("categories[{i}]"),
                });
            }
        }
        let mut image_ids = std::collections::BTreeSet::new();
        for (i, img) in self.images.iter().enumerate() {
            if !image_ids.insert(img.image_id) {
                return Err(Error::param(
                    format!("images[{i}].image_id"),
                    format!("duplicate image id {}", img.image_id),
                ));
            }
            for (p, prop) in img.proposals.iter().enumerate() {
                let loc = format!("images[{i}].proposals[{p}]");
                if prop.feature.dim() != self.dimension {
                    return Err(Error::dim(self.dimension, prop.feature.dim(), loc));
                }
                prop.box2d.check(&format!("{loc}.box"))?;
                if !prop.box2d.in_unit_square() {
                    return Err(Error::param(format!("{loc}.box"), "corners must lie in [0, 1]"));
                }
                if let Some(id) = prop.assigned {
                    if !seen.contains(&id) {
                        return Err(Error::UnknownCategory { id: id.0, context: loc });
                    }
                }
            }
            for (g, gt) in img.gt_instances.iter().enumerate() {
                let loc = format!("images[{i}].gt_instances[{g}]");
                if !seen.contains(&gt.category_id) {
                    return Err(Error::UnknownCategory {
                        id: gt.category_id.0,
                        context: loc,
                    });
                }
                gt.box2d.check(&format!("{loc}.box"))?;
                if !gt.box2d.in_unit_square() {
                    return Err(Error::param(format!("{loc}.box"), "corners must lie in [0, 1]"));
                }
                for (k, ctx) in gt.context_features.iter().enumerate() {
                    if ctx.dim() != self.dimension {
                        return Err(Error::dim(
                            self.dimension,
                            ctx.dim(),
                            format!("{loc}.context_features[{k}]"),
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    /// Concatenates task splits into one dataset: categories and images in
    /// part order. Parts must agree on dimension and have disjoint category
    /// and image ids. A single part merges to an identical copy of itself.
    pub fn merge(parts: &[Dataset]) -> Result<Dataset> {
        let first = parts
            .first()
            .ok_or_else(|| Error::EmptyInput("Dataset::merge needs at least one part".into()))?;
        let mut merged = Dataset {
            dimension: first.dimension,
            categories: Vec::new(),
            images: Vec::new(),
        };
        for (i, part) in parts.iter().enumerate() {
            if part.dimension != merged.dimension {
                return Err(Error::dim(merged.dimension, part.dimension, format!("merge part {i}")));
            }
            merged.categories.extend(part.categories.iter().cloned());
            merged.images.extend(part.images.iter().cloned());
        }
        merged.validate()?;
        Ok(merged)
    }

    /// Ids of categories that own at least one ground-truth instance.
    pub fn categories_with_gt(&self) -> Vec<CategoryId> {
        let mut with_gt = std::collections::BTreeSet::new();
        for img in &self.images {
            for gt in &img.gt_instances {
                with_gt.insert(gt.category_id);
            }
        }
        self.categories
            .iter()
            .map(|c| c.id)
            .filter(|id| with_gt.contains(id))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn emb(v: &[f64]) -> Embedding {
        Embedding::new(v.to_vec()).unwrap()
    }

    fn tiny_dataset() -> Dataset {
        Dataset {
            dimension: 2,
            categories: vec![Category { id: CategoryId(1), name: "thing".into() }],
            images: vec![ImageSample {
                image_id: 0,
                proposals: vec![Proposal {
                    feature: emb(&[1.0, 0.0]),
                    box2d: Box2D::new(0.1, 0.1, 0.5, 0.5).unwrap(),
                    assigned: Some(CategoryId(1)),
                }],
                gt_instances: vec![GtInstance {
                    category_id: CategoryId(1),
                    box2d: Box2D::new(0.1, 0.1, 0.5, 0.5).unwrap(),
                    context_features: vec![emb(&[1.0, 0.1])],
                }],
            }],
        }
    }

    #[test]
    fn valid_dataset_passes() {
        tiny_dataset().validate().unwrap();
    }

    #[test]
    fn degenerate_box_is_rejected() {
        assert!(matches!(Box2D::new(0.5, 0.0, 0.5, 1.0), Err(Error::InvalidBox { .. })));
        assert!(matches!(Box2D::new(0.0, 0.8, 1.0, 0.2), Err(Error::InvalidBox { .. })));
        assert!(Box2D::new(0.0, 0.0, f64::NAN, 1.0).is_err());
    }

    #[test]
    fn unknown_assignment_is_rejected_with_location() {
        let mut d = tiny_dataset();
        d.images[0].proposals[0].assigned = Some(CategoryId(9));
        let err = d.validate().unwrap_err();
        match err {
            Error::UnknownCategory { id, context } => {
                assert_eq!(id, 9);
                assert_eq!(context, "images[0].proposals[0]");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn feature_dimension_mismatch_is_rejected() {
        let mut d = tiny_dataset();
        d.images[0].proposals[0].feature = emb(&[1.0, 0.0, 0.0]);
        assert!(matches!(d.validate(), Err(Error::DimensionMismatch { expected: 2, got: 3, .. })));
    }

    #[test]
    fn duplicate_categories_and_images_are_rejected() {
        let mut d = tiny_dataset();
        d.categories.push(Category { id: CategoryId(1), name: "again".into() });
        assert!(matches!(d.validate(), Err(Error::DuplicateCategory { id: 1, .. })));

        let mut d = tiny_dataset();
        let img = d.images[0].clone();
        d.images.push(img);
        assert!(d.validate().is_err());
    }

    #[test]
    fn out_of_range_box_is_rejected() {
        let mut d = tiny_dataset();
        d.images[0].gt_instances[0].box2d = Box2D { x1: -0.1, y1: 0.0, x2: 0.5, y2: 0.5 };
        assert!(matches!(d.validate(), Err(Error::InvalidParameter { .. })));
    }

    #[test]
    fn categories_with_gt_filters_empty_ones() {
        let mut d = tiny_dataset();
        d.categories.push(Category { id: CategoryId(2), name: "unseen".into() });
        d.validate().unwrap();
        assert_eq!(d.categories_with_gt(), vec![CategoryId(1)]);
    }

    #[test]
    fn merge_concatenates_disjoint_parts() {
        let a = tiny_dataset();
        let mut b = tiny_dataset();
        b.categories[0].id = CategoryId(9);
        b.categories[0].name = "other".into();
        b.images[0].image_id = 100;
        for prop in &mut b.images[0].proposals {
            prop.assigned = prop.assigned.map(|_| CategoryId(9));
        }
        for gt in &mut b.images[0].gt_instances {
            gt.category_id = CategoryId(9);
        }
        let merged = Dataset::merge(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(merged.categories.len(), a.categories.len() + b.categories.len());
        assert_eq!(merged.images.len(), a.images.len() + b.images.len());
        assert_eq!(merged.images[0], a.images[0]);

        // single part → identical copy
        assert_eq!(Dataset::merge(std::slice::from_ref(&a)).unwrap(), a);
    }

    #[test]
    fn merge_rejects_collisions_and_mixed_dimensions() {
        let a = tiny_dataset();
        assert!(Dataset::merge(&[]).is_err());
        // duplicate category and image ids
        assert!(matches!(
            Dataset::merge(&[a.clone(), a.clone()]),
            Err(Error::DuplicateCategory { id: 1, .. })
        ));
        // mismatched dimensions
        let mut c = tiny_dataset();
        c.dimension = 5;
        c.images.clear();
        c.categories[0].id = CategoryId(3);
        assert!(matches!(
            Dataset::merge(&[a, c]),
            Err(Error::DimensionMismatch { .. })
        ));
    }
}
