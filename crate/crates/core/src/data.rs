//! Core domain types: food items, samples and per-item training queries.

use std::fmt;
use std::path::PathBuf;
use std::sync::Arc;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("invalid field `{field}`: {reason}")]
    Invalid { field: &'static str, reason: String },
    #[error("sample `{0}` has no after state for a difference query")]
    MissingAfterState(String),
    #[error("item index {index} out of range for sample `{sample}`")]
    ItemIndex { sample: String, index: usize },
}

/// Food structure stratum used for stratified reporting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StructureTag {
    Solid,
    AmorphousMixed,
    #[default]
    Unknown,
}

impl StructureTag {
    pub const ALL: [StructureTag; 3] = [Self::Solid, Self::AmorphousMixed, Self::Unknown];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Solid => "solid",
            Self::AmorphousMixed => "amorphous_mixed",
            Self::Unknown => "unknown",
        }
    }
}

impl fmt::Display for StructureTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which target a query regresses: absolute weight or before/after difference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Absolute,
    Difference,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Absolute => "absolute",
            Stage::Difference => "difference",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One named food item with its annotated mass in grams.
#[derive(Debug, Clone, PartialEq)]
pub struct FoodItem {
    name: String,
    weight_before: f64,
    weight_after: Option<f64>,
    structure: StructureTag,
}

impl FoodItem {
    pub fn new(
        name: impl Into<String>,
        weight_before: f64,
        weight_after: Option<f64>,
        structure: StructureTag,
    ) -> Result<Self, DataError> {
        let name = name.into();
        if name.trim().is_empty() {
            return Err(DataError::Invalid { field: "name", reason: "empty item name".into() });
        }
        if !weight_before.is_finite() || weight_before < 0.0 {
            return Err(DataError::Invalid {
                field: "weight_before_g",
                reason: format!("expected finite grams >= 0, got {weight_before}"),
            });
        }
        if let Some(after) = weight_after {
            if !after.is_finite() || after < 0.0 {
                return Err(DataError::Invalid {
                    field: "weight_after_g",
                    reason: format!("expected finite grams >= 0, got {after}"),
                });
            }
        }
        Ok(Self { name, weight_before, weight_after, structure })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn weight_before(&self) -> f64 {
        self.weight_before
    }

    pub fn weight_after(&self) -> Option<f64> {
        self.weight_after
    }

    pub fn structure(&self) -> StructureTag {
        self.structure
    }

    /// Signed consumed mass, `None` without an after annotation.
    pub fn consumed(&self) -> Option<f64> {
        self.weight_after.map(|after| self.weight_before - after)
    }
}

/// Either a file on disk or an already decoded RGB image.
#[derive(Clone)]
pub enum ImageRef {
    Path(PathBuf),
    Memory(Arc<RgbImage>),
}

impl ImageRef {
    pub fn load(&self) -> Result<Arc<RgbImage>, image::ImageError> {
        match self {
            ImageRef::Path(path) => Ok(Arc::new(image::open(path)?.to_rgb8())),
            ImageRef::Memory(img) => Ok(Arc::clone(img)),
        }
    }

    pub fn path(&self) -> Option<&std::path::Path> {
        match self {
            ImageRef::Path(p) => Some(p),
            ImageRef::Memory(_) => None,
        }
    }
}

impl fmt::Debug for ImageRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ImageRef::Path(p) => write!(f, "Path({})", p.display()),
            ImageRef::Memory(img) => write!(f, "Memory({}x{})", img.width(), img.height()),
        }
    }
}

impl PartialEq for ImageRef {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (ImageRef::Path(a), ImageRef::Path(b)) => a == b,
            (ImageRef::Memory(a), ImageRef::Memory(b)) => Arc::ptr_eq(a, b) || a.as_raw() == b.as_raw(),
            _ => false,
        }
    }
}

/// One meal record: a before image, an optional after image and its items.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    sample_id: String,
    before_image: ImageRef,
    after_image: Option<ImageRef>,
    items: Vec<FoodItem>,
    dataset_tag: String,
}

impl Sample {
    pub fn new(
        sample_id: impl Into<String>,
        before_image: ImageRef,
        after_image: Option<ImageRef>,
        items: Vec<FoodItem>,
        dataset_tag: impl Into<String>,
    ) -> Result<Self, DataError> {
        let sample_id = sample_id.into();
        if sample_id.trim().is_empty() {
            return Err(DataError::Invalid { field: "sample_id", reason: "empty sample id".into() });
        }
        if after_image.is_none() && items.iter().any(|it| it.weight_after.is_some()) {
            return Err(DataError::Invalid {
                field: "after_image",
                reason: "items carry weight_after_g but the sample has no after image".into(),
            });
        }
        Ok(Self { sample_id, before_image, after_image, items, dataset_tag: dataset_tag.into() })
    }

    pub fn sample_id(&self) -> &str {
        &self.sample_id
    }

    pub fn before_image(&self) -> &ImageRef {
        &self.before_image
    }

    pub fn after_image(&self) -> Option<&ImageRef> {
        self.after_image.as_ref()
    }

    pub fn items(&self) -> &[FoodItem] {
        &self.items
    }

    pub fn dataset_tag(&self) -> &str {
        &self.dataset_tag
    }

    /// True when every item can produce a difference target.
    pub fn has_difference_data(&self) -> bool {
        self.after_image.is_some() && self.items.iter().all(|it| it.weight_after.is_some())
    }
}

/// One (sample, item, stage) training or inference unit.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemQuery {
    sample: Arc<Sample>,
    item_index: usize,
    stage: Stage,
    target: f64,
}

impl ItemQuery {
    pub fn new(sample: Arc<Sample>, item_index: usize, stage: Stage) -> Result<Self, DataError> {
        let item = sample.items.get(item_index).ok_or_else(|| DataError::ItemIndex {
            sample: sample.sample_id.clone(),
            index: item_index,
        })?;
        let target = match stage {
            Stage::Absolute => item.weight_before,
            Stage::Difference => {
                if sample.after_image.is_none() {
                    return Err(DataError::MissingAfterState(sample.sample_id.clone()));
                }
                item.consumed().ok_or_else(|| DataError::MissingAfterState(sample.sample_id.clone()))?
            }
        };
        Ok(Self { sample, item_index, stage, target })
    }

    pub fn sample(&self) -> &Arc<Sample> {
        &self.sample
    }

    pub fn item_index(&self) -> usize {
        self.item_index
    }

    pub fn item(&self) -> &FoodItem {
        &self.sample.items[self.item_index]
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn target(&self) -> f64 {
        self.target
    }
}

/// Expands a sample into one query per food item, in item order.
pub fn make_item_queries(sample: &Arc<Sample>, stage: Stage) -> Result<Vec<ItemQuery>, DataError> {
    if stage == Stage::Difference && !sample.has_difference_data() {
        return Err(DataError::MissingAfterState(sample.sample_id.clone()));
    }
    (0..sample.items.len()).map(|i| ItemQuery::new(Arc::clone(sample), i, stage)).collect()
}

/// Queries for a whole sample list, skipping nothing: any error aborts.
pub fn queries_for(samples: &[Arc<Sample>], stage: Stage) -> Result<Vec<ItemQuery>, DataError> {
    let mut out = Vec::new();
    for s in samples {
        out.extend(make_item_queries(s, stage)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blank() -> ImageRef {
        ImageRef::Memory(Arc::new(RgbImage::new(4, 4)))
    }

    fn sample(items: Vec<FoodItem>, with_after: bool) -> Arc<Sample> {
        let after = with_after.then(blank);
        Arc::new(Sample::new("s1", blank(), after, items, "test").unwrap())
    }

    #[test]
    fn difference_target_is_subtraction() {
        let s = sample(vec![FoodItem::new("rice", 150.0, Some(50.0), StructureTag::Unknown).unwrap()], true);
        let q = make_item_queries(&s, Stage::Difference).unwrap();
        assert_eq!(q.len(), 1);
        assert_eq!(q[0].target(), 100.0);
    }

    #[test]
    fn absolute_target_copies_weight_before() {
        let s = sample(vec![FoodItem::new("apple", 80.0, None, StructureTag::Solid).unwrap()], false);
        let q = make_item_queries(&s, Stage::Absolute).unwrap();
        assert_eq!(q[0].target(), 80.0);
    }

    #[test]
    fn multi_item_difference_targets_in_order() {
        let s = sample(
            vec![
                FoodItem::new("rice", 150.0, Some(50.0), StructureTag::AmorphousMixed).unwrap(),
                FoodItem::new("chicken", 85.0, Some(85.0), StructureTag::Solid).unwrap(),
            ],
            true,
        );
        let targets: Vec<f64> = make_item_queries(&s, Stage::Difference).unwrap().iter().map(|q| q.target()).collect();
        assert_eq!(targets, vec![100.0, 0.0]);
    }

    #[test]
    fn negative_difference_is_kept() {
        let s = sample(vec![FoodItem::new("soup", 100.0, Some(120.0), StructureTag::Unknown).unwrap()], true);
        assert_eq!(make_item_queries(&s, Stage::Difference).unwrap()[0].target(), -20.0);
    }

    #[test]
    fn difference_without_after_state_fails() {
        let s = sample(vec![FoodItem::new("apple", 80.0, None, StructureTag::Solid).unwrap()], false);
        assert!(matches!(make_item_queries(&s, Stage::Difference), Err(DataError::MissingAfterState(_))));
        // after image present but one item lacks weight_after
        let s = sample(
            vec![
                FoodItem::new("apple", 80.0, Some(10.0), StructureTag::Solid).unwrap(),
                FoodItem::new("pear", 80.0, None, StructureTag::Solid).unwrap(),
            ],
            true,
        );
        assert!(matches!(make_item_queries(&s, Stage::Difference), Err(DataError::MissingAfterState(_))));
    }

    #[test]
    fn item_invariants() {
        assert!(FoodItem::new("  ", 1.0, None, StructureTag::Unknown).is_err());
        assert!(FoodItem::new("x", -5.0, None, StructureTag::Unknown).is_err());
        assert!(FoodItem::new("x", 5.0, Some(-1.0), StructureTag::Unknown).is_err());
        assert!(FoodItem::new("x", f64::NAN, None, StructureTag::Unknown).is_err());
    }

    #[test]
    fn after_weights_require_after_image() {
        let items = vec![FoodItem::new("rice", 150.0, Some(50.0), StructureTag::Unknown).unwrap()];
        assert!(Sample::new("s", blank(), None, items, "t").is_err());
    }
}
