//! Shared domain types, box arithmetic, and COCO-compatible annotation I/O,
//! including the patch-specific extension fields carried under `apricot_ext`.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in COCO [x, y, w, h] convention, absolute pixels.
/// Serializes as the 4-element array the COCO API expects.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl From<[f64; 4]> for BoundingBox {
    fn from(v: [f64; 4]) -> Self {
        Self { x: v[0], y: v[1], w: v[2], h: v[3] }
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn is_valid(&self) -> bool {
        self.w > 0.0 && self.h > 0.0 && [self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite())
    }

    fn validate(&self) -> Result<()> {
        if !self.is_valid() {
            return Err(Error::InvalidInput(format!(
                "degenerate bounding box [{}, {}, {}, {}]",
                self.x, self.y, self.w, self.h
            )));
        }
        Ok(())
    }
}

/// Intersection over union of two valid boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    let ix = (a.right().min(b.right()) - a.x.max(b.x)).max(0.0);
    let iy = (a.bottom().min(b.bottom()) - a.y.max(b.y)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    Ok(inter / union)
}

/// Size bucket by fraction of image area: small < 0.10, medium in [0.10, 0.20], large > 0.20.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeBucket {
    Small,
    Medium,
    Large,
}

impl SizeBucket {
    pub fn as_str(&self) -> &'static str {
        match self {
            SizeBucket::Small => "small",
            SizeBucket::Medium => "medium",
            SizeBucket::Large => "large",
        }
    }
}

/// Fraction of the image the box covers and the corresponding size bucket.
pub fn area_fraction_bucket(
    b: &BoundingBox,
    image_w: f64,
    image_h: f64,
) -> Result<(f64, SizeBucket)> {
    b.validate()?;
    if image_w <= 0.0 || image_h <= 0.0 {
        return Err(Error::InvalidInput("non-positive image dimensions".into()));
    }
    let frac = b.area() / (image_w * image_h);
    let bucket = if frac < 0.10 {
        SizeBucket::Small
    } else if frac <= 0.20 {
        SizeBucket::Medium
    } else {
        SizeBucket::Large
    };
    Ok((frac, bucket))
}

/// A detector output: box, category, confidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "bbox")]
    pub box_: BoundingBox,
    pub category: u32,
    pub confidence: f64,
}

/// Annotator judgement of patch viewing angle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AngleCategory {
    HeadOn,
    Angled,
    Severe,
}

impl AngleCategory {
    pub fn as_str(&self) -> &'static str {
        match self {
            AngleCategory::HeadOn => "head_on",
            AngleCategory::Angled => "angled",
            AngleCategory::Severe => "severe",
        }
    }
}

/// Majority vote over exactly three angle labels; `None` when all three differ.
pub fn angle_mode(votes: &[AngleCategory]) -> Result<Option<AngleCategory>> {
    if votes.len() != 3 {
        return Err(Error::InvalidInput(format!(
            "angle_mode requires exactly 3 votes, got {}",
            votes.len()
        )));
    }
    for &v in votes {
        if votes.iter().filter(|&&u| u == v).count() >= 2 {
            return Ok(Some(v));
        }
    }
    Ok(None)
}

/// Patch shape of the optimizable mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchShape {
    Circle,
    Square,
}

impl PatchShape {
    pub fn as_str(&self) -> &'static str {
        match self {
            PatchShape::Circle => "circle",
            PatchShape::Square => "square",
        }
    }
}

/// Patch-specific extension fields, serialized under `apricot_ext`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchExt {
    pub patch_id: String,
    pub target_model: String,
    pub target_category: u32,
    pub shape: PatchShape,
    pub angle_votes: Vec<AngleCategory>,
    pub warped: bool,
    /// Unknown extension keys are preserved verbatim but otherwise ignored.
    #[serde(flatten)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

/// One patch annotation; the dataset guarantees exactly one per image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub bbox: BoundingBox,
    pub category_id: u32,
    /// Present on patch annotations; absent on plain object annotations
    /// (joint flying-patch datasets carry both kinds).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub apricot_ext: Option<PatchExt>,
}

impl PatchAnnotation {
    /// The patch extension, required in contexts that only make sense for
    /// patch ground truth.
    pub fn ext(&self) -> Result<&PatchExt> {
        self.apricot_ext
            .as_ref()
            .ok_or_else(|| Error::Schema("apricot_ext".into()))
    }

    pub fn angle(&self) -> Result<Option<AngleCategory>> {
        angle_mode(&self.ext()?.angle_votes)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryRecord {
    pub id: u32,
    pub name: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Partition {
    Dev,
    Test,
    SyntheticTrain,
    SyntheticEval,
}

/// COCO-compatible ground truth plus patch extensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationSet {
    pub images: Vec<ImageRecord>,
    pub annotations: Vec<PatchAnnotation>,
    pub categories: Vec<CategoryRecord>,
    #[serde(default = "default_partition")]
    pub partition: Partition,
}

fn default_partition() -> Partition {
    Partition::Test
}

impl AnnotationSet {
    /// Checks referential integrity: every annotation points at a known image.
    pub fn validate(&self) -> Result<()> {
        let ids: HashSet<u64> = self.images.iter().map(|im| im.id).collect();
        if ids.len() != self.images.len() {
            return Err(Error::ReferentialIntegrity("duplicate image ids".into()));
        }
        for ann in &self.annotations {
            if !ids.contains(&ann.image_id) {
                return Err(Error::ReferentialIntegrity(format!(
                    "annotation {} references missing image id {}",
                    ann.id, ann.image_id
                )));
            }
        }
        Ok(())
    }

    pub fn image(&self, id: u64) -> Option<&ImageRecord> {
        self.images.iter().find(|im| im.id == id)
    }

    pub fn category_name(&self, id: u32) -> Option<&str> {
        self.categories
            .iter()
            .find(|c| c.id == id)
            .map(|c| c.name.as_str())
    }
}

/// Loads an annotation file, failing with a named schema error or a
/// referential-integrity error when the content is inconsistent.
pub fn load_annotation_set<P: AsRef<Path>>(path: P) -> Result<AnnotationSet> {
    let raw = std::fs::read_to_string(path)?;
    let value: serde_json::Value = serde_json::from_str(&raw)?;
    for key in ["images", "annotations", "categories"] {
        if value.get(key).is_none() {
            return Err(Error::Schema(key.to_string()));
        }
    }
    let set: AnnotationSet = serde_json::from_value(value).map_err(|e| {
        // serde reports the offending field in its message; surface it as a schema error
        Error::Schema(e.to_string())
    })?;
    set.validate()?;
    Ok(set)
}

/// Serializes an annotation set with stable key order (pretty JSON).
pub fn save_annotation_set<P: AsRef<Path>>(set: &AnnotationSet, path: P) -> Result<()> {
    set.validate()?;
    let json = serde_json::to_string_pretty(set)?;
    std::fs::write(path, json)?;
    Ok(())
}
