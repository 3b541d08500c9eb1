//! Fooling-event metric: matching detections against patch ground truth,
//! targeted/untargeted classification, discard rules, and faceted rate reports.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::coco::{
    area_fraction_bucket, iou, AnnotationSet, BoundingBox, Detection, PatchAnnotation,
};
use crate::error::{Error, Result};

pub const DEFAULT_IOU_FLOOR: f64 = 0.10;
pub const DEFAULT_CONF_FLOOR: f64 = 0.30;

/// One entry of a COCO results detection dump.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectionDumpEntry {
    pub image_id: u64,
    pub category_id: u32,
    pub bbox: BoundingBox,
    pub score: f64,
}

impl DetectionDumpEntry {
    pub fn to_detection(&self) -> Detection {
        Detection {
            box_: self.bbox,
            category: self.category_id,
            confidence: self.score,
        }
    }
}

pub fn load_detection_dump<P: AsRef<Path>>(path: P) -> Result<Vec<DetectionDumpEntry>> {
    let raw = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&raw)?)
}

pub fn save_detection_dump<P: AsRef<Path>>(dets: &[DetectionDumpEntry], path: P) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(dets)?)?;
    Ok(())
}

/// A detection attributed to a patch under the matching rules.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoolingEvent {
    pub image_id: u64,
    pub detection: Detection,
    pub gt_annotation_id: u64,
    pub iou: f64,
    pub targeted: bool,
}

/// Applies the three matching rules to one image's detections:
/// confidence strictly above `conf_floor`, IoU at least `iou_floor`,
/// and detection area at most twice the ground-truth box area.
pub fn match_fooling_events(
    dets: &[Detection],
    gt: &PatchAnnotation,
    image_id: u64,
    iou_floor: f64,
    conf_floor: f64,
) -> Result<Vec<FoolingEvent>> {
    let mut events = Vec::new();
    for det in dets {
        if det.confidence <= conf_floor {
            continue;
        }
        if det.box_.area() > 2.0 * gt.bbox.area() {
            continue;
        }
        let overlap = iou(&det.box_, &gt.bbox)?;
        if overlap < iou_floor {
            continue;
        }
        events.push(FoolingEvent {
            image_id,
            detection: det.clone(),
            gt_annotation_id: gt.id,
            iou: overlap,
            targeted: det.category == gt.ext()?.target_category,
        });
    }
    Ok(events)
}

/// Per-image evaluation record: the single ground-truth patch plus its events.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageEval {
    pub image_id: u64,
    pub gt: PatchAnnotation,
    pub image_w: u32,
    pub image_h: u32,
    pub events: Vec<FoolingEvent>,
}

/// One evaluated (patch model, eval model) pairing over a set of images.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRun {
    pub patch_model: String,
    pub eval_model: String,
    pub iou_floor: f64,
    pub conf_floor: f64,
    pub images: Vec<ImageEval>,
}

/// Matches a detection dump against a ground-truth set. Every ground-truth
/// image contributes a record, with zero events when nothing qualified.
pub fn evaluate_run(
    dets: &[DetectionDumpEntry],
    gt: &AnnotationSet,
    eval_model: &str,
    iou_floor: f64,
    conf_floor: f64,
) -> Result<EvalRun> {
    gt.validate()?;
    let mut by_image: HashMap<u64, Vec<Detection>> = HashMap::new();
    for d in dets {
        by_image.entry(d.image_id).or_default().push(d.to_detection());
    }
    let mut images = Vec::new();
    let mut patch_models: Vec<String> = Vec::new();
    for ann in &gt.annotations {
        let im = gt.image(ann.image_id).ok_or_else(|| {
            Error::ReferentialIntegrity(format!("missing image {}", ann.image_id))
        })?;
        let empty = Vec::new();
        let img_dets = by_image.get(&ann.image_id).unwrap_or(&empty);
        let events = match_fooling_events(img_dets, ann, ann.image_id, iou_floor, conf_floor)?;
        let target_model = &ann.ext()?.target_model;
        if !patch_models.contains(target_model) {
            patch_models.push(target_model.clone());
        }
        images.push(ImageEval {
            image_id: ann.image_id,
            gt: ann.clone(),
            image_w: im.width,
            image_h: im.height,
            events,
        });
    }
    let patch_model = match patch_models.len() {
        0 => "none".to_string(),
        1 => patch_models.remove(0),
        _ => "mixed".to_string(),
    };
    Ok(EvalRun {
        patch_model,
        eval_model: eval_model.to_string(),
        iou_floor,
        conf_floor,
        images,
    })
}

/// One row of a rate report; column order is fixed by the CSV writer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateRow {
    pub patch_model: String,
    pub eval_model: String,
    pub facet: String,
    pub facet_value: String,
    pub targeted: bool,
    pub n_images: usize,
    pub n_fooled: usize,
    pub rate: f64,
}

fn rate_rows_for_group(
    run: &EvalRun,
    facet: &str,
    facet_value: &str,
    group: &[&ImageEval],
) -> Vec<RateRow> {
    let mut rows = Vec::new();
    for &targeted in &[true, false] {
        let n_images = group.len();
        let n_fooled = group
            .iter()
            .filter(|im| im.events.iter().any(|e| !targeted || e.targeted))
            .count();
        rows.push(RateRow {
            patch_model: run.patch_model.clone(),
            eval_model: run.eval_model.clone(),
            facet: facet.to_string(),
            facet_value: facet_value.to_string(),
            targeted,
            n_images,
            n_fooled,
            rate: n_fooled as f64 / n_images as f64,
        });
    }
    rows
}

/// Overall targeted/untargeted fooling rates: fraction of images with at
/// least one qualifying event.
pub fn fooling_rate(run: &EvalRun) -> Vec<RateRow> {
    if run.images.is_empty() {
        return Vec::new();
    }
    let all: Vec<&ImageEval> = run.images.iter().collect();
    rate_rows_for_group(run, "all", "all", &all)
}

/// Facets available for breakdown reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Facet {
    Size,
    Shape,
    Angle,
    PatchModel,
    EvalModel,
}

impl Facet {
    pub fn parse(name: &str) -> Result<Facet> {
        match name {
            "size" => Ok(Facet::Size),
            "shape" => Ok(Facet::Shape),
            "angle" => Ok(Facet::Angle),
            "patch_model" => Ok(Facet::PatchModel),
            "eval_model" => Ok(Facet::EvalModel),
            _ => Err(Error::InvalidInput(format!("unknown facet `{name}`"))),
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Facet::Size => "size",
            Facet::Shape => "shape",
            Facet::Angle => "angle",
            Facet::PatchModel => "patch_model",
            Facet::EvalModel => "eval_model",
        }
    }
}

/// Faceted rate breakdown. Images with no annotator agreement are dropped
/// from angle facets only; empty facet values emit no row.
pub fn breakdown_report(run: &EvalRun, facets: &[Facet]) -> Result<Vec<RateRow>> {
    let mut rows = Vec::new();
    for facet in facets {
        // facet value per image; None = excluded from this facet
        let mut groups: Vec<(String, Vec<&ImageEval>)> = Vec::new();
        for im in &run.images {
            let value: Option<String> = match facet {
                Facet::Size => {
                    let (_, bucket) = area_fraction_bucket(
                        &im.gt.bbox,
                        im.image_w as f64,
                        im.image_h as f64,
                    )?;
                    Some(bucket.as_str().to_string())
                }
                Facet::Shape => Some(im.gt.ext()?.shape.as_str().to_string()),
                Facet::Angle => im.gt.angle()?.map(|a| a.as_str().to_string()),
                Facet::PatchModel => Some(im.gt.ext()?.target_model.clone()),
                Facet::EvalModel => Some(run.eval_model.clone()),
            };
            if let Some(v) = value {
                match groups.iter_mut().find(|(k, _)| *k == v) {
                    Some((_, g)) => g.push(im),
                    None => groups.push((v, vec![im])),
                }
            }
        }
        groups.sort_by(|a, b| a.0.cmp(&b.0));
        for (value, group) in &groups {
            rows.extend(rate_rows_for_group(run, facet.name(), value, group));
        }
    }
    Ok(rows)
}

/// Writes rate rows as CSV with the stable column order.
pub fn write_rate_csv<W: Write>(mut w: W, rows: &[RateRow]) -> Result<()> {
    writeln!(
        w,
        "patch_model,eval_model,facet,facet_value,targeted,n_images,n_fooled,rate"
    )?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{:.6}",
            r.patch_model, r.eval_model, r.facet, r.facet_value, r.targeted, r.n_images,
            r.n_fooled, r.rate
        )?;
    }
    Ok(())
}

pub fn save_rate_report<P: AsRef<Path>>(rows: &[RateRow], csv_path: P) -> Result<()> {
    let f = std::fs::File::create(csv_path)?;
    write_rate_csv(std::io::BufWriter::new(f), rows)
}
