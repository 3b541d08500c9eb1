//! Supervised patch-localization defense: fine-tune a detector on
//! flying-patch data, jointly with the original categories or patch-only,
//! and score with COCO-style AP/AR.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::coco::{AnnotationSet, CategoryRecord};
use crate::detector::{finetune, DetectorModel, TrainConfig, TrainMetrics};
use crate::error::{Error, Result};
use crate::fooling::DetectionDumpEntry;
use crate::metrics::{ap_ar, ApArReport, GtBox, IouPolicy, ScoredBox};
use crate::scenes::Scene;
use crate::synth::{PatchFamily, SyntheticDataset, SynthMode, PATCH_CATEGORY_NAME};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchObjective {
    Joint,
    PatchOnly,
}

impl PatchObjective {
    pub fn as_str(&self) -> &'static str {
        match self {
            PatchObjective::Joint => "joint",
            PatchObjective::PatchOnly => "patch_only",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PatchDetectorConfig {
    pub objective: PatchObjective,
    pub family: PatchFamily,
    pub schedule: TrainConfig,
    /// Waives the base-model / patch-source separation check.
    pub allow_same_source: bool,
}

impl Default for PatchDetectorConfig {
    fn default() -> Self {
        Self {
            objective: PatchObjective::Joint,
            family: PatchFamily::Adversarial,
            schedule: TrainConfig {
                // finetuning continues from a trained backbone; the fresh
                // heads still need a real schedule
                epochs: 12,
                ap_floor: 0.0,
                min_scenes: 1,
                ..Default::default()
            },
            allow_same_source: false,
        }
    }
}

/// Converts a flying-patch dataset into training scenes for the chosen
/// objective: patch boxes only, or patches plus original objects.
fn dataset_scenes(data: &SyntheticDataset, objective: PatchObjective, patch_cat: u32) -> Vec<Scene> {
    data.annotations
        .images
        .iter()
        .zip(&data.images)
        .map(|(rec, img)| {
            let objects = data
                .annotations
                .annotations
                .iter()
                .filter(|a| a.image_id == rec.id)
                .filter(|a| objective == PatchObjective::Joint || a.category_id == patch_cat)
                .map(|a| (a.category_id, a.bbox))
                .collect();
            Scene {
                image: img.clone(),
                objects,
            }
        })
        .collect()
}

fn patch_category(set: &AnnotationSet) -> Result<CategoryRecord> {
    set.categories
        .iter()
        .find(|c| c.name == PATCH_CATEGORY_NAME)
        .cloned()
        .ok_or_else(|| Error::InvalidInput(format!("no {PATCH_CATEGORY_NAME} category")))
}

/// Fine-tunes `base` into a patch detector on a flying-train dataset.
pub fn finetune_patch_detector(
    base: &DetectorModel,
    data: &SyntheticDataset,
    cfg: &PatchDetectorConfig,
) -> Result<(DetectorModel, TrainMetrics)> {
    if data.mode != SynthMode::FlyingTrain {
        return Err(Error::InvalidInput(format!(
            "patch detector training requires flying-train data, got {:?}",
            data.mode
        )));
    }
    if data.family != cfg.family {
        return Err(Error::InvalidInput(format!(
            "dataset family {:?} does not match config family {:?}",
            data.family, cfg.family
        )));
    }
    // the defense stays black-box with respect to the attacker's models
    if !cfg.allow_same_source {
        for ann in &data.annotations.annotations {
            if let Some(ext) = &ann.apricot_ext {
                if ext.target_model == base.meta.model_id {
                    return Err(Error::InvalidInput(format!(
                        "base model {} is a patch source model; pass allow_same_source to override",
                        base.meta.model_id
                    )));
                }
            }
        }
    }
    let patch_cat = patch_category(&data.annotations)?;
    if cfg.objective == PatchObjective::Joint
        && data.annotations.annotations.iter().all(|a| a.apricot_ext.is_some())
    {
        return Err(Error::InvalidInput(
            "joint objective requires backgrounds with object annotations".into(),
        ));
    }
    let labels: Vec<CategoryRecord> = match cfg.objective {
        PatchObjective::Joint => data.annotations.categories.clone(),
        PatchObjective::PatchOnly => vec![patch_cat.clone()],
    };
    let scenes = dataset_scenes(data, cfg.objective, patch_cat.id);
    let model_id = format!("{}-{}", base.meta.model_id, cfg.objective.as_str());
    finetune(base, &model_id, labels, &scenes, &cfg.schedule)
}

/// AP/AR of a detection dump against an annotation set, with AR broken down
/// by patch source model where provenance is present.
pub fn ap_ar_report(
    dets: &[DetectionDumpEntry],
    gt: &AnnotationSet,
    policy: IouPolicy,
    max_dets: usize,
) -> Result<ApArReport> {
    gt.validate()?;
    let scored: Vec<ScoredBox> = dets
        .iter()
        .map(|d| ScoredBox {
            image_id: d.image_id,
            category: d.category_id,
            box_: d.bbox,
            score: d.score,
        })
        .collect();
    let gts: Vec<GtBox> = gt
        .annotations
        .iter()
        .map(|a| GtBox {
            image_id: a.image_id,
            category: a.category_id,
            box_: a.bbox,
            source: a.apricot_ext.as_ref().map(|e| e.target_model.clone()),
        })
        .collect();
    let cats: Vec<u32> = gt.categories.iter().map(|c| c.id).collect();
    ap_ar(&scored, &gts, &cats, policy, max_dets)
}

/// Runs a patch detector over a dataset and dumps its detections.
pub fn detect_dataset(
    model: &DetectorModel,
    data: &SyntheticDataset,
    conf_threshold: f64,
) -> Result<Vec<DetectionDumpEntry>> {
    let mut dump = Vec::new();
    for (rec, img) in data.annotations.images.iter().zip(&data.images) {
        for d in model.detect(img, conf_threshold)? {
            dump.push(DetectionDumpEntry {
                image_id: rec.id,
                category_id: d.category,
                bbox: d.box_,
                score: d.confidence,
            });
        }
    }
    Ok(dump)
}

/// One row of the defense summary table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DefenseRow {
    pub objective: PatchObjective,
    pub training_patches: PatchFamily,
    pub ap_range: f64,
    pub ar_range: f64,
    pub ap_50: f64,
    pub ar_50: f64,
    pub ar_by_source_model: Vec<(String, f64)>,
}

/// Evaluates a patch detector on a flying-eval dataset into a summary row.
pub fn evaluate_patch_detector(
    model: &DetectorModel,
    cfg: &PatchDetectorConfig,
    eval: &SyntheticDataset,
    conf_threshold: f64,
) -> Result<DefenseRow> {
    if eval.mode != SynthMode::FlyingEval {
        return Err(Error::InvalidInput(format!(
            "evaluation requires flying-eval data, got {:?}",
            eval.mode
        )));
    }
    let dump = detect_dataset(model, eval, conf_threshold)?;
    // Score only the categories the model can predict: a patch-only
    // detector is evaluated on patch annotations, a joint one on everything.
    let own: std::collections::BTreeSet<u32> =
        model.meta.labels.iter().map(|c| c.id).collect();
    let mut gt = eval.annotations.clone();
    gt.categories.retain(|c| own.contains(&c.id));
    gt.annotations.retain(|a| own.contains(&a.category_id));
    let range = ap_ar_report(&dump, &gt, IouPolicy::CocoRange, 100)?;
    let at50 = ap_ar_report(&dump, &gt, IouPolicy::At05, 100)?;
    Ok(DefenseRow {
        objective: cfg.objective,
        training_patches: cfg.family,
        ap_range: range.ap,
        ar_range: range.ar,
        ap_50: at50.ap,
        ar_50: at50.ar,
        ar_by_source_model: at50.ar_by_source,
    })
}

/// Writes summary rows as CSV with the fixed column order.
pub fn write_defense_csv<W: Write>(mut w: W, rows: &[DefenseRow]) -> Result<()> {
    writeln!(
        w,
        "objective,training_patches,AP_range,AR_range,AP_50,AR_50,AR_by_source_model"
    )?;
    for r in rows {
        let by_source = r
            .ar_by_source_model
            .iter()
            .map(|(m, ar)| format!("{m}={ar:.6}"))
            .collect::<Vec<_>>()
            .join(";");
        writeln!(
            w,
            "{},{},{:.6},{:.6},{:.6},{:.6},{}",
            r.objective.as_str(),
            match r.training_patches {
                PatchFamily::Adversarial => "adversarial",
                PatchFamily::AdversarialHighConfidence => "adversarial-high-confidence",
                PatchFamily::Gaussian => "gaussian",
            },
            r.ap_range,
            r.ar_range,
            r.ap_50,
            r.ar_50,
            by_source
        )?;
    }
    Ok(())
}

pub fn save_defense_csv<P: AsRef<Path>>(rows: &[DefenseRow], path: P) -> Result<()> {
    let mut buf = Vec::new();
    write_defense_csv(&mut buf, rows)?;
    std::fs::write(path, buf)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coco::PatchShape;
    use crate::patch::{init_patch, PatchOptConfig, TransformConfig};
    use crate::scenes::{generate_scenes, scene_categories, SceneConfig};
    use crate::synth::build_flying_patch_dataset;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cats() -> Vec<CategoryRecord> {
        scene_categories()
            .into_iter()
            .map(|(id, name)| CategoryRecord { id, name })
            .collect()
    }

    fn toy_flying(joint: bool, mode: SynthMode) -> SyntheticDataset {
        let scenes = generate_scenes(31, 6, &SceneConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let patch = init_patch(
            &mut rng,
            PatchShape::Square,
            16,
            1,
            "toy-a",
            &TransformConfig::default(),
            &PatchOptConfig::default(),
        );
        build_flying_patch_dataset(
            PatchFamily::Adversarial,
            &[patch],
            &scenes,
            &cats(),
            &TransformConfig {
                scale: (0.15, 0.4),
                ..Default::default()
            },
            mode,
            joint,
            17,
        )
        .unwrap()
    }

    fn tiny_base() -> DetectorModel {
        crate::detector::untrained_model(
            "toy-b",
            cats(),
            &TrainConfig {
                widths: (4, 6, 8),
                resolution: 48,
                ..Default::default()
            },
        )
    }

    fn tiny_cfg(objective: PatchObjective) -> PatchDetectorConfig {
        PatchDetectorConfig {
            objective,
            schedule: TrainConfig {
                epochs: 1,
                widths: (4, 6, 8),
                resolution: 48,
                ap_floor: 0.0,
                min_scenes: 1,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn mode_and_family_mismatches_are_rejected() {
        let base = tiny_base();
        let eval_data = toy_flying(true, SynthMode::FlyingEval);
        let r = finetune_patch_detector(&base, &eval_data, &tiny_cfg(PatchObjective::Joint));
        assert!(matches!(r, Err(Error::InvalidInput(_))));
        let train_data = toy_flying(true, SynthMode::FlyingTrain);
        let mut cfg = tiny_cfg(PatchObjective::Joint);
        cfg.family = PatchFamily::Gaussian;
        assert!(matches!(
            finetune_patch_detector(&base, &train_data, &cfg),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn base_model_must_differ_from_patch_sources() {
        let data = toy_flying(true, SynthMode::FlyingTrain);
        let base = crate::detector::untrained_model(
            "toy-a",
            cats(),
            &TrainConfig {
                widths: (4, 6, 8),
                resolution: 48,
                ..Default::default()
            },
        );
        let r = finetune_patch_detector(&base, &data, &tiny_cfg(PatchObjective::Joint));
        assert!(matches!(r, Err(Error::InvalidInput(_))));
        let mut cfg = tiny_cfg(PatchObjective::Joint);
        cfg.allow_same_source = true;
        finetune_patch_detector(&base, &data, &cfg).unwrap();
    }

    #[test]
    fn label_maps_follow_objective() {
        let base = tiny_base();
        let data = toy_flying(true, SynthMode::FlyingTrain);
        let (joint, _) =
            finetune_patch_detector(&base, &data, &tiny_cfg(PatchObjective::Joint)).unwrap();
        let names: Vec<&str> = joint.meta.labels.iter().map(|c| c.name.as_str()).collect();
        assert!(names.contains(&PATCH_CATEGORY_NAME));
        assert!(names.contains(&"disc"));
        let (patch_only, _) =
            finetune_patch_detector(&base, &data, &tiny_cfg(PatchObjective::PatchOnly)).unwrap();
        assert_eq!(patch_only.meta.labels.len(), 1);
        assert_eq!(patch_only.meta.labels[0].name, PATCH_CATEGORY_NAME);
        // patch-only models can only ever emit the patch category
        let scene = generate_scenes(40, 1, &SceneConfig::default()).remove(0);
        for d in patch_only.detect(&scene.image, 0.0).unwrap() {
            assert_eq!(d.category, patch_only.meta.labels[0].id);
        }
    }

    #[test]
    fn joint_without_object_annotations_is_rejected() {
        let base = tiny_base();
        let data = toy_flying(false, SynthMode::FlyingTrain);
        let r = finetune_patch_detector(&base, &data, &tiny_cfg(PatchObjective::Joint));
        assert!(matches!(r, Err(Error::InvalidInput(_))));
    }

    #[test]
    fn perfect_and_empty_dumps_bound_ap() {
        let data = toy_flying(false, SynthMode::FlyingEval);
        let perfect: Vec<DetectionDumpEntry> = data
            .annotations
            .annotations
            .iter()
            .map(|a| DetectionDumpEntry {
                image_id: a.image_id,
                category_id: a.category_id,
                bbox: a.bbox,
                score: 1.0,
            })
            .collect();
        for policy in [IouPolicy::At05, IouPolicy::CocoRange] {
            let rep = ap_ar_report(&perfect, &data.annotations, policy, 100).unwrap();
            assert!((rep.ap - 1.0).abs() < 1e-9 && (rep.ar - 1.0).abs() < 1e-9);
        }
        let rep = ap_ar_report(&[], &data.annotations, IouPolicy::At05, 100).unwrap();
        assert_eq!(rep.ap, 0.0);
        assert_eq!(rep.ar, 0.0);
        // provenance flows into the source breakdown
        let rep = ap_ar_report(&perfect, &data.annotations, IouPolicy::At05, 100).unwrap();
        assert_eq!(rep.ar_by_source.len(), 1);
        assert_eq!(rep.ar_by_source[0].0, "toy-a");
    }

    #[test]
    fn csv_has_stable_header() {
        let mut buf = Vec::new();
        write_defense_csv(
            &mut buf,
            &[DefenseRow {
                objective: PatchObjective::Joint,
                training_patches: PatchFamily::Adversarial,
                ap_range: 0.5,
                ar_range: 0.6,
                ap_50: 0.7,
                ar_50: 0.8,
                ar_by_source_model: vec![("toy-a".into(), 0.8)],
            }],
        )
        .unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with(
            "objective,training_patches,AP_range,AR_range,AP_50,AR_50,AR_by_source_model\n"
        ));
        assert!(s.contains("joint,adversarial,"));
    }
}
