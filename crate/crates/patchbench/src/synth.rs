//! Synthetic dataset builders: digital-insertion evaluation sets and
//! flying-patch training/evaluation sets, plus the Gaussian-noise control.

use std::path::Path;

use ndarray::Array3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coco::{
    AngleCategory, AnnotationSet, CategoryRecord, ImageRecord, Partition, PatchAnnotation,
    PatchExt, PatchShape,
};
use crate::error::{Error, Result};
use crate::nn::FeatureMap;
use crate::patch::{
    composite, init_patch, sample_transform, PatchOptConfig, PatchRecord, Transform,
    TransformConfig,
};
use crate::scenes::Scene;

pub const GAUSSIAN_CONTROL_MODEL: &str = "gaussian-control";
pub const PATCH_CATEGORY_NAME: &str = "adversarial_patch";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthMode {
    EvalInsertion,
    FlyingTrain,
    FlyingEval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PatchFamily {
    Adversarial,
    AdversarialHighConfidence,
    Gaussian,
}

/// Which patch and transform produced one synthetic image.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProvenanceRecord {
    pub image_id: u64,
    pub patch_id: String,
    pub transform: Transform,
}

/// A generated dataset: pixels, annotations, and per-image provenance.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub annotations: AnnotationSet,
    pub images: Vec<FeatureMap>,
    pub provenance: Vec<ProvenanceRecord>,
    pub mode: SynthMode,
    pub family: PatchFamily,
    pub seed: u64,
    pub transform_config: TransformConfig,
}

fn family_matches(family: PatchFamily, patch: &PatchRecord) -> bool {
    match family {
        PatchFamily::Gaussian => patch.source_model == GAUSSIAN_CONTROL_MODEL,
        PatchFamily::Adversarial => {
            patch.source_model != GAUSSIAN_CONTROL_MODEL && patch.opt_config.reg_weight > 0.0
        }
        PatchFamily::AdversarialHighConfidence => {
            patch.source_model != GAUSSIAN_CONTROL_MODEL && patch.opt_config.reg_weight == 0.0
        }
    }
}

fn check_family(family: PatchFamily, patches: &[PatchRecord]) -> Result<()> {
    if patches.is_empty() {
        return Err(Error::InvalidInput("no patches".into()));
    }
    for (i, p) in patches.iter().enumerate() {
        if !family_matches(family, p) {
            return Err(Error::InvalidInput(format!(
                "patch {i} (source {}) does not belong to family {family:?}",
                p.source_model
            )));
        }
    }
    Ok(())
}

fn patch_id(index: usize, patch: &PatchRecord) -> String {
    format!(
        "{}-{}-cat{}-{}",
        patch.source_model,
        patch.shape.as_str(),
        patch.target_category,
        index
    )
}

fn patch_annotation(
    ann_id: u64,
    image_id: u64,
    bbox: crate::coco::BoundingBox,
    category_id: u32,
    pid: &str,
    patch: &PatchRecord,
) -> PatchAnnotation {
    PatchAnnotation {
        id: ann_id,
        image_id,
        bbox,
        category_id,
        apricot_ext: Some(PatchExt {
            patch_id: pid.to_string(),
            target_model: patch.source_model.clone(),
            target_category: patch.target_category,
            shape: patch.shape,
            // flat digital inserts have no out-of-plane tilt
            angle_votes: vec![AngleCategory::HeadOn; 3],
            warped: false,
            extra: Default::default(),
        }),
    }
}

/// Digital-insertion evaluation set: each patch composited into
/// `per_patch_count` backgrounds, one patch per image, placement box as
/// ground truth.
pub fn build_insertion_eval_set(
    patches: &[PatchRecord],
    backgrounds: &[FeatureMap],
    categories: &[CategoryRecord],
    per_patch_count: usize,
    cfg: &TransformConfig,
    seed: u64,
) -> Result<SyntheticDataset> {
    if patches.is_empty() {
        return Err(Error::InvalidInput("no patches".into()));
    }
    if backgrounds.is_empty() {
        return Err(Error::InvalidInput("no backgrounds".into()));
    }
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::new();
    let mut records = Vec::new();
    let mut annotations = Vec::new();
    let mut provenance = Vec::new();
    let mut next_id: u64 = 1;
    for (pi, patch) in patches.iter().enumerate() {
        let pid = patch_id(pi, patch);
        for _ in 0..per_patch_count {
            let bg = &backgrounds[rng.gen_range(0..backgrounds.len())];
            let dims = (bg.shape()[1], bg.shape()[2]);
            let t = sample_transform(&mut rng, cfg, dims)?;
            let (composed, bbox) = composite(patch, bg, &t)?;
            let id = next_id;
            next_id += 1;
            records.push(ImageRecord {
                id,
                file_name: format!("images/img-{id:05}.png"),
                width: dims.1 as u32,
                height: dims.0 as u32,
            });
            annotations.push(patch_annotation(
                id,
                id,
                bbox,
                patch.target_category,
                &pid,
                patch,
            ));
            provenance.push(ProvenanceRecord {
                image_id: id,
                patch_id: pid.clone(),
                transform: t,
            });
            images.push(composed);
        }
    }
    let annotations = AnnotationSet {
        images: records,
        annotations,
        categories: categories.to_vec(),
        partition: Partition::SyntheticEval,
    };
    annotations.validate()?;
    Ok(SyntheticDataset {
        annotations,
        images,
        provenance,
        mode: SynthMode::EvalInsertion,
        family: if patches.iter().all(|p| p.source_model == GAUSSIAN_CONTROL_MODEL) {
            PatchFamily::Gaussian
        } else if patches.iter().all(|p| p.opt_config.reg_weight == 0.0) {
            PatchFamily::AdversarialHighConfidence
        } else {
            PatchFamily::Adversarial
        },
        seed,
        transform_config: cfg.clone(),
    })
}

/// Flying-patch dataset: patches composited onto scenes and annotated with
/// the `adversarial_patch` category. In joint mode the scenes' own object
/// annotations are kept, so a detector can be trained on both.
#[allow(clippy::too_many_arguments)]
pub fn build_flying_patch_dataset(
    family: PatchFamily,
    patches: &[PatchRecord],
    scenes: &[Scene],
    scene_categories: &[CategoryRecord],
    cfg: &TransformConfig,
    mode: SynthMode,
    joint: bool,
    seed: u64,
) -> Result<SyntheticDataset> {
    check_family(family, patches)?;
    if scenes.is_empty() {
        return Err(Error::InvalidInput("no backgrounds".into()));
    }
    if mode == SynthMode::EvalInsertion {
        return Err(Error::InvalidInput(
            "flying-patch datasets use flying-train or flying-eval mode".into(),
        ));
    }
    cfg.validate()?;
    let patch_cat = scene_categories.iter().map(|c| c.id).max().unwrap_or(0) + 1;
    let mut categories = scene_categories.to_vec();
    categories.push(CategoryRecord {
        id: patch_cat,
        name: PATCH_CATEGORY_NAME.to_string(),
    });
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::new();
    let mut records = Vec::new();
    let mut annotations = Vec::new();
    let mut provenance = Vec::new();
    let mut ann_id: u64 = 1;
    for (i, scene) in scenes.iter().enumerate() {
        let image_id = i as u64 + 1;
        let pi = rng.gen_range(0..patches.len());
        let patch = &patches[pi];
        let pid = patch_id(pi, patch);
        let dims = (scene.image.shape()[1], scene.image.shape()[2]);
        let t = sample_transform(&mut rng, cfg, dims)?;
        let (composed, bbox) = composite(patch, &scene.image, &t)?;
        records.push(ImageRecord {
            id: image_id,
            file_name: format!("images/img-{image_id:05}.png"),
            width: dims.1 as u32,
            height: dims.0 as u32,
        });
        annotations.push(patch_annotation(ann_id, image_id, bbox, patch_cat, &pid, patch));
        ann_id += 1;
        if joint {
            for (cat, bb) in &scene.objects {
                // drop objects mostly hidden behind the pasted patch; their
                // pixels are gone and keeping the boxes caps achievable AP
                let ix = (bb.right().min(bbox.right()) - bb.x.max(bbox.x)).max(0.0);
                let iy = (bb.bottom().min(bbox.bottom()) - bb.y.max(bbox.y)).max(0.0);
                if ix * iy > 0.5 * bb.w * bb.h {
                    continue;
                }
                annotations.push(PatchAnnotation {
                    id: ann_id,
                    image_id,
                    bbox: *bb,
                    category_id: *cat,
                    apricot_ext: None,
                });
                ann_id += 1;
            }
        }
        provenance.push(ProvenanceRecord {
            image_id,
            patch_id: pid,
            transform: t,
        });
        images.push(composed);
    }
    let annotations = AnnotationSet {
        images: records,
        annotations,
        categories,
        partition: match mode {
            SynthMode::FlyingTrain => Partition::SyntheticTrain,
            _ => Partition::SyntheticEval,
        },
    };
    annotations.validate()?;
    Ok(SyntheticDataset {
        annotations,
        images,
        provenance,
        mode,
        family,
        seed,
        transform_config: cfg.clone(),
    })
}

/// A Gaussian-noise control patch: i.i.d. normal pixels (mean 0.5,
/// std 0.25) clipped to [0,1] inside the mask.
pub fn gaussian_control_patch(
    shape: PatchShape,
    resolution: usize,
    rng: &mut impl Rng,
) -> PatchRecord {
    let mut patch = init_patch(
        rng,
        shape,
        resolution,
        0,
        GAUSSIAN_CONTROL_MODEL,
        &TransformConfig::default(),
        &PatchOptConfig::default(),
    );
    let mask = patch.mask.clone();
    patch.pixels = Array3::from_shape_fn((3, resolution, resolution), |(_, y, x)| {
        // Box-Muller draw; one normal per pixel keeps the stream simple
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        if mask[[y, x]] > 0.0 {
            (0.5 + 0.25 * z).clamp(0.0, 1.0)
        } else {
            0.5
        }
    });
    patch
}

/// Serialized dataset manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub mode: SynthMode,
    pub family: PatchFamily,
    pub transform_config: TransformConfig,
    pub provenance: Vec<ProvenanceRecord>,
}

/// Writes `images/*.png`, `annotations.json` and `manifest.json` under `dir`.
pub fn save_dataset(ds: &SyntheticDataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir.join("images"))?;
    for (img, rec) in ds.images.iter().zip(&ds.annotations.images) {
        crate::scenes::save_png(img, dir.join(&rec.file_name))?;
    }
    crate::coco::save_annotation_set(&ds.annotations, dir.join("annotations.json"))?;
    let manifest = DatasetManifest {
        seed: ds.seed,
        mode: ds.mode,
        family: ds.family,
        transform_config: ds.transform_config.clone(),
        provenance: ds.provenance.clone(),
    };
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

/// Loads a dataset previously written by [`save_dataset`]. Pixel values go
/// through PNG quantization, so they match the originals to 1/255.
pub fn load_dataset(dir: &Path) -> Result<SyntheticDataset> {
    let annotations = crate::coco::load_annotation_set(dir.join("annotations.json"))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    let mut images = Vec::with_capacity(annotations.images.len());
    for rec in &annotations.images {
        images.push(crate::scenes::load_png(dir.join(&rec.file_name))?);
    }
    Ok(SyntheticDataset {
        annotations,
        images,
        provenance: manifest.provenance,
        mode: manifest.mode,
        family: manifest.family,
        seed: manifest.seed,
        transform_config: manifest.transform_config,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenes::{generate_scenes, SceneConfig};

    fn toy_patches(n: usize) -> Vec<PatchRecord> {
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        (0..n)
            .map(|i| {
                let mut p = init_patch(
                    &mut rng,
                    if i % 2 == 0 { PatchShape::Circle } else { PatchShape::Square },
                    16,
                    1 + (i as u32 % 3),
                    "toy-a",
                    &TransformConfig::default(),
                    &PatchOptConfig { reg_weight: 0.05, ..Default::default() },
                );
                p.opt_config.reg_weight = 0.05;
                p
            })
            .collect()
    }

    fn cats() -> Vec<CategoryRecord> {
        crate::scenes::scene_categories()
            .into_iter()
            .map(|(id, name)| CategoryRecord { id, name })
            .collect()
    }

    #[test]
    fn insertion_set_counts_match() {
        let scenes = generate_scenes(5, 8, &SceneConfig::default());
        let bgs: Vec<FeatureMap> = scenes.iter().map(|s| s.image.clone()).collect();
        let patches = toy_patches(4);
        let cfg = TransformConfig {
            scale: (0.05, 0.25),
            ..Default::default()
        };
        let ds = build_insertion_eval_set(&patches, &bgs, &cats(), 15, &cfg, 3).unwrap();
        assert_eq!(ds.annotations.images.len(), 60);
        assert_eq!(ds.annotations.annotations.len(), 60);
        assert_eq!(ds.images.len(), 60);
        let empty = build_insertion_eval_set(&patches, &bgs, &cats(), 0, &cfg, 3).unwrap();
        assert!(empty.annotations.images.is_empty());
    }

    #[test]
    fn insertion_set_is_deterministic() {
        let scenes = generate_scenes(6, 4, &SceneConfig::default());
        let bgs: Vec<FeatureMap> = scenes.iter().map(|s| s.image.clone()).collect();
        let patches = toy_patches(2);
        let cfg = TransformConfig::default();
        let a = build_insertion_eval_set(&patches, &bgs, &cats(), 5, &cfg, 9).unwrap();
        let b = build_insertion_eval_set(&patches, &bgs, &cats(), 5, &cfg, 9).unwrap();
        for (x, y) in a.annotations.annotations.iter().zip(&b.annotations.annotations) {
            assert_eq!(x.bbox, y.bbox);
        }
        for (x, y) in a.images.iter().zip(&b.images) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn flying_modes_annotate_as_specified() {
        let scenes = generate_scenes(7, 6, &SceneConfig::default());
        let patches = toy_patches(3);
        let cfg = TransformConfig {
            scale: (0.1, 0.3),
            ..Default::default()
        };
        let joint = build_flying_patch_dataset(
            PatchFamily::Adversarial,
            &patches,
            &scenes,
            &cats(),
            &cfg,
            SynthMode::FlyingTrain,
            true,
            2,
        )
        .unwrap();
        for (i, scene) in scenes.iter().enumerate() {
            let n = joint
                .annotations
                .annotations
                .iter()
                .filter(|a| a.image_id == i as u64 + 1)
                .count();
            assert_eq!(n, scene.objects.len() + 1);
        }
        let patch_only = build_flying_patch_dataset(
            PatchFamily::Adversarial,
            &patches,
            &scenes,
            &cats(),
            &cfg,
            SynthMode::FlyingEval,
            false,
            2,
        )
        .unwrap();
        assert!(patch_only
            .annotations
            .annotations
            .iter()
            .all(|a| a.apricot_ext.is_some()));
        assert_eq!(patch_only.annotations.annotations.len(), scenes.len());
        let patch_cat = patch_only.annotations.categories.last().unwrap();
        assert_eq!(patch_cat.name, PATCH_CATEGORY_NAME);
        assert!(patch_only
            .annotations
            .annotations
            .iter()
            .all(|a| a.category_id == patch_cat.id));
    }

    #[test]
    fn family_mismatch_is_rejected() {
        let scenes = generate_scenes(8, 2, &SceneConfig::default());
        let patches = toy_patches(1);
        let r = build_flying_patch_dataset(
            PatchFamily::Gaussian,
            &patches,
            &scenes,
            &cats(),
            &TransformConfig::default(),
            SynthMode::FlyingTrain,
            false,
            0,
        );
        assert!(matches!(r, Err(Error::InvalidInput(_))));
    }

    #[test]
    fn gaussian_control_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let p = gaussian_control_patch(PatchShape::Square, 200, &mut rng);
        let n = (200 * 200 * 3) as f64;
        let mean: f64 = p.pixels.iter().sum::<f64>() / n;
        assert!((mean - 0.5).abs() < 0.02, "mean {mean}");
        let mut rng2 = ChaCha8Rng::seed_from_u64(21);
        let q = gaussian_control_patch(PatchShape::Square, 200, &mut rng2);
        assert_eq!(p.pixels, q.pixels);
    }

    #[test]
    fn dataset_roundtrips_through_disk() {
        let scenes = generate_scenes(9, 3, &SceneConfig::default());
        let bgs: Vec<FeatureMap> = scenes.iter().map(|s| s.image.clone()).collect();
        let patches = toy_patches(1);
        let ds = build_insertion_eval_set(
            &patches,
            &bgs,
            &cats(),
            2,
            &TransformConfig::default(),
            4,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let loaded = crate::coco::load_annotation_set(dir.path().join("annotations.json")).unwrap();
        assert_eq!(loaded, ds.annotations);
        for rec in &loaded.images {
            assert!(dir.path().join(&rec.file_name).exists());
        }
        let manifest: DatasetManifest =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap())
                .unwrap();
        assert_eq!(manifest.provenance.len(), ds.images.len());
    }
}
