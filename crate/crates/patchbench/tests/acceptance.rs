//! Acceptance suite: one test per criterion, each printing a single
//! `ACCEPTANCE <n> ...: PASS/FAIL` line with the measured numbers.
//!
//! Heavy fixtures (trained detectors, optimized patches, insertion sets)
//! are shared across tests through `OnceLock`.

use std::sync::OnceLock;

use ndarray::Array3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use patchbench::coco::{
    iou, AnnotationSet, BoundingBox, CategoryRecord, Detection, PatchShape,
};
use patchbench::defense_localization::{
    fit_gmm, natural_window_corpus, score_dataset_windows, train_autoencoder, window_roc,
    AutoencoderConfig,
};
use patchbench::defense_statistical::{
    fit_combiner, roc, score_insertion_dataset, StatDefenseConfig,
};
use patchbench::defense_supervised::{
    detect_dataset, evaluate_patch_detector, finetune_patch_detector, PatchDetectorConfig,
    PatchObjective,
};
use patchbench::detector::{train_toy_detector, DetectorModel, LossAgg, TrainConfig};
use patchbench::fooling::{
    breakdown_report, evaluate_run, fooling_rate, match_fooling_events, DetectionDumpEntry,
    EvalRun, Facet,
};
use patchbench::metrics::{ap_ar_at, GtBox, ScoredBox};
use patchbench::nn::FeatureMap;
use patchbench::patch::{
    composite, composite_grad, generate_patch, init_patch, sample_transform, PatchOptConfig,
    PatchRecord, TransformConfig,
};
use patchbench::scenes::{generate_scenes, scene_categories, SceneConfig};
use patchbench::synth::{
    build_flying_patch_dataset, build_insertion_eval_set, gaussian_control_patch, PatchFamily,
    SyntheticDataset, SynthMode,
};

const PATCH_SEEDS: [u64; 3] = [3, 4, 5];
const TARGET_CATEGORY: u32 = 3;
const PATCH_RESOLUTION: usize = 64;
const INSERTIONS_PER_PATCH: usize = 30;

fn labels() -> Vec<CategoryRecord> {
    scene_categories()
        .into_iter()
        .map(|(id, name)| CategoryRecord { id, name })
        .collect()
}

struct Fixtures {
    model_a: DetectorModel,
    model_b: DetectorModel,
    patches: Vec<PatchRecord>,
    /// Unregularized variant used by the joint supervised-defense check.
    patch_hc: PatchRecord,
    holdout_backgrounds: Vec<FeatureMap>,
}

static FIXTURES: OnceLock<Fixtures> = OnceLock::new();

fn patch_transform() -> TransformConfig {
    TransformConfig {
        scale: (0.1, 0.5),
        ..Default::default()
    }
}

fn patch_opt(seed: u64) -> PatchOptConfig {
    PatchOptConfig {
        seed,
        iterations: 500,
        lr: 0.05,
        batch_size: 4,
        reg_weight: 0.05,
        loss_agg: LossAgg::default(),
    }
}

fn fixtures() -> &'static Fixtures {
    FIXTURES.get_or_init(|| {
        let scenes_a = generate_scenes(1, 600, &SceneConfig::default());
        let (model_a, ma) =
            train_toy_detector("toy-a", &scenes_a, labels(), &TrainConfig::default()).unwrap();
        eprintln!("[fixtures] detector A holdout AP50 {:.3}", ma.holdout_ap50);
        let scenes_b = generate_scenes(3, 600, &SceneConfig::default());
        let cfg_b = TrainConfig {
            seed: 7,
            widths: (10, 20, 28),
            ..Default::default()
        };
        let (model_b, mb) = train_toy_detector("toy-b", &scenes_b, labels(), &cfg_b).unwrap();
        eprintln!("[fixtures] detector B holdout AP50 {:.3}", mb.holdout_ap50);
        let train_backgrounds: Vec<FeatureMap> =
            scenes_a.iter().map(|s| s.image.clone()).collect();
        let holdout_backgrounds: Vec<FeatureMap> = generate_scenes(
            2,
            100,
            &SceneConfig {
                max_objects: 1,
                ..Default::default()
            },
        )
        .into_iter()
        .map(|s| s.image)
        .collect();
        let patches = PATCH_SEEDS
            .iter()
            .map(|&seed| {
                let (p, _) = generate_patch(
                    &model_a,
                    TARGET_CATEGORY,
                    PatchShape::Square,
                    PATCH_RESOLUTION,
                    &patch_transform(),
                    &train_backgrounds,
                    &patch_opt(seed),
                )
                .unwrap();
                eprintln!("[fixtures] patch seed {seed} final loss {:?}", p.final_loss);
                p
            })
            .collect();
        let (patch_hc, _) = generate_patch(
            &model_a,
            TARGET_CATEGORY,
            PatchShape::Square,
            PATCH_RESOLUTION,
            &patch_transform(),
            &train_backgrounds,
            &PatchOptConfig {
                reg_weight: 0.0,
                ..patch_opt(PATCH_SEEDS[0])
            },
        )
        .unwrap();
        Fixtures {
            model_a,
            model_b,
            patches,
            patch_hc,
            holdout_backgrounds,
        }
    })
}

/// Insertion dataset and detection dumps per patch seed, reused by the
/// attack-efficacy and trend criteria.
struct SeedEval {
    /// Narrow insertion scale range for efficacy / transfer.
    narrow: SyntheticDataset,
    narrow_dump_a: Vec<DetectionDumpEntry>,
    narrow_dump_b: Vec<DetectionDumpEntry>,
    /// Wide insertion scale range populating all size buckets.
    wide: SyntheticDataset,
    wide_dump_a: Vec<DetectionDumpEntry>,
}

static SEED_EVALS: OnceLock<Vec<SeedEval>> = OnceLock::new();

fn seed_evals() -> &'static Vec<SeedEval> {
    SEED_EVALS.get_or_init(|| {
        let fx = fixtures();
        fx.patches
            .iter()
            .enumerate()
            .map(|(i, patch)| {
                let narrow = build_insertion_eval_set(
                    std::slice::from_ref(patch),
                    &fx.holdout_backgrounds,
                    &labels(),
                    INSERTIONS_PER_PATCH,
                    &TransformConfig {
                        scale: (0.05, 0.25),
                        ..Default::default()
                    },
                    777 + i as u64,
                )
                .unwrap();
                let wide = build_insertion_eval_set(
                    std::slice::from_ref(patch),
                    &fx.holdout_backgrounds,
                    &labels(),
                    40,
                    &TransformConfig {
                        scale: (0.05, 0.6),
                        ..Default::default()
                    },
                    880 + i as u64,
                )
                .unwrap();
                SeedEval {
                    narrow_dump_a: detect_dataset(&fx.model_a, &narrow, 0.05).unwrap(),
                    narrow_dump_b: detect_dataset(&fx.model_b, &narrow, 0.05).unwrap(),
                    wide_dump_a: detect_dataset(&fx.model_a, &wide, 0.05).unwrap(),
                    narrow,
                    wide,
                }
            })
            .collect()
    })
}

fn eval(dump: &[DetectionDumpEntry], gt: &AnnotationSet, model: &str) -> EvalRun {
    evaluate_run(dump, gt, model, 0.10, 0.30).unwrap()
}

fn targeted_counts(run: &EvalRun) -> (usize, usize) {
    let row = fooling_rate(run).into_iter().find(|r| r.targeted).unwrap();
    (row.n_fooled, row.n_images)
}

/// Targeted fooling counts of a patch evaluated on its own insertion set.
fn rate_of(model: &DetectorModel, patch: &PatchRecord, fx: &Fixtures, seed: u64) -> (usize, usize) {
    let ds = build_insertion_eval_set(
        std::slice::from_ref(patch),
        &fx.holdout_backgrounds,
        &labels(),
        INSERTIONS_PER_PATCH,
        &TransformConfig {
            scale: (0.05, 0.25),
            ..Default::default()
        },
        seed,
    )
    .unwrap();
    let dump = detect_dataset(model, &ds, 0.05).unwrap();
    targeted_counts(&eval(&dump, &ds.annotations, &model.meta.model_id))
}

fn random_box(rng: &mut ChaCha8Rng) -> BoundingBox {
    BoundingBox::new(
        rng.gen_range(0.0..60.0),
        rng.gen_range(0.0..60.0),
        rng.gen_range(2.0..40.0),
        rng.gen_range(2.0..40.0),
    )
}

/// Independent IoU used by the oracles: plain interval arithmetic, written
/// separately from the library implementation.
fn iou_oracle(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let ix = (a.x + a.w).min(b.x + b.w) - a.x.max(b.x);
    let iy = (a.y + a.h).min(b.y + b.h) - a.y.max(b.y);
    if ix <= 0.0 || iy <= 0.0 {
        return 0.0;
    }
    let inter = ix * iy;
    inter / (a.w * a.h + b.w * b.h - inter)
}

#[test]
fn criterion_01_fooling_event_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut mismatches = 0usize;
    let mut brute_targeted_fooled = 0usize;
    let mut brute_any_fooled = 0usize;
    let mut images = Vec::new();
    let mut anns = Vec::new();
    let mut all_dets: Vec<DetectionDumpEntry> = Vec::new();
    let n_images = 1000usize;
    for img in 0..n_images as u64 {
        let gt_box = random_box(&mut rng);
        let target: u32 = rng.gen_range(1..=3);
        let ann = patchbench::coco::PatchAnnotation {
            id: img + 1,
            image_id: img + 1,
            bbox: gt_box,
            category_id: target,
            apricot_ext: Some(patchbench::coco::PatchExt {
                patch_id: format!("p{img}"),
                target_model: "toy-a".into(),
                target_category: target,
                shape: PatchShape::Square,
                angle_votes: vec![patchbench::coco::AngleCategory::HeadOn; 3],
                warped: false,
                extra: Default::default(),
            }),
        };
        let n_dets = rng.gen_range(0..=20usize);
        let dets: Vec<Detection> = (0..n_dets)
            .map(|_| Detection {
                box_: random_box(&mut rng),
                category: rng.gen_range(1..=3),
                confidence: rng.gen_range(0.0..1.0),
            })
            .collect();

        // brute force: the three rules, written out directly
        let mut brute: Vec<(usize, bool)> = Vec::new();
        for (di, d) in dets.iter().enumerate() {
            let conf_ok = d.confidence > 0.30;
            let area_ok = d.box_.w * d.box_.h <= 2.0 * (gt_box.w * gt_box.h);
            let iou_ok = iou_oracle(&d.box_, &gt_box) >= 0.10;
            if conf_ok && area_ok && iou_ok {
                brute.push((di, d.category == target));
            }
        }
        if !brute.is_empty() {
            brute_any_fooled += 1;
        }
        if brute.iter().any(|&(_, t)| t) {
            brute_targeted_fooled += 1;
        }

        let events = match_fooling_events(&dets, &ann, img + 1, 0.10, 0.30).unwrap();
        let got: Vec<(usize, bool)> = events
            .iter()
            .map(|e| {
                let di = dets
                    .iter()
                    .position(|d| d.box_ == e.detection.box_ && d.category == e.detection.category
                        && d.confidence == e.detection.confidence)
                    .unwrap();
                (di, e.targeted)
            })
            .collect();
        if got != brute {
            mismatches += 1;
        }
        for (ev, &(di, _)) in events.iter().zip(&got) {
            assert!((ev.iou - iou_oracle(&dets[di].box_, &gt_box)).abs() < 1e-12);
        }

        images.push(patchbench::coco::ImageRecord {
            id: img + 1,
            file_name: format!("img-{img}.png"),
            width: 100,
            height: 100,
        });
        anns.push(ann);
        all_dets.extend(dets.iter().map(|d| DetectionDumpEntry {
            image_id: img + 1,
            category_id: d.category,
            bbox: d.box_,
            score: d.confidence,
        }));
    }
    let set = AnnotationSet {
        images,
        annotations: anns,
        categories: labels(),
        partition: patchbench::coco::Partition::SyntheticEval,
    };
    let run = evaluate_run(&all_dets, &set, "toy-a", 0.10, 0.30).unwrap();
    let rows = fooling_rate(&run);
    let targeted = rows.iter().find(|r| r.targeted).unwrap();
    let any = rows.iter().find(|r| !r.targeted).unwrap();
    let rates_ok = targeted.n_fooled == brute_targeted_fooled
        && any.n_fooled == brute_any_fooled
        && targeted.n_images == n_images;
    let pass = mismatches == 0 && rates_ok;
    println!(
        "ACCEPTANCE 1 fooling-event oracle: {} ({n_images} instances, {mismatches} event mismatches, \
         targeted {}={}, any {}={})",
        if pass { "PASS" } else { "FAIL" },
        targeted.n_fooled, brute_targeted_fooled, any.n_fooled, brute_any_fooled
    );
    assert!(pass);
}

/// Brute-force greedy matcher and 101-point AP, written independently.
fn ap_ar_oracle(
    dets: &[ScoredBox],
    gts: &[GtBox],
    category: u32,
    thr: f64,
) -> (f64, f64) {
    let mut order: Vec<usize> = (0..dets.len())
        .filter(|&i| dets[i].category == category)
        .collect();
    order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap().then(a.cmp(&b)));
    let mut taken = vec![false; gts.len()];
    let mut tps: Vec<(f64, bool)> = Vec::new();
    for &di in &order {
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in gts.iter().enumerate() {
            if taken[gi] || g.category != category || g.image_id != dets[di].image_id {
                continue;
            }
            let ov = iou_oracle(&dets[di].box_, &g.box_);
            if ov >= thr && best.map_or(true, |(_, b)| ov > b) {
                best = Some((gi, ov));
            }
        }
        if let Some((gi, _)) = best {
            taken[gi] = true;
            tps.push((dets[di].score, true));
        } else {
            tps.push((dets[di].score, false));
        }
    }
    let n_gt = gts.iter().filter(|g| g.category == category).count();
    if n_gt == 0 {
        return (0.0, 0.0);
    }
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut pr = Vec::new();
    for &(_, is_tp) in &tps {
        if is_tp {
            tp += 1.0;
        } else {
            fp += 1.0;
        }
        pr.push((tp / n_gt as f64, tp / (tp + fp)));
    }
    let mut ap = 0.0;
    for i in 0..=100 {
        let r = i as f64 / 100.0;
        let p = pr
            .iter()
            .filter(|(rec, _)| *rec >= r)
            .map(|(_, p)| *p)
            .fold(0.0f64, f64::max);
        ap += p / 101.0;
    }
    let ar = taken
        .iter()
        .zip(gts)
        .filter(|(&t, g)| t && g.category == category)
        .count() as f64
        / n_gt as f64;
    (ap, ar)
}

#[test]
fn criterion_02_iou_and_ap_oracles() {
    // IoU vs pixel rasterization on integer boxes
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut max_iou_err: f64 = 0.0;
    for _ in 0..100 {
        let ib = |rng: &mut ChaCha8Rng| {
            BoundingBox::new(
                rng.gen_range(0..30) as f64,
                rng.gen_range(0..30) as f64,
                rng.gen_range(1..25) as f64,
                rng.gen_range(1..25) as f64,
            )
        };
        let a = ib(&mut rng);
        let b = ib(&mut rng);
        // count unit cells inside each box / both boxes
        let mut inter = 0usize;
        let mut union = 0usize;
        for y in 0..60 {
            for x in 0..60 {
                let cx = x as f64 + 0.5;
                let cy = y as f64 + 0.5;
                let in_a = cx > a.x && cx < a.right() && cy > a.y && cy < a.bottom();
                let in_b = cx > b.x && cx < b.right() && cy > b.y && cy < b.bottom();
                if in_a && in_b {
                    inter += 1;
                }
                if in_a || in_b {
                    union += 1;
                }
            }
        }
        let raster = inter as f64 / union as f64;
        max_iou_err = max_iou_err.max((iou(&a, &b).unwrap() - raster).abs());
    }

    // AP/AR vs brute-force matcher on micro-instances
    let mut max_ap_err: f64 = 0.0;
    let mut max_ar_err: f64 = 0.0;
    for inst in 0..200 {
        let mut rng = ChaCha8Rng::seed_from_u64(3000 + inst);
        let n_img = rng.gen_range(1..=3u64);
        let gts: Vec<GtBox> = (0..rng.gen_range(1..=6))
            .map(|_| GtBox {
                image_id: rng.gen_range(1..=n_img),
                category: rng.gen_range(1..=2),
                box_: random_box(&mut rng),
                source: None,
            })
            .collect();
        let dets: Vec<ScoredBox> = (0..rng.gen_range(0..=8))
            .enumerate()
            .map(|(i, _)| ScoredBox {
                image_id: rng.gen_range(1..=n_img),
                category: rng.gen_range(1..=2),
                box_: random_box(&mut rng),
                // distinct scores keep ordering unambiguous
                score: rng.gen_range(0.0..1.0) + i as f64 * 1e-9,
            })
            .collect();
        for cat in [1u32, 2] {
            for thr in [0.10, 0.5, 0.75] {
                let (ap, ar) = ap_ar_at(&dets, &gts, cat, thr, 100);
                let (ap_o, ar_o) = ap_ar_oracle(&dets, &gts, cat, thr);
                max_ap_err = max_ap_err.max((ap - ap_o).abs());
                max_ar_err = max_ar_err.max((ar - ar_o).abs());
            }
        }
    }
    let pass = max_iou_err < 1e-9 && max_ap_err < 1e-9 && max_ar_err < 1e-9;
    println!(
        "ACCEPTANCE 2 iou/ap oracles: {} (iou err {max_iou_err:.2e}, ap err {max_ap_err:.2e}, \
         ar err {max_ar_err:.2e})",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass);
}

#[test]
fn criterion_03_eot_efficacy_whitebox() {
    let fx = fixtures();
    let evals = seed_evals();
    let (mut eot_f, mut eot_n) = (0usize, 0usize);
    let (mut init_f, mut init_n) = (0usize, 0usize);
    let (mut gauss_f, mut gauss_n) = (0usize, 0usize);
    for (i, (patch, ev)) in fx.patches.iter().zip(evals.iter()).enumerate() {
        let (f, n) = targeted_counts(&eval(&ev.narrow_dump_a, &ev.narrow.annotations, "toy-a"));
        eot_f += f;
        eot_n += n;
        let mut rng = ChaCha8Rng::seed_from_u64(patch.opt_config.seed);
        let init = init_patch(
            &mut rng,
            PatchShape::Square,
            PATCH_RESOLUTION,
            TARGET_CATEGORY,
            "toy-a",
            &patch_transform(),
            &patch.opt_config,
        );
        let (f, n) = rate_of(&fx.model_a, &init, fx, 777 + i as u64);
        init_f += f;
        init_n += n;
        let mut grng = ChaCha8Rng::seed_from_u64(42 + i as u64);
        let mut gauss = gaussian_control_patch(PatchShape::Square, PATCH_RESOLUTION, &mut grng);
        gauss.target_category = TARGET_CATEGORY;
        let (f, n) = rate_of(&fx.model_a, &gauss, fx, 777 + i as u64);
        gauss_f += f;
        gauss_n += n;
    }
    let eot = eot_f as f64 / eot_n as f64;
    let init = init_f as f64 / init_n as f64;
    let gauss = gauss_f as f64 / gauss_n as f64;
    let pass = eot >= 5.0 * gauss && eot > init;
    println!(
        "ACCEPTANCE 3 EoT efficacy: {} (eot {eot:.3} [{eot_f}/{eot_n}], gaussian {gauss:.3} \
         [{gauss_f}/{gauss_n}], init {init:.3} [{init_f}/{init_n}])",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass);
}

#[test]
fn criterion_04_whitebox_beats_blackbox() {
    let evals = seed_evals();
    let mut wins = 0usize;
    let mut detail = String::new();
    for (i, ev) in evals.iter().enumerate() {
        let (wf, wn) = targeted_counts(&eval(&ev.narrow_dump_a, &ev.narrow.annotations, "toy-a"));
        let (bf, bn) = targeted_counts(&eval(&ev.narrow_dump_b, &ev.narrow.annotations, "toy-b"));
        let white = wf as f64 / wn as f64;
        let black = bf as f64 / bn as f64;
        if white > black {
            wins += 1;
        }
        detail.push_str(&format!(
            "seed{}: white {white:.3} vs black {black:.3}; ",
            PATCH_SEEDS[i]
        ));
    }
    let pass = wins * 2 > evals.len();
    println!(
        "ACCEPTANCE 4 white-box > black-box: {} ({wins}/{} seeds; {detail})",
        if pass { "PASS" } else { "FAIL" },
        evals.len()
    );
    assert!(pass);
}

#[test]
fn criterion_05_size_monotonicity() {
    let evals = seed_evals();
    let mut pass = true;
    let mut detail = String::new();
    for (i, ev) in evals.iter().enumerate() {
        let run = eval(&ev.wide_dump_a, &ev.wide.annotations, "toy-a");
        let rows = breakdown_report(&run, &[Facet::Size]).unwrap();
        let rate = |bucket: &str| {
            rows.iter()
                .find(|r| r.facet_value == bucket && r.targeted)
                .map(|r| r.rate)
        };
        let small = rate("small").unwrap_or(0.0);
        let large = rate("large").expect("wide scale range must populate the large bucket");
        if large < small {
            pass = false;
        }
        detail.push_str(&format!(
            "seed{}: small {small:.3} large {large:.3}; ",
            PATCH_SEEDS[i]
        ));
    }
    println!(
        "ACCEPTANCE 5 size monotonicity: {} ({detail})",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass);
}

#[test]
fn criterion_06_iou_threshold_monotonicity() {
    let evals = seed_evals();
    let mut pass = true;
    let mut max_delta: f64 = 0.0;
    for ev in evals.iter() {
        for (dump, ds) in [(&ev.narrow_dump_a, &ev.narrow), (&ev.wide_dump_a, &ev.wide)] {
            let lenient = evaluate_run(dump, &ds.annotations, "toy-a", 0.10, 0.30).unwrap();
            let strict = evaluate_run(dump, &ds.annotations, "toy-a", 0.50, 0.30).unwrap();
            for (lo, hi) in fooling_rate(&strict).iter().zip(fooling_rate(&lenient).iter()) {
                assert_eq!(lo.targeted, hi.targeted);
                if lo.rate > hi.rate {
                    pass = false;
                }
                max_delta = max_delta.max(hi.rate - lo.rate);
            }
        }
    }
    println!(
        "ACCEPTANCE 6 IoU threshold monotonicity: {} (max rate drop 0.10 -> 0.50: {max_delta:.3})",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass);
}

#[test]
fn criterion_07_supervised_defense() {
    let fx = fixtures();
    let fly_cfg = TransformConfig {
        scale: (0.1, 0.3),
        ..Default::default()
    };
    // objects below ~20 px lose too many pixels behind flying patches to
    // stay detectable, so the defense corpus keeps them slightly larger
    let fly_scene_cfg = SceneConfig {
        min_obj_size: 20.0,
        ..Default::default()
    };
    let train_scenes = generate_scenes(11, 600, &fly_scene_cfg);
    let eval_scenes = generate_scenes(12, 120, &fly_scene_cfg);
    let adv = std::slice::from_ref(&fx.patches[0]);
    let hc = std::slice::from_ref(&fx.patch_hc);
    let mut grng = ChaCha8Rng::seed_from_u64(42);
    let mut gauss = gaussian_control_patch(PatchShape::Square, PATCH_RESOLUTION, &mut grng);
    gauss.target_category = TARGET_CATEGORY;

    // the family comparison uses a slightly smaller flying scale: large
    // patches are trivially localizable whatever the training texture,
    // which washes out the family effect under test
    let po_cfg = TransformConfig {
        scale: (0.1, 0.25),
        ..Default::default()
    };
    let mk = |family, patches, scenes: &[patchbench::scenes::Scene], cfg, mode, seed| {
        build_flying_patch_dataset(family, patches, scenes, &labels(), cfg, mode, true, seed)
            .unwrap()
    };
    let ds_train_hc = mk(
        PatchFamily::AdversarialHighConfidence, hc, &train_scenes, &fly_cfg,
        SynthMode::FlyingTrain, 21,
    );
    let ds_eval_hc = mk(
        PatchFamily::AdversarialHighConfidence, hc, &eval_scenes, &fly_cfg,
        SynthMode::FlyingEval, 22,
    );
    let ds_train_adv = mk(
        PatchFamily::Adversarial, adv, &train_scenes, &po_cfg, SynthMode::FlyingTrain, 24,
    );
    let ds_eval_adv = mk(
        PatchFamily::Adversarial, adv, &eval_scenes, &po_cfg, SynthMode::FlyingEval, 25,
    );
    let ds_train_gauss = mk(
        PatchFamily::Gaussian, std::slice::from_ref(&gauss), &train_scenes, &po_cfg,
        SynthMode::FlyingTrain, 23,
    );
    let schedule = |epochs| TrainConfig {
        seed: 7,
        epochs,
        widths: (10, 20, 28),
        ap_floor: 0.0,
        min_scenes: 1,
        ..Default::default()
    };
    let run = |objective, epochs, data: &SyntheticDataset, eval_ds: &SyntheticDataset| {
        let cfg = PatchDetectorConfig {
            objective,
            family: data.family,
            schedule: schedule(epochs),
            allow_same_source: false,
        };
        let (m, _) = finetune_patch_detector(&fx.model_b, data, &cfg).unwrap();
        evaluate_patch_detector(&m, &cfg, eval_ds, 0.05).unwrap()
    };
    let joint = run(PatchObjective::Joint, 30, &ds_train_hc, &ds_eval_hc);
    let po_adv = run(PatchObjective::PatchOnly, 10, &ds_train_adv, &ds_eval_adv);
    let po_gauss = run(PatchObjective::PatchOnly, 10, &ds_train_gauss, &ds_eval_adv);
    let pass = joint.ap_50 >= 0.9 && po_adv.ap_50 >= po_gauss.ap_50 + 0.05;
    println!(
        "ACCEPTANCE 7 supervised defense: {} (joint AP@0.5 {:.3}; patch-only adversarial {:.3} \
         vs gaussian {:.3})",
        if pass { "PASS" } else { "FAIL" },
        joint.ap_50,
        po_adv.ap_50,
        po_gauss.ap_50
    );
    assert!(pass);
}

#[test]
fn criterion_08_statistical_defense() {
    let fx = fixtures();
    let ds = build_insertion_eval_set(
        &fx.patches,
        &fx.holdout_backgrounds,
        &labels(),
        60,
        &TransformConfig {
            scale: (0.1, 0.3),
            ..Default::default()
        },
        909,
    )
    .unwrap();
    let natural: Vec<FeatureMap> = generate_scenes(9, 100, &SceneConfig::default())
        .into_iter()
        .map(|s| s.image)
        .collect();
    let cfg = StatDefenseConfig {
        // variance estimates from 30 trials are too noisy to rank ~400
        // detections; 100 trials tightens them at negligible cost
        dropout: patchbench::defense_statistical::DropoutConfig {
            trials: 100,
            ..Default::default()
        },
        ..Default::default()
    };
    let (_, mut rows) = score_insertion_dataset(&fx.model_a, &natural, &ds, &cfg).unwrap();
    // alternate images between dev and test so both halves see every patch
    let ids: Vec<u64> = ds.annotations.images.iter().map(|r| r.id).collect();
    let dev_ids: std::collections::HashSet<u64> = ids
        .iter()
        .enumerate()
        .filter(|(i, _)| i % 2 == 0)
        .map(|(_, &id)| id)
        .collect();
    let dev: Vec<usize> = (0..rows.len())
        .filter(|&i| dev_ids.contains(&rows[i].image_id))
        .collect();
    let feats: Vec<[f64; 2]> = dev
        .iter()
        .map(|&i| [rows[i].kde_logdensity, rows[i].uncertainty])
        .collect();
    let dev_labels: Vec<bool> = dev.iter().map(|&i| rows[i].is_fooling_event).collect();
    let combiner = fit_combiner(&feats, &dev_labels).unwrap();
    for r in rows.iter_mut() {
        r.combined = Some(combiner.score([r.kde_logdensity, r.uncertainty]));
    }
    let test: Vec<&patchbench::defense_statistical::ScoreRow> = rows
        .iter()
        .filter(|r| !dev_ids.contains(&r.image_id))
        .collect();
    let lbl: Vec<bool> = test.iter().map(|r| r.is_fooling_event).collect();
    let auc = |s: Vec<f64>| roc(&s, &lbl).unwrap().1;
    let auc_kde = auc(test.iter().map(|r| -r.kde_logdensity).collect());
    let auc_unc = auc(test.iter().map(|r| r.uncertainty).collect());
    let auc_comb = auc(test.iter().map(|r| r.combined.unwrap()).collect());
    let pass = auc_kde > 0.55 && auc_unc > 0.55 && auc_comb >= auc_kde.max(auc_unc) - 0.02;
    println!(
        "ACCEPTANCE 8 statistical defense: {} (-kde AUC {auc_kde:.3}, uncertainty AUC \
         {auc_unc:.3}, combined AUC {auc_comb:.3}, {} scored detections)",
        if pass { "PASS" } else { "FAIL" },
        rows.len()
    );
    assert!(pass);
}

#[test]
fn criterion_09_localization_defense_ordering() {
    let fx = fixtures();
    let ds = build_insertion_eval_set(
        &fx.patches[..1],
        &fx.holdout_backgrounds,
        &labels(),
        40,
        &TransformConfig {
            scale: (0.2, 0.45),
            ..Default::default()
        },
        919,
    )
    .unwrap();
    let natural: Vec<FeatureMap> = generate_scenes(13, 40, &SceneConfig::default())
        .into_iter()
        .map(|s| s.image)
        .collect();
    let corpus = natural_window_corpus(&natural);
    let mut pass = true;
    let mut detail = String::new();
    for seed in [0u64, 1] {
        let cfg = AutoencoderConfig {
            seed,
            ..Default::default()
        };
        let (ae, _) = train_autoencoder(&corpus, &cfg, "natural-windows").unwrap();
        let embeddings: Vec<Vec<f64>> = corpus.iter().map(|w| ae.embed(w).unwrap()).collect();
        let gmm = fit_gmm(&embeddings, 5, seed).unwrap();
        let rows = score_dataset_windows(&ae, &gmm, &ds).unwrap();
        let lbl: Vec<bool> = rows.iter().map(|r| r.label).collect();
        let recon: Vec<f64> = rows.iter().map(|r| r.recon_error).collect();
        let neg_gmm: Vec<f64> = rows.iter().map(|r| -r.gmm_loglik).collect();
        let (_, auc_recon) = window_roc(&recon, &lbl).unwrap();
        let (_, auc_gmm) = window_roc(&neg_gmm, &lbl).unwrap();
        if auc_recon <= auc_gmm {
            pass = false;
        }
        detail.push_str(&format!(
            "seed{seed}: recon {auc_recon:.3} vs gmm {auc_gmm:.3}; "
        ));
    }
    println!(
        "ACCEPTANCE 9 localization ordering: {} ({detail})",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass);
}

#[test]
fn criterion_10_cli_determinism() {
    let bin = env!("CARGO_BIN_EXE_patchbench");
    let base = tempfile::tempdir().unwrap();
    let run_pipeline = |tag: &str| {
        let root = base.path().join(tag);
        std::fs::create_dir_all(&root).unwrap();
        let run = |args: &[&str]| {
            let st = std::process::Command::new(bin)
                .current_dir(&root)
                .args(args)
                .output()
                .unwrap();
            assert!(
                st.status.success(),
                "command {args:?} failed: {}",
                String::from_utf8_lossy(&st.stderr)
            );
        };
        run(&[
            "--seed", "5", "train-detector", "--out", "det",
            "--set", "num_scenes=100", "--set", "train.epochs=1",
            "--set", "train.widths=[4,6,8]", "--set", "train.ap_floor=0.0",
            "--set", "train.min_scenes=50",
        ]);
        run(&[
            "--seed", "5", "gen-patch", "--model", "det/model", "--out", "patch",
            "--set", "opt.iterations=5", "--set", "resolution=32",
            "--set", "num_backgrounds=20",
        ]);
        run(&[
            "--seed", "5", "synth", "insertion", "--patch", "patch", "--out", "ins",
            "--set", "num_scenes=10", "--set", "per_patch_count=5",
        ]);
        run(&["--seed", "5", "detect", "--model", "det/model", "--dataset", "ins", "--out", "dets"]);
        run(&[
            "--seed", "5", "eval-fooling", "--dets", "dets/detections.json",
            "--gt", "ins/annotations.json", "--out", "ev",
        ]);
        root
    };
    let a = run_pipeline("a");
    let b = run_pipeline("b");
    // compare every produced file byte for byte
    let mut compared = 0usize;
    let mut stack = vec![std::path::PathBuf::new()];
    let mut pass = true;
    while let Some(rel) = stack.pop() {
        let mut entries: Vec<_> = std::fs::read_dir(a.join(&rel))
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        entries.sort();
        for name in entries {
            let rel_child = rel.join(&name);
            if a.join(&rel_child).is_dir() {
                stack.push(rel_child);
                continue;
            }
            let x = std::fs::read(a.join(&rel_child)).unwrap();
            let y = std::fs::read(b.join(&rel_child)).unwrap();
            if x != y {
                pass = false;
                eprintln!("mismatch: {}", rel_child.display());
            }
            compared += 1;
        }
    }
    println!(
        "ACCEPTANCE 10 CLI determinism: {} ({compared} files byte-compared across rerun)",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass);
}

#[test]
fn criterion_11_gradient_checks() {
    let fx = fixtures();
    let mut rng = ChaCha8Rng::seed_from_u64(1111);
    // targeted_loss input gradient vs central differences
    let scene = generate_scenes(50, 1, &SceneConfig::default()).remove(0);
    let region = BoundingBox::new(24.0, 24.0, 48.0, 48.0);
    let (_, grad) = fx
        .model_a
        .targeted_loss(&scene.image, TARGET_CATEGORY, &region, LossAgg::default())
        .unwrap();
    let mut max_rel_loss: f64 = 0.0;
    let h = 1e-5;
    for _ in 0..100 {
        let c = rng.gen_range(0..3);
        let y = rng.gen_range(24..72);
        let x = rng.gen_range(24..72);
        let mut plus = scene.image.clone();
        plus[[c, y, x]] += h;
        let mut minus = scene.image.clone();
        minus[[c, y, x]] -= h;
        let (lp, _) = fx
            .model_a
            .targeted_loss(&plus, TARGET_CATEGORY, &region, LossAgg::default())
            .unwrap();
        let (lm, _) = fx
            .model_a
            .targeted_loss(&minus, TARGET_CATEGORY, &region, LossAgg::default())
            .unwrap();
        let numeric = (lp - lm) / (2.0 * h);
        let analytic = grad[[c, y, x]];
        let denom = analytic.abs().max(numeric.abs());
        if denom > 1e-7 {
            max_rel_loss = max_rel_loss.max((analytic - numeric).abs() / denom);
        }
    }

    // composite gradient vs central differences through a random projection
    let mut rng2 = ChaCha8Rng::seed_from_u64(2222);
    let patch = init_patch(
        &mut rng2,
        PatchShape::Circle,
        16,
        TARGET_CATEGORY,
        "toy-a",
        &patch_transform(),
        &patch_opt(0),
    );
    let bg = Array3::from_shape_fn((3, 64, 64), |_| rng2.gen_range(0.05..0.95));
    let t = sample_transform(&mut rng2, &patch_transform(), (64, 64)).unwrap();
    let weights = Array3::from_shape_fn((3, 64, 64), |_| rng2.gen_range(-1.0..1.0));
    let project = |p: &patchbench::patch::PatchRecord| {
        let (out, _) = composite(p, &bg, &t).unwrap();
        (&out * &weights).sum()
    };
    let mut g_patch = Array3::zeros((3, 16, 16));
    composite_grad(&patch, (64, 64), &t, &weights, &mut g_patch);
    let mut max_rel_comp: f64 = 0.0;
    let mut probes = 0;
    while probes < 100 {
        let c = rng2.gen_range(0..3);
        let v = rng2.gen_range(0..16);
        let u = rng2.gen_range(0..16);
        if patch.mask[[v, u]] == 0.0 {
            continue;
        }
        probes += 1;
        let mut plus = patch.clone();
        plus.pixels[[c, v, u]] += h;
        let mut minus = patch.clone();
        minus.pixels[[c, v, u]] -= h;
        let numeric = (project(&plus) - project(&minus)) / (2.0 * h);
        let analytic = g_patch[[c, v, u]];
        let denom = analytic.abs().max(numeric.abs());
        if denom > 1e-7 {
            max_rel_comp = max_rel_comp.max((analytic - numeric).abs() / denom);
        }
    }
    let pass = max_rel_loss < 1e-2 && max_rel_comp < 1e-2;
    println!(
        "ACCEPTANCE 11 gradient checks: {} (targeted_loss max rel err {max_rel_loss:.2e}, \
         composite max rel err {max_rel_comp:.2e})",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass);
}
