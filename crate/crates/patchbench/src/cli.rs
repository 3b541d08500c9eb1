//! Command-line wiring: each subcommand resolves a JSON config (defaults,
//! optional config file, `--set` overrides), runs one stage, and writes its
//! artifacts atomically together with `config.resolved.json` and
//! `status.json`.

use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::time::Duration;

use clap::{Parser, Subcommand};
use ndarray::Array2;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::coco::{load_annotation_set, CategoryRecord, PatchShape};
use crate::defense_localization::{
    fit_gmm, natural_window_corpus, save_heatmap_png, save_window_scores_csv,
    score_dataset_windows, train_autoencoder, window_roc, AutoencoderConfig, GRID,
};
use crate::defense_statistical::{
    fit_combiner, roc, save_auc_summary, save_roc_csv, save_scores_csv, score_insertion_dataset,
    AucSummary, StatDefenseConfig,
};
use crate::defense_supervised::{
    detect_dataset, evaluate_patch_detector, finetune_patch_detector, save_defense_csv,
    PatchDetectorConfig,
};
use crate::detector::{train_toy_detector, DetectorModel, TrainConfig};
use crate::error::{Error, Result};
use crate::fooling::{
    breakdown_report, evaluate_run, fooling_rate, load_detection_dump, save_detection_dump,
    write_rate_csv, Facet, DEFAULT_CONF_FLOOR, DEFAULT_IOU_FLOOR,
};
use crate::patch::{
    generate_patch, load_patch, save_loss_trace, save_patch, PatchOptConfig, PatchRecord,
    TransformConfig,
};
use crate::scenes::{generate_scenes, scene_categories, SceneConfig};
use crate::synth::{
    build_flying_patch_dataset, build_insertion_eval_set, load_dataset, save_dataset, PatchFamily,
    SynthMode, GAUSSIAN_CONTROL_MODEL,
};

#[derive(Parser)]
#[command(name = "patchbench", version, about = "Adversarial patch experiments at desk scale")]
struct Cli {
    /// Seed for every stochastic stage; drawn and recorded when omitted.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for parallel stages. Reduces are deterministic, so
    /// the count never changes results.
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// JSON config file for the subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Flat config override, `dotted.key=json-value`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a toy detector on generated shape scenes.
    TrainDetector {
        #[arg(long)]
        out: PathBuf,
    },
    /// Optimize an adversarial patch against a trained detector.
    GenPatch {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build synthetic datasets from patches.
    Synth {
        #[command(subcommand)]
        kind: SynthCmd,
    },
    /// Run a detector over a dataset and dump detections.
    Detect {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Match a detection dump against patch ground truth and report rates.
    EvalFooling {
        #[arg(long)]
        dets: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Patch defenses.
    Defend {
        #[command(subcommand)]
        kind: DefendCmd,
    },
    /// Summarize the artifacts of one or more runs.
    Report {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum SynthCmd {
    /// Digital-insertion evaluation set, one patch per image.
    Insertion {
        /// Patch directory; repeatable.
        #[arg(long = "patch", required = true)]
        patches: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Flying-patch dataset over object scenes, for defense training/eval.
    Flying {
        #[arg(long = "patch", required = true)]
        patches: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum DefendCmd {
    /// Fine-tune a detector to localize patches.
    Supervised {
        #[arg(long)]
        base_model: PathBuf,
        #[arg(long)]
        train_data: PathBuf,
        #[arg(long)]
        eval_data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// KDE + MC-dropout detection-level defense.
    Statistical {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Autoencoder / GMM window localization defense.
    Localize {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

// ---------------------------------------------------------------------------
// per-stage configs

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct TrainDetectorCfg {
    model_id: String,
    scene_seed: u64,
    num_scenes: usize,
    scene: SceneConfig,
    train: TrainConfig,
}

impl Default for TrainDetectorCfg {
    fn default() -> Self {
        Self {
            model_id: "toy-a".into(),
            scene_seed: 1,
            num_scenes: 600,
            scene: SceneConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct GenPatchCfg {
    target_category: u32,
    shape: PatchShape,
    resolution: usize,
    transform: TransformConfig,
    opt: PatchOptConfig,
    background_seed: u64,
    num_backgrounds: usize,
    scene: SceneConfig,
}

impl Default for GenPatchCfg {
    fn default() -> Self {
        Self {
            target_category: 3,
            shape: PatchShape::Square,
            resolution: 64,
            transform: TransformConfig {
                scale: (0.1, 0.5),
                ..Default::default()
            },
            opt: PatchOptConfig::default(),
            background_seed: 1,
            num_backgrounds: 200,
            scene: SceneConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct SynthCfg {
    seed: u64,
    scene_seed: u64,
    num_scenes: usize,
    scene: SceneConfig,
    transform: TransformConfig,
    /// Insertion mode: composites per patch.
    per_patch_count: usize,
    /// Flying mode: keep scene object annotations alongside patch boxes.
    joint: bool,
    /// Flying mode: train or eval partition.
    eval: bool,
}

impl Default for SynthCfg {
    fn default() -> Self {
        Self {
            seed: 7,
            scene_seed: 2,
            num_scenes: 100,
            scene: SceneConfig::default(),
            transform: TransformConfig {
                scale: (0.05, 0.25),
                ..Default::default()
            },
            per_patch_count: 30,
            joint: true,
            eval: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct DetectCfg {
    conf_threshold: f64,
}

impl Default for DetectCfg {
    fn default() -> Self {
        Self { conf_threshold: 0.05 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct EvalFoolingCfg {
    eval_model: String,
    iou_floor: f64,
    conf_floor: f64,
    facets: Vec<String>,
}

impl Default for EvalFoolingCfg {
    fn default() -> Self {
        Self {
            eval_model: "eval".into(),
            iou_floor: DEFAULT_IOU_FLOOR,
            conf_floor: DEFAULT_CONF_FLOOR,
            facets: vec!["size".into(), "shape".into()],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct DefendSupervisedCfg {
    detector: PatchDetectorConfig,
    conf_threshold: f64,
}

impl Default for DefendSupervisedCfg {
    fn default() -> Self {
        Self {
            detector: PatchDetectorConfig::default(),
            conf_threshold: 0.05,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct DefendStatisticalCfg {
    stat: StatDefenseConfig,
    natural_seed: u64,
    natural_count: usize,
    scene: SceneConfig,
    /// Leading fraction of images used as the combiner's dev split.
    combiner_frac: f64,
}

impl Default for DefendStatisticalCfg {
    fn default() -> Self {
        Self {
            stat: StatDefenseConfig::default(),
            natural_seed: 9,
            natural_count: 60,
            scene: SceneConfig::default(),
            combiner_frac: 0.5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct DefendLocalizeCfg {
    ae: AutoencoderConfig,
    gmm_components: usize,
    gmm_seed: u64,
    natural_seed: u64,
    natural_count: usize,
    scene: SceneConfig,
    /// Number of per-image reconstruction-error heatmaps to export.
    heatmaps: usize,
}

impl Default for DefendLocalizeCfg {
    fn default() -> Self {
        Self {
            ae: AutoencoderConfig::default(),
            gmm_components: 5,
            gmm_seed: 0,
            natural_seed: 11,
            natural_count: 40,
            scene: SceneConfig::default(),
            heatmaps: 4,
        }
    }
}

// ---------------------------------------------------------------------------
// config resolution

fn merge(base: &mut Value, other: &Value) {
    match (base, other) {
        (Value::Object(a), Value::Object(b)) => {
            for (k, v) in b {
                match a.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        a.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (a, b) => *a = b.clone(),
    }
}

fn apply_set(root: &mut Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::InvalidInput(format!("--set expects key=value, got `{spec}`")))?;
    // bare words fall back to strings so enum values need no quoting
    let val: Value = serde_json::from_str(raw).unwrap_or(Value::String(raw.to_string()));
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let map = cur
            .as_object_mut()
            .ok_or_else(|| Error::InvalidInput(format!("--set path `{path}` is not an object")))?;
        if i == parts.len() - 1 {
            map.insert(part.to_string(), val);
            return Ok(());
        }
        cur = map
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("split never yields zero parts")
}

fn resolve_config<T: Serialize + DeserializeOwned + Default>(
    file: Option<&Path>,
    sets: &[String],
) -> Result<T> {
    let mut v = serde_json::to_value(T::default())?;
    if let Some(p) = file {
        let overlay: Value = serde_json::from_str(&std::fs::read_to_string(p)?)?;
        merge(&mut v, &overlay);
    }
    for s in sets {
        apply_set(&mut v, s)?;
    }
    Ok(serde_json::from_value(v)?)
}

/// Resolves an input path, falling back to `$PATCHBENCH_CACHE`.
fn resolve_input(p: &Path) -> PathBuf {
    if p.exists() {
        return p.to_path_buf();
    }
    if let Ok(cache) = std::env::var("PATCHBENCH_CACHE") {
        let cached = Path::new(&cache).join(p);
        if cached.exists() {
            return cached;
        }
    }
    p.to_path_buf()
}

// ---------------------------------------------------------------------------
// run plumbing

#[derive(Serialize)]
struct ResolvedRun<'a, T: Serialize> {
    command: &'a str,
    seed: u64,
    workers: usize,
    config: &'a T,
}

#[derive(Serialize)]
struct Status<'a> {
    command: &'a str,
    state: &'a str,
}

/// Runs `f` against a temp directory, then renames it into place.
/// Outputs are write-once: an existing destination is an error.
fn atomic_dir<F: FnOnce(&Path) -> Result<()>>(out: &Path, f: F) -> Result<()> {
    if out.exists() {
        return Err(Error::InvalidInput(format!(
            "output {} already exists; outputs are write-once",
            out.display()
        )));
    }
    let parent = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(parent)?;
    let name = out
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::InvalidInput("output path has no file name".into()))?;
    let tmp = parent.join(format!(".{name}.tmp-{}", std::process::id()));
    if tmp.exists() {
        std::fs::remove_dir_all(&tmp)?;
    }
    std::fs::create_dir_all(&tmp)?;
    match f(&tmp) {
        Ok(()) => {
            std::fs::rename(&tmp, out)?;
            Ok(())
        }
        Err(e) => {
            let _ = std::fs::remove_dir_all(&tmp);
            Err(e)
        }
    }
}

fn write_run_meta<T: Serialize>(dir: &Path, meta: &ResolvedRun<T>, log: &str) -> Result<()> {
    std::fs::write(
        dir.join("config.resolved.json"),
        serde_json::to_string_pretty(meta)?,
    )?;
    std::fs::write(
        dir.join("status.json"),
        serde_json::to_string_pretty(&Status { command: meta.command, state: "ok" })?,
    )?;
    std::fs::write(dir.join("run.log"), log)?;
    Ok(())
}

/// Runs `f` while a background thread emits heartbeat lines on stderr.
fn with_heartbeat<T, F: FnOnce() -> T>(label: &str, f: F) -> T {
    let (tx, rx) = mpsc::channel::<()>();
    let label_owned = label.to_string();
    let watcher = std::thread::spawn(move || {
        let start = std::time::Instant::now();
        while rx.recv_timeout(Duration::from_secs(15)).is_err() {
            eprintln!(
                "[patchbench] {label_owned}... {}s elapsed",
                start.elapsed().as_secs()
            );
        }
    });
    let out = f();
    let _ = tx.send(());
    let _ = watcher.join();
    out
}

fn scene_category_records() -> Vec<CategoryRecord> {
    scene_categories()
        .into_iter()
        .map(|(id, name)| CategoryRecord { id, name })
        .collect()
}

fn infer_family(patches: &[PatchRecord]) -> PatchFamily {
    if patches.iter().all(|p| p.source_model == GAUSSIAN_CONTROL_MODEL) {
        PatchFamily::Gaussian
    } else if patches.iter().all(|p| p.opt_config.reg_weight == 0.0) {
        PatchFamily::AdversarialHighConfidence
    } else {
        PatchFamily::Adversarial
    }
}

fn load_patches(dirs: &[PathBuf]) -> Result<Vec<PatchRecord>> {
    dirs.iter()
        .map(|d| load_patch(&resolve_input(d), "patch"))
        .collect()
}

// ---------------------------------------------------------------------------
// entry point

/// CLI entry point; returns the process exit code.
pub fn run(args: &[String]) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            // clap renders its own usage/help text; --help exits 0
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let seed = cli.seed.unwrap_or_else(|| {
        let s: u64 = rand::random();
        eprintln!("[patchbench] no --seed given; drew {s}");
        s
    });
    let workers = cli.workers.unwrap_or_else(|| {
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
    });
    match execute(&cli, seed, workers) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::InvalidInput(_) | Error::InvalidConfig(_) => 1,
                _ => 2,
            }
        }
    }
}

fn execute(cli: &Cli, seed: u64, workers: usize) -> Result<()> {
    let cfg_file = cli.config.as_deref();
    match &cli.command {
        Command::TrainDetector { out } => {
            let mut cfg: TrainDetectorCfg = resolve_config(cfg_file, &cli.sets)?;
            if cli.seed.is_some() {
                cfg.train.seed = seed;
                cfg.scene_seed = seed.wrapping_add(1);
            }
            let meta = ResolvedRun { command: "train-detector", seed, workers, config: &cfg };
            let scenes = generate_scenes(cfg.scene_seed, cfg.num_scenes, &cfg.scene);
            let (model, metrics) = with_heartbeat("training detector", || {
                train_toy_detector(&cfg.model_id, &scenes, scene_category_records(), &cfg.train)
            })?;
            atomic_dir(out, |dir| {
                model.save(dir.join("model"))?;
                std::fs::write(
                    dir.join("metrics.json"),
                    serde_json::to_string_pretty(&metrics)?,
                )?;
                write_run_meta(
                    dir,
                    &meta,
                    &format!(
                        "trained {} on {} scenes; holdout AP50 {:.4}\n",
                        cfg.model_id,
                        cfg.num_scenes,
                        metrics.holdout_ap50
                    ),
                )
            })
        }
        Command::GenPatch { model, out } => {
            let mut cfg: GenPatchCfg = resolve_config(cfg_file, &cli.sets)?;
            if cli.seed.is_some() {
                cfg.opt.seed = seed;
                cfg.background_seed = seed.wrapping_add(1);
            }
            let meta = ResolvedRun { command: "gen-patch", seed, workers, config: &cfg };
            let model = DetectorModel::load(resolve_input(model))?;
            let backgrounds: Vec<_> = generate_scenes(cfg.background_seed, cfg.num_backgrounds, &cfg.scene)
                .into_iter()
                .map(|s| s.image)
                .collect();
            let (patch, trace) = with_heartbeat("optimizing patch", || {
                generate_patch(
                    &model,
                    cfg.target_category,
                    cfg.shape,
                    cfg.resolution,
                    &cfg.transform,
                    &backgrounds,
                    &cfg.opt,
                )
            })?;
            atomic_dir(out, |dir| {
                save_patch(&patch, dir, "patch")?;
                save_loss_trace(&trace, &dir.join("trace.csv"))?;
                write_run_meta(
                    dir,
                    &meta,
                    &format!(
                        "optimized {} iterations; final loss {:?}\n",
                        cfg.opt.iterations, patch.final_loss
                    ),
                )
            })
        }
        Command::Synth { kind } => {
            let mut cfg: SynthCfg = resolve_config(cfg_file, &cli.sets)?;
            if cli.seed.is_some() {
                cfg.seed = seed;
                cfg.scene_seed = seed.wrapping_add(1);
            }
            let (command, patches, out) = match kind {
                SynthCmd::Insertion { patches, out } => ("synth insertion", patches, out),
                SynthCmd::Flying { patches, out } => ("synth flying", patches, out),
            };
            let meta = ResolvedRun { command, seed, workers, config: &cfg };
            let patches = load_patches(patches)?;
            let scenes = generate_scenes(cfg.scene_seed, cfg.num_scenes, &cfg.scene);
            let ds = match kind {
                SynthCmd::Insertion { .. } => {
                    let backgrounds: Vec<_> = scenes.into_iter().map(|s| s.image).collect();
                    build_insertion_eval_set(
                        &patches,
                        &backgrounds,
                        &scene_category_records(),
                        cfg.per_patch_count,
                        &cfg.transform,
                        cfg.seed,
                    )?
                }
                SynthCmd::Flying { .. } => build_flying_patch_dataset(
                    infer_family(&patches),
                    &patches,
                    &scenes,
                    &scene_category_records(),
                    &cfg.transform,
                    if cfg.eval { SynthMode::FlyingEval } else { SynthMode::FlyingTrain },
                    cfg.joint,
                    cfg.seed,
                )?,
            };
            atomic_dir(out, |dir| {
                save_dataset(&ds, dir)?;
                write_run_meta(
                    dir,
                    &meta,
                    &format!("{} images, {} annotations\n", ds.images.len(), ds.annotations.annotations.len()),
                )
            })
        }
        Command::Detect { model, dataset, out } => {
            let cfg: DetectCfg = resolve_config(cfg_file, &cli.sets)?;
            let meta = ResolvedRun { command: "detect", seed, workers, config: &cfg };
            let model = DetectorModel::load(resolve_input(model))?;
            let ds = load_dataset(&resolve_input(dataset))?;
            let dump = with_heartbeat("running detector", || {
                detect_dataset(&model, &ds, cfg.conf_threshold)
            })?;
            atomic_dir(out, |dir| {
                save_detection_dump(&dump, dir.join("detections.json"))?;
                write_run_meta(dir, &meta, &format!("{} detections\n", dump.len()))
            })
        }
        Command::EvalFooling { dets, gt, out } => {
            let cfg: EvalFoolingCfg = resolve_config(cfg_file, &cli.sets)?;
            let meta = ResolvedRun { command: "eval-fooling", seed, workers, config: &cfg };
            let dets = load_detection_dump(resolve_input(dets))?;
            let gt = load_annotation_set(resolve_input(gt))?;
            let run = evaluate_run(&dets, &gt, &cfg.eval_model, cfg.iou_floor, cfg.conf_floor)?;
            let mut rows = fooling_rate(&run);
            let facets: Vec<Facet> = cfg
                .facets
                .iter()
                .map(|f| Facet::parse(f))
                .collect::<Result<_>>()?;
            rows.extend(breakdown_report(&run, &facets)?);
            atomic_dir(out, |dir| {
                let mut buf = Vec::new();
                write_rate_csv(&mut buf, &rows)?;
                std::fs::write(dir.join("rates.csv"), buf)?;
                std::fs::write(dir.join("run.json"), serde_json::to_string_pretty(&run)?)?;
                write_run_meta(dir, &meta, &format!("{} rate rows\n", rows.len()))
            })
        }
        Command::Defend { kind } => defend(cli, kind, seed, workers),
        Command::Report { run, out } => {
            let cfg: Value = resolve_config::<Value>(cfg_file, &cli.sets).unwrap_or(Value::Null);
            let meta = ResolvedRun { command: "report", seed, workers, config: &cfg };
            let summary = summarize(&resolve_input(run))?;
            atomic_dir(out, |dir| {
                std::fs::write(
                    dir.join("report.json"),
                    serde_json::to_string_pretty(&summary)?,
                )?;
                write_run_meta(dir, &meta, "report written\n")
            })
        }
    }
}

fn defend(cli: &Cli, kind: &DefendCmd, seed: u64, workers: usize) -> Result<()> {
    let cfg_file = cli.config.as_deref();
    match kind {
        DefendCmd::Supervised { base_model, train_data, eval_data, out } => {
            let mut cfg: DefendSupervisedCfg = resolve_config(cfg_file, &cli.sets)?;
            if cli.seed.is_some() {
                cfg.detector.schedule.seed = seed;
            }
            let meta = ResolvedRun { command: "defend supervised", seed, workers, config: &cfg };
            let base = DetectorModel::load(resolve_input(base_model))?;
            let train_ds = load_dataset(&resolve_input(train_data))?;
            let eval_ds = load_dataset(&resolve_input(eval_data))?;
            let (model, metrics) = with_heartbeat("fine-tuning patch detector", || {
                finetune_patch_detector(&base, &train_ds, &cfg.detector)
            })?;
            let row = evaluate_patch_detector(&model, &cfg.detector, &eval_ds, cfg.conf_threshold)?;
            atomic_dir(out, |dir| {
                model.save(dir.join("model"))?;
                std::fs::write(
                    dir.join("metrics.json"),
                    serde_json::to_string_pretty(&metrics)?,
                )?;
                save_defense_csv(std::slice::from_ref(&row), dir.join("defense.csv"))?;
                write_run_meta(
                    dir,
                    &meta,
                    &format!("AP@0.5 {:.4}, AR@0.5 {:.4}\n", row.ap_50, row.ar_50),
                )
            })
        }
        DefendCmd::Statistical { model, dataset, out } => {
            let mut cfg: DefendStatisticalCfg = resolve_config(cfg_file, &cli.sets)?;
            if cli.seed.is_some() {
                cfg.stat.dropout.seed = seed;
            }
            let meta = ResolvedRun { command: "defend statistical", seed, workers, config: &cfg };
            let model = DetectorModel::load(resolve_input(model))?;
            let ds = load_dataset(&resolve_input(dataset))?;
            let natural: Vec<_> = generate_scenes(cfg.natural_seed, cfg.natural_count, &cfg.scene)
                .into_iter()
                .map(|s| s.image)
                .collect();
            let (_kde, mut rows) = with_heartbeat("scoring detections", || {
                score_insertion_dataset(&model, &natural, &ds, &cfg.stat)
            })?;
            // dev/test split by image order for the combiner
            let image_ids: Vec<u64> = ds.annotations.images.iter().map(|r| r.id).collect();
            let n_dev = (image_ids.len() as f64 * cfg.combiner_frac) as usize;
            let dev_ids: std::collections::HashSet<u64> =
                image_ids.iter().take(n_dev).cloned().collect();
            let dev: Vec<usize> = (0..rows.len())
                .filter(|&i| dev_ids.contains(&rows[i].image_id))
                .collect();
            let dev_feats: Vec<[f64; 2]> = dev
                .iter()
                .map(|&i| [rows[i].kde_logdensity, rows[i].uncertainty])
                .collect();
            let dev_labels: Vec<bool> = dev.iter().map(|&i| rows[i].is_fooling_event).collect();
            let combiner = fit_combiner(&dev_feats, &dev_labels).ok();
            if let Some(c) = &combiner {
                for r in rows.iter_mut() {
                    r.combined = Some(c.score([r.kde_logdensity, r.uncertainty]));
                }
            }
            let test: Vec<&crate::defense_statistical::ScoreRow> = rows
                .iter()
                .filter(|r| !dev_ids.contains(&r.image_id))
                .collect();
            let labels: Vec<bool> = test.iter().map(|r| r.is_fooling_event).collect();
            let neg_kde: Vec<f64> = test.iter().map(|r| -r.kde_logdensity).collect();
            let unc: Vec<f64> = test.iter().map(|r| r.uncertainty).collect();
            let (roc_kde, auc_kde) = roc(&neg_kde, &labels)?;
            let (roc_unc, auc_unc) = roc(&unc, &labels)?;
            let combined_roc = combiner
                .as_ref()
                .map(|_| {
                    let s: Vec<f64> = test.iter().map(|r| r.combined.unwrap()).collect();
                    roc(&s, &labels)
                })
                .transpose()?;
            let summary = AucSummary {
                auc_neg_kde: auc_kde,
                auc_uncertainty: auc_unc,
                auc_combined: combined_roc.as_ref().map(|(_, a)| *a),
            };
            atomic_dir(out, |dir| {
                save_scores_csv(&rows, dir.join("scores.csv"))?;
                save_roc_csv(&roc_kde, dir.join("roc_neg_kde.csv"))?;
                save_roc_csv(&roc_unc, dir.join("roc_uncertainty.csv"))?;
                if let Some((points, _)) = &combined_roc {
                    save_roc_csv(points, dir.join("roc_combined.csv"))?;
                }
                save_auc_summary(&summary, dir.join("auc_summary.json"))?;
                write_run_meta(
                    dir,
                    &meta,
                    &format!(
                        "auc -kde {:.4}, auc uncertainty {:.4}\n",
                        summary.auc_neg_kde, summary.auc_uncertainty
                    ),
                )
            })
        }
        DefendCmd::Localize { dataset, out } => {
            let mut cfg: DefendLocalizeCfg = resolve_config(cfg_file, &cli.sets)?;
            if cli.seed.is_some() {
                cfg.ae.seed = seed;
                cfg.gmm_seed = seed.wrapping_add(1);
            }
            let meta = ResolvedRun { command: "defend localize", seed, workers, config: &cfg };
            let ds = load_dataset(&resolve_input(dataset))?;
            let natural: Vec<_> = generate_scenes(cfg.natural_seed, cfg.natural_count, &cfg.scene)
                .into_iter()
                .map(|s| s.image)
                .collect();
            let corpus = natural_window_corpus(&natural);
            let (ae, metrics) = with_heartbeat("training autoencoder", || {
                train_autoencoder(&corpus, &cfg.ae, "natural-scene-windows")
            })?;
            let embeddings: Vec<Vec<f64>> = corpus
                .iter()
                .map(|w| ae.embed(w))
                .collect::<Result<_>>()?;
            let gmm = with_heartbeat("fitting GMM", || {
                fit_gmm(&embeddings, cfg.gmm_components, cfg.gmm_seed)
            })?;
            let rows = with_heartbeat("scoring windows", || {
                score_dataset_windows(&ae, &gmm, &ds)
            })?;
            let labels: Vec<bool> = rows.iter().map(|r| r.label).collect();
            let recon: Vec<f64> = rows.iter().map(|r| r.recon_error).collect();
            let neg_gmm: Vec<f64> = rows.iter().map(|r| -r.gmm_loglik).collect();
            let (roc_recon, auc_recon) = window_roc(&recon, &labels)?;
            let (roc_gmm, auc_gmm) = window_roc(&neg_gmm, &labels)?;
            atomic_dir(out, |dir| {
                save_window_scores_csv(&rows, dir.join("windows.csv"))?;
                save_roc_csv(&roc_recon, dir.join("roc_recon.csv"))?;
                save_roc_csv(&roc_gmm, dir.join("roc_neg_gmm.csv"))?;
                std::fs::write(
                    dir.join("auc_summary.json"),
                    serde_json::to_string_pretty(&serde_json::json!({
                        "auc_recon": auc_recon,
                        "auc_neg_gmm": auc_gmm,
                        "ae_holdout_mse": metrics.holdout_mse,
                    }))?,
                )?;
                for (i, rec) in ds.annotations.images.iter().take(cfg.heatmaps).enumerate() {
                    let mut grid = Array2::zeros((GRID, GRID));
                    for r in rows.iter().filter(|r| r.image_id == rec.id) {
                        grid[[r.row, r.col]] = r.recon_error;
                    }
                    save_heatmap_png(&grid, dir.join(format!("heatmap-{i:02}.png")))?;
                }
                write_run_meta(
                    dir,
                    &meta,
                    &format!("auc recon {auc_recon:.4}, auc -gmm {auc_gmm:.4}\n"),
                )
            })
        }
    }
}

/// Collects the artifacts under a run directory into a single summary.
fn summarize(run: &Path) -> Result<Value> {
    if !run.is_dir() {
        return Err(Error::InvalidInput(format!(
            "run directory {} not found",
            run.display()
        )));
    }
    let mut artifacts = Vec::new();
    let mut stack = vec![run.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let mut entries: Vec<_> = std::fs::read_dir(&dir)?
            .collect::<std::io::Result<Vec<_>>>()?
            .into_iter()
            .map(|e| e.path())
            .collect();
        entries.sort();
        for path in entries {
            if path.is_dir() {
                stack.push(path);
                continue;
            }
            let rel = path.strip_prefix(run).unwrap_or(&path).display().to_string();
            let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
            let entry = match ext {
                "json" => {
                    let parsed: Value = serde_json::from_str(&std::fs::read_to_string(&path)?)
                        .unwrap_or(Value::Null);
                    // embed small summaries verbatim, larger ones by key list
                    let body = match &parsed {
                        Value::Object(m) if m.len() <= 16 && !rel.ends_with("run.json") => parsed.clone(),
                        Value::Object(m) => Value::Array(
                            m.keys().map(|k| Value::String(k.clone())).collect(),
                        ),
                        _ => Value::Null,
                    };
                    serde_json::json!({ "path": rel, "kind": "json", "summary": body })
                }
                "csv" => {
                    let text = std::fs::read_to_string(&path)?;
                    let mut lines = text.lines();
                    let header = lines.next().unwrap_or("").to_string();
                    let rows = lines.count();
                    serde_json::json!({ "path": rel, "kind": "csv", "header": header, "rows": rows })
                }
                _ => serde_json::json!({ "path": rel, "kind": ext }),
            };
            artifacts.push(entry);
        }
    }
    Ok(serde_json::json!({ "run": run.display().to_string(), "artifacts": artifacts }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_args(args: &[&str]) -> i32 {
        let mut v = vec!["patchbench".to_string()];
        v.extend(args.iter().map(|s| s.to_string()));
        run(&v)
    }

    #[test]
    fn unknown_subcommand_is_a_usage_error() {
        assert_eq!(run_args(&["frobnicate"]), 1);
    }

    #[test]
    fn help_exits_zero() {
        assert_eq!(run_args(&["--help"]), 0);
        assert_eq!(run_args(&["eval-fooling", "--help"]), 0);
    }

    #[test]
    fn set_overrides_nest_and_parse_json() {
        let mut v = serde_json::to_value(TrainDetectorCfg::default()).unwrap();
        apply_set(&mut v, "train.epochs=3").unwrap();
        apply_set(&mut v, "model_id=toy-x").unwrap();
        apply_set(&mut v, "scene.max_objects=2").unwrap();
        let cfg: TrainDetectorCfg = serde_json::from_value(v).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.model_id, "toy-x");
        assert_eq!(cfg.scene.max_objects, 2);
        let mut v = serde_json::json!({});
        assert!(apply_set(&mut v, "no-equals").is_err());
    }

    #[test]
    fn atomic_dir_refuses_overwrite_and_cleans_up_on_error() {
        let base = tempfile::tempdir().unwrap();
        let out = base.path().join("run");
        atomic_dir(&out, |d| {
            std::fs::write(d.join("x.txt"), "hi")?;
            Ok(())
        })
        .unwrap();
        assert!(out.join("x.txt").exists());
        assert!(matches!(
            atomic_dir(&out, |_| Ok(())),
            Err(Error::InvalidInput(_))
        ));
        let out2 = base.path().join("run2");
        let r = atomic_dir(&out2, |_| Err(Error::InvalidConfig("boom".into())));
        assert!(r.is_err());
        assert!(!out2.exists());
        // no stray temp dirs
        let leftovers: Vec<_> = std::fs::read_dir(base.path())
            .unwrap()
            .filter_map(|e| e.ok())
            .filter(|e| e.file_name().to_string_lossy().contains("tmp"))
            .collect();
        assert!(leftovers.is_empty());
    }
}
