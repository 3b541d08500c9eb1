//! Detection-level statistical defense: per-category KDE over penultimate
//! embeddings, MC-dropout uncertainty, and an optional logistic combiner.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detector::{DetectorModel, EmbeddedDetection};
use crate::error::{Error, Result};
pub use crate::metrics::roc;

/// Sentinel log-density for categories with no support.
pub const UNSCORABLE_SENTINEL: f64 = f64::NEG_INFINITY;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    /// Scott's rule, averaged across dimensions, with a small floor.
    Scott,
    Fixed(f64),
}

impl Default for Bandwidth {
    fn default() -> Self {
        Bandwidth::Scott
    }
}

const BANDWIDTH_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CategoryKde {
    pub support: Vec<Vec<f64>>,
    pub bandwidth: f64,
}

/// Per-category Gaussian-kernel KDE over detection embeddings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KdeModel {
    pub dim: usize,
    pub min_confidence: f64,
    pub categories: BTreeMap<u32, CategoryKde>,
    /// Categories seen in the label map but with no qualifying support.
    pub unscorable: Vec<u32>,
}

fn scott_bandwidth(support: &[Vec<f64>]) -> f64 {
    let n = support.len() as f64;
    let d = support[0].len() as f64;
    // mean per-dimension sigma, scaled by Scott's factor
    let mut sigma_sum = 0.0;
    for j in 0..support[0].len() {
        let mean: f64 = support.iter().map(|s| s[j]).sum::<f64>() / n;
        let var: f64 = support.iter().map(|s| (s[j] - mean).powi(2)).sum::<f64>() / n;
        sigma_sum += var.sqrt();
    }
    let sigma = sigma_sum / d;
    (sigma * n.powf(-1.0 / (d + 4.0))).max(BANDWIDTH_FLOOR)
}

/// Fits a KDE per category from natural detections with confidence above
/// `min_confidence`. Categories in `all_categories` with no qualifying
/// detections are flagged unscorable rather than rejected.
pub fn fit_kde(
    dets: &[EmbeddedDetection],
    all_categories: &[u32],
    bandwidth: Bandwidth,
    min_confidence: f64,
) -> Result<KdeModel> {
    let mut by_cat: BTreeMap<u32, Vec<Vec<f64>>> = BTreeMap::new();
    let mut dim = None;
    for d in dets {
        if d.detection.confidence < min_confidence {
            continue;
        }
        match dim {
            None => dim = Some(d.embedding.len()),
            Some(k) if k != d.embedding.len() => {
                return Err(Error::InvalidInput(format!(
                    "embedding dimension mismatch: {} vs {}",
                    k,
                    d.embedding.len()
                )))
            }
            _ => {}
        }
        by_cat
            .entry(d.detection.category)
            .or_default()
            .push(d.embedding.clone());
    }
    let dim = dim.ok_or_else(|| Error::FitError("no qualifying support detections".into()))?;
    let mut categories = BTreeMap::new();
    let mut unscorable = Vec::new();
    for &cat in all_categories {
        match by_cat.remove(&cat) {
            Some(support) => {
                let bw = match bandwidth {
                    Bandwidth::Scott => scott_bandwidth(&support),
                    Bandwidth::Fixed(h) => {
                        if h <= 0.0 {
                            return Err(Error::InvalidConfig(format!(
                                "bandwidth must be positive, got {h}"
                            )));
                        }
                        h
                    }
                };
                categories.insert(cat, CategoryKde { support, bandwidth: bw });
            }
            None => unscorable.push(cat),
        }
    }
    Ok(KdeModel {
        dim,
        min_confidence,
        categories,
        unscorable,
    })
}

fn logsumexp(vals: &[f64]) -> f64 {
    let m = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m.is_infinite() {
        return m;
    }
    m + vals.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Log-density of `embedding` under the KDE of `category`. Unscorable
/// categories return the sentinel with `scorable = false`.
pub fn kde_log_density(model: &KdeModel, category: u32, embedding: &[f64]) -> (f64, bool) {
    let Some(km) = model.categories.get(&category) else {
        return (UNSCORABLE_SENTINEL, false);
    };
    let d = model.dim as f64;
    let h = km.bandwidth;
    let norm = -(km.support.len() as f64).ln() - d * h.ln() - 0.5 * d * (2.0 * std::f64::consts::PI).ln();
    let terms: Vec<f64> = km
        .support
        .iter()
        .map(|s| {
            let sq: f64 = s
                .iter()
                .zip(embedding)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            -0.5 * sq / (h * h)
        })
        .collect();
    (norm + logsumexp(&terms), true)
}

/// Scores a detection with respect to its own detected class.
pub fn kde_score(model: &KdeModel, det: &EmbeddedDetection) -> (f64, bool) {
    kde_log_density(model, det.detection.category, &det.embedding)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceStatistic {
    /// Mean across categories of the across-trial variance of class scores.
    MeanPerCategory,
    /// Across-trial variance of the maximum class score.
    VarianceOfMax,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DropoutConfig {
    pub trials: usize,
    pub rate: f64,
    pub seed: u64,
    pub statistic: VarianceStatistic,
}

impl Default for DropoutConfig {
    fn default() -> Self {
        Self {
            trials: 30,
            rate: 0.5,
            seed: 0,
            statistic: VarianceStatistic::MeanPerCategory,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UncertaintyScore {
    pub trials: usize,
    pub statistic: f64,
}

fn column_variance(rows: &[Vec<f64>]) -> Vec<f64> {
    let n = rows.len() as f64;
    let k = rows[0].len();
    (0..k)
        .map(|j| {
            // identical trials must give exactly zero (mean rounding otherwise
            // leaves ~1e-33 residue)
            if rows.iter().all(|r| r[j] == rows[0][j]) {
                return 0.0;
            }
            let mean: f64 = rows.iter().map(|r| r[j]).sum::<f64>() / n;
            rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n
        })
        .collect()
}

/// MC-dropout uncertainty for one fixed detection: Bernoulli masks on the
/// penultimate embedding (inverted-dropout scaling), class distribution
/// re-scored per trial, variance statistic over the trials.
pub fn mc_dropout_uncertainty(
    model: &DetectorModel,
    det: &EmbeddedDetection,
    cfg: &DropoutConfig,
) -> Result<UncertaintyScore> {
    if !model.supports_dropout() {
        return Err(Error::Capability("dropout-injection".into()));
    }
    if cfg.trials < 2 {
        return Err(Error::InvalidInput(format!(
            "dropout trials must be >= 2, got {}",
            cfg.trials
        )));
    }
    if !(0.0..1.0).contains(&cfg.rate) {
        return Err(Error::InvalidConfig(format!(
            "dropout rate must be in [0,1), got {}",
            cfg.rate
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let scale = 1.0 / (1.0 - cfg.rate);
    let mut trials: Vec<Vec<f64>> = Vec::with_capacity(cfg.trials);
    let mut masked = vec![0.0; det.embedding.len()];
    for _ in 0..cfg.trials {
        for (m, &e) in masked.iter_mut().zip(&det.embedding) {
            let keep = rng.gen::<f64>() >= cfg.rate;
            *m = if keep { e * scale } else { 0.0 };
        }
        trials.push(model.rescore_embedding(&masked)?);
    }
    let statistic = match cfg.statistic {
        VarianceStatistic::MeanPerCategory => {
            let vars = column_variance(&trials);
            vars.iter().sum::<f64>() / vars.len() as f64
        }
        VarianceStatistic::VarianceOfMax => {
            let maxes: Vec<Vec<f64>> = trials
                .iter()
                .map(|t| vec![t.iter().cloned().fold(f64::NEG_INFINITY, f64::max)])
                .collect();
            column_variance(&maxes)[0]
        }
    };
    Ok(UncertaintyScore {
        trials: cfg.trials,
        statistic,
    })
}

/// Logistic regression over the two defense features.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CombinerModel {
    pub weights: [f64; 2],
    pub bias: f64,
    /// Feature standardization fitted on dev data.
    pub means: [f64; 2],
    pub stds: [f64; 2],
    pub fit_partition: String,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Fits an L2-regularized logistic regression on dev-partition features
/// (kde log-density, uncertainty) against fooling-event labels.
pub fn fit_combiner(features: &[[f64; 2]], labels: &[bool]) -> Result<CombinerModel> {
    if features.len() != labels.len() || features.is_empty() {
        return Err(Error::InvalidInput("feature/label length mismatch".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 || n_pos == labels.len() {
        return Err(Error::FitError("dev labels contain a single class".into()));
    }
    // standardize; KDE sentinel -inf is clamped to the finite minimum
    let finite_min: f64 = features
        .iter()
        .map(|f| f[0])
        .filter(|v| v.is_finite())
        .fold(f64::INFINITY, f64::min);
    let clean: Vec<[f64; 2]> = features
        .iter()
        .map(|f| [if f[0].is_finite() { f[0] } else { finite_min }, f[1]])
        .collect();
    let n = clean.len() as f64;
    let mut means = [0.0; 2];
    let mut stds = [0.0; 2];
    for j in 0..2 {
        means[j] = clean.iter().map(|f| f[j]).sum::<f64>() / n;
        let var = clean.iter().map(|f| (f[j] - means[j]).powi(2)).sum::<f64>() / n;
        stds[j] = var.sqrt().max(1e-12);
    }
    let x: Vec<[f64; 2]> = clean
        .iter()
        .map(|f| [(f[0] - means[0]) / stds[0], (f[1] - means[1]) / stds[1]])
        .collect();
    // full-batch gradient descent; convex objective, deterministic
    let lambda = 1e-3;
    let lr = 0.5;
    let mut w = [0.0; 2];
    let mut b = 0.0;
    for _ in 0..2000 {
        let mut gw = [lambda * w[0], lambda * w[1]];
        let mut gb = 0.0;
        for (xi, &yi) in x.iter().zip(labels) {
            let p = sigmoid(w[0] * xi[0] + w[1] * xi[1] + b);
            let err = p - if yi { 1.0 } else { 0.0 };
            gw[0] += err * xi[0] / n;
            gw[1] += err * xi[1] / n;
            gb += err / n;
        }
        w[0] -= lr * gw[0];
        w[1] -= lr * gw[1];
        b -= lr * gb;
    }
    Ok(CombinerModel {
        weights: w,
        bias: b,
        means,
        stds,
        fit_partition: "dev".into(),
    })
}

impl CombinerModel {
    /// Fooling-event probability for one feature pair.
    pub fn score(&self, features: [f64; 2]) -> f64 {
        let f0 = if features[0].is_finite() {
            features[0]
        } else {
            self.means[0] - 3.0 * self.stds[0]
        };
        let x0 = (f0 - self.means[0]) / self.stds[0];
        let x1 = (features[1] - self.means[1]) / self.stds[1];
        sigmoid(self.weights[0] * x0 + self.weights[1] * x1 + self.bias)
    }
}

/// One scored detection row for export.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreRow {
    pub image_id: u64,
    pub detection_index: usize,
    pub category: u32,
    pub confidence: f64,
    pub kde_logdensity: f64,
    pub uncertainty: f64,
    pub combined: Option<f64>,
    pub is_fooling_event: bool,
}

pub fn write_scores_csv<W: Write>(mut w: W, rows: &[ScoreRow]) -> Result<()> {
    writeln!(
        w,
        "image_id,detection_index,category,confidence,kde_logdensity,uncertainty,combined,is_fooling_event"
    )?;
    for r in rows {
        let combined = r
            .combined
            .map(|c| format!("{c:.17e}"))
            .unwrap_or_default();
        writeln!(
            w,
            "{},{},{},{:.17e},{:.17e},{:.17e},{},{}",
            r.image_id,
            r.detection_index,
            r.category,
            r.confidence,
            r.kde_logdensity,
            r.uncertainty,
            combined,
            r.is_fooling_event as u8
        )?;
    }
    Ok(())
}

pub fn save_scores_csv<P: AsRef<Path>>(rows: &[ScoreRow], path: P) -> Result<()> {
    let mut buf = Vec::new();
    write_scores_csv(&mut buf, rows)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn save_roc_csv<P: AsRef<Path>>(points: &[(f64, f64)], path: P) -> Result<()> {
    let mut buf = String::from("fpr,tpr\n");
    for (fpr, tpr) in points {
        buf.push_str(&format!("{fpr:.17e},{tpr:.17e}\n"));
    }
    std::fs::write(path, buf)?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AucSummary {
    pub auc_neg_kde: f64,
    pub auc_uncertainty: f64,
    pub auc_combined: Option<f64>,
}

pub fn save_auc_summary<P: AsRef<Path>>(summary: &AucSummary, path: P) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(summary)?)?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StatDefenseConfig {
    pub bandwidth: Bandwidth,
    /// Minimum confidence for natural detections used as KDE support.
    pub support_min_confidence: f64,
    /// Confidence floor for scored detections; matches the fooling-event
    /// strict floor so every labeled positive is scorable.
    pub detection_floor: f64,
    pub dropout: DropoutConfig,
    pub iou_floor: f64,
    /// When set, only targeted fooling events count as positives.
    pub targeted_only: bool,
    /// Standardize both scores per category against natural-detection
    /// statistics. Raw log-densities and variances live on very different
    /// scales per category on a small detector, and the defense thresholds
    /// all classes at once, so calibration is on by default.
    pub per_category_standardize: bool,
}

impl Default for StatDefenseConfig {
    fn default() -> Self {
        Self {
            bandwidth: Bandwidth::Scott,
            support_min_confidence: crate::fooling::DEFAULT_CONF_FLOOR,
            detection_floor: crate::fooling::DEFAULT_CONF_FLOOR,
            dropout: DropoutConfig::default(),
            iou_floor: crate::fooling::DEFAULT_IOU_FLOOR,
            targeted_only: false,
            per_category_standardize: true,
        }
    }
}

/// Per-category (mean, std) pairs for both scores, fit on natural detections.
#[derive(Debug, Clone, Default)]
struct Calibration {
    by_cat: std::collections::BTreeMap<u32, ([f64; 2], [f64; 2])>,
}

impl Calibration {
    fn fit(samples: &[(u32, f64, f64)]) -> Self {
        let stats = |xs: &[f64]| -> [f64; 2] {
            let n = xs.len() as f64;
            let mean = xs.iter().sum::<f64>() / n;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            [mean, var.sqrt()]
        };
        let all_kde: Vec<f64> = samples.iter().map(|s| s.1).collect();
        let all_unc: Vec<f64> = samples.iter().map(|s| s.2).collect();
        let global = (stats(&all_kde), stats(&all_unc));
        let mut by_cat = std::collections::BTreeMap::new();
        let cats: std::collections::BTreeSet<u32> = samples.iter().map(|s| s.0).collect();
        for c in cats {
            let kde: Vec<f64> = samples.iter().filter(|s| s.0 == c).map(|s| s.1).collect();
            let unc: Vec<f64> = samples.iter().filter(|s| s.0 == c).map(|s| s.2).collect();
            let mut k = stats(&kde);
            let mut u = stats(&unc);
            // thin or degenerate categories fall back to the global spread
            if kde.len() < 2 || k[1] < 1e-9 {
                k[1] = global.0[1].max(1e-9);
            }
            if unc.len() < 2 || u[1] < 1e-9 {
                u[1] = global.1[1].max(1e-9);
            }
            by_cat.insert(c, (k, u));
        }
        by_cat.insert(u32::MAX, (global.0, global.1)); // fallback slot
        Calibration { by_cat }
    }

    fn apply(&self, category: u32, kde_ld: f64, unc: f64) -> (f64, f64) {
        let (k, u) = self
            .by_cat
            .get(&category)
            .or_else(|| self.by_cat.get(&u32::MAX))
            .copied()
            .unwrap_or(([0.0, 1.0], [0.0, 1.0]));
        ((kde_ld - k[0]) / k[1].max(1e-9), (unc - u[0]) / u[1].max(1e-9))
    }
}

/// End-to-end scoring of an insertion-eval dataset: fits the KDE on natural
/// images, then scores every detection above the floor with KDE log-density
/// and MC-dropout uncertainty, labeled by the fooling-event rules.
pub fn score_insertion_dataset(
    model: &DetectorModel,
    natural: &[crate::nn::FeatureMap],
    data: &crate::synth::SyntheticDataset,
    cfg: &StatDefenseConfig,
) -> Result<(KdeModel, Vec<ScoreRow>)> {
    if data.mode != crate::synth::SynthMode::EvalInsertion {
        return Err(Error::InvalidInput(format!(
            "statistical defense scores insertion-eval data, got {:?}",
            data.mode
        )));
    }
    if natural.is_empty() {
        return Err(Error::InvalidInput("no natural support images".into()));
    }
    let mut support = Vec::new();
    for img in natural {
        support.extend(model.detect_embedded(img, cfg.support_min_confidence)?);
    }
    let cats: Vec<u32> = model.meta.labels.iter().map(|c| c.id).collect();
    let kde = fit_kde(&support, &cats, cfg.bandwidth, cfg.support_min_confidence)?;

    let calibration = if cfg.per_category_standardize {
        let mut samples = Vec::new();
        for det in &support {
            let (kde_ld, scorable) = kde_score(&kde, det);
            if !scorable {
                continue;
            }
            let unc = mc_dropout_uncertainty(model, det, &cfg.dropout)?;
            samples.push((det.detection.category, kde_ld, unc.statistic));
        }
        if samples.is_empty() {
            None
        } else {
            Some(Calibration::fit(&samples))
        }
    } else {
        None
    };

    let mut rows = Vec::new();
    for (rec, img) in data.annotations.images.iter().zip(&data.images) {
        let gt = data
            .annotations
            .annotations
            .iter()
            .find(|a| a.image_id == rec.id)
            .ok_or_else(|| {
                Error::ReferentialIntegrity(format!("image {} has no annotation", rec.id))
            })?;
        let dets = model.detect_embedded(img, cfg.detection_floor)?;
        let plain: Vec<crate::coco::Detection> =
            dets.iter().map(|d| d.detection.clone()).collect();
        let events = crate::fooling::match_fooling_events(
            &plain,
            gt,
            rec.id,
            cfg.iou_floor,
            cfg.detection_floor,
        )?;
        for (di, det) in dets.iter().enumerate() {
            if det.detection.confidence <= cfg.detection_floor {
                continue;
            }
            let is_event = events.iter().any(|e| {
                e.detection.box_ == det.detection.box_
                    && e.detection.category == det.detection.category
                    && (!cfg.targeted_only || e.targeted)
            });
            let (kde_ld, _) = kde_score(&kde, det);
            let unc = mc_dropout_uncertainty(model, det, &cfg.dropout)?;
            let (kde_ld, unc) = match &calibration {
                Some(c) => c.apply(det.detection.category, kde_ld, unc.statistic),
                None => (kde_ld, unc.statistic),
            };
            rows.push(ScoreRow {
                image_id: rec.id,
                detection_index: di,
                category: det.detection.category,
                confidence: det.detection.confidence,
                kde_logdensity: kde_ld,
                uncertainty: unc,
                combined: None,
                is_fooling_event: is_event,
            });
        }
    }
    Ok((kde, rows))
}
