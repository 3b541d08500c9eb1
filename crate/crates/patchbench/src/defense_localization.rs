//! Window-level patch localization: images are resized to 600x600, cut into
//! non-overlapping 32x32 windows, and each window is scored as adversarial by
//! autoencoder reconstruction error or GMM density over pooled bottleneck
//! embeddings.

use ndarray::{Array1, Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coco::BoundingBox;
use crate::error::{Error, Result};
use crate::metrics::roc;
use crate::nn::{
    avgpool2, avgpool2_backward, relu, relu_backward, resize_bilinear, sigmoid, sigmoid_backward,
    upsample2, upsample2_backward, Adam, Conv2d,
};
use crate::nn::FeatureMap;

pub const RESIZE_TARGET: usize = 600;
pub const WINDOW: usize = 32;
/// 600/32 truncates; the remainder strip on the right and bottom is dropped.
pub const GRID: usize = RESIZE_TARGET / WINDOW;

/// One 32x32 window cut from the resized image.
#[derive(Debug, Clone)]
pub struct Window {
    pub row: usize,
    pub col: usize,
    pub pixels: FeatureMap,
    /// True iff at least half of the window's pixels lie inside the patch box.
    pub label: bool,
}

#[derive(Debug, Clone)]
pub struct WindowGrid {
    pub image_id: u64,
    pub windows: Vec<Window>,
}

/// Cuts an image into the 18x18 window grid. `patch_box` is in original
/// image coordinates and is rescaled by the same resize transform; a pixel
/// counts as inside when its center falls within the rescaled box.
pub fn extract_windows(
    image_id: u64,
    image: &FeatureMap,
    patch_box: Option<&BoundingBox>,
) -> WindowGrid {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let resized = resize_bilinear(image, RESIZE_TARGET, RESIZE_TARGET);
    let scaled = patch_box.map(|b| {
        let sx = RESIZE_TARGET as f64 / w as f64;
        let sy = RESIZE_TARGET as f64 / h as f64;
        (b.x * sx, b.y * sy, b.right() * sx, b.bottom() * sy)
    });
    let mut windows = Vec::with_capacity(GRID * GRID);
    for row in 0..GRID {
        for col in 0..GRID {
            let y0 = row * WINDOW;
            let x0 = col * WINDOW;
            let pixels = resized
                .slice(ndarray::s![.., y0..y0 + WINDOW, x0..x0 + WINDOW])
                .to_owned();
            let label = match scaled {
                None => false,
                Some((bx0, by0, bx1, by1)) => {
                    let mut inside = 0usize;
                    for py in 0..WINDOW {
                        for px in 0..WINDOW {
                            let cy = (y0 + py) as f64 + 0.5;
                            let cx = (x0 + px) as f64 + 0.5;
                            if cx >= bx0 && cx < bx1 && cy >= by0 && cy < by1 {
                                inside += 1;
                            }
                        }
                    }
                    2 * inside >= WINDOW * WINDOW
                }
            };
            windows.push(Window { row, col, pixels, label });
        }
    }
    WindowGrid { image_id, windows }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AutoencoderConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Channel widths of the two encoder stages; the second is the
    /// bottleneck depth and the pooled embedding dimension.
    pub widths: (usize, usize),
    pub min_corpus: usize,
    pub holdout_frac: f64,
    /// Mean per-pixel squared error ceiling on held-out natural windows.
    pub sanity_ceiling: f64,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 3,
            batch_size: 16,
            lr: 2e-3,
            widths: (8, 16),
            min_corpus: 10_000,
            holdout_frac: 0.1,
            sanity_ceiling: 0.02,
        }
    }
}

/// Convolutional autoencoder over 32x32 windows with a (widths.1, 8, 8)
/// spatial bottleneck.
#[derive(Debug, Clone)]
pub struct WindowAutoencoder {
    enc1: Conv2d,
    enc2: Conv2d,
    dec1: Conv2d,
    dec2: Conv2d,
    pub config: AutoencoderConfig,
    pub corpus_id: String,
}

struct AeCache {
    cols_e1: Array2<f64>,
    m1: FeatureMap,
    p1: FeatureMap,
    cols_e2: Array2<f64>,
    m2: FeatureMap,
    bottleneck: FeatureMap,
    u1: FeatureMap,
    cols_d1: Array2<f64>,
    m3: FeatureMap,
    u2: FeatureMap,
    cols_d2: Array2<f64>,
    recon: FeatureMap,
}

impl WindowAutoencoder {
    fn new(cfg: &AutoencoderConfig, corpus_id: &str) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (w1, w2) = cfg.widths;
        Self {
            enc1: Conv2d::new(&mut rng, 3, w1, 3, 1, 1),
            enc2: Conv2d::new(&mut rng, w1, w2, 3, 1, 1),
            dec1: Conv2d::new(&mut rng, w2, w1, 3, 1, 1),
            dec2: Conv2d::new(&mut rng, w1, 3, 3, 1, 1),
            config: cfg.clone(),
            corpus_id: corpus_id.to_string(),
        }
    }

    fn forward(&self, x: &FeatureMap) -> AeCache {
        let (a1, cols_e1) = self.enc1.forward(x);
        let (r1, m1) = relu(&a1);
        let p1 = avgpool2(&r1); // 16x16
        let (a2, cols_e2) = self.enc2.forward(&p1);
        let (r2, m2) = relu(&a2);
        let bottleneck = avgpool2(&r2); // (w2, 8, 8)
        let u1 = upsample2(&bottleneck); // 16x16
        let (a3, cols_d1) = self.dec1.forward(&u1);
        let (r3, m3) = relu(&a3);
        let u2 = upsample2(&r3); // 32x32
        let (a4, cols_d2) = self.dec2.forward(&u2);
        let recon = sigmoid(&a4);
        AeCache {
            cols_e1,
            m1,
            p1,
            cols_e2,
            m2,
            bottleneck,
            u1,
            cols_d1,
            m3,
            u2,
            cols_d2,
            recon,
        }
    }

    /// Reconstructs one 32x32 window.
    pub fn reconstruct(&self, window: &FeatureMap) -> Result<FeatureMap> {
        check_window_shape(window)?;
        Ok(self.forward(window).recon)
    }

    /// Mean-pooled bottleneck embedding, length `widths.1`.
    pub fn embed(&self, window: &FeatureMap) -> Result<Vec<f64>> {
        check_window_shape(window)?;
        let b = self.forward(window).bottleneck;
        let (c, h, w) = (b.shape()[0], b.shape()[1], b.shape()[2]);
        Ok((0..c)
            .map(|ch| {
                b.slice(ndarray::s![ch, .., ..]).sum() / (h * w) as f64
            })
            .collect())
    }

    fn param_grads(
        &self,
        x: &FeatureMap,
        cache: &AeCache,
    ) -> (f64, Vec<Array2<f64>>, Vec<Array1<f64>>) {
        // loss: mean squared error over all pixels
        let n = x.len() as f64;
        let diff = &cache.recon - x;
        let loss = diff.mapv(|d| d * d).sum() / n;
        let g_recon = diff.mapv(|d| 2.0 * d / n);
        let g_a4 = sigmoid_backward(&cache.recon, &g_recon);
        let (g_u2, gw4, gb4) = self.dec2.backward(&cache.cols_d2, WINDOW, WINDOW, &g_a4);
        let g_r3 = upsample2_backward(&g_u2);
        let g_a3 = relu_backward(&cache.m3, &g_r3);
        let (g_u1, gw3, gb3) = self.dec1.backward(&cache.cols_d1, 16, 16, &g_a3);
        let g_b = upsample2_backward(&g_u1);
        let g_r2 = avgpool2_backward(&g_b);
        let g_a2 = relu_backward(&cache.m2, &g_r2);
        let (g_p1, gw2, gb2) = self.enc2.backward(&cache.cols_e2, 16, 16, &g_a2);
        let g_r1 = avgpool2_backward(&g_p1);
        let g_a1 = relu_backward(&cache.m1, &g_r1);
        let (_, gw1, gb1) = self.enc1.backward(&cache.cols_e1, WINDOW, WINDOW, &g_a1);
        let _ = &cache.p1;
        let _ = &cache.u1;
        let _ = &cache.u2;
        (loss, vec![gw1, gw2, gw3, gw4], vec![gb1, gb2, gb3, gb4])
    }
}

fn check_window_shape(window: &FeatureMap) -> Result<()> {
    if window.shape() != [3, WINDOW, WINDOW] {
        return Err(Error::InvalidInput(format!(
            "expected window shape [3, {WINDOW}, {WINDOW}], got {:?}",
            window.shape()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AeTrainMetrics {
    pub holdout_mse: f64,
    pub loss_trace: Vec<f64>,
}

/// Trains the autoencoder on natural windows. Deterministic given the seed.
pub fn train_autoencoder(
    corpus: &[FeatureMap],
    cfg: &AutoencoderConfig,
    corpus_id: &str,
) -> Result<(WindowAutoencoder, AeTrainMetrics)> {
    if corpus.len() < cfg.min_corpus {
        return Err(Error::InvalidInput(format!(
            "window corpus too small: {} < {}",
            corpus.len(),
            cfg.min_corpus
        )));
    }
    for w in corpus {
        check_window_shape(w)?;
    }
    let n_hold = ((corpus.len() as f64 * cfg.holdout_frac) as usize).max(1);
    let (hold, train) = corpus.split_at(n_hold);
    let mut ae = WindowAutoencoder::new(cfg, corpus_id);
    let mut opt = Adam::new(cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut trace = Vec::new();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let mut loss_sum = 0.0;
            let mut gw_acc: Option<Vec<Array2<f64>>> = None;
            let mut gb_acc: Option<Vec<Array1<f64>>> = None;
            for &i in chunk {
                let cache = ae.forward(&train[i]);
                let (loss, gws, gbs) = ae.param_grads(&train[i], &cache);
                loss_sum += loss;
                match (&mut gw_acc, &mut gb_acc) {
                    (Some(aw), Some(ab)) => {
                        for (a, g) in aw.iter_mut().zip(&gws) {
                            *a += g;
                        }
                        for (a, g) in ab.iter_mut().zip(&gbs) {
                            *a += g;
                        }
                    }
                    _ => {
                        gw_acc = Some(gws);
                        gb_acc = Some(gbs);
                    }
                }
            }
            let bs = chunk.len() as f64;
            let loss = loss_sum / bs;
            if !loss.is_finite() {
                return Err(Error::TrainingFailure(format!(
                    "autoencoder loss diverged after {} steps; trace: {:?}",
                    trace.len(),
                    &trace[trace.len().saturating_sub(5)..]
                )));
            }
            trace.push(loss);
            let mut gws = gw_acc.unwrap();
            let mut gbs = gb_acc.unwrap();
            for g in &mut gws {
                *g /= bs;
            }
            for g in &mut gbs {
                *g /= bs;
            }
            let mut params: Vec<&mut [f64]> = Vec::new();
            let mut grads: Vec<&[f64]> = Vec::new();
            for (layer, (gw, gb)) in [&mut ae.enc1, &mut ae.enc2, &mut ae.dec1, &mut ae.dec2]
                .into_iter()
                .zip(gws.iter().zip(gbs.iter()))
            {
                params.push(layer.w.as_slice_mut().unwrap());
                grads.push(gw.as_slice().unwrap());
                params.push(layer.b.as_slice_mut().unwrap());
                grads.push(gb.as_slice().unwrap());
            }
            opt.step(&mut params, &grads);
        }
    }
    let holdout_mse = mean_mse(&ae, hold)?;
    if holdout_mse > cfg.sanity_ceiling {
        return Err(Error::TrainingFailure(format!(
            "held-out reconstruction mse {holdout_mse:.5} above ceiling {}",
            cfg.sanity_ceiling
        )));
    }
    Ok((ae, AeTrainMetrics { holdout_mse, loss_trace: trace }))
}

/// Mean per-pixel squared reconstruction error over a window set.
pub fn mean_mse(ae: &WindowAutoencoder, windows: &[FeatureMap]) -> Result<f64> {
    let mut sum = 0.0;
    for w in windows {
        sum += reconstruction_error(ae, w)? / w.len() as f64;
    }
    Ok(sum / windows.len() as f64)
}

/// Squared L2 distance between a window and its reconstruction.
pub fn reconstruction_error(ae: &WindowAutoencoder, window: &FeatureMap) -> Result<f64> {
    let recon = ae.reconstruct(window)?;
    Ok(squared_l2(window, &recon).expect("reconstruction preserves shape"))
}

/// Squared L2 distance between two equally shaped maps.
pub fn squared_l2(a: &FeatureMap, b: &FeatureMap) -> Option<f64> {
    if a.shape() != b.shape() {
        return None;
    }
    Some(a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum())
}

const COV_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GmmComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    /// Row-major full covariance with a diagonal floor applied.
    pub cov: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WindowGmm {
    pub dim: usize,
    pub components: Vec<GmmComponent>,
}

struct CompDist {
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    mean: nalgebra::DVector<f64>,
    log_norm: f64,
    log_weight: f64,
}

fn component_dist(c: &GmmComponent, dim: usize) -> Result<CompDist> {
    let cov = nalgebra::DMatrix::from_row_slice(dim, dim, &c.cov);
    let chol = nalgebra::Cholesky::new(cov)
        .ok_or_else(|| Error::FitError("covariance not positive definite".into()))?;
    let log_det: f64 = chol.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
    Ok(CompDist {
        mean: nalgebra::DVector::from_row_slice(&c.mean),
        log_norm: -0.5 * (dim as f64 * (2.0 * std::f64::consts::PI).ln() + log_det),
        log_weight: c.weight.ln(),
        chol,
    })
}

impl CompDist {
    fn log_pdf(&self, x: &nalgebra::DVector<f64>) -> f64 {
        let d = x - &self.mean;
        let z = self.chol.solve(&d);
        self.log_norm - 0.5 * d.dot(&z)
    }
}

fn logsumexp(vals: &[f64]) -> f64 {
    let m = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m.is_infinite() {
        return m;
    }
    m + vals.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Fits a k-component full-covariance GMM with EM.
pub fn fit_gmm(embeddings: &[Vec<f64>], k: usize, seed: u64) -> Result<WindowGmm> {
    if k == 0 {
        return Err(Error::InvalidConfig("k must be >= 1".into()));
    }
    if embeddings.len() < 2 * k {
        return Err(Error::InvalidInput(format!(
            "need at least {} embeddings for k={k}, got {}",
            2 * k,
            embeddings.len()
        )));
    }
    let dim = embeddings[0].len();
    if embeddings.iter().any(|e| e.len() != dim) {
        return Err(Error::InvalidInput("embedding dimension mismatch".into()));
    }
    let n = embeddings.len();
    let xs: Vec<nalgebra::DVector<f64>> = embeddings
        .iter()
        .map(|e| nalgebra::DVector::from_row_slice(e))
        .collect();
    // init: random distinct points as means, shared global covariance
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    let global_mean = {
        let mut m = nalgebra::DVector::zeros(dim);
        for x in &xs {
            m += x;
        }
        m / n as f64
    };
    let mut global_cov = nalgebra::DMatrix::zeros(dim, dim);
    for x in &xs {
        let d = x - &global_mean;
        global_cov += &d * d.transpose();
    }
    global_cov /= n as f64;
    for i in 0..dim {
        global_cov[(i, i)] += COV_FLOOR;
    }
    let mut model = WindowGmm {
        dim,
        components: (0..k)
            .map(|j| GmmComponent {
                weight: 1.0 / k as f64,
                mean: embeddings[idx[j]].clone(),
                cov: global_cov.as_slice().to_vec(),
            })
            .collect(),
    };

    let mut prev_ll = f64::NEG_INFINITY;
    for _ in 0..200 {
        let dists: Vec<CompDist> = model
            .components
            .iter()
            .map(|c| component_dist(c, dim))
            .collect::<Result<_>>()?;
        // E step
        let mut resp = vec![vec![0.0; k]; n];
        let mut ll = 0.0;
        for (i, x) in xs.iter().enumerate() {
            let logs: Vec<f64> = dists
                .iter()
                .map(|d| d.log_weight + d.log_pdf(x))
                .collect();
            let lse = logsumexp(&logs);
            ll += lse;
            for j in 0..k {
                resp[i][j] = (logs[j] - lse).exp();
            }
            debug_assert!((resp[i].iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        // M step
        for j in 0..k {
            let nj: f64 = resp.iter().map(|r| r[j]).sum();
            let nj = nj.max(1e-12);
            let mut mean = nalgebra::DVector::zeros(dim);
            for (i, x) in xs.iter().enumerate() {
                mean += x * resp[i][j];
            }
            mean /= nj;
            let mut cov = nalgebra::DMatrix::zeros(dim, dim);
            for (i, x) in xs.iter().enumerate() {
                let d = x - &mean;
                cov += &d * d.transpose() * resp[i][j];
            }
            cov /= nj;
            for i in 0..dim {
                cov[(i, i)] += COV_FLOOR;
            }
            model.components[j] = GmmComponent {
                weight: nj / n as f64,
                mean: mean.as_slice().to_vec(),
                cov: cov.as_slice().to_vec(),
            };
        }
        if (ll - prev_ll).abs() < 1e-6 * (1.0 + ll.abs()) {
            break;
        }
        prev_ll = ll;
    }
    Ok(model)
}

/// Mixture log-likelihood of one embedding; lower means more anomalous.
pub fn gmm_score(gmm: &WindowGmm, embedding: &[f64]) -> Result<f64> {
    if embedding.len() != gmm.dim {
        return Err(Error::InvalidInput(format!(
            "embedding dimension {} does not match model dimension {}",
            embedding.len(),
            gmm.dim
        )));
    }
    let x = nalgebra::DVector::from_row_slice(embedding);
    let logs: Vec<f64> = gmm
        .components
        .iter()
        .map(|c| component_dist(c, gmm.dim).map(|d| d.log_weight + d.log_pdf(&x)))
        .collect::<Result<_>>()?;
    Ok(logsumexp(&logs))
}

/// ROC over pooled windows for one scoring method.
pub fn window_roc(scores: &[f64], labels: &[bool]) -> Result<(Vec<(f64, f64)>, f64)> {
    roc(scores, labels)
}

/// One scored window for export.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WindowScoreRow {
    pub image_id: u64,
    pub row: usize,
    pub col: usize,
    pub label: bool,
    pub recon_error: f64,
    pub gmm_loglik: f64,
}

pub fn write_window_scores_csv<W: std::io::Write>(
    mut w: W,
    rows: &[WindowScoreRow],
) -> Result<()> {
    writeln!(w, "image_id,row,col,label,recon_error,gmm_loglik")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{:.17e},{:.17e}",
            r.image_id, r.row, r.col, r.label as u8, r.recon_error, r.gmm_loglik
        )?;
    }
    Ok(())
}

pub fn save_window_scores_csv<P: AsRef<std::path::Path>>(
    rows: &[WindowScoreRow],
    path: P,
) -> Result<()> {
    let mut buf = Vec::new();
    write_window_scores_csv(&mut buf, rows)?;
    std::fs::write(path, buf)?;
    Ok(())
}

/// Saves an 18x18 score heatmap, min-max normalized and upsampled to
/// 576x576, as a grayscale PNG.
pub fn save_heatmap_png<P: AsRef<std::path::Path>>(
    scores: &Array2<f64>,
    path: P,
) -> Result<()> {
    if scores.shape() != [GRID, GRID] {
        return Err(Error::InvalidInput(format!(
            "expected {GRID}x{GRID} score grid, got {:?}",
            scores.shape()
        )));
    }
    let lo = scores.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    let size = GRID * WINDOW;
    let mut img = Array3::zeros((3, size, size));
    for y in 0..size {
        for x in 0..size {
            let v = (scores[[y / WINDOW, x / WINDOW]] - lo) / span;
            for ch in 0..3 {
                img[[ch, y, x]] = v;
            }
        }
    }
    crate::scenes::save_png(&img, path)
}

/// All grid windows of a set of natural images, for AE/GMM training.
pub fn natural_window_corpus(images: &[FeatureMap]) -> Vec<FeatureMap> {
    let mut out = Vec::with_capacity(images.len() * GRID * GRID);
    for (i, img) in images.iter().enumerate() {
        out.extend(
            extract_windows(i as u64, img, None)
                .windows
                .into_iter()
                .map(|w| w.pixels),
        );
    }
    out
}

/// Scores every window of an insertion-eval dataset with both methods,
/// labeled by the window coverage rule against the patch box.
pub fn score_dataset_windows(
    ae: &WindowAutoencoder,
    gmm: &WindowGmm,
    data: &crate::synth::SyntheticDataset,
) -> Result<Vec<WindowScoreRow>> {
    let mut rows = Vec::new();
    for (rec, img) in data.annotations.images.iter().zip(&data.images) {
        let patch_box = data
            .annotations
            .annotations
            .iter()
            .find(|a| a.image_id == rec.id && a.apricot_ext.is_some())
            .map(|a| a.bbox);
        let grid = extract_windows(rec.id, img, patch_box.as_ref());
        for w in grid.windows {
            let recon_error = reconstruction_error(ae, &w.pixels)?;
            let gmm_loglik = gmm_score(gmm, &ae.embed(&w.pixels)?)?;
            rows.push(WindowScoreRow {
                image_id: rec.id,
                row: w.row,
                col: w.col,
                label: w.label,
                recon_error,
                gmm_loglik,
            });
        }
    }
    Ok(rows)
}
