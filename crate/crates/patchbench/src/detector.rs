//! Toy single-stage detector: a 3-block convolutional backbone over square
//! inputs with a per-cell classification head and box regression head on a
//! stride-8 grid. Exposes inference, input gradients, penultimate embeddings
//! and inference-time dropout injection behind explicit capability flags.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, Array3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coco::{BoundingBox, CategoryRecord, Detection};
use crate::error::{Error, Result};
use crate::metrics::{ap_ar, GtBox, IouPolicy, ScoredBox};
use crate::nn::{
    avgpool2, avgpool2_backward, relu, relu_backward, resize_bilinear,
    resize_bilinear_backward, softmax, Adam, Conv2d, FeatureMap,
};
use crate::scenes::Scene;

pub const GRID_STRIDE: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    pub inference: bool,
    pub input_gradient: bool,
    pub penultimate_embedding: bool,
    pub dropout_injection: bool,
}

impl Capabilities {
    pub fn all() -> Self {
        Self {
            inference: true,
            input_gradient: true,
            penultimate_embedding: true,
            dropout_injection: true,
        }
    }
}

/// Aggregation of per-cell target scores inside the attack region.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossAgg {
    /// Maximum target score among candidate cells.
    Max,
    /// Mean of the top-k target scores.
    TopK(usize),
}

impl Default for LossAgg {
    fn default() -> Self {
        LossAgg::TopK(4)
    }
}

#[derive(Debug, Clone)]
struct Net {
    conv1: Conv2d,
    conv2: Conv2d,
    conv3: Conv2d,
    // context convs at grid resolution widen the receptive field past the
    // largest object size
    conv4: Conv2d,
    conv5: Conv2d,
    head_cls: Conv2d,
    head_box: Conv2d,
}

impl Net {
    fn new<R: Rng>(rng: &mut R, widths: (usize, usize, usize), n_classes: usize) -> Self {
        let (w1, w2, w3) = widths;
        Self {
            conv1: Conv2d::new(rng, 3, w1, 3, 1, 1),
            conv2: Conv2d::new(rng, w1, w2, 3, 1, 1),
            conv3: Conv2d::new(rng, w2, w3, 3, 1, 1),
            conv4: Conv2d::new(rng, w3, w3, 3, 1, 1),
            conv5: Conv2d::new(rng, w3, w3, 3, 1, 1),
            head_cls: Conv2d::new(rng, w3, n_classes + 1, 1, 1, 0),
            head_box: Conv2d::new(rng, w3, 4, 1, 1, 0),
        }
    }

    fn params(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for c in [
            &mut self.conv1,
            &mut self.conv2,
            &mut self.conv3,
            &mut self.conv4,
            &mut self.conv5,
            &mut self.head_cls,
            &mut self.head_box,
        ] {
            out.push(c.w.as_slice_mut().unwrap());
            out.push(c.b.as_slice_mut().unwrap());
        }
        out
    }

    fn param_arrays(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for c in [
            &self.conv1,
            &self.conv2,
            &self.conv3,
            &self.conv4,
            &self.conv5,
            &self.head_cls,
            &self.head_box,
        ] {
            out.push(c.w.as_slice().unwrap());
            out.push(c.b.as_slice().unwrap());
        }
        out
    }
}

/// Forward-pass intermediates retained for backprop.
struct Cache {
    cols1: Array2<f64>,
    mask1: FeatureMap,
    p1: FeatureMap,
    cols2: Array2<f64>,
    mask2: FeatureMap,
    p2: FeatureMap,
    cols3: Array2<f64>,
    mask3: FeatureMap,
    p3: FeatureMap,
    cols4: Array2<f64>,
    mask4: FeatureMap,
    a4: FeatureMap,
    cols5: Array2<f64>,
    mask5: FeatureMap,
    feats: FeatureMap,
    cols_cls: Array2<f64>,
    cols_box: Array2<f64>,
    in_hw: (usize, usize),
}

/// Accumulated parameter gradients in the same order as `Net::params`.
struct Grads(Vec<Vec<f64>>);

impl Grads {
    fn zeros_like(net: &Net) -> Self {
        Grads(net.param_arrays().iter().map(|p| vec![0.0; p.len()]).collect())
    }

    fn add(&mut self, other: &Grads) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    fn scale(&mut self, f: f64) {
        for a in self.0.iter_mut() {
            for x in a.iter_mut() {
                *x *= f;
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelMeta {
    pub model_id: String,
    pub labels: Vec<CategoryRecord>,
    pub resolution: usize,
    pub anchor: f64,
    pub widths: (usize, usize, usize),
    pub capabilities: Capabilities,
}

/// A trained detector. Immutable after construction; concurrent inference
/// from shared references is safe.
#[derive(Debug, Clone)]
pub struct DetectorModel {
    pub meta: ModelMeta,
    net: Net,
}

/// A detection together with its penultimate embedding and class scores.
#[derive(Debug, Clone)]
pub struct EmbeddedDetection {
    pub detection: Detection,
    pub embedding: Vec<f64>,
    pub class_scores: Vec<f64>,
    /// Grid cell (row, col) the detection decoded from.
    pub cell: (usize, usize),
}

fn nms(mut dets: Vec<(Detection, (usize, usize), Vec<f64>)>, iou_thr: f64) -> Vec<(Detection, (usize, usize), Vec<f64>)> {
    dets.sort_by(|a, b| {
        b.0.confidence
            .partial_cmp(&a.0.confidence)
            .unwrap()
            .then((a.1).0.cmp(&(b.1).0))
            .then((a.1).1.cmp(&(b.1).1))
    });
    let mut keep: Vec<(Detection, (usize, usize), Vec<f64>)> = Vec::new();
    'outer: for d in dets {
        for k in &keep {
            // class-agnostic suppression: neighbouring cells often fire on
            // the same object with disagreeing categories
            if crate::coco::iou(&k.0.box_, &d.0.box_).unwrap_or(0.0) > iou_thr {
                continue 'outer;
            }
        }
        keep.push(d);
    }
    keep
}

impl DetectorModel {
    fn require(&self, cap: bool, name: &str) -> Result<()> {
        if cap {
            Ok(())
        } else {
            Err(Error::Capability(name.to_string()))
        }
    }

    pub fn n_classes(&self) -> usize {
        self.meta.labels.len()
    }

    /// Class index (1-based; 0 is background) for a category id.
    fn class_index(&self, category: u32) -> Option<usize> {
        self.meta.labels.iter().position(|c| c.id == category).map(|i| i + 1)
    }

    fn category_of(&self, class_index: usize) -> u32 {
        self.meta.labels[class_index - 1].id
    }

    fn forward(&self, x: &FeatureMap) -> (FeatureMap, FeatureMap, FeatureMap, Cache) {
        let in_hw = (x.shape()[1], x.shape()[2]);
        let (y1, cols1) = self.net.conv1.forward(x);
        let (a1, mask1) = relu(&y1);
        let p1 = avgpool2(&a1);
        let (y2, cols2) = self.net.conv2.forward(&p1);
        let (a2, mask2) = relu(&y2);
        let p2 = avgpool2(&a2);
        let (y3, cols3) = self.net.conv3.forward(&p2);
        let (a3, mask3) = relu(&y3);
        let p3 = avgpool2(&a3);
        let (y4, cols4) = self.net.conv4.forward(&p3);
        let (a4, mask4) = relu(&y4);
        let (y5, cols5) = self.net.conv5.forward(&a4);
        let (feats, mask5) = relu(&y5);
        let (cls, cols_cls) = self.net.head_cls.forward(&feats);
        let (boxes, cols_box) = self.net.head_box.forward(&feats);
        (
            cls,
            boxes,
            feats.clone(),
            Cache {
                cols1,
                mask1,
                p1,
                cols2,
                mask2,
                p2,
                cols3,
                mask3,
                p3,
                cols4,
                mask4,
                a4,
                cols5,
                mask5,
                feats,
                cols_cls,
                cols_box,
                in_hw,
            },
        )
    }

    /// Backward from head gradients to the input pixels, also accumulating
    /// parameter gradients.
    fn backward(
        &self,
        cache: &Cache,
        g_cls: &FeatureMap,
        g_box: &FeatureMap,
    ) -> (FeatureMap, Grads) {
        let (h, w) = cache.in_hw;
        let (fh, fw) = (cache.feats.shape()[1], cache.feats.shape()[2]);
        let (g_feats_cls, gw_cls, gb_cls) =
            self.net.head_cls.backward(&cache.cols_cls, fh, fw, g_cls);
        let (g_feats_box, gw_box, gb_box) =
            self.net.head_box.backward(&cache.cols_box, fh, fw, g_box);
        let g_feats = &g_feats_cls + &g_feats_box;
        let g_y5 = relu_backward(&cache.mask5, &g_feats);
        let (g_a4, gw5, gb5) =
            self.net
                .conv5
                .backward(&cache.cols5, cache.a4.shape()[1], cache.a4.shape()[2], &g_y5);
        let g_y4 = relu_backward(&cache.mask4, &g_a4);
        let (g_p3, gw4, gb4) =
            self.net
                .conv4
                .backward(&cache.cols4, cache.p3.shape()[1], cache.p3.shape()[2], &g_y4);
        let g_a3 = avgpool2_backward(&g_p3);
        let g_y3 = relu_backward(&cache.mask3, &g_a3);
        let (g_p2, gw3, gb3) =
            self.net
                .conv3
                .backward(&cache.cols3, cache.p2.shape()[1], cache.p2.shape()[2], &g_y3);
        let g_a2 = avgpool2_backward(&g_p2);
        let g_y2 = relu_backward(&cache.mask2, &g_a2);
        let (g_p1, gw2, gb2) =
            self.net
                .conv2
                .backward(&cache.cols2, cache.p1.shape()[1], cache.p1.shape()[2], &g_y2);
        let g_a1 = avgpool2_backward(&g_p1);
        let g_y1 = relu_backward(&cache.mask1, &g_a1);
        let (g_x, gw1, gb1) = self.net.conv1.backward(&cache.cols1, h, w, &g_y1);
        let grads = Grads(vec![
            gw1.into_raw_vec_and_offset().0,
            gb1.to_vec(),
            gw2.into_raw_vec_and_offset().0,
            gb2.to_vec(),
            gw3.into_raw_vec_and_offset().0,
            gb3.to_vec(),
            gw4.into_raw_vec_and_offset().0,
            gb4.to_vec(),
            gw5.into_raw_vec_and_offset().0,
            gb5.to_vec(),
            gw_cls.into_raw_vec_and_offset().0,
            gb_cls.to_vec(),
            gw_box.into_raw_vec_and_offset().0,
            gb_box.to_vec(),
        ]);
        (g_x, grads)
    }

    fn decode(
        &self,
        cls: &FeatureMap,
        boxes: &FeatureMap,
        feats: &FeatureMap,
        conf_threshold: f64,
        scale_x: f64,
        scale_y: f64,
    ) -> Vec<EmbeddedDetection> {
        let (nc, gh, gw) = (cls.shape()[0], cls.shape()[1], cls.shape()[2]);
        // per-cell objectness (best non-background probability); a cell only
        // emits a detection if it is a local maximum over its 8 neighbours,
        // which culls the shifted duplicates that NMS cannot see
        let mut obj = vec![vec![(0usize, 0.0f64); gw]; gh];
        for gy in 0..gh {
            for gx in 0..gw {
                let logits: Vec<f64> = (0..nc).map(|k| cls[[k, gy, gx]]).collect();
                let probs = softmax(&logits);
                let (best, &p) = probs[1..]
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(i, p)| (i + 1, p))
                    .unwrap();
                obj[gy][gx] = (best, p);
            }
        }
        let mut cands = Vec::new();
        for gy in 0..gh {
            for gx in 0..gw {
                let (best, p) = obj[gy][gx];
                if p < conf_threshold || p < 1e-6 {
                    continue;
                }
                let mut is_peak = true;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        if dy == 0 && dx == 0 {
                            continue;
                        }
                        let ny = gy as i64 + dy;
                        let nx = gx as i64 + dx;
                        if ny < 0 || nx < 0 || ny >= gh as i64 || nx >= gw as i64 {
                            continue;
                        }
                        let q = obj[ny as usize][nx as usize].1;
                        // ties broken toward the lexicographically first cell
                        if q > p || (q == p && (ny as usize, nx as usize) < (gy, gx)) {
                            is_peak = false;
                        }
                    }
                }
                if !is_peak {
                    continue;
                }
                let logits: Vec<f64> = (0..nc).map(|k| cls[[k, gy, gx]]).collect();
                let probs = softmax(&logits);
                // box head predicts log-distances from the cell center to the
                // four box sides, in units of the anchor size
                let s = GRID_STRIDE as f64;
                let cx = (gx as f64 + 0.5) * s;
                let cy = (gy as f64 + 0.5) * s;
                let dist = |j: usize| self.meta.anchor * boxes[[j, gy, gx]].clamp(-4.0, 3.0).exp();
                let native = self.meta.resolution as f64;
                let x0 = (cx - dist(0)).clamp(0.0, native - 1.0);
                let y0 = (cy - dist(1)).clamp(0.0, native - 1.0);
                let x1 = (cx + dist(2)).clamp(x0 + 1e-3, native);
                let y1 = (cy + dist(3)).clamp(y0 + 1e-3, native);
                let det = Detection {
                    box_: BoundingBox::new(
                        x0 * scale_x,
                        y0 * scale_y,
                        (x1 - x0) * scale_x,
                        (y1 - y0) * scale_y,
                    ),
                    category: self.category_of(best),
                    confidence: p,
                };
                cands.push((det, (gy, gx), probs));
            }
        }
        let kept = nms(cands, 0.35);
        kept.into_iter()
            .map(|(det, cell, probs)| {
                let emb: Vec<f64> = (0..feats.shape()[0]).map(|c| feats[[c, cell.0, cell.1]]).collect();
                EmbeddedDetection {
                    detection: det,
                    embedding: emb,
                    class_scores: probs,
                    cell,
                }
            })
            .collect()
    }

    /// Inference: detections with confidence at or above the threshold, in
    /// the input image's pixel coordinates. Inputs of any size are resized
    /// bilinearly to the native resolution.
    pub fn detect(&self, image: &FeatureMap, conf_threshold: f64) -> Result<Vec<Detection>> {
        Ok(self
            .detect_embedded(image, conf_threshold)?
            .into_iter()
            .map(|e| e.detection)
            .collect())
    }

    /// Inference that also returns penultimate embeddings and class scores.
    pub fn detect_embedded(
        &self,
        image: &FeatureMap,
        conf_threshold: f64,
    ) -> Result<Vec<EmbeddedDetection>> {
        self.require(self.meta.capabilities.inference, "inference")?;
        if image.is_empty() {
            return Err(Error::InvalidInput("empty image".into()));
        }
        let (h, w) = (image.shape()[1], image.shape()[2]);
        let native = self.meta.resolution;
        let x = resize_bilinear(image, native, native);
        let (cls, boxes, feats, _) = self.forward(&x);
        Ok(self.decode(
            &cls,
            &boxes,
            &feats,
            conf_threshold,
            w as f64 / native as f64,
            h as f64 / native as f64,
        ))
    }

    /// Targeted attack loss over a region: negative log of the aggregated
    /// target-class score among grid cells whose centers fall inside the
    /// region. Returns the loss and its gradient w.r.t. the input pixels.
    pub fn targeted_loss(
        &self,
        image: &FeatureMap,
        target: u32,
        region: &BoundingBox,
        agg: LossAgg,
    ) -> Result<(f64, FeatureMap)> {
        self.require(self.meta.capabilities.input_gradient, "input-gradient")?;
        let class = self
            .class_index(target)
            .ok_or_else(|| Error::InvalidInput(format!("unknown category {target}")))?;
        let (h, w) = (image.shape()[1], image.shape()[2]);
        let native = self.meta.resolution;
        let x = resize_bilinear(image, native, native);
        let (cls, _boxes, _feats, cache) = self.forward(&x);
        let (nc, gh, gw) = (cls.shape()[0], cls.shape()[1], cls.shape()[2]);

        // region in native coordinates
        let sx = native as f64 / w as f64;
        let sy = native as f64 / h as f64;
        let rx0 = region.x * sx;
        let ry0 = region.y * sy;
        let rx1 = region.right() * sx;
        let ry1 = region.bottom() * sy;
        let s = GRID_STRIDE as f64;
        let mut cells: Vec<(usize, usize)> = Vec::new();
        for gy in 0..gh {
            for gx in 0..gw {
                let cx = (gx as f64 + 0.5) * s;
                let cy = (gy as f64 + 0.5) * s;
                if cx >= rx0 && cx < rx1 && cy >= ry0 && cy < ry1 {
                    cells.push((gy, gx));
                }
            }
        }
        if cells.is_empty() {
            // degenerate region: fall back to the cell containing its center
            let gx = (((rx0 + rx1) / 2.0 / s) as usize).min(gw - 1);
            let gy = (((ry0 + ry1) / 2.0 / s) as usize).min(gh - 1);
            cells.push((gy, gx));
        }

        // target-class probability per candidate cell
        let mut cell_probs: Vec<(usize, f64, Vec<f64>)> = Vec::new(); // (cell idx, p_target, probs)
        for (i, &(gy, gx)) in cells.iter().enumerate() {
            let logits: Vec<f64> = (0..nc).map(|k| cls[[k, gy, gx]]).collect();
            let probs = softmax(&logits);
            cell_probs.push((i, probs[class], probs));
        }
        let mut order: Vec<usize> = (0..cell_probs.len()).collect();
        order.sort_by(|&a, &b| {
            cell_probs[b]
                .1
                .partial_cmp(&cell_probs[a].1)
                .unwrap()
                .then(a.cmp(&b))
        });
        let selected: Vec<usize> = match agg {
            LossAgg::Max => order.into_iter().take(1).collect(),
            LossAgg::TopK(k) => order.into_iter().take(k.max(1)).collect(),
        };
        let k = selected.len() as f64;
        let score: f64 = selected.iter().map(|&i| cell_probs[i].1).sum::<f64>() / k;
        let eps = 1e-9;
        let loss = -(score + eps).ln();

        // gradient: dloss/dscore * (1/k) through softmax at each selected cell
        let dl_ds = -1.0 / (score + eps);
        let mut g_cls: FeatureMap = Array3::zeros((nc, gh, gw));
        for &i in &selected {
            let (ci, p_t, ref probs) = cell_probs[i];
            let (gy, gx) = cells[ci];
            for j in 0..nc {
                let delta = if j == class { 1.0 } else { 0.0 };
                g_cls[[j, gy, gx]] += dl_ds / k * p_t * (delta - probs[j]);
            }
        }
        let g_box: FeatureMap = Array3::zeros((4, gh, gw));
        let (g_native, _) = self.backward(&cache, &g_cls, &g_box);
        let g_input = resize_bilinear_backward(&g_native, h, w);
        Ok((loss, g_input))
    }

    /// Class scores recomputed from a (possibly dropout-masked) embedding.
    /// Raw classifier scores (pre-softmax) for a penultimate embedding.
    pub fn class_logits(&self, embedding: &[f64]) -> Result<Vec<f64>> {
        self.require(self.meta.capabilities.penultimate_embedding, "penultimate-embedding")?;
        let nc = self.n_classes() + 1;
        let mut logits = vec![0.0; nc];
        for j in 0..nc {
            let mut v = self.net.head_cls.b[j];
            for (i, &e) in embedding.iter().enumerate() {
                v += self.net.head_cls.w[[j, i]] * e;
            }
            logits[j] = v;
        }
        Ok(logits)
    }

    pub fn rescore_embedding(&self, embedding: &[f64]) -> Result<Vec<f64>> {
        Ok(softmax(&self.class_logits(embedding)?))
    }

    pub fn supports_dropout(&self) -> bool {
        self.meta.capabilities.dropout_injection
    }

    /// Serializes metadata to `model.json` and weights to `weights.bin`.
    pub fn save<P: AsRef<Path>>(&self, dir: P) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(
            dir.join("model.json"),
            serde_json::to_string_pretty(&self.meta)?,
        )?;
        let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("weights.bin"))?);
        for p in self.net.param_arrays() {
            for &v in p {
                f.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load<P: AsRef<Path>>(dir: P) -> Result<DetectorModel> {
        let dir = dir.as_ref();
        let meta: ModelMeta =
            serde_json::from_str(&std::fs::read_to_string(dir.join("model.json"))?)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = Net::new(&mut rng, meta.widths, meta.labels.len());
        let mut f = std::io::BufReader::new(std::fs::File::open(dir.join("weights.bin"))?);
        for p in net.params() {
            for v in p.iter_mut() {
                let mut buf = [0u8; 8];
                f.read_exact(&mut buf)?;
                *v = f64::from_le_bytes(buf);
            }
        }
        Ok(DetectorModel { meta, net })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub widths: (usize, usize, usize),
    pub resolution: usize,
    pub anchor: f64,
    /// AP@0.5 floor on the held-out split; below it training fails.
    pub ap_floor: f64,
    pub min_scenes: usize,
    pub holdout_frac: f64,
    pub pos_weight: f64,
    pub box_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 20,
            batch_size: 8,
            lr: 5e-3,
            widths: (12, 24, 32),
            resolution: 96,
            anchor: 28.0,
            ap_floor: 0.8,
            min_scenes: 500,
            holdout_frac: 0.15,
            pos_weight: 1.0,
            box_weight: 3.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub holdout_ap50: f64,
    pub holdout_ar50: f64,
    pub final_loss: f64,
    pub epochs_run: usize,
}

/// Per-image detection loss and parameter gradients for the current net.
fn image_loss_grads(model: &DetectorModel, scene: &Scene, cfg: &TrainConfig) -> (f64, Grads) {
    let native = model.meta.resolution;
    let x = resize_bilinear(&scene.image, native, native);
    let img_h = scene.image.shape()[1] as f64;
    let img_w = scene.image.shape()[2] as f64;
    let sx = native as f64 / img_w;
    let sy = native as f64 / img_h;
    let (cls, boxes, _feats, cache) = model.forward(&x);
    let (nc, gh, gw) = (cls.shape()[0], cls.shape()[1], cls.shape()[2]);
    let s = GRID_STRIDE as f64;

    let mut g_cls: FeatureMap = Array3::zeros((nc, gh, gw));
    let mut g_box: FeatureMap = Array3::zeros((4, gh, gw));
    let mut loss = 0.0;
    let n_cells = (gh * gw) as f64;

    // every cell whose center falls inside a box is positive for that box
    // (smallest box wins on overlap); each predicts the full box so any
    // firing cell decodes to a usable detection
    let mut targets: Vec<Vec<Option<(usize, f64, f64, f64, f64)>>> = vec![vec![None; gw]; gh];
    let ignored = vec![vec![false; gw]; gh];
    for gy in 0..gh {
        for gx in 0..gw {
            let cx = (gx as f64 + 0.5) * s;
            let cy = (gy as f64 + 0.5) * s;
            let mut best_area = f64::INFINITY;
            for (cat, bb) in &scene.objects {
                let bx0 = bb.x * sx;
                let by0 = bb.y * sy;
                let bx1 = bb.right() * sx;
                let by1 = bb.bottom() * sy;
                if cx >= bx0 && cx < bx1 && cy >= by0 && cy < by1 {
                    let area = (bx1 - bx0) * (by1 - by0);
                    if area < best_area {
                        if let Some(class) = model.class_index(*cat) {
                            best_area = area;
                            // log-distance targets to the four sides, matching
                            // the decode parametrization
                            let a = model.meta.anchor;
                            let enc = |d: f64| (d.max(1e-3) / a).ln().clamp(-4.0, 3.0);
                            targets[gy][gx] = Some((
                                class,
                                enc(cx - bx0),
                                enc(cy - by0),
                                enc(bx1 - cx),
                                enc(by1 - cy),
                            ));
                        }
                    }
                }
            }
        }
    }

    // positives and background are averaged separately so a handful of
    // object cells is not drowned out by the background mass
    let n_pos = targets
        .iter()
        .flatten()
        .filter(|t| t.is_some())
        .count()
        .max(1) as f64;
    for gy in 0..gh {
        for gx in 0..gw {
            let target = targets[gy][gx];
            if target.is_none() && ignored[gy][gx] {
                continue;
            }
            let (class, weight) = match &target {
                Some((c, ..)) => (*c, cfg.pos_weight / n_pos),
                None => (0, 1.0 / n_cells),
            };
            let logits: Vec<f64> = (0..nc).map(|k| cls[[k, gy, gx]]).collect();
            let probs = softmax(&logits);
            loss += -weight * (probs[class] + 1e-12).ln();
            for j in 0..nc {
                let delta = if j == class { 1.0 } else { 0.0 };
                g_cls[[j, gy, gx]] = weight * (probs[j] - delta);
            }
            if let Some((_, tx, ty, tw, th)) = target {
                let t = [tx, ty, tw, th];
                for (j, tj) in t.iter().enumerate() {
                    let diff = boxes[[j, gy, gx]] - tj;
                    loss += cfg.box_weight * 0.5 * diff * diff / n_pos;
                    g_box[[j, gy, gx]] = cfg.box_weight * diff / n_pos;
                }
            }
        }
    }
    let (_, grads) = model.backward(&cache, &g_cls, &g_box);
    (loss, grads)
}

fn adam_step(net: &mut Net, adam: &mut Adam, grads: &Grads) {
    let mut params = net.params();
    let grad_refs: Vec<&[f64]> = grads.0.iter().map(|g| g.as_slice()).collect();
    adam.step(&mut params, &grad_refs);
}

/// Evaluates AP/AR at IoU 0.5 over a scene split.
pub fn eval_scenes_ap50(model: &DetectorModel, scenes: &[Scene]) -> Result<(f64, f64)> {
    let mut dets: Vec<ScoredBox> = Vec::new();
    let mut gts: Vec<GtBox> = Vec::new();
    for (i, scene) in scenes.iter().enumerate() {
        for (cat, bb) in &scene.objects {
            gts.push(GtBox {
                image_id: i as u64,
                category: *cat,
                box_: *bb,
                source: None,
            });
        }
        for det in model.detect(&scene.image, 0.05)? {
            dets.push(ScoredBox {
                image_id: i as u64,
                category: det.category,
                box_: det.box_,
                score: det.confidence,
            });
        }
    }
    let cats: Vec<u32> = model.meta.labels.iter().map(|c| c.id).collect();
    let rep = ap_ar(&dets, &gts, &cats, IouPolicy::At05, 100)?;
    Ok((rep.ap, rep.ar))
}

/// Trains a detector on annotated scenes, holding out a split for the
/// AP@0.5 acceptance gate. Fully deterministic given the config seed.
pub fn train_toy_detector(
    model_id: &str,
    scenes: &[Scene],
    labels: Vec<CategoryRecord>,
    cfg: &TrainConfig,
) -> Result<(DetectorModel, TrainMetrics)> {
    if scenes.is_empty() {
        return Err(Error::InvalidInput("empty training dataset".into()));
    }
    if labels.len() < 2 {
        return Err(Error::InvalidInput("need at least 2 categories".into()));
    }
    if scenes.len() < cfg.min_scenes {
        return Err(Error::InvalidInput(format!(
            "need at least {} scenes, got {}",
            cfg.min_scenes,
            scenes.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let net = Net::new(&mut rng, cfg.widths, labels.len());
    let mut model = DetectorModel {
        meta: ModelMeta {
            model_id: model_id.to_string(),
            labels,
            resolution: cfg.resolution,
            anchor: cfg.anchor,
            widths: cfg.widths,
            capabilities: Capabilities::all(),
        },
        net,
    };
    let n_holdout = ((scenes.len() as f64) * cfg.holdout_frac).ceil() as usize;
    let (holdout, train) = scenes.split_at(n_holdout.max(1));
    let mut adam = Adam::new(cfg.lr);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut final_loss = f64::NAN;
    for _epoch in 0..cfg.epochs {
        // Fisher-Yates with the run RNG keeps epochs reproducible
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        let mut batches = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut acc = Grads::zeros_like(&model.net);
            let mut loss = 0.0;
            for &i in chunk {
                let (l, g) = image_loss_grads(&model, &train[i], cfg);
                loss += l;
                acc.add(&g);
            }
            let inv = 1.0 / chunk.len() as f64;
            acc.scale(inv);
            loss *= inv;
            if !loss.is_finite() {
                return Err(Error::TrainingFailure("non-finite loss".into()));
            }
            adam_step(&mut model.net, &mut adam, &acc);
            epoch_loss += loss;
            batches += 1.0;
        }
        final_loss = epoch_loss / batches;
    }
    let (ap50, ar50) = eval_scenes_ap50(&model, holdout)?;
    let metrics = TrainMetrics {
        holdout_ap50: ap50,
        holdout_ar50: ar50,
        final_loss,
        epochs_run: cfg.epochs,
    };
    if ap50 < cfg.ap_floor {
        return Err(Error::TrainingFailure(format!(
            "held-out AP@0.5 {ap50:.3} below floor {:.3} (AR {ar50:.3}, loss {final_loss:.4})",
            cfg.ap_floor
        )));
    }
    Ok((model, metrics))
}

/// Continues training an existing model on new data (used by the supervised
/// defense). The label map may be replaced; heads are re-initialized when it
/// changes size, backbone weights are retained.
pub fn finetune(
    base: &DetectorModel,
    new_model_id: &str,
    labels: Vec<CategoryRecord>,
    scenes: &[Scene],
    cfg: &TrainConfig,
) -> Result<(DetectorModel, TrainMetrics)> {
    if scenes.is_empty() {
        return Err(Error::InvalidInput("empty finetuning dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = base.net.clone();
    if labels.len() != base.meta.labels.len() {
        net.head_cls = Conv2d::new(&mut rng, base.meta.widths.2, labels.len() + 1, 1, 1, 0);
        net.head_box = Conv2d::new(&mut rng, base.meta.widths.2, 4, 1, 1, 0);
    } else {
        // same head size: keep weights, classes re-mapped by position
    }
    let mut model = DetectorModel {
        meta: ModelMeta {
            model_id: new_model_id.to_string(),
            labels,
            resolution: base.meta.resolution,
            anchor: base.meta.anchor,
            widths: base.meta.widths,
            capabilities: Capabilities::all(),
        },
        net,
    };
    let n_holdout = ((scenes.len() as f64) * cfg.holdout_frac).ceil() as usize;
    let (holdout, train) = scenes.split_at(n_holdout.max(1));
    let mut adam = Adam::new(cfg.lr);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut final_loss = f64::NAN;
    for _ in 0..cfg.epochs {
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        let mut batches = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut acc = Grads::zeros_like(&model.net);
            let mut loss = 0.0;
            for &i in chunk {
                let (l, g) = image_loss_grads(&model, &train[i], cfg);
                loss += l;
                acc.add(&g);
            }
            let inv = 1.0 / chunk.len() as f64;
            acc.scale(inv);
            loss *= inv;
            if !loss.is_finite() {
                return Err(Error::TrainingFailure("non-finite loss".into()));
            }
            adam_step(&mut model.net, &mut adam, &acc);
            epoch_loss += loss;
            batches += 1.0;
        }
        final_loss = epoch_loss / batches;
    }
    let (ap50, ar50) = eval_scenes_ap50(&model, holdout)?;
    Ok((
        model,
        TrainMetrics {
            holdout_ap50: ap50,
            holdout_ar50: ar50,
            final_loss,
            epochs_run: cfg.epochs,
        },
    ))
}

/// Builds an untrained model (useful for gradient checks and tests).
pub fn untrained_model(
    model_id: &str,
    labels: Vec<CategoryRecord>,
    cfg: &TrainConfig,
) -> DetectorModel {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let net = Net::new(&mut rng, cfg.widths, labels.len());
    DetectorModel {
        meta: ModelMeta {
            model_id: model_id.to_string(),
            labels,
            resolution: cfg.resolution,
            anchor: cfg.anchor,
            widths: cfg.widths,
            capabilities: Capabilities::all(),
        },
        net,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenes::scene_categories;

    fn labels() -> Vec<CategoryRecord> {
        scene_categories()
            .into_iter()
            .map(|(id, name)| CategoryRecord { id, name })
            .collect()
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            widths: (6, 10, 16),
            resolution: 48,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn threshold_above_one_yields_empty() {
        let model = untrained_model("t", labels(), &tiny_cfg());
        let img = Array3::from_elem((3, 48, 48), 0.5);
        assert!(model.detect(&img, 1.01).unwrap().is_empty());
    }

    #[test]
    fn capability_errors_are_raised() {
        let mut model = untrained_model("t", labels(), &tiny_cfg());
        model.meta.capabilities.inference = false;
        let img = Array3::from_elem((3, 48, 48), 0.5);
        assert!(matches!(model.detect(&img, 0.3), Err(Error::Capability(_))));
        let mut model = untrained_model("t", labels(), &tiny_cfg());
        model.meta.capabilities.input_gradient = false;
        let region = BoundingBox::new(10., 10., 20., 20.);
        assert!(matches!(
            model.targeted_loss(&img, 1, &region, LossAgg::default()),
            Err(Error::Capability(_))
        ));
    }

    #[test]
    fn inference_is_deterministic() {
        let model = untrained_model("t", labels(), &tiny_cfg());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = Array3::from_shape_fn((3, 48, 48), |_| rng.gen_range(0.0..1.0));
        let a = model.detect(&img, 0.01).unwrap();
        let b = model.detect(&img, 0.01).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.confidence, y.confidence);
            assert_eq!(x.box_, y.box_);
        }
    }

    #[test]
    fn targeted_loss_gradient_matches_finite_differences() {
        let model = untrained_model("t", labels(), &tiny_cfg());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let img = Array3::from_shape_fn((3, 32, 32), |_| rng.gen_range(0.0..1.0));
        let region = BoundingBox::new(8.0, 8.0, 16.0, 16.0);
        let (_, grad) = model
            .targeted_loss(&img, 1, &region, LossAgg::default())
            .unwrap();
        let eps = 1e-3;
        for _ in 0..20 {
            let c = rng.gen_range(0..3);
            let y = rng.gen_range(0..32);
            let x = rng.gen_range(0..32);
            let mut ip = img.clone();
            ip[[c, y, x]] += eps;
            let (lp, _) = model.targeted_loss(&ip, 1, &region, LossAgg::default()).unwrap();
            let mut im = img.clone();
            im[[c, y, x]] -= eps;
            let (lm, _) = model.targeted_loss(&im, 1, &region, LossAgg::default()).unwrap();
            let num = (lp - lm) / (2.0 * eps);
            let ana = grad[[c, y, x]];
            assert!(
                (num - ana).abs() / (ana.abs() + 1e-8) < 1e-2,
                "grad mismatch at ({c},{y},{x}): fd={num:.3e} analytic={ana:.3e}"
            );
        }
    }

    #[test]
    fn targeted_loss_monotone_in_confidence() {
        // direct contract check on the loss form: higher target score in
        // region => lower loss
        let model = untrained_model("t", labels(), &tiny_cfg());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = Array3::from_shape_fn((3, 48, 48), |_| rng.gen_range(0.0..1.0));
        let region = BoundingBox::new(8.0, 8.0, 32.0, 32.0);
        let (l0, grad) = model
            .targeted_loss(&img, 2, &region, LossAgg::default())
            .unwrap();
        // one gradient-descent step on the pixels must reduce the loss
        let stepped = &img - &grad.mapv(|g| 0.05 * g.signum() * g.abs().min(1.0));
        let (l1, _) = model
            .targeted_loss(&stepped.mapv(|v| v.clamp(0.0, 1.0)), 2, &region, LossAgg::default())
            .unwrap();
        assert!(l1 < l0, "loss did not decrease: {l0} -> {l1}");
    }

    #[test]
    fn empty_dataset_rejected() {
        let cfg = tiny_cfg();
        assert!(matches!(
            train_toy_detector("t", &[], labels(), &cfg),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn save_load_roundtrip() {
        let model = untrained_model("t", labels(), &tiny_cfg());
        let dir = tempfile::tempdir().unwrap();
        model.save(dir.path()).unwrap();
        let loaded = DetectorModel::load(dir.path()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = Array3::from_shape_fn((3, 48, 48), |_| rng.gen_range(0.0..1.0));
        let a = model.detect_embedded(&img, 0.01).unwrap();
        let b = loaded.detect_embedded(&img, 0.01).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.detection.confidence, y.detection.confidence);
            assert_eq!(x.embedding, y.embedding);
        }
    }
}
