//! Expectation-over-Transformation patch optimization: a masked pixel grid
//! trained so that, composited into random backgrounds under random
//! rotations, scales and placements, it draws out targeted detections.

use ndarray::{Array2, Array3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coco::{BoundingBox, PatchShape};
use crate::detector::{DetectorModel, LossAgg};
use crate::error::{Error, Result};
use crate::nn::{Adam, FeatureMap};

/// Ranges for the random transform draw. `scale` is the patch side length
/// as a fraction of the smaller background dimension.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransformConfig {
    pub rotation_deg: (f64, f64),
    pub scale: (f64, f64),
    /// Optional uniform brightness jitter applied to the patch at composite
    /// time, as a +/- offset; off by default.
    pub photometric_jitter: Option<f64>,
}

impl Default for TransformConfig {
    fn default() -> Self {
        Self {
            rotation_deg: (0.0, 360.0),
            scale: (0.05, 0.5),
            photometric_jitter: None,
        }
    }
}

impl TransformConfig {
    pub fn validate(&self) -> Result<()> {
        let (r0, r1) = self.rotation_deg;
        if !(0.0..=360.0).contains(&r0) || !(0.0..=360.0).contains(&r1) || r0 > r1 {
            return Err(Error::InvalidConfig(format!(
                "rotation range [{r0},{r1}] outside [0,360]"
            )));
        }
        let (s0, s1) = self.scale;
        if !(s0 > 0.0 && s1 < 1.0 && s0 <= s1) {
            return Err(Error::InvalidConfig(format!(
                "scale range [{s0},{s1}] outside (0,1)"
            )));
        }
        if let Some(j) = self.photometric_jitter {
            if !(0.0..=1.0).contains(&j) {
                return Err(Error::InvalidConfig(format!("jitter {j} outside [0,1]")));
            }
        }
        Ok(())
    }

    /// Largest bound-box inflation factor |cos t|+|sin t| over the rotation
    /// range: evaluated at the endpoints and at any odd multiple of 45
    /// degrees inside the range, where the factor peaks.
    fn worst_inflation(&self) -> f64 {
        let (r0, r1) = self.rotation_deg;
        let f = |deg: f64| {
            let t = deg.to_radians();
            t.cos().abs() + t.sin().abs()
        };
        let mut worst = f(r0).max(f(r1));
        let mut k = 45.0;
        while k <= 360.0 {
            if r0 <= k && k <= r1 {
                worst = worst.max(f(k));
            }
            k += 90.0;
        }
        worst
    }
}

/// One drawn transform. `center` is in normalized background coordinates.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Transform {
    pub rotation_deg: f64,
    pub scale: f64,
    pub center: (f64, f64),
    /// Brightness offset; 0 unless jitter is enabled.
    pub brightness: f64,
}

/// An optimized (or control) patch with its provenance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PatchRecord {
    pub pixels: FeatureMap,
    pub mask: Array2<f64>,
    pub target_category: u32,
    pub source_model: String,
    pub shape: PatchShape,
    pub resolution: usize,
    pub transform_config: TransformConfig,
    pub opt_config: PatchOptConfig,
    pub final_loss: Option<f64>,
}

impl PatchRecord {
    pub fn validate(&self) -> Result<()> {
        let sh = self.pixels.shape();
        if sh[0] != 3 || sh[1] != self.resolution || sh[2] != self.resolution {
            return Err(Error::InvalidInput(format!(
                "patch pixels {sh:?} do not match resolution {}",
                self.resolution
            )));
        }
        if self.mask.shape() != [self.resolution, self.resolution] {
            return Err(Error::InvalidInput("mask does not match resolution".into()));
        }
        if self.pixels.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::InvalidInput("patch pixels outside [0,1]".into()));
        }
        if self.mask.iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(Error::InvalidInput("mask is not binary".into()));
        }
        let expected = shape_mask(self.shape, self.resolution);
        if self.mask != expected {
            return Err(Error::InvalidInput(format!(
                "mask does not match declared shape {:?}",
                self.shape
            )));
        }
        Ok(())
    }
}

/// Binary mask for a patch shape: all-ones square, or the inscribed disc.
pub fn shape_mask(shape: PatchShape, resolution: usize) -> Array2<f64> {
    let r = resolution as f64 / 2.0;
    Array2::from_shape_fn((resolution, resolution), |(y, x)| match shape {
        PatchShape::Square => 1.0,
        PatchShape::Circle => {
            let dx = x as f64 + 0.5 - r;
            let dy = y as f64 + 0.5 - r;
            if (dx * dx + dy * dy).sqrt() <= r {
                1.0
            } else {
                0.0
            }
        }
    })
}

/// Optimizer settings for `generate_patch`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PatchOptConfig {
    pub seed: u64,
    pub iterations: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Confidence regularizer weight; 0 is the high-confidence setting.
    pub reg_weight: f64,
    pub loss_agg: LossAgg,
}

impl Default for PatchOptConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            iterations: 500,
            lr: 0.05,
            batch_size: 4,
            reg_weight: 0.05,
            loss_agg: LossAgg::default(),
        }
    }
}

/// One row of the optimization loss trace.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossTraceRow {
    pub iteration: usize,
    pub loss: f64,
    pub regularizer: f64,
}

/// Draws a transform whose placement box fits fully inside the background.
pub fn sample_transform<R: Rng>(
    rng: &mut R,
    cfg: &TransformConfig,
    bg_dims: (usize, usize),
) -> Result<Transform> {
    cfg.validate()?;
    let (bg_h, bg_w) = bg_dims;
    let min_dim = bg_h.min(bg_w) as f64;
    // worst case must fit, otherwise a draw could be unplaceable
    let worst = cfg.scale.1 * min_dim * cfg.worst_inflation();
    if worst > bg_w as f64 || worst > bg_h as f64 {
        return Err(Error::InvalidConfig(format!(
            "scale up to {} cannot fit a rotated patch in a {bg_w}x{bg_h} background",
            cfg.scale.1
        )));
    }
    let rotation_deg = if cfg.rotation_deg.0 == cfg.rotation_deg.1 {
        cfg.rotation_deg.0
    } else {
        rng.gen_range(cfg.rotation_deg.0..cfg.rotation_deg.1)
    };
    let scale = if cfg.scale.0 == cfg.scale.1 {
        cfg.scale.0
    } else {
        rng.gen_range(cfg.scale.0..cfg.scale.1)
    };
    let t = rotation_deg.to_radians();
    let side = scale * min_dim;
    let bound = side * (t.cos().abs() + t.sin().abs());
    let half_x = bound / 2.0 / bg_w as f64;
    let half_y = bound / 2.0 / bg_h as f64;
    let cx = if half_x >= 0.5 { 0.5 } else { rng.gen_range(half_x..1.0 - half_x) };
    let cy = if half_y >= 0.5 { 0.5 } else { rng.gen_range(half_y..1.0 - half_y) };
    let brightness = match cfg.photometric_jitter {
        Some(j) if j > 0.0 => rng.gen_range(-j..j),
        _ => 0.0,
    };
    Ok(Transform {
        rotation_deg,
        scale,
        center: (cx, cy),
        brightness,
    })
}

struct SampledPixel {
    y: usize,
    x: usize,
    /// Bilinear taps into the patch grid: (py, px, weight).
    taps: [(usize, usize, f64); 4],
    mask: f64,
}

/// Inverse-maps every background pixel in the placement bound into patch
/// coordinates and records the bilinear taps. Mask and pixels are sampled
/// premultiplied so edges anti-alias without dark halos.
fn sample_grid(patch: &PatchRecord, bg_dims: (usize, usize), t: &Transform) -> Vec<SampledPixel> {
    let (bg_h, bg_w) = bg_dims;
    let min_dim = bg_h.min(bg_w) as f64;
    let side = t.scale * min_dim;
    let res = patch.resolution as f64;
    let theta = t.rotation_deg.to_radians();
    let (sin, cos) = theta.sin_cos();
    let cx = t.center.0 * bg_w as f64;
    let cy = t.center.1 * bg_h as f64;
    let bound = side * (cos.abs() + sin.abs());
    let x_lo = ((cx - bound / 2.0).floor().max(0.0)) as usize;
    let x_hi = ((cx + bound / 2.0).ceil() as usize).min(bg_w);
    let y_lo = ((cy - bound / 2.0).floor().max(0.0)) as usize;
    let y_hi = ((cy + bound / 2.0).ceil() as usize).min(bg_h);
    let mut out = Vec::new();
    for y in y_lo..y_hi {
        for x in x_lo..x_hi {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            // rotate by -theta to undo the patch rotation
            let u = (cos * dx + sin * dy) / side * res + res / 2.0;
            let v = (-sin * dx + cos * dy) / side * res + res / 2.0;
            // half-pixel centers
            let fu = u - 0.5;
            let fv = v - 0.5;
            let u0 = fu.floor();
            let v0 = fv.floor();
            let au = fu - u0;
            let av = fv - v0;
            let mut taps = [(0usize, 0usize, 0.0f64); 4];
            let mut m = 0.0;
            let mut i = 0;
            for (dv, wv) in [(0i64, 1.0 - av), (1, av)] {
                for (du, wu) in [(0i64, 1.0 - au), (1, au)] {
                    let pu = u0 as i64 + du;
                    let pv = v0 as i64 + dv;
                    let w = wu * wv;
                    if pu >= 0
                        && pv >= 0
                        && (pu as usize) < patch.resolution
                        && (pv as usize) < patch.resolution
                        && w > 0.0
                    {
                        taps[i] = (pv as usize, pu as usize, w);
                        m += w * patch.mask[[pv as usize, pu as usize]];
                        i += 1;
                    }
                }
            }
            for t in taps.iter_mut().skip(i) {
                *t = (0, 0, 0.0);
            }
            if m > 0.0 {
                out.push(SampledPixel { y, x, taps, mask: m });
            }
        }
    }
    out
}

/// Composites a patch into a background. Pixels where the transformed mask
/// is exactly zero are bit-identical to the background. Returns the tight
/// bound of the pixels with sampled mask at least 0.5 as the placement box.
pub fn composite(
    patch: &PatchRecord,
    bg: &FeatureMap,
    t: &Transform,
) -> Result<(FeatureMap, BoundingBox)> {
    let (bg_h, bg_w) = (bg.shape()[1], bg.shape()[2]);
    let grid = sample_grid(patch, (bg_h, bg_w), t);
    if grid.is_empty() {
        return Err(Error::InvalidInput("transform places no patch pixels".into()));
    }
    let mut out = bg.clone();
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0usize, 0usize);
    let mut any_solid = false;
    for sp in &grid {
        for c in 0..3 {
            let mut pm = 0.0;
            for &(pv, pu, w) in &sp.taps {
                if w > 0.0 {
                    pm += w * patch.mask[[pv, pu]] * (patch.pixels[[c, pv, pu]] + t.brightness).clamp(0.0, 1.0);
                }
            }
            out[[c, sp.y, sp.x]] = bg[[c, sp.y, sp.x]] * (1.0 - sp.mask) + pm;
        }
        if sp.mask >= 0.5 {
            any_solid = true;
            x0 = x0.min(sp.x);
            y0 = y0.min(sp.y);
            x1 = x1.max(sp.x);
            y1 = y1.max(sp.y);
        }
    }
    if !any_solid {
        for sp in &grid {
            x0 = x0.min(sp.x);
            y0 = y0.min(sp.y);
            x1 = x1.max(sp.x);
            y1 = y1.max(sp.y);
        }
    }
    let bb = BoundingBox::new(
        x0 as f64,
        y0 as f64,
        (x1 - x0 + 1) as f64,
        (y1 - y0 + 1) as f64,
    );
    Ok((out, bb))
}

/// Backpropagates a gradient on the composed image to the patch pixels.
pub fn composite_grad(
    patch: &PatchRecord,
    bg_dims: (usize, usize),
    t: &Transform,
    g_out: &FeatureMap,
    g_patch: &mut FeatureMap,
) {
    let grid = sample_grid(patch, bg_dims, t);
    for sp in &grid {
        for c in 0..3 {
            let g = g_out[[c, sp.y, sp.x]];
            if g == 0.0 {
                continue;
            }
            for &(pv, pu, w) in &sp.taps {
                if w > 0.0 {
                    let inner = patch.pixels[[c, pv, pu]] + t.brightness;
                    if (0.0..=1.0).contains(&inner) {
                        g_patch[[c, pv, pu]] += g * w * patch.mask[[pv, pu]];
                    }
                }
            }
        }
    }
}

/// L2 pull of masked pixels toward mid-gray; returns the scalar penalty.
pub fn confidence_regularizer(patch: &PatchRecord, weight: f64) -> Result<f64> {
    if weight < 0.0 {
        return Err(Error::InvalidInput(format!("negative weight {weight}")));
    }
    if weight == 0.0 {
        return Ok(0.0);
    }
    let n: f64 = patch.mask.iter().sum::<f64>() * 3.0;
    if n == 0.0 {
        return Ok(0.0);
    }
    let mut acc = 0.0;
    for c in 0..3 {
        for ((y, x), &m) in patch.mask.indexed_iter() {
            if m > 0.0 {
                let d = patch.pixels[[c, y, x]] - 0.5;
                acc += d * d;
            }
        }
    }
    Ok(weight * acc / n)
}

fn regularizer_grad(patch: &PatchRecord, weight: f64, g_patch: &mut FeatureMap) {
    if weight == 0.0 {
        return;
    }
    let n: f64 = patch.mask.iter().sum::<f64>() * 3.0;
    if n == 0.0 {
        return;
    }
    for c in 0..3 {
        for ((y, x), &m) in patch.mask.indexed_iter() {
            if m > 0.0 {
                g_patch[[c, y, x]] += weight * 2.0 * (patch.pixels[[c, y, x]] - 0.5) / n;
            }
        }
    }
}

/// Initial patch: uniform noise near mid-gray inside the mask, mid-gray
/// outside it.
pub fn init_patch(
    rng: &mut impl Rng,
    shape: PatchShape,
    resolution: usize,
    target_category: u32,
    source_model: &str,
    tcfg: &TransformConfig,
    opt: &PatchOptConfig,
) -> PatchRecord {
    let mask = shape_mask(shape, resolution);
    let pixels = Array3::from_shape_fn((3, resolution, resolution), |(_, y, x)| {
        let v: f64 = rng.gen_range(0.4..0.6);
        if mask[[y, x]] > 0.0 {
            v
        } else {
            0.5
        }
    });
    PatchRecord {
        pixels,
        mask,
        target_category,
        source_model: source_model.to_string(),
        shape,
        resolution,
        transform_config: tcfg.clone(),
        opt_config: opt.clone(),
        final_loss: None,
    }
}

/// Expectation-over-Transformation optimization of a patch against a
/// detector. Deterministic given the config seed.
pub fn generate_patch(
    model: &DetectorModel,
    target_category: u32,
    shape: PatchShape,
    resolution: usize,
    tcfg: &TransformConfig,
    backgrounds: &[FeatureMap],
    opt: &PatchOptConfig,
) -> Result<(PatchRecord, Vec<LossTraceRow>)> {
    if !model.meta.capabilities.input_gradient {
        return Err(Error::Capability("input-gradient".to_string()));
    }
    if backgrounds.is_empty() {
        return Err(Error::InvalidInput("no backgrounds".into()));
    }
    tcfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(opt.seed);
    let mut patch = init_patch(
        &mut rng,
        shape,
        resolution,
        target_category,
        &model.meta.model_id,
        tcfg,
        opt,
    );
    let mut trace = Vec::with_capacity(opt.iterations);
    let mut adam = Adam::new(opt.lr);
    for iter in 0..opt.iterations {
        let mut g_patch: FeatureMap = Array3::zeros((3, resolution, resolution));
        let mut loss_acc = 0.0;
        for _ in 0..opt.batch_size.max(1) {
            let bg = &backgrounds[rng.gen_range(0..backgrounds.len())];
            let dims = (bg.shape()[1], bg.shape()[2]);
            let t = sample_transform(&mut rng, tcfg, dims)?;
            let (composed, bb) = composite(&patch, bg, &t)?;
            let (loss, g_img) = model.targeted_loss(&composed, target_category, &bb, opt.loss_agg)?;
            loss_acc += loss;
            composite_grad(&patch, dims, &t, &g_img, &mut g_patch);
        }
        let n = opt.batch_size.max(1) as f64;
        let loss = loss_acc / n;
        g_patch.mapv_inplace(|g| g / n);
        let reg = confidence_regularizer(&patch, opt.reg_weight)?;
        regularizer_grad(&patch, opt.reg_weight, &mut g_patch);
        if !(loss + reg).is_finite() {
            return Err(Error::TrainingFailure(format!(
                "non-finite loss at iteration {iter}: loss={loss} reg={reg}"
            )));
        }
        trace.push(LossTraceRow {
            iteration: iter,
            loss,
            regularizer: reg,
        });
        {
            let px = patch.pixels.as_slice_mut().unwrap();
            let gs = g_patch.as_slice().unwrap();
            let mut params = [px];
            let grads = [gs];
            adam.step(&mut params, &grads);
        }
        // clip to valid pixel range, restore mid-gray outside the mask
        let mask = patch.mask.clone();
        for c in 0..3 {
            for ((y, x), &m) in mask.indexed_iter() {
                let p = &mut patch.pixels[[c, y, x]];
                *p = if m > 0.0 { p.clamp(0.0, 1.0) } else { 0.5 };
            }
        }
    }
    patch.final_loss = trace.last().map(|r| r.loss);
    Ok((patch, trace))
}

/// Sidecar metadata stored next to an exported patch PNG.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PatchSidecar {
    pub target_category: u32,
    pub source_model: String,
    pub shape: PatchShape,
    pub resolution: usize,
    pub transform_config: TransformConfig,
    pub opt_config: PatchOptConfig,
    pub final_loss: Option<f64>,
}

/// Writes `<stem>.png` and `<stem>.json` under `dir`.
pub fn save_patch(patch: &PatchRecord, dir: &std::path::Path, stem: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    crate::scenes::save_png(&patch.pixels, dir.join(format!("{stem}.png")))?;
    let sidecar = PatchSidecar {
        target_category: patch.target_category,
        source_model: patch.source_model.clone(),
        shape: patch.shape,
        resolution: patch.resolution,
        transform_config: patch.transform_config.clone(),
        opt_config: patch.opt_config.clone(),
        final_loss: patch.final_loss,
    };
    let f = std::fs::File::create(dir.join(format!("{stem}.json")))?;
    serde_json::to_writer_pretty(f, &sidecar)?;
    Ok(())
}

/// Reads a patch exported by `save_patch`; the mask is rebuilt from the
/// declared shape.
pub fn load_patch(dir: &std::path::Path, stem: &str) -> Result<PatchRecord> {
    let sidecar: PatchSidecar =
        serde_json::from_reader(std::fs::File::open(dir.join(format!("{stem}.json")))?)?;
    let pixels = crate::scenes::load_png(dir.join(format!("{stem}.png")))?;
    if pixels.shape()[1] != sidecar.resolution || pixels.shape()[2] != sidecar.resolution {
        return Err(Error::InvalidInput("patch PNG does not match sidecar resolution".into()));
    }
    Ok(PatchRecord {
        mask: shape_mask(sidecar.shape, sidecar.resolution),
        pixels,
        target_category: sidecar.target_category,
        source_model: sidecar.source_model,
        shape: sidecar.shape,
        resolution: sidecar.resolution,
        transform_config: sidecar.transform_config,
        opt_config: sidecar.opt_config,
        final_loss: sidecar.final_loss,
    })
}

/// Writes the loss trace as CSV with columns iteration, loss, regularizer.
pub fn save_loss_trace(trace: &[LossTraceRow], path: &std::path::Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    w.write_record(["iteration", "loss", "regularizer"])
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    for row in trace {
        w.write_record([
            row.iteration.to_string(),
            format!("{:.17e}", row.loss),
            format!("{:.17e}", row.regularizer),
        ])
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    w.flush()?;
    Ok(())
}
