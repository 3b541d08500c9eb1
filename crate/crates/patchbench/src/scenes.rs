//! Synthetic shape scenes: the desk-scale stand-in for natural images.
//! Scenes are gradient backgrounds with 1-3 high-contrast filled shapes
//! (disc, square, triangle), each annotated with a tight bounding box.

use ndarray::Array3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coco::BoundingBox;
use crate::error::{Error, Result};
use crate::nn::FeatureMap;

pub const CAT_DISC: u32 = 1;
pub const CAT_SQUARE: u32 = 2;
pub const CAT_TRIANGLE: u32 = 3;

pub fn scene_categories() -> Vec<(u32, String)> {
    vec![
        (CAT_DISC, "disc".to_string()),
        (CAT_SQUARE, "square".to_string()),
        (CAT_TRIANGLE, "triangle".to_string()),
    ]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneConfig {
    pub size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_obj_size: f64,
    pub max_obj_size: f64,
    pub noise_sigma: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            size: 96,
            min_objects: 1,
            max_objects: 3,
            min_obj_size: 16.0,
            max_obj_size: 44.0,
            noise_sigma: 0.02,
        }
    }
}

/// One synthetic scene with its object annotations.
#[derive(Debug, Clone)]
pub struct Scene {
    pub image: FeatureMap,
    pub objects: Vec<(u32, BoundingBox)>,
}

fn luminance(c: [f64; 3]) -> f64 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

/// Pixel coverage of a shape, evaluated at pixel center (px+0.5, py+0.5).
fn shape_coverage(cat: u32, cx: f64, cy: f64, half: f64, px: f64, py: f64) -> f64 {
    let dx = px - cx;
    let dy = py - cy;
    match cat {
        CAT_DISC => {
            let d = (dx * dx + dy * dy).sqrt();
            (half + 0.5 - d).clamp(0.0, 1.0)
        }
        CAT_SQUARE => {
            let d = dx.abs().max(dy.abs());
            (half + 0.5 - d).clamp(0.0, 1.0)
        }
        CAT_TRIANGLE => {
            // upward triangle inscribed in the box
            let t = (dy + half) / (2.0 * half); // 0 at apex row, 1 at base
            if !(0.0..=1.0).contains(&t) {
                return 0.0;
            }
            let allowed = t * half;
            (allowed - dx.abs() + 0.5).clamp(0.0, 1.0)
        }
        _ => 0.0,
    }
}

/// Generates one scene from the given RNG.
pub fn generate_scene<R: Rng>(rng: &mut R, cfg: &SceneConfig) -> Scene {
    let s = cfg.size;
    // gradient background between two muted colors
    let c0: [f64; 3] = [rng.gen_range(0.2..0.7), rng.gen_range(0.2..0.7), rng.gen_range(0.2..0.7)];
    let c1: [f64; 3] = [rng.gen_range(0.2..0.7), rng.gen_range(0.2..0.7), rng.gen_range(0.2..0.7)];
    let horizontal: bool = rng.gen();
    let mut image = Array3::zeros((3, s, s));
    for y in 0..s {
        for x in 0..s {
            let t = if horizontal { x as f64 } else { y as f64 } / (s - 1) as f64;
            for ch in 0..3 {
                let noise = rng.gen_range(-1.0..1.0) * cfg.noise_sigma;
                image[[ch, y, x]] = (c0[ch] * (1.0 - t) + c1[ch] * t + noise).clamp(0.0, 1.0);
            }
        }
    }
    let bg_lum = luminance([
        (c0[0] + c1[0]) / 2.0,
        (c0[1] + c1[1]) / 2.0,
        (c0[2] + c1[2]) / 2.0,
    ]);

    let n = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    let mut objects: Vec<(u32, BoundingBox)> = Vec::new();
    for _ in 0..n {
        let cat = [CAT_DISC, CAT_SQUARE, CAT_TRIANGLE][rng.gen_range(0..3)];
        // color with luminance contrast against the background
        let mut color = [0.0; 3];
        for _ in 0..50 {
            color = [rng.gen(), rng.gen(), rng.gen()];
            if (luminance(color) - bg_lum).abs() > 0.25 {
                break;
            }
        }
        let size = rng.gen_range(cfg.min_obj_size..cfg.max_obj_size);
        let half = size / 2.0;
        // keep fully inside, avoid heavy overlap with earlier objects
        let mut placed = false;
        for _ in 0..30 {
            let cx = rng.gen_range(half + 1.0..s as f64 - half - 1.0);
            let cy = rng.gen_range(half + 1.0..s as f64 - half - 1.0);
            let bb = BoundingBox::new(cx - half, cy - half, size, size);
            let clash = objects
                .iter()
                .any(|(_, other)| crate::coco::iou(&bb, other).unwrap_or(1.0) > 0.15);
            if clash {
                continue;
            }
            for py in (cy - half - 1.0).floor().max(0.0) as usize
                ..((cy + half + 1.0).ceil() as usize).min(s)
            {
                for px in (cx - half - 1.0).floor().max(0.0) as usize
                    ..((cx + half + 1.0).ceil() as usize).min(s)
                {
                    let cov =
                        shape_coverage(cat, cx, cy, half, px as f64 + 0.5, py as f64 + 0.5);
                    if cov > 0.0 {
                        for ch in 0..3 {
                            let old = image[[ch, py, px]];
                            image[[ch, py, px]] = old * (1.0 - cov) + color[ch] * cov;
                        }
                    }
                }
            }
            objects.push((cat, bb));
            placed = true;
            break;
        }
        let _ = placed;
    }
    Scene { image, objects }
}

/// Generates a reproducible corpus of scenes.
pub fn generate_scenes(seed: u64, count: usize, cfg: &SceneConfig) -> Vec<Scene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| generate_scene(&mut rng, cfg)).collect()
}

/// Saves an image in [0,1] f64 CHW layout as PNG.
pub fn save_png<P: AsRef<std::path::Path>>(image: &FeatureMap, path: P) -> Result<()> {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    if c != 3 {
        return Err(Error::InvalidInput(format!("expected 3 channels, got {c}")));
    }
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                (image[[0, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8,
                (image[[1, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8,
                (image[[2, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8,
            ];
            buf.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    buf.save(path)?;
    Ok(())
}

/// Loads a PNG into [0,1] f64 CHW layout.
pub fn load_png<P: AsRef<std::path::Path>>(path: P) -> Result<FeatureMap> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Array3::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            let px = img.get_pixel(x as u32, y as u32);
            for ch in 0..3 {
                out[[ch, y, x]] = px.0[ch] as f64 / 255.0;
            }
        }
    }
    Ok(out)
}
