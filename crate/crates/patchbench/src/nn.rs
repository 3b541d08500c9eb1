//! Minimal f64 neural-network primitives with explicit backward passes.
//! Convolutions use im2col plus GEMM; everything is deterministic given a
//! seeded RNG, which keeps training and inference bit-reproducible.

use ndarray::{Array1, Array2, Array3};
use rand::Rng;

/// (channels, height, width) image or feature map.
pub type FeatureMap = Array3<f64>;

/// 2-D convolution with square kernel, zero padding.
#[derive(Debug, Clone)]
pub struct Conv2d {
    /// (out_channels, in_channels * k * k)
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub ic: usize,
    pub oc: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new<R: Rng>(rng: &mut R, ic: usize, oc: usize, k: usize, stride: usize, pad: usize) -> Self {
        // He-style uniform init
        let fan_in = (ic * k * k) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let w = Array2::from_shape_fn((oc, ic * k * k), |_| rng.gen_range(-bound..bound));
        let b = Array1::zeros(oc);
        Self { w, b, ic, oc, k, stride, pad }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn im2col(&self, x: &FeatureMap) -> Array2<f64> {
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        debug_assert_eq!(c, self.ic);
        let (oh, ow) = self.out_hw(h, w);
        let mut cols = Array2::zeros((self.ic * self.k * self.k, oh * ow));
        for oy in 0..oh {
            for ox in 0..ow {
                let col = oy * ow + ox;
                for ci in 0..self.ic {
                    for ky in 0..self.k {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..self.k {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let row = (ci * self.k + ky) * self.k + kx;
                            cols[[row, col]] = x[[ci, iy as usize, ix as usize]];
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &Array2<f64>, h: usize, w: usize) -> FeatureMap {
        let (oh, ow) = self.out_hw(h, w);
        let mut x = Array3::zeros((self.ic, h, w));
        for oy in 0..oh {
            for ox in 0..ow {
                let col = oy * ow + ox;
                for ci in 0..self.ic {
                    for ky in 0..self.k {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..self.k {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let row = (ci * self.k + ky) * self.k + kx;
                            x[[ci, iy as usize, ix as usize]] += cols[[row, col]];
                        }
                    }
                }
            }
        }
        x
    }

    /// Returns the output map and the im2col cache needed for backward.
    pub fn forward(&self, x: &FeatureMap) -> (FeatureMap, Array2<f64>) {
        let (h, w) = (x.shape()[1], x.shape()[2]);
        let (oh, ow) = self.out_hw(h, w);
        let cols = self.im2col(x);
        let mut y = self.w.dot(&cols); // (oc, oh*ow)
        for (mut row, &bias) in y.rows_mut().into_iter().zip(self.b.iter()) {
            row += bias;
        }
        (
            y.into_shape_with_order((self.oc, oh, ow)).unwrap(),
            cols,
        )
    }

    /// Backward pass; returns (grad wrt input, grad wrt w, grad wrt b).
    pub fn backward(
        &self,
        cols: &Array2<f64>,
        in_h: usize,
        in_w: usize,
        gy: &FeatureMap,
    ) -> (FeatureMap, Array2<f64>, Array1<f64>) {
        let (oh, ow) = self.out_hw(in_h, in_w);
        let gy2 = gy
            .view()
            .into_shape_with_order((self.oc, oh * ow))
            .unwrap()
            .to_owned();
        let gw = gy2.dot(&cols.t());
        let gb = gy2.sum_axis(ndarray::Axis(1));
        let gcols = self.w.t().dot(&gy2);
        let gx = self.col2im(&gcols, in_h, in_w);
        (gx, gw, gb)
    }
}

/// ReLU, returning output and a mask for backward.
pub fn relu(x: &FeatureMap) -> (FeatureMap, FeatureMap) {
    let y = x.mapv(|v| v.max(0.0));
    let mask = x.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
    (y, mask)
}

pub fn relu_backward(mask: &FeatureMap, gy: &FeatureMap) -> FeatureMap {
    mask * gy
}

pub fn sigmoid(x: &FeatureMap) -> FeatureMap {
    x.mapv(|v| 1.0 / (1.0 + (-v).exp()))
}

/// Backward through sigmoid given its output.
pub fn sigmoid_backward(y: &FeatureMap, gy: &FeatureMap) -> FeatureMap {
    y * &(1.0 - y) * gy
}

/// 2x2 average pooling with stride 2 (input dims must be even).
pub fn avgpool2(x: &FeatureMap) -> FeatureMap {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Array3::zeros((c, oh, ow));
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                y[[ci, oy, ox]] = 0.25
                    * (x[[ci, 2 * oy, 2 * ox]]
                        + x[[ci, 2 * oy, 2 * ox + 1]]
                        + x[[ci, 2 * oy + 1, 2 * ox]]
                        + x[[ci, 2 * oy + 1, 2 * ox + 1]]);
            }
        }
    }
    y
}

pub fn avgpool2_backward(gy: &FeatureMap) -> FeatureMap {
    let (c, oh, ow) = (gy.shape()[0], gy.shape()[1], gy.shape()[2]);
    let mut gx = Array3::zeros((c, oh * 2, ow * 2));
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = 0.25 * gy[[ci, oy, ox]];
                gx[[ci, 2 * oy, 2 * ox]] = g;
                gx[[ci, 2 * oy, 2 * ox + 1]] = g;
                gx[[ci, 2 * oy + 1, 2 * ox]] = g;
                gx[[ci, 2 * oy + 1, 2 * ox + 1]] = g;
            }
        }
    }
    gx
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2(x: &FeatureMap) -> FeatureMap {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut y = Array3::zeros((c, h * 2, w * 2));
    for ci in 0..c {
        for iy in 0..h {
            for ix in 0..w {
                let v = x[[ci, iy, ix]];
                y[[ci, 2 * iy, 2 * ix]] = v;
                y[[ci, 2 * iy, 2 * ix + 1]] = v;
                y[[ci, 2 * iy + 1, 2 * ix]] = v;
                y[[ci, 2 * iy + 1, 2 * ix + 1]] = v;
            }
        }
    }
    y
}

pub fn upsample2_backward(gy: &FeatureMap) -> FeatureMap {
    let (c, h2, w2) = (gy.shape()[0], gy.shape()[1], gy.shape()[2]);
    let mut gx = Array3::zeros((c, h2 / 2, w2 / 2));
    for ci in 0..c {
        for iy in 0..h2 / 2 {
            for ix in 0..w2 / 2 {
                gx[[ci, iy, ix]] = gy[[ci, 2 * iy, 2 * ix]]
                    + gy[[ci, 2 * iy, 2 * ix + 1]]
                    + gy[[ci, 2 * iy + 1, 2 * ix]]
                    + gy[[ci, 2 * iy + 1, 2 * ix + 1]];
            }
        }
    }
    gx
}

/// Bilinear resize to (out_h, out_w), align-corners=false convention.
pub fn resize_bilinear(x: &FeatureMap, out_h: usize, out_w: usize) -> FeatureMap {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if h == out_h && w == out_w {
        return x.clone();
    }
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let mut y = Array3::zeros((c, out_h, out_w));
    for oy in 0..out_h {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f64;
        for ox in 0..out_w {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f64;
            for ci in 0..c {
                y[[ci, oy, ox]] = (1.0 - wy) * (1.0 - wx) * x[[ci, y0, x0]]
                    + (1.0 - wy) * wx * x[[ci, y0, x1]]
                    + wy * (1.0 - wx) * x[[ci, y1, x0]]
                    + wy * wx * x[[ci, y1, x1]];
            }
        }
    }
    y
}

/// Backward of `resize_bilinear`: scatters output gradients to input pixels.
pub fn resize_bilinear_backward(
    gy: &FeatureMap,
    in_h: usize,
    in_w: usize,
) -> FeatureMap {
    let (c, out_h, out_w) = (gy.shape()[0], gy.shape()[1], gy.shape()[2]);
    if in_h == out_h && in_w == out_w {
        return gy.clone();
    }
    let sy = in_h as f64 / out_h as f64;
    let sx = in_w as f64 / out_w as f64;
    let mut gx = Array3::zeros((c, in_h, in_w));
    for oy in 0..out_h {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (in_h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(in_h - 1);
        let wy = fy - y0 as f64;
        for ox in 0..out_w {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (in_w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(in_w - 1);
            let wx = fx - x0 as f64;
            for ci in 0..c {
                let g = gy[[ci, oy, ox]];
                gx[[ci, y0, x0]] += (1.0 - wy) * (1.0 - wx) * g;
                gx[[ci, y0, x1]] += (1.0 - wy) * wx * g;
                gx[[ci, y1, x0]] += wy * (1.0 - wx) * g;
                gx[[ci, y1, x1]] += wy * wx * g;
            }
        }
    }
    gx
}

/// Numerically stable softmax over a slice.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / s).collect()
}

/// Adam over an ordered list of flat parameter buffers.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One update step. `params[i]` and `grads[i]` must keep the same shape
    /// and order across calls.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) {
        assert_eq!(params.len(), grads.len());
        if self.m.is_empty() {
            for p in params.iter() {
                self.m.push(vec![0.0; p.len()]);
                self.v.push(vec![0.0; p.len()]);
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let g = grads[i];
            let p = &mut *params[i];
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p[j] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}
