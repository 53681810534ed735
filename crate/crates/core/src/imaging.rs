//! RGB images and the two resamplers the pipeline needs.
//!
//! Both resamplers use half-pixel centres (`align_corners = false`) without
//! antialiasing, matching the interpolation CLIP segmentation toolchains use.

use crate::error::{Error, Result};

/// Interleaved `H×W×3` image with `f32` samples (unit range before normalisation).
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width * 3 {
            return Err(Error::Image(format!(
                "{height}x{width}x3 image needs {} samples, got {}",
                height * width * 3,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    data.push(f(y, x, c));
                }
            }
        }
        Self { height, width, data }
    }

    /// Builds an image from planar `[3, H, W]` samples.
    pub fn from_planar(height: usize, width: usize, planar: &[f32]) -> Result<Self> {
        if planar.len() != 3 * height * width {
            return Err(Error::Image(format!("planar buffer has {} samples", planar.len())));
        }
        Ok(Self::from_fn(height, width, |y, x, c| planar[c * height * width + y * width + x]))
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c]
    }

    /// Per-channel `(v − mean) / std`.
    pub fn normalized(&self, mean: [f32; 3], std: [f32; 3]) -> Image {
        let mut out = self.clone();
        for px in out.data.chunks_exact_mut(3) {
            for c in 0..3 {
                px[c] = (px[c] - mean[c]) / std[c];
            }
        }
        out
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Image> {
        if top + height > self.height || left + width > self.width || height == 0 || width == 0 {
            return Err(Error::Image(format!(
                "crop {height}x{width}@({top},{left}) outside {}x{}",
                self.height, self.width
            )));
        }
        Ok(Image::from_fn(height, width, |y, x, c| self.at(top + y, left + x, c)))
    }

    pub fn resize(&self, height: usize, width: usize) -> Image {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let data = resize_bilinear(&self.data, self.height, self.width, 3, height, width);
        Image { height, width, data }
    }

    /// Rescales so the shorter side equals `short`, keeping the aspect ratio.
    pub fn resize_short_side(&self, short: usize) -> Image {
        let (h, w) = short_side_dims(self.height, self.width, short);
        self.resize(h, w)
    }
}

/// Output size when rescaling `(h, w)` so that its shorter side becomes `short`.
pub fn short_side_dims(h: usize, w: usize, short: usize) -> (usize, usize) {
    if h <= w {
        let nw = ((w as f64) * short as f64 / h as f64).round() as usize;
        (short, nw.max(1))
    } else {
        let nh = ((h as f64) * short as f64 / w as f64).round() as usize;
        (nh.max(1), short)
    }
}

fn linear_taps(out: usize, inp: usize) -> Vec<(usize, usize, f32)> {
    let scale = inp as f64 / out as f64;
    (0..out)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(inp - 1);
            let i1 = (i0 + 1).min(inp - 1);
            (i0, i1, (src - i0 as f64) as f32)
        })
        .collect()
}

/// Bilinear resize of an interleaved `h×w×c` buffer.
pub fn resize_bilinear(src: &[f32], h: usize, w: usize, c: usize, nh: usize, nw: usize) -> Vec<f32> {
    let ys = linear_taps(nh, h);
    let xs = linear_taps(nw, w);
    let mut out = vec![0.0f32; nh * nw * c];
    for (oy, &(y0, y1, ly)) in ys.iter().enumerate() {
        for (ox, &(x0, x1, lx)) in xs.iter().enumerate() {
            let o = (oy * nw + ox) * c;
            for ch in 0..c {
                let p = |y: usize, x: usize| src[(y * w + x) * c + ch];
                let top = p(y0, x0) * (1.0 - lx) + p(y0, x1) * lx;
                let bot = p(y1, x0) * (1.0 - lx) + p(y1, x1) * lx;
                out[o + ch] = top * (1.0 - ly) + bot * ly;
            }
        }
    }
    out
}

fn cubic_weights(t: f64) -> [f64; 4] {
    const A: f64 = -0.75;
    let w0 = ((A * (t + 1.0) - 5.0 * A) * (t + 1.0) + 8.0 * A) * (t + 1.0) - 4.0 * A;
    let w1 = ((A + 2.0) * t - (A + 3.0)) * t * t + 1.0;
    let u = 1.0 - t;
    let w2 = ((A + 2.0) * u - (A + 3.0)) * u * u + 1.0;
    let v = 2.0 - t;
    let w3 = ((A * v - 5.0 * A) * v + 8.0 * A) * v - 4.0 * A;
    [w0, w1, w2, w3]
}

fn cubic_taps(out: usize, inp: usize) -> Vec<([usize; 4], [f64; 4])> {
    let scale = inp as f64 / out as f64;
    (0..out)
        .map(|d| {
            let src = (d as f64 + 0.5) * scale - 0.5;
            let f = src.floor();
            let idx = [-1i64, 0, 1, 2].map(|k| (f as i64 + k).clamp(0, inp as i64 - 1) as usize);
            (idx, cubic_weights(src - f))
        })
        .collect()
}

/// Bicubic (a = −0.75) resize of an interleaved `h×w×c` buffer with border clamping.
pub fn resize_bicubic(src: &[f32], h: usize, w: usize, c: usize, nh: usize, nw: usize) -> Vec<f32> {
    let ys = cubic_taps(nh, h);
    let xs = cubic_taps(nw, w);
    let mut out = vec![0.0f32; nh * nw * c];
    for (oy, (yi, yw)) in ys.iter().enumerate() {
        for (ox, (xi, xw)) in xs.iter().enumerate() {
            let o = (oy * nw + ox) * c;
            for ch in 0..c {
                let mut acc = 0.0f64;
                for a in 0..4 {
                    let mut row = 0.0f64;
                    for b in 0..4 {
                        row += xw[b] * src[(yi[a] * w + xi[b]) * c + ch] as f64;
                    }
                    acc += yw[a] * row;
                }
                out[o + ch] = acc as f32;
            }
        }
    }
    out
}
