//! Dense prediction: patch-to-text logits, sliding-window inference and mIoU.

use serde::Serialize;

use crate::engine::{forward, TapRequest};
use crate::error::{Error, Result};
use crate::imaging::{resize_bilinear, Image};
use crate::strategies::StrategyConfig;
use crate::tensor::{argmax, cosine_rows, Tensor};
use crate::weights::{TextEmbeddings, VitWeights};

/// Per-pixel class indices, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u32>,
}

impl ClassMap {
    pub fn new(height: usize, width: usize, labels: Vec<u32>) -> Result<Self> {
        if height == 0 || width == 0 || labels.len() != height * width {
            return Err(Error::shape(
                "class_map",
                format!("{} labels for {height}x{width}", labels.len()),
            ));
        }
        Ok(Self { height, width, labels })
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    /// Per-pixel argmax of an interleaved `H×W×C` score buffer.
    pub fn from_scores(height: usize, width: usize, classes: usize, scores: &[f32]) -> Result<Self> {
        if scores.len() != height * width * classes {
            return Err(Error::shape("class_map", format!("{} scores for {height}x{width}x{classes}", scores.len())));
        }
        let labels = scores.chunks_exact(classes).map(|px| argmax(px) as u32).collect();
        Self::new(height, width, labels)
    }
}

/// Cosine similarity of every patch feature with every class embedding.
pub fn patch_logits(features: &Tensor, text: &TextEmbeddings) -> Result<Tensor> {
    let (_, d) = features.dims2()?;
    text.ensure_dim(d)?;
    cosine_rows(features, &text.matrix)
}

/// Patch logits (`h·w × C`) for one crop under a strategy.
pub fn window_segment(
    crop: &Image,
    weights: &VitWeights,
    strategy: &StrategyConfig,
    text: &TextEmbeddings,
) -> Result<Tensor> {
    let out = forward(crop, weights, strategy, &TapRequest::default())?;
    patch_logits(&out.features, text)
}

/// Resize-then-tile protocol.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct SlideConfig {
    /// Shorter image side after the initial resize.
    pub short_side: usize,
    pub crop: usize,
    pub stride: usize,
}

impl Default for SlideConfig {
    fn default() -> Self {
        Self {
            short_side: 336,
            crop: 224,
            stride: 112,
        }
    }
}

impl SlideConfig {
    pub fn cityscapes() -> Self {
        Self {
            short_side: 560,
            ..Self::default()
        }
    }

    pub fn validate(&self, patch: usize) -> Result<()> {
        if self.stride == 0 || self.stride > self.crop {
            return Err(Error::Config(format!("stride {} must lie in 1..={}", self.stride, self.crop)));
        }
        if !self.crop.is_multiple_of(patch) || self.short_side == 0 {
            return Err(Error::Config(format!("crop {} not divisible by patch {patch}", self.crop)));
        }
        Ok(())
    }
}

/// Window origins along one axis: regular steps with the last window
/// snapped to the far edge.
pub fn window_starts(len: usize, crop: usize, stride: usize) -> Vec<usize> {
    let n = len.saturating_sub(crop).div_ceil(stride) + 1;
    (0..n)
        .map(|i| {
            let end = (i * stride + crop).min(len);
            end.saturating_sub(crop)
        })
        .collect()
}

/// Averaged per-pixel logits of `image` after the short-side resize,
/// `H'×W'×C` interleaved, with `(H', W')`.
///
/// `window` maps a `crop×crop` image to `g×g×C` patch logits.
pub fn slide_logits(
    image: &Image,
    cfg: &SlideConfig,
    classes: usize,
    window: impl Fn(&Image) -> Result<Tensor>,
) -> Result<(Vec<f32>, usize, usize)> {
    let resized = image.resize_short_side(cfg.short_side);
    let (h, w) = (resized.height(), resized.width());
    let c = cfg.crop;
    let upsample = |crop: &Image| -> Result<Vec<f32>> {
        let logits = window(crop)?;
        let (n, k) = logits.dims2()?;
        let g = (n as f64).sqrt().round() as usize;
        if g * g != n || k != classes {
            return Err(Error::shape("slide", format!("window produced {n}x{k} logits")));
        }
        Ok(resize_bilinear(logits.data(), g, g, k, c, c))
    };
    if h < c || w < c {
        let single = upsample(&resized.resize(c, c))?;
        return Ok((resize_bilinear(&single, c, c, classes, h, w), h, w));
    }
    let mut acc = vec![0.0f64; h * w * classes];
    let mut count = vec![0u32; h * w];
    for &y0 in &window_starts(h, c, cfg.stride) {
        for &x0 in &window_starts(w, c, cfg.stride) {
            let up = upsample(&resized.crop(y0, x0, c, c)?)?;
            for y in 0..c {
                for x in 0..c {
                    let p = (y0 + y) * w + x0 + x;
                    count[p] += 1;
                    let src = &up[(y * c + x) * classes..(y * c + x + 1) * classes];
                    for (a, &v) in acc[p * classes..(p + 1) * classes].iter_mut().zip(src) {
                        *a += v as f64;
                    }
                }
            }
        }
    }
    let out = acc
        .iter()
        .enumerate()
        .map(|(i, &a)| (a / count[i / classes] as f64) as f32)
        .collect();
    Ok((out, h, w))
}

/// Sliding-window segmentation; the fused logits are resized back to the
/// input resolution before the per-pixel argmax.
pub fn slide_segment(
    image: &Image,
    weights: &VitWeights,
    strategy: &StrategyConfig,
    text: &TextEmbeddings,
    cfg: &SlideConfig,
) -> Result<ClassMap> {
    cfg.validate(weights.config.patch_size)?;
    text.ensure_dim(weights.config.projection_dim)?;
    let k = text.num_classes();
    let (logits, h, w) = slide_logits(image, cfg, k, |crop| window_segment(crop, weights, strategy, text))?;
    let full = resize_bilinear(&logits, h, w, k, image.height(), image.width());
    ClassMap::from_scores(image.height(), image.width(), k, &full)
}

/// Per-class pixel counts; merging is associative so shards can be reduced in any order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub intersection: Vec<u64>,
    pub predicted: Vec<u64>,
    pub actual: Vec<u64>,
    pub pixels: u64,
}

impl ConfusionCounts {
    pub fn new(classes: usize) -> Self {
        Self {
            intersection: vec![0; classes],
            predicted: vec![0; classes],
            actual: vec![0; classes],
            pixels: 0,
        }
    }

    pub fn classes(&self) -> usize {
        self.intersection.len()
    }

    /// Counts every pixel whose ground truth differs from `ignore`.
    pub fn accumulate(&mut self, pred: &ClassMap, gt: &ClassMap, ignore: u32) -> Result<()> {
        if (pred.height, pred.width) != (gt.height, gt.width) {
            return Err(Error::shape(
                "miou",
                format!("prediction {}x{} vs ground truth {}x{}", pred.height, pred.width, gt.height, gt.width),
            ));
        }
        let k = self.classes() as u32;
        for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
            if g == ignore {
                continue;
            }
            if g >= k || p >= k {
                return Err(Error::InvalidArgument(format!(
                    "label {} outside 0..{k}",
                    if g >= k { g } else { p }
                )));
            }
            self.pixels += 1;
            self.predicted[p as usize] += 1;
            self.actual[g as usize] += 1;
            if p == g {
                self.intersection[p as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionCounts) -> Result<()> {
        if other.classes() != self.classes() {
            return Err(Error::shape("merge", format!("{} vs {} classes", self.classes(), other.classes())));
        }
        for c in 0..self.classes() {
            self.intersection[c] += other.intersection[c];
            self.predicted[c] += other.predicted[c];
            self.actual[c] += other.actual[c];
        }
        self.pixels += other.pixels;
        Ok(())
    }

    pub fn metrics(&self) -> Result<EvalMetrics> {
        let per_class: Vec<ClassIou> = (0..self.classes())
            .map(|c| {
                let union = self.predicted[c] + self.actual[c] - self.intersection[c];
                ClassIou {
                    intersection: self.intersection[c],
                    union,
                    iou: (union > 0).then(|| self.intersection[c] as f64 / union as f64),
                }
            })
            .collect();
        let present: Vec<f64> = per_class.iter().filter_map(|c| c.iou).collect();
        if present.is_empty() {
            return Err(Error::DegenerateLabels("no class has a non-empty union".into()));
        }
        Ok(EvalMetrics {
            miou: present.iter().sum::<f64>() / present.len() as f64,
            per_class,
            pixels: self.pixels,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ClassIou {
    pub intersection: u64,
    pub union: u64,
    /// `None` when the class is absent from both maps.
    pub iou: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalMetrics {
    pub per_class: Vec<ClassIou>,
    pub miou: f64,
    pub pixels: u64,
}

pub fn miou(pred: &ClassMap, gt: &ClassMap, ignore: u32, classes: usize) -> Result<EvalMetrics> {
    let mut c = ConfusionCounts::new(classes);
    c.accumulate(pred, gt, ignore)?;
    c.metrics()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(h: usize, w: usize, v: &[u32]) -> ClassMap {
        ClassMap::new(h, w, v.to_vec()).unwrap()
    }

    #[test]
    fn patch_logits_cases() {
        let text = TextEmbeddings::new(
            vec!["a".into(), "b".into(), "c".into()],
            Tensor::from_rows(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 2.0]]).unwrap(),
        )
        .unwrap();
        let f = Tensor::from_rows(&[[0.0, 0.0, 3.0], [1.0, 1.0, 0.0]]).unwrap();
        let l = patch_logits(&f, &text).unwrap();
        assert_eq!(argmax(l.row(0)), 2);
        assert!((l.row(0)[2] - 1.0).abs() < 1e-6);
        // tie between classes 0 and 1 goes to 0
        assert_eq!(argmax(l.row(1)), 0);
        let s = std::f32::consts::FRAC_1_SQRT_2;
        assert!((l.row(1)[0] - s).abs() < 1e-6 && (l.row(1)[1] - s).abs() < 1e-6);
        let scaled = patch_logits(&f.scale(10.0), &text).unwrap();
        assert!(scaled.max_abs_diff(&l).unwrap() < 1e-6);
    }

    #[test]
    fn miou_identity_and_disjoint() {
        let a = map(2, 2, &[0, 1, 1, 2]);
        assert_eq!(miou(&a, &a, 255, 3).unwrap().miou, 1.0);
        let b = map(2, 2, &[1, 0, 0, 1]);
        let gt = map(2, 2, &[0, 1, 1, 0]);
        assert_eq!(miou(&b, &gt, 255, 2).unwrap().miou, 0.0);
    }

    #[test]
    fn miou_hand_counted_half() {
        // 16 pixels, two ignored; class 0: I=2, U=6, class 1: I=8, U=12
        let gt = map(4, 4, &[
            0, 0, 0, 0, //
            0, 0, 1, 1, //
            1, 1, 1, 1, //
            1, 1, 255, 255,
        ]);
        let pred = map(4, 4, &[
            0, 0, 1, 1, //
            1, 1, 1, 1, //
            1, 1, 1, 1, //
            1, 1, 0, 0,
        ]);
        let m = miou(&pred, &gt, 255, 2).unwrap();
        assert_eq!(m.per_class[0].intersection, 2);
        assert_eq!(m.per_class[0].union, 6);
        assert_eq!(m.per_class[1].intersection, 8);
        assert_eq!(m.per_class[1].union, 12);
        assert_eq!(m.pixels, 14);
        // 2/6 + 8/12 = 1
        assert_eq!(m.miou, 0.5);
    }

    #[test]
    fn absent_classes_are_excluded() {
        let a = map(1, 2, &[0, 0]);
        let m = miou(&a, &a, 255, 5).unwrap();
        assert_eq!(m.miou, 1.0);
        assert!(m.per_class[3].iou.is_none());
    }

    #[test]
    fn shape_mismatch_and_merge() {
        assert!(miou(&map(1, 2, &[0, 0]), &map(2, 1, &[0, 0]), 255, 1).is_err());
        let mut x = ConfusionCounts::new(2);
        x.accumulate(&map(1, 2, &[0, 1]), &map(1, 2, &[0, 0]), 255).unwrap();
        let mut y = ConfusionCounts::new(2);
        y.accumulate(&map(1, 2, &[1, 1]), &map(1, 2, &[1, 0]), 255).unwrap();
        let mut xy = x.clone();
        xy.merge(&y).unwrap();
        let mut yx = y.clone();
        yx.merge(&x).unwrap();
        assert_eq!(xy, yx);
        let mut whole = ConfusionCounts::new(2);
        whole
            .accumulate(&map(1, 4, &[0, 1, 1, 1]), &map(1, 4, &[0, 0, 1, 0]), 255)
            .unwrap();
        assert_eq!(xy, whole);
    }

    #[test]
    fn window_arithmetic() {
        assert_eq!(window_starts(224, 224, 112), vec![0]);
        assert_eq!(window_starts(336, 224, 112), vec![0, 112]);
        assert_eq!(window_starts(448, 224, 112), vec![0, 112, 224]);
        // last window snaps to the edge
        assert_eq!(window_starts(400, 224, 112), vec![0, 112, 176]);
        assert_eq!(window_starts(448, 224, 224), vec![0, 224]);
    }

    #[test]
    fn two_windows_average_in_the_overlap() {
        // 224x336 input, short side already 224: windows at x = 0 and x = 112
        let img = Image::from_fn(224, 336, |_, x, _| x as f32 / 336.0);
        let cfg = SlideConfig {
            short_side: 224,
            crop: 224,
            stride: 112,
        };
        let calls = std::cell::Cell::new(0);
        // window logits: constant per window, class 0 = window index, class 1 = 1
        let (out, h, w) = slide_logits(&img, &cfg, 2, |_| {
            let i = calls.get();
            calls.set(i + 1);
            Tensor::new(vec![4, 2], [i as f32 * 2.0, 1.0].repeat(4))
        })
        .unwrap();
        assert_eq!((h, w, calls.get()), (224, 336, 2));
        let at = |y: usize, x: usize, k: usize| out[(y * w + x) * 2 + k];
        assert_eq!(at(10, 50, 0), 0.0);
        assert_eq!(at(10, 300, 0), 2.0);
        // overlap band 112..224 sees both windows
        assert_eq!(at(100, 150, 0), 1.0);
        assert_eq!(at(100, 150, 1), 1.0);
    }

    #[test]
    fn small_images_fall_back_to_one_window() {
        let img = Image::from_fn(50, 60, |_, _, _| 0.5);
        let cfg = SlideConfig {
            short_side: 40,
            crop: 64,
            stride: 32,
        };
        let (out, h, w) = slide_logits(&img, &cfg, 3, |c| {
            assert_eq!((c.height(), c.width()), (64, 64));
            Tensor::new(vec![16, 3], [0.1, 0.7, 0.2].repeat(16))
        })
        .unwrap();
        assert_eq!((h, w), (40, 48));
        assert!((out[1] - 0.7).abs() < 1e-6);
    }
}
