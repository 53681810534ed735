#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vitseg::segmentation::ClassMap;
use vitseg::weights::{Activation, TextEmbeddings, VitConfig, VitWeights};
use vitseg::Tensor;

pub fn toy_config(layers: usize, heads: usize) -> VitConfig {
    config_with_width(layers, heads, 8)
}

pub fn config_with_width(layers: usize, heads: usize, width: usize) -> VitConfig {
    VitConfig {
        layers,
        heads,
        width,
        patch_size: 4,
        image_size: 16,
        ln_eps: 1e-5,
        projection_dim: 6,
        mlp_dim: Some(2 * width),
        activation: Activation::Gelu,
        pixel_mean: [0.5; 3],
        pixel_std: [0.25; 3],
    }
}

pub fn toy_weights(layers: usize, heads: usize, seed: u64) -> VitWeights {
    random_weights(toy_config(layers, heads), seed)
}

/// Uniform weights scaled by fan-in, layer-norm gains near 1.
pub fn random_weights(config: VitConfig, seed: u64) -> VitWeights {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    VitWeights::from_fn(config, true, |name, shape| {
        let len: usize = shape.iter().product();
        if name.contains("ln") && name.ends_with("weight") {
            return (0..len).map(|_| 1.0 + r.random_range(-0.1..0.1)).collect();
        }
        let scale = if shape.len() == 2 { 1.7 / (shape[0] as f32).sqrt() } else { 0.1 };
        (0..len).map(|_| scale * r.random_range(-1.0f32..1.0)).collect()
    })
    .unwrap()
}

pub fn toy_text(classes: usize, seed: u64) -> TextEmbeddings {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..classes * 6).map(|_| r.random_range(-1.0f32..1.0)).collect();
    let names = (0..classes).map(|i| format!("class{i}")).collect();
    TextEmbeddings::new(names, Tensor::new(vec![classes, 6], data).unwrap()).unwrap()
}

pub fn write_rgb(path: &Path, h: u32, w: u32, seed: u64) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let img = image::RgbImage::from_fn(w, h, |x, _| {
        let base = if x < w / 2 { [200u8, 40, 40] } else { [30, 60, 210] };
        image::Rgb(base.map(|c| c.saturating_add(r.random_range(0..30))))
    });
    img.save(path).unwrap();
}

pub fn write_gray(path: &Path, map: &ClassMap) {
    let file = std::fs::File::create(path).unwrap();
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), map.width as u32, map.height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let bytes: Vec<u8> = map.labels.iter().map(|&v| v as u8).collect();
    let mut w = enc.write_header().unwrap();
    w.write_image_data(&bytes).unwrap();
}

/// Left half class 0, right half class 1.
pub fn halves(h: usize, w: usize) -> ClassMap {
    ClassMap::new(h, w, (0..h * w).map(|i| u32::from(i % w >= w / 2)).collect()).unwrap()
}

/// A scratch directory with toy weights, text embeddings and a labelled sample list.
pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub weights: PathBuf,
    pub text: PathBuf,
    pub samples: PathBuf,
}

impl Fixture {
    pub fn new(layers: usize, heads: usize) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let weights = dir.path().join("toy.lhtw");
        toy_weights(layers, heads, 11).save(&weights).unwrap();
        let text = dir.path().join("text.lhtw");
        toy_text(2, 5).save(&text).unwrap();
        let mut list = String::new();
        for i in 0..4 {
            let img = format!("img{i}.png");
            let gt = format!("img{i}_gt.png");
            write_rgb(&dir.path().join(&img), 16, 16, i);
            write_gray(&dir.path().join(&gt), &halves(16, 16));
            let ds = if i % 2 == 0 { "a" } else { "b" };
            list.push_str(&format!("{img} {gt} {ds}\n"));
        }
        let samples = dir.path().join("samples.txt");
        std::fs::write(&samples, list).unwrap();
        Self {
            dir,
            weights,
            text,
            samples,
        }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    pub fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_vitseg")).args(args).output().unwrap()
    }
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

pub fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}
