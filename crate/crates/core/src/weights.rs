//! Typed views over `.lhtw` containers: the vision encoder and the class-name
//! text embeddings.
//!
//! Tensor naming (linear weights are stored input-major, `y = x·W + b`):
//!
//! | name | shape |
//! |------|-------|
//! | `patch_embed.weight` | `[D, 3·P·P]`, pixel order `(channel, y, x)` |
//! | `patch_embed.bias` (optional) | `[D]` |
//! | `class_embedding` | `[D]` |
//! | `positional_embedding` | `[1 + g², D]`, `g = image_size / P` |
//! | `ln_pre.{weight,bias}` (optional) | `[D]` |
//! | `layers.{i}.ln_1.{weight,bias}`, `layers.{i}.ln_2.{weight,bias}` | `[D]` |
//! | `layers.{i}.attn.{q,k,v,o}.weight` | `[D, D]` |
//! | `layers.{i}.attn.{q,k,v,o}.bias` | `[D]` |
//! | `layers.{i}.mlp.fc.weight` / `.bias` | `[D, M]` / `[M]` |
//! | `layers.{i}.mlp.proj.weight` / `.bias` | `[M, D]` / `[D]` |
//! | `ln_post.{weight,bias}` | `[D]` |
//! | `proj` | `[D, projection_dim]` |
//!
//! Layer indices in tensor names are zero-based.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{Container, ContainerWriter};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CLIP_PIXEL_MEAN: [f32; 3] = [0.481_454_66, 0.457_827_5, 0.408_210_73];
pub const CLIP_PIXEL_STD: [f32; 3] = [0.268_629_54, 0.261_302_6, 0.275_777_1];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Gelu,
    QuickGelu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VitConfig {
    pub layers: usize,
    pub heads: usize,
    pub width: usize,
    pub patch_size: usize,
    pub image_size: usize,
    #[serde(default = "default_eps")]
    pub ln_eps: f32,
    pub projection_dim: usize,
    /// Hidden width of the FFN; `4·width` when absent.
    #[serde(default)]
    pub mlp_dim: Option<usize>,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default = "default_mean")]
    pub pixel_mean: [f32; 3],
    #[serde(default = "default_std")]
    pub pixel_std: [f32; 3],
}

fn default_eps() -> f32 {
    1e-5
}
fn default_mean() -> [f32; 3] {
    CLIP_PIXEL_MEAN
}
fn default_std() -> [f32; 3] {
    CLIP_PIXEL_STD
}

impl VitConfig {
    /// CLIP ViT-B/16.
    pub fn vit_b16() -> Self {
        Self {
            layers: 12,
            heads: 12,
            width: 768,
            patch_size: 16,
            image_size: 224,
            ln_eps: 1e-5,
            projection_dim: 512,
            mlp_dim: None,
            activation: Activation::QuickGelu,
            pixel_mean: CLIP_PIXEL_MEAN,
            pixel_std: CLIP_PIXEL_STD,
        }
    }

    /// CLIP ViT-L/14.
    pub fn vit_l14() -> Self {
        Self {
            layers: 24,
            heads: 16,
            width: 1024,
            patch_size: 14,
            projection_dim: 768,
            ..Self::vit_b16()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn mlp_width(&self) -> usize {
        self.mlp_dim.unwrap_or(4 * self.width)
    }

    /// Side length of the native patch grid.
    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Container(format!("config: {m}")));
        if self.heads == 0 || self.width == 0 || !self.width.is_multiple_of(self.heads) {
            return bad(format!("width {} not divisible by heads {}", self.width, self.heads));
        }
        if self.layers < 2 {
            return bad(format!("need at least 2 layers, got {}", self.layers));
        }
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return bad(format!(
                "image_size {} not a multiple of patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if !(self.ln_eps > 0.0) {
            return bad(format!("ln_eps must be positive, got {}", self.ln_eps));
        }
        if self.projection_dim == 0 || self.mlp_width() == 0 {
            return bad("zero projection or mlp width".into());
        }
        if self.pixel_std.iter().any(|s| !(*s > 0.0)) {
            return bad("pixel_std must be positive".into());
        }
        Ok(())
    }

    /// Every tensor name the encoder needs, with its expected shape.
    pub fn tensor_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        let (d, m, p) = (self.width, self.mlp_width(), self.patch_size);
        let g = self.grid_side();
        let mut s = BTreeMap::new();
        s.insert("patch_embed.weight".into(), vec![d, 3 * p * p]);
        s.insert("class_embedding".into(), vec![d]);
        s.insert("positional_embedding".into(), vec![1 + g * g, d]);
        for i in 0..self.layers {
            for ln in ["ln_1", "ln_2"] {
                s.insert(format!("layers.{i}.{ln}.weight"), vec![d]);
                s.insert(format!("layers.{i}.{ln}.bias"), vec![d]);
            }
            for w in ["q", "k", "v", "o"] {
                s.insert(format!("layers.{i}.attn.{w}.weight"), vec![d, d]);
                s.insert(format!("layers.{i}.attn.{w}.bias"), vec![d]);
            }
            s.insert(format!("layers.{i}.mlp.fc.weight"), vec![d, m]);
            s.insert(format!("layers.{i}.mlp.fc.bias"), vec![m]);
            s.insert(format!("layers.{i}.mlp.proj.weight"), vec![m, d]);
            s.insert(format!("layers.{i}.mlp.proj.bias"), vec![d]);
        }
        s.insert("ln_post.weight".into(), vec![d]);
        s.insert("ln_post.bias".into(), vec![d]);
        s.insert("proj".into(), vec![d, self.projection_dim]);
        s
    }

    fn optional_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        let d = self.width;
        BTreeMap::from([
            ("patch_embed.bias".to_string(), vec![d]),
            ("ln_pre.weight".to_string(), vec![d]),
            ("ln_pre.bias".to_string(), vec![d]),
        ])
    }
}

#[derive(Clone, Debug)]
pub struct Norm {
    pub gain: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug)]
pub struct LayerWeights {
    pub ln_1: Norm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln_2: Norm,
    pub fc: Linear,
    pub proj: Linear,
}

#[derive(Clone, Debug)]
pub struct VitWeights {
    pub config: VitConfig,
    pub patch_weight: Tensor,
    pub patch_bias: Option<Tensor>,
    pub class_embedding: Tensor,
    pub positional_embedding: Tensor,
    pub ln_pre: Option<Norm>,
    pub layers: Vec<LayerWeights>,
    pub ln_post: Norm,
    pub proj: Tensor,
}

impl VitWeights {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let config: VitConfig = match &c.header.config {
            Some(v) => serde_json::from_value(v.clone())?,
            None => return Err(Error::Container("header has no `config`".into())),
        };
        config.validate()?;
        let shapes = config.tensor_shapes();
        for (name, shape) in &shapes {
            c.get_shaped(name, shape)?;
        }
        for name in c.names() {
            if !shapes.contains_key(name) && !config.optional_shapes().contains_key(name) {
                return Err(Error::Container(format!("unexpected tensor `{name}`")));
            }
        }
        let req = |name: &str| -> Result<Tensor> { c.get_shaped(name, &shapes[name]).cloned() };
        let opt = |name: &str| -> Result<Option<Tensor>> {
            match c.optional(name) {
                Some(_) => c.get_shaped(name, &config.optional_shapes()[name]).cloned().map(Some),
                None => Ok(None),
            }
        };
        let norm = |prefix: &str| -> Result<Norm> {
            Ok(Norm {
                gain: req(&format!("{prefix}.weight"))?,
                bias: req(&format!("{prefix}.bias"))?,
            })
        };
        let lin = |prefix: &str| -> Result<Linear> {
            Ok(Linear {
                weight: req(&format!("{prefix}.weight"))?,
                bias: req(&format!("{prefix}.bias"))?,
            })
        };
        let layers = (0..config.layers)
            .map(|i| {
                Ok(LayerWeights {
                    ln_1: norm(&format!("layers.{i}.ln_1"))?,
                    q: lin(&format!("layers.{i}.attn.q"))?,
                    k: lin(&format!("layers.{i}.attn.k"))?,
                    v: lin(&format!("layers.{i}.attn.v"))?,
                    o: lin(&format!("layers.{i}.attn.o"))?,
                    ln_2: norm(&format!("layers.{i}.ln_2"))?,
                    fc: lin(&format!("layers.{i}.mlp.fc"))?,
                    proj: lin(&format!("layers.{i}.mlp.proj"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let ln_pre = match (opt("ln_pre.weight")?, opt("ln_pre.bias")?) {
            (Some(gain), Some(bias)) => Some(Norm { gain, bias }),
            (None, None) => None,
            _ => return Err(Error::Container("ln_pre needs both weight and bias".into())),
        };
        Ok(Self {
            patch_weight: req("patch_embed.weight")?,
            patch_bias: opt("patch_embed.bias")?,
            class_embedding: req("class_embedding")?,
            positional_embedding: req("positional_embedding")?,
            ln_pre,
            layers,
            ln_post: norm("ln_post")?,
            proj: req("proj")?,
            config,
        })
    }

    /// Builds a weight set by asking `fill(name, shape)` for every tensor.
    /// Optional tensors are included when `with_optional` is set.
    pub fn from_fn(
        config: VitConfig,
        with_optional: bool,
        mut fill: impl FnMut(&str, &[usize]) -> Vec<f32>,
    ) -> Result<Self> {
        config.validate()?;
        let mut w = ContainerWriter::new().config(serde_json::to_value(&config)?);
        let mut all = config.tensor_shapes();
        if with_optional {
            all.extend(config.optional_shapes());
        }
        for (name, shape) in &all {
            w.add_tensor(name.clone(), Tensor::new(shape.clone(), fill(name, shape))?);
        }
        let bytes = w.to_bytes()?;
        Self::from_container(&Container::from_bytes(&bytes, Path::new("<memory>"))?)
    }

    pub fn to_writer(&self) -> Result<ContainerWriter> {
        let mut w = ContainerWriter::new().config(serde_json::to_value(&self.config)?);
        for (name, t) in self.named_tensors() {
            w.add_tensor(name, t.clone());
        }
        Ok(w)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_writer()?.write(path)
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut v: Vec<(String, &Tensor)> = vec![
            ("patch_embed.weight".into(), &self.patch_weight),
            ("class_embedding".into(), &self.class_embedding),
            ("positional_embedding".into(), &self.positional_embedding),
            ("ln_post.weight".into(), &self.ln_post.gain),
            ("ln_post.bias".into(), &self.ln_post.bias),
            ("proj".into(), &self.proj),
        ];
        if let Some(b) = &self.patch_bias {
            v.push(("patch_embed.bias".into(), b));
        }
        if let Some(n) = &self.ln_pre {
            v.push(("ln_pre.weight".into(), &n.gain));
            v.push(("ln_pre.bias".into(), &n.bias));
        }
        for (i, l) in self.layers.iter().enumerate() {
            let p = format!("layers.{i}");
            v.push((format!("{p}.ln_1.weight"), &l.ln_1.gain));
            v.push((format!("{p}.ln_1.bias"), &l.ln_1.bias));
            v.push((format!("{p}.ln_2.weight"), &l.ln_2.gain));
            v.push((format!("{p}.ln_2.bias"), &l.ln_2.bias));
            for (n, lin) in [("q", &l.q), ("k", &l.k), ("v", &l.v), ("o", &l.o)] {
                v.push((format!("{p}.attn.{n}.weight"), &lin.weight));
                v.push((format!("{p}.attn.{n}.bias"), &lin.bias));
            }
            v.push((format!("{p}.mlp.fc.weight"), &l.fc.weight));
            v.push((format!("{p}.mlp.fc.bias"), &l.fc.bias));
            v.push((format!("{p}.mlp.proj.weight"), &l.proj.weight));
            v.push((format!("{p}.mlp.proj.bias"), &l.proj.bias));
        }
        v
    }

    /// Tensor name → shape, recomputed from the loaded tensors.
    pub fn shape_manifest(&self) -> BTreeMap<String, Vec<usize>> {
        self.named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect()
    }

    /// Weights of a 1-based layer.
    pub fn layer(&self, layer: usize) -> Result<&LayerWeights> {
        layer
            .checked_sub(1)
            .and_then(|i| self.layers.get(i))
            .ok_or_else(|| Error::InvalidArgument(format!("layer {layer} outside 1..={}", self.layers.len())))
    }
}

/// Unit-normalised text embeddings, one row per class.
#[derive(Clone, Debug)]
pub struct TextEmbeddings {
    pub class_names: Vec<String>,
    pub matrix: Tensor,
}

impl TextEmbeddings {
    pub const TENSOR: &'static str = "text_embeddings";

    pub fn new(class_names: Vec<String>, matrix: Tensor) -> Result<Self> {
        let (c, _) = matrix.dims2()?;
        if c == 0 || c != class_names.len() {
            return Err(Error::Container(format!(
                "{} class names for {c} embedding rows",
                class_names.len()
            )));
        }
        let mut matrix = matrix;
        let cols = matrix.cols();
        for (i, row) in matrix.data_mut().chunks_exact_mut(cols).enumerate() {
            let n = row.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(Error::ZeroNorm { op: "text_embeddings", row: i });
            }
            for v in row.iter_mut() {
                *v = (*v as f64 / n) as f32;
            }
        }
        Ok(Self { class_names, matrix })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let c = Container::read(path)?;
        let names = c
            .header
            .class_names
            .clone()
            .ok_or_else(|| Error::Container("header has no `class_names`".into()))?;
        Self::new(names, c.get(Self::TENSOR)?.clone())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        ContainerWriter::new()
            .class_names(self.class_names.clone())
            .tensor(Self::TENSOR, self.matrix.clone())
            .write(path)
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn ensure_dim(&self, projection_dim: usize) -> Result<()> {
        if self.dim() != projection_dim {
            return Err(Error::shape(
                "text_embeddings",
                format!("embedding width {} vs projection_dim {projection_dim}", self.dim()),
            ));
        }
        Ok(())
    }
}
