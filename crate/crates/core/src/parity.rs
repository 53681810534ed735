//! Reference activations from another implementation, and comparison against the engine.
//!
//! A probe is an `.lhtw` container holding
//! - `image`: the unit-range input as a planar `[3, H, W]` tensor, already at model resolution;
//! - `tokens.{l}`: the token stream `X^l` (`[1 + h·w, D]`, CLS first) for each recorded layer,
//!   `0` being the embedding after the pre-norm.
//!
//! Metadata `source` names the producing framework and is informational only.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

use crate::container::{Container, ContainerWriter};
use crate::engine::{forward, TapRequest};
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::strategies::StrategyConfig;
use crate::tensor::Tensor;
use crate::weights::VitWeights;

pub const TOKENS_PREFIX: &str = "tokens.";

#[derive(Clone, Debug)]
pub struct ParityProbe {
    pub image: Image,
    pub layers: BTreeMap<usize, Tensor>,
    pub source: Option<String>,
}

impl ParityProbe {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let img = c.get("image")?;
        if img.shape().len() != 3 || img.shape()[0] != 3 {
            return Err(Error::TensorShape {
                name: "image".into(),
                found: img.shape().to_vec(),
                expected: vec![3, 0, 0],
            });
        }
        let image = Image::from_planar(img.shape()[1], img.shape()[2], img.data())?;
        let mut layers = BTreeMap::new();
        for name in c.names() {
            if let Some(l) = name.strip_prefix(TOKENS_PREFIX) {
                let l: usize = l
                    .parse()
                    .map_err(|_| Error::Container(format!("probe tensor `{name}` has no layer index")))?;
                layers.insert(l, c.get(name)?.clone());
            }
        }
        if layers.is_empty() {
            return Err(Error::Container("probe holds no `tokens.<layer>` tensors".into()));
        }
        let source = c.header.metadata.get("source").and_then(|v| v.as_str()).map(String::from);
        Ok(Self { image, layers, source })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let (h, w) = (self.image.height(), self.image.width());
        let planar: Vec<f32> = (0..3)
            .flat_map(|c| (0..h * w).map(move |i| (c, i)))
            .map(|(c, i)| self.image.data()[i * 3 + c])
            .collect();
        let mut out = ContainerWriter::new().tensor("image", Tensor::new(vec![3, h, w], planar)?);
        if let Some(s) = &self.source {
            out = out.metadata("source", serde_json::Value::String(s.clone()));
        }
        for (l, t) in &self.layers {
            out.add_tensor(format!("{TOKENS_PREFIX}{l}"), t.clone());
        }
        out.write(path)
    }

    /// The engine's own activations in probe form, every layer `0..=L`.
    pub fn from_engine(image: &Image, weights: &VitWeights) -> Result<Self> {
        let out = forward(
            image,
            weights,
            &StrategyConfig::default(),
            &TapRequest::all_layers(weights.config.layers),
        )?;
        Ok(Self {
            image: image.clone(),
            layers: out.tap.sequences.into_iter().map(|(l, s)| (l, s.tokens)).collect(),
            source: Some("vitseg".into()),
        })
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct LayerDeviation {
    pub layer: usize,
    pub max_abs: f64,
    /// `max_abs` divided by the largest reference magnitude of the layer.
    pub relative: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ParityReport {
    pub layers: Vec<LayerDeviation>,
}

impl ParityReport {
    pub fn worst(&self) -> f64 {
        self.layers.iter().map(|d| d.relative).fold(0.0, f64::max)
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.worst() <= tolerance
    }
}

/// Runs the plain encoder on the probe image and compares every recorded layer.
pub fn compare(weights: &VitWeights, probe: &ParityProbe) -> Result<ParityReport> {
    let l_total = weights.config.layers;
    if let Some(&l) = probe.layers.keys().find(|&&l| l > l_total) {
        return Err(Error::InvalidArgument(format!("probe layer {l} beyond {l_total}")));
    }
    let taps = TapRequest {
        layers: probe.layers.keys().copied().collect(),
        ..TapRequest::default()
    };
    let out = forward(&probe.image, weights, &StrategyConfig::default(), &taps)?;
    let mut layers = Vec::new();
    for (l, reference) in &probe.layers {
        let ours = &out.tap.sequences[l].tokens;
        if ours.shape() != reference.shape() {
            return Err(Error::TensorShape {
                name: format!("{TOKENS_PREFIX}{l}"),
                found: reference.shape().to_vec(),
                expected: ours.shape().to_vec(),
            });
        }
        let mut max_abs = 0.0f64;
        let mut scale = 0.0f64;
        for (&a, &b) in ours.data().iter().zip(reference.data()) {
            max_abs = max_abs.max((a as f64 - b as f64).abs());
            scale = scale.max((b as f64).abs());
        }
        let relative = if scale > 0.0 { max_abs / scale } else { max_abs };
        layers.push(LayerDeviation {
            layer: *l,
            max_abs,
            relative,
        });
    }
    Ok(ParityReport { layers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{random_weights, toy_config};

    fn image() -> Image {
        Image::from_fn(16, 16, |y, x, c| ((y * 7 + x * 3 + c * 5) % 11) as f32 / 10.0)
    }

    #[test]
    fn self_probe_round_trips_and_matches() {
        let w = random_weights(toy_config(3, 2, 8), 4);
        let probe = ParityProbe::from_engine(&image(), &w).unwrap();
        assert_eq!(probe.layers.len(), 4);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("probe.lhtw");
        probe.write(&p).unwrap();
        let back = ParityProbe::read(&p).unwrap();
        assert_eq!(back.source.as_deref(), Some("vitseg"));
        let report = compare(&w, &back).unwrap();
        assert_eq!(report.worst(), 0.0);
    }

    #[test]
    fn wrong_eps_is_detected() {
        let w = random_weights(toy_config(3, 2, 8), 4);
        let probe = ParityProbe::from_engine(&image(), &w).unwrap();
        let mut off = w.clone();
        off.config.ln_eps = 0.5;
        let report = compare(&off, &probe).unwrap();
        assert!(!report.passes(1e-3), "{report:?}");
        // the embedding does not depend on layer-norm epsilon unless a pre-norm exists
        assert!(report.layers.last().unwrap().relative > 1e-3);
    }

    #[test]
    fn perturbed_reference_reports_its_deviation() {
        let w = random_weights(toy_config(2, 2, 8), 9);
        let mut probe = ParityProbe::from_engine(&image(), &w).unwrap();
        let t = probe.layers.get_mut(&1).unwrap();
        let scale = t.data().iter().fold(0.0f32, |m, v| m.max(v.abs())) as f64;
        t.data_mut()[5] += 0.01;
        let r = compare(&w, &probe).unwrap();
        let d = r.layers.iter().find(|d| d.layer == 1).unwrap();
        assert!((d.max_abs - 0.01).abs() < 1e-4);
        assert!((d.relative - d.max_abs / scale).abs() < 1e-4);
    }

    #[test]
    fn malformed_probes() {
        let w = random_weights(toy_config(2, 2, 8), 9);
        let mut probe = ParityProbe::from_engine(&image(), &w).unwrap();
        probe.layers.insert(7, Tensor::zeros(&[17, 8]));
        assert!(compare(&w, &probe).is_err());
        probe.layers.remove(&7);
        probe.layers.insert(1, Tensor::zeros(&[3, 8]));
        assert!(matches!(compare(&w, &probe), Err(Error::TensorShape { .. })));
        let bytes = ContainerWriter::new()
            .tensor("image", Tensor::zeros(&[3, 16, 16]))
            .to_bytes()
            .unwrap();
        let c = Container::from_bytes(&bytes, Path::new("x")).unwrap();
        assert!(ParityProbe::from_container(&c).is_err());
    }
}
