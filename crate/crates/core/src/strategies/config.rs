use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::NormAxis;
use crate::diagnostics::{read_ranking, AbnormalCriterion};
use crate::engine::{FinalVariant, HeadId};
use crate::error::{Error, Result};
use crate::weights::VitConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelProfile {
    Vitb,
    Vitl,
    #[default]
    Custom,
}

impl std::str::FromStr for ModelProfile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vitb" => Ok(Self::Vitb),
            "vitl" => Ok(Self::Vitl),
            "custom" => Ok(Self::Custom),
            other => Err(Error::Config(format!("unknown profile `{other}` (vitb | vitl | custom)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriterionKind {
    #[default]
    Sparsity,
    Norm,
}

/// Where flagged positions for head features come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadPositions {
    /// Detect on each head's own feature map.
    #[default]
    Own,
    /// Reuse the positions flagged on the token stream entering the final layer.
    Stream,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AtrConfig {
    pub enabled: bool,
    pub criterion: CriterionKind,
    pub tau: f32,
    pub gamma: f32,
    pub apply_to_heads: bool,
    pub head_positions: HeadPositions,
}

impl AtrConfig {
    pub fn criterion(&self) -> AbnormalCriterion {
        match self.criterion {
            CriterionKind::Sparsity => AbnormalCriterion::Sparsity { tau: self.tau },
            CriterionKind::Norm => AbnormalCriterion::Norm { gamma: self.gamma },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SsrConfig {
    pub enabled: bool,
    pub alpha: f32,
    pub start_layer: usize,
    pub end_layer: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SheConfig {
    pub enabled: bool,
    pub heads: Vec<HeadId>,
    /// Take the first `top_k` heads of `ranking` instead of `heads`.
    pub top_k: Option<usize>,
    pub ranking: Option<PathBuf>,
    pub beta: f32,
    pub normalize: NormAxis,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SkipConfig {
    pub enabled: bool,
    pub skip_from: usize,
    pub resume_at: usize,
}

/// Full description of which interventions run and with what parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategyConfig {
    pub profile: ModelProfile,
    pub atr: AtrConfig,
    pub ssr: SsrConfig,
    pub she: SheConfig,
    pub skip: SkipConfig,
    pub variant: FinalVariant,
}

const VITB_HEADS: [(usize, usize); 10] = [(8, 9), (8, 8), (7, 10), (9, 12), (7, 3), (9, 4), (5, 1), (9, 6), (4, 11), (8, 6)];

const VITL_HEADS: [(usize, usize); 30] = [
    (11, 3), (9, 3), (7, 9), (11, 6), (10, 10), (9, 13), (3, 10), (4, 14), (10, 6), (6, 9),
    (7, 12), (14, 16), (11, 8), (10, 13), (8, 4), (8, 8), (10, 8), (9, 4), (2, 11), (9, 6),
    (8, 1), (14, 1), (16, 2), (4, 13), (13, 11), (11, 14), (7, 4), (14, 11), (13, 13), (3, 13),
];

impl Default for StrategyConfig {
    fn default() -> Self {
        Self::preset(ModelProfile::Custom)
    }
}

impl StrategyConfig {
    /// Published settings for the two backbones; `Custom` disables everything
    /// and keeps the vanilla final layer.
    pub fn preset(profile: ModelProfile) -> Self {
        let heads = |list: &[(usize, usize)]| list.iter().map(|&p| HeadId::from(p)).collect();
        let base = Self {
            profile,
            atr: AtrConfig {
                enabled: true,
                criterion: CriterionKind::Sparsity,
                tau: 0.5,
                gamma: 14.0,
                apply_to_heads: true,
                head_positions: HeadPositions::Own,
            },
            ssr: SsrConfig {
                enabled: true,
                alpha: 0.1,
                start_layer: 10,
                end_layer: 11,
            },
            she: SheConfig {
                enabled: true,
                heads: heads(&VITB_HEADS),
                top_k: None,
                ranking: None,
                beta: 0.7,
                normalize: NormAxis::Rows,
            },
            skip: SkipConfig {
                enabled: false,
                skip_from: 20,
                resume_at: 24,
            },
            variant: FinalVariant::Clearclip,
        };
        match profile {
            ModelProfile::Vitb => base,
            ModelProfile::Vitl => Self {
                atr: AtrConfig { tau: 0.4, ..base.atr },
                ssr: SsrConfig {
                    start_layer: 17,
                    end_layer: 23,
                    ..base.ssr
                },
                she: SheConfig {
                    heads: heads(&VITL_HEADS),
                    ..base.she
                },
                ..base
            },
            ModelProfile::Custom => {
                let mut c = base;
                c.atr.enabled = false;
                c.ssr.enabled = false;
                c.she.enabled = false;
                c.variant = FinalVariant::Vanilla;
                c
            }
        }
    }

    /// Every intervention off, with the given final layer.
    pub fn baseline(variant: FinalVariant) -> Self {
        Self {
            variant,
            ..Self::preset(ModelProfile::Custom)
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let v: serde_json::Value = toml::from_str(text).map_err(|e| Error::Config(format!("toml: {e}")))?;
        Self::from_value(v)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("json: {e}")))?;
        Self::from_value(v)
    }

    /// Reads a `.json` or `.toml` file; relative ranking paths are resolved
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        Self::load_with(Some(path), None)
    }

    /// Optional file plus an optional profile that replaces the file's own.
    pub fn load_with(path: Option<&Path>, profile: Option<ModelProfile>) -> Result<Self> {
        let mut tree = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                match p.extension().and_then(|e| e.to_str()) {
                    Some("json") => serde_json::from_str(&text).map_err(|e| Error::Config(format!("json: {e}")))?,
                    _ => toml::from_str(&text).map_err(|e| Error::Config(format!("toml: {e}")))?,
                }
            }
            None => serde_json::json!({}),
        };
        if let (Some(p), serde_json::Value::Object(m)) = (profile, &mut tree) {
            m.insert("profile".into(), serde_json::to_value(p).map_err(|e| Error::Config(e.to_string()))?);
        }
        let mut c = Self::from_value(tree)?;
        if let (Some(r), Some(dir)) = (&c.she.ranking, path.and_then(Path::parent)) {
            if r.is_relative() {
                c.she.ranking = Some(dir.join(r));
            }
        }
        Ok(c)
    }

    /// Overlays a partial key tree on the preset named by its `profile`
    /// key (`custom` when absent).
    pub fn from_value(user: serde_json::Value) -> Result<Self> {
        if !user.is_object() {
            return Err(Error::Config("strategy config must be a table".into()));
        }
        let profile: ModelProfile = match user.get("profile") {
            Some(serde_json::Value::String(s)) => s.parse()?,
            Some(other) => return Err(Error::Config(format!("profile must be a string, got {other}"))),
            None => ModelProfile::Custom,
        };
        let mut base = serde_json::to_value(Self::preset(profile)).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut base, user);
        serde_json::from_value(base).map_err(|e| Error::Config(e.to_string()))
    }

    /// Replaces `she.heads` with the first `top_k` entries of the ranking file.
    pub fn resolve_heads(&mut self) -> Result<()> {
        let Some(k) = self.she.top_k else {
            return Ok(());
        };
        let path = self
            .she
            .ranking
            .as_ref()
            .ok_or_else(|| Error::Config("she.top_k needs she.ranking".into()))?;
        let ranking = read_ranking(path)?;
        if k == 0 || k > ranking.len() {
            return Err(Error::Config(format!(
                "she.top_k = {k} but {} ranks {} heads",
                path.display(),
                ranking.len()
            )));
        }
        self.she.heads = ranking[..k].iter().map(|s| s.id).collect();
        self.she.top_k = None;
        self.she.ranking = None;
        Ok(())
    }

    /// Layers bypassed by the skip baseline.
    pub fn skipped_layers(&self) -> std::ops::Range<usize> {
        if self.skip.enabled {
            self.skip.skip_from..self.skip.resume_at
        } else {
            0..0
        }
    }

    pub fn validate(&self, model: &VitConfig) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let l = model.layers;
        let a = &self.atr;
        if !(a.tau > 0.0 && a.tau < 1.0) {
            return bad(format!("atr.tau = {} must lie in (0, 1)", a.tau));
        }
        if !(a.gamma > 0.0 && a.gamma.is_finite()) {
            return bad(format!("atr.gamma = {} must be positive", a.gamma));
        }
        if !(0.0..=1.0).contains(&self.ssr.alpha) {
            return bad(format!("ssr.alpha = {} must lie in [0, 1]", self.ssr.alpha));
        }
        if !(0.0..=1.0).contains(&self.she.beta) {
            return bad(format!("she.beta = {} must lie in [0, 1]", self.she.beta));
        }
        let skipped = self.skipped_layers();
        if self.skip.enabled {
            let s = &self.skip;
            if s.skip_from < 1 || s.skip_from > s.resume_at || s.resume_at > l {
                return bad(format!(
                    "skip {}->{} must satisfy 1 <= skip_from <= resume_at <= {l}",
                    s.skip_from, s.resume_at
                ));
            }
        }
        if self.ssr.enabled {
            let s = &self.ssr;
            if s.start_layer < 1 || s.start_layer > s.end_layer || s.end_layer + 1 > l {
                return bad(format!(
                    "ssr layers {}..={} must satisfy 1 <= start <= end <= {}",
                    s.start_layer,
                    s.end_layer,
                    l - 1
                ));
            }
            if (s.start_layer..=s.end_layer).any(|x| skipped.contains(&x)) {
                return bad("ssr range overlaps skipped layers".into());
            }
        }
        if self.she.enabled {
            if self.she.top_k.is_some() {
                return bad("she.top_k has not been resolved against a ranking".into());
            }
            if self.she.heads.is_empty() {
                return bad("she.heads is empty".into());
            }
            let mut seen = BTreeSet::new();
            for h in &self.she.heads {
                if h.layer < 1 || h.layer >= l || h.head < 1 || h.head > model.heads {
                    return bad(format!(
                        "head {h} outside layers 1..={} and heads 1..={}",
                        l - 1,
                        model.heads
                    ));
                }
                if skipped.contains(&h.layer) {
                    return bad(format!("head {h} sits in a skipped layer"));
                }
                if !seen.insert(*h) {
                    return bad(format!("head {h} listed twice"));
                }
            }
        }
        Ok(())
    }
}

fn merge(base: &mut serde_json::Value, over: serde_json::Value) {
    match (base, over) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
