use std::collections::{BTreeMap, BTreeSet};

use super::{
    drop_cls, embed_image, final_layer_features, layer_forward_captured, project, variant_attention, FinalVariant,
    HeadFeature, HeadId, LayerCtx, LayerMode, TokenSequence,
};
use crate::diagnostics::{detect_abnormal, detect_in_tokens};
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::strategies::{apply_she, atr, replace_abnormal, she_mask, AtrReport, HeadPositions, PseudoMask, StrategyConfig};
use crate::tensor::Tensor;
use crate::weights::VitWeights;

/// Intermediate values to keep during [`forward`].
#[derive(Clone, Debug, Default)]
pub struct TapRequest {
    /// Token streams `X^l` (0 = embedding). `L` is only available with the vanilla final layer.
    pub layers: BTreeSet<usize>,
    pub heads: BTreeSet<HeadId>,
    pub attention_layers: BTreeSet<usize>,
}

impl TapRequest {
    pub fn all_layers(layers: usize) -> Self {
        Self {
            layers: (0..=layers).collect(),
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct LayerTap {
    pub sequences: BTreeMap<usize, TokenSequence>,
    /// Raw head outputs, before any replacement.
    pub heads: BTreeMap<HeadId, HeadFeature>,
    pub attention: BTreeMap<usize, Vec<Tensor>>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Projected patch features, `h·w × projection_dim`.
    pub features: Tensor,
    pub grid: (usize, usize),
    pub tap: LayerTap,
    /// Positions flagged on the stream entering the final layer.
    pub flagged: BTreeSet<usize>,
    pub atr: AtrReport,
    pub head_atr: AtrReport,
    pub mask: Option<PseudoMask>,
}

/// Full instrumented forward pass of a unit-range image under a strategy.
///
/// Layers `1..L` run in standard, reweighted or skipped mode; the stream
/// entering layer `L` then goes through token replacement and head-guided
/// refinement before the final-layer variant and the projection.
pub fn forward(image: &Image, weights: &VitWeights, strategy: &StrategyConfig, taps: &TapRequest) -> Result<ForwardOutput> {
    let cfg = &weights.config;
    let l_total = cfg.layers;
    strategy.validate(cfg)?;
    if let Some(&l) = taps.layers.iter().chain(&taps.attention_layers).find(|&&l| l > l_total) {
        return Err(Error::InvalidArgument(format!("tap layer {l} beyond {l_total}")));
    }
    let ctx = LayerCtx::from(cfg);
    let skipped = strategy.skipped_layers();

    let mut capture: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    let she_heads: &[HeadId] = if strategy.she.enabled { &strategy.she.heads } else { &[] };
    for h in she_heads.iter().chain(&taps.heads) {
        capture.entry(h.layer).or_default().insert(h.head);
    }
    if let Some(h) = taps.heads.iter().find(|h| h.layer >= l_total || skipped.contains(&h.layer)) {
        return Err(Error::InvalidArgument(format!("head {h} is not computed in this run")));
    }

    let mut tap = LayerTap::default();
    let mut x = embed_image(image, weights)?;
    if taps.layers.contains(&0) {
        tap.sequences.insert(0, x.clone());
    }
    let mut head_store: BTreeMap<HeadId, HeadFeature> = BTreeMap::new();
    let none = BTreeSet::new();
    for l in 1..l_total {
        if skipped.contains(&l) {
            continue;
        }
        let mode = if strategy.ssr.enabled && (strategy.ssr.start_layer..=strategy.ssr.end_layer).contains(&l) {
            LayerMode::Ssr {
                alpha: strategy.ssr.alpha,
            }
        } else {
            LayerMode::Standard
        };
        let heads = capture.get(&l).unwrap_or(&none);
        let keep = taps.attention_layers.contains(&l);
        let (next, msa) = layer_forward_captured(&x, weights.layer(l)?, &ctx, mode, heads, keep)?;
        for hf in msa.heads {
            head_store.insert(hf.id, HeadFeature { id: HeadId::new(l, hf.id.head), features: hf.features });
        }
        if let Some(a) = msa.attention {
            tap.attention.insert(l, a);
        }
        x = TokenSequence { layer: l, ..next };
        if taps.layers.contains(&l) {
            tap.sequences.insert(l, x.clone());
        }
    }
    x.layer = l_total - 1;
    for h in &taps.heads {
        tap.heads.insert(*h, head_store[h].clone());
    }

    let mut report = AtrReport::default();
    let mut head_report = AtrReport::default();
    let mut flagged = BTreeSet::new();
    if strategy.atr.enabled {
        let criterion = strategy.atr.criterion();
        flagged = detect_abnormal(&x, criterion)?;
        let (cleaned, r) = atr(&x, &flagged)?;
        x = cleaned;
        report = r;
        if strategy.atr.apply_to_heads {
            for h in she_heads {
                let hf = head_store.get_mut(h).expect("captured above");
                let positions = match strategy.atr.head_positions {
                    HeadPositions::Own => detect_in_tokens(&hf.features, criterion)?,
                    HeadPositions::Stream => flagged.clone(),
                };
                let (f, r) = replace_abnormal(&hf.features, x.grid, &positions)?;
                hf.features = f;
                head_report.merge(r);
            }
        }
    }

    let mut mask = None;
    if strategy.she.enabled {
        let selected: Vec<HeadFeature> = she_heads.iter().map(|h| head_store[h].clone()).collect();
        let m = she_mask(&selected, strategy.she.beta, strategy.she.normalize)?;
        x = apply_she(&x, &m)?;
        mask = Some(m);
    }

    let last = weights.layer(l_total)?;
    if taps.attention_layers.contains(&l_total) {
        if let Some(a) = variant_attention(&x, last, &ctx, strategy.variant)? {
            tap.attention.insert(l_total, a);
        }
    }
    let patches = if strategy.variant == FinalVariant::Vanilla && taps.layers.contains(&l_total) {
        let out = super::layer_forward(&x, last, &ctx, LayerMode::Standard)?;
        let p = drop_cls(&out.tokens)?;
        tap.sequences.insert(l_total, out);
        p
    } else {
        final_layer_features(&x, last, &ctx, strategy.variant)?
    };
    Ok(ForwardOutput {
        features: project(&patches, weights)?,
        grid: x.grid,
        tap,
        flagged,
        atr: report,
        head_atr: head_report,
        mask,
    })
}

/// Unmodified encoder: every layer standard, vanilla final layer.
pub fn plain_forward(image: &Image, weights: &VitWeights) -> Result<Tensor> {
    let baseline = StrategyConfig::baseline(FinalVariant::Vanilla);
    Ok(forward(image, weights, &baseline, &TapRequest::default())?.features)
}
