//! Training-free interventions: abnormal token replacement, spatial-semantic
//! reweighting, selective head enhancement, plus the direct layer-skip
//! baseline.

mod config;

use std::collections::BTreeSet;

use serde::Serialize;

use crate::engine::{layer_forward, HeadFeature, HeadId, LayerCtx, LayerMode, TokenSequence};
use crate::error::{Error, Result};
use crate::tensor::{cosine_rows, matmul, Tensor};
use crate::weights::VitWeights;

pub use config::{
    AtrConfig, CriterionKind, HeadPositions, ModelProfile, SheConfig, SkipConfig, SsrConfig, StrategyConfig,
};

/// Outcome counters for one replacement pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct AtrReport {
    pub flagged: usize,
    pub replaced: usize,
    /// Flagged tokens left unchanged because every in-grid neighbour was flagged too.
    pub isolated: usize,
}

impl AtrReport {
    pub fn merge(&mut self, other: AtrReport) {
        self.flagged += other.flagged;
        self.replaced += other.replaced;
        self.isolated += other.isolated;
    }
}

/// Replaces each flagged patch of a `[CLS]`-first token matrix with the
/// unweighted mean of its unflagged in-grid 8-neighbours.
pub fn replace_abnormal(
    tokens: &Tensor,
    grid: (usize, usize),
    positions: &BTreeSet<usize>,
) -> Result<(Tensor, AtrReport)> {
    let (n, d) = tokens.dims2()?;
    let (gh, gw) = grid;
    if n != 1 + gh * gw {
        return Err(Error::shape("atr", format!("{n} rows for a {gh}x{gw} grid")));
    }
    if let Some(&p) = positions.iter().find(|&&p| p >= gh * gw) {
        return Err(Error::InvalidArgument(format!("position {p} outside the {gh}x{gw} grid")));
    }
    let mut out = tokens.clone();
    let mut report = AtrReport {
        flagged: positions.len(),
        ..Default::default()
    };
    let mut acc = vec![0.0f64; d];
    for &p in positions {
        let (m, c) = ((p / gw) as isize, (p % gw) as isize);
        acc.iter_mut().for_each(|a| *a = 0.0);
        let mut count = 0usize;
        for dy in -1..=1isize {
            for dx in -1..=1isize {
                let (y, x) = (m + dy, c + dx);
                if (dy == 0 && dx == 0) || y < 0 || x < 0 || y >= gh as isize || x >= gw as isize {
                    continue;
                }
                let q = y as usize * gw + x as usize;
                if positions.contains(&q) {
                    continue;
                }
                for (a, &v) in acc.iter_mut().zip(tokens.row(1 + q)) {
                    *a += v as f64;
                }
                count += 1;
            }
        }
        if count == 0 {
            report.isolated += 1;
            continue;
        }
        for (o, a) in out.row_mut(1 + p).iter_mut().zip(&acc) {
            *o = (a / count as f64) as f32;
        }
        report.replaced += 1;
    }
    Ok((out, report))
}

/// Abnormal token replacement on a token sequence; `[CLS]` is never touched.
pub fn atr(x: &TokenSequence, positions: &BTreeSet<usize>) -> Result<(TokenSequence, AtrReport)> {
    let (tokens, report) = replace_abnormal(&x.tokens, x.grid, positions)?;
    Ok((TokenSequence::new(tokens, x.grid, x.layer)?, report))
}

fn check_range(start: usize, end: usize, layers: usize) -> Result<()> {
    if start < 1 || start > end || end + 1 > layers {
        return Err(Error::Config(format!(
            "SSR range {start}..={end} must satisfy 1 <= start <= end <= {}",
            layers - 1
        )));
    }
    Ok(())
}

/// Runs layers `x.layer+1 ..= L−1`, reweighted on `start..=end`.
pub fn ssr_range(x: &TokenSequence, weights: &VitWeights, alpha: f32, start: usize, end: usize) -> Result<TokenSequence> {
    let l = weights.config.layers;
    check_range(start, end, l)?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("SSR alpha {alpha} outside [0, 1]")));
    }
    let ctx = LayerCtx::from(&weights.config);
    let mut cur = x.clone();
    for layer in x.layer + 1..l {
        let mode = if (start..=end).contains(&layer) {
            LayerMode::Ssr { alpha }
        } else {
            LayerMode::Standard
        };
        cur = layer_forward(&cur, weights.layer(layer)?, &ctx, mode)?;
    }
    Ok(cur)
}

/// Runs layers `x.layer+1 ..= L`, bypassing `skip_from ..= resume_at−1`.
/// `skip_from == resume_at` skips nothing.
pub fn direct_skip(x: &TokenSequence, weights: &VitWeights, skip_from: usize, resume_at: usize) -> Result<TokenSequence> {
    let l = weights.config.layers;
    if skip_from < 1 || skip_from > resume_at || resume_at > l {
        return Err(Error::Config(format!(
            "skip range {skip_from}->{resume_at} must satisfy 1 <= skip_from <= resume_at <= {l}"
        )));
    }
    let ctx = LayerCtx::from(&weights.config);
    let mut cur = x.clone();
    for layer in (x.layer + 1..=l).filter(|i| !(skip_from..resume_at).contains(i)) {
        cur = layer_forward(&cur, weights.layer(layer)?, &ctx, LayerMode::Standard)?;
    }
    cur.layer = l;
    Ok(cur)
}

/// Which axis of the thresholded similarity matrix is normalised to sum 1.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormAxis {
    /// Each output token is a weighted average of input tokens.
    #[default]
    Rows,
    Columns,
}

/// Token-to-token weighting built from selected head features.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoMask {
    /// `h·w × h·w`
    pub matrix: Tensor,
    pub beta: f32,
    pub axis: NormAxis,
    pub heads: Vec<HeadId>,
}

/// Averages the heads' patch features, takes pairwise cosine similarity,
/// zeroes entries below `beta` and normalises along `axis`.
pub fn she_mask(heads: &[HeadFeature], beta: f32, axis: NormAxis) -> Result<PseudoMask> {
    let first = heads
        .first()
        .ok_or_else(|| Error::InvalidArgument("selective head enhancement needs at least one head".into()))?;
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Config(format!("SHE beta {beta} outside [0, 1]")));
    }
    let (n, d) = first.features.dims2()?;
    if n < 2 {
        return Err(Error::shape("she_mask", "head features have no patch rows"));
    }
    let mut mean = vec![0.0f64; (n - 1) * d];
    for h in heads {
        if h.features.shape() != first.features.shape() {
            return Err(Error::shape(
                "she_mask",
                format!("head {} has shape {:?}, expected {:?}", h.id, h.features.shape(), first.features.shape()),
            ));
        }
        for (m, &v) in mean.iter_mut().zip(&h.features.data()[d..]) {
            *m += v as f64;
        }
    }
    let k = heads.len() as f64;
    let mean = Tensor::new(vec![n - 1, d], mean.iter().map(|v| (v / k) as f32).collect())?;
    let mut s = cosine_rows(&mean, &mean)?;
    let p = n - 1;
    {
        let data = s.data_mut();
        for i in 0..p {
            for j in 0..p {
                let e = &mut data[i * p + j];
                if i == j {
                    *e = 1.0;
                } else if *e < beta {
                    *e = 0.0;
                }
            }
        }
        match axis {
            NormAxis::Rows => {
                for row in data.chunks_exact_mut(p) {
                    let sum: f64 = row.iter().map(|&v| v as f64).sum();
                    row.iter_mut().for_each(|v| *v = (*v as f64 / sum) as f32);
                }
            }
            NormAxis::Columns => {
                for j in 0..p {
                    let sum: f64 = (0..p).map(|i| data[i * p + j] as f64).sum();
                    for i in 0..p {
                        data[i * p + j] = (data[i * p + j] as f64 / sum) as f32;
                    }
                }
            }
        }
    }
    Ok(PseudoMask {
        matrix: s,
        beta,
        axis,
        heads: heads.iter().map(|h| h.id).collect(),
    })
}

/// `patches ← mask · patches`, `[CLS]` untouched.
pub fn apply_she(x: &TokenSequence, mask: &PseudoMask) -> Result<TokenSequence> {
    let p = x.num_patches();
    if mask.matrix.shape() != [p, p] {
        return Err(Error::shape(
            "apply_she",
            format!("mask {:?} for {p} patches", mask.matrix.shape()),
        ));
    }
    x.with_patches(&matmul(&mask.matrix, &x.patches())?)
}
