//! Layer, head and token diagnostics: sparsity scoring, abnormal-token
//! detection, pairwise visual-discriminability AUC, semantic-alignment
//! accuracy and head ranking.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::engine::{
    drop_cls, final_layer_features, layer_forward_captured, project, FinalVariant, HeadFeature, HeadId,
    LayerCtx, LayerMode, TokenSequence,
};
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::segmentation::{patch_logits, ClassMap};
use crate::strategies::replace_abnormal;
use crate::tensor::{argmax, cosine_rows, Tensor};
use crate::weights::{TextEmbeddings, VitWeights};

/// Hoyer sparsity `(√D − ‖x‖₁/‖x‖₂) / (√D − 1)`, in `[0, 1]`.
pub fn hoyer_score(x: &[f32]) -> Result<f32> {
    let d = x.len();
    if d < 2 {
        return Err(Error::InvalidArgument(format!("hoyer score needs D >= 2, got {d}")));
    }
    let l1: f64 = x.iter().map(|v| v.abs() as f64).sum();
    let l2: f64 = x.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
    if l2 == 0.0 {
        return Err(Error::ZeroNorm { op: "hoyer_score", row: 0 });
    }
    let sd = (d as f64).sqrt();
    Ok(((sd - l1 / l2) / (sd - 1.0)).clamp(0.0, 1.0) as f32)
}

fn l2_norm(x: &[f32]) -> f64 {
    x.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
}

/// Rule that flags a patch token as abnormal.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AbnormalCriterion {
    /// Hoyer score strictly above `tau`.
    Sparsity { tau: f32 },
    /// L2 norm strictly above `gamma`.
    Norm { gamma: f32 },
}

impl AbnormalCriterion {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::Sparsity { tau } if tau > 0.0 && tau <= 1.0 => Ok(()),
            Self::Norm { gamma } if gamma > 0.0 && gamma.is_finite() => Ok(()),
            other => Err(Error::InvalidArgument(format!("invalid abnormal-token threshold {other:?}"))),
        }
    }

    /// Zero rows are never flagged.
    pub fn flags(&self, row: &[f32]) -> bool {
        let norm = l2_norm(row);
        if norm == 0.0 {
            return false;
        }
        match *self {
            Self::Sparsity { tau } => hoyer_score(row).map(|h| h > tau).unwrap_or(false),
            Self::Norm { gamma } => norm > gamma as f64,
        }
    }
}

/// Flagged patch indices (row-major, `[CLS]` excluded) of a token matrix
/// whose row 0 is `[CLS]`.
pub fn detect_in_tokens(tokens: &Tensor, criterion: AbnormalCriterion) -> Result<BTreeSet<usize>> {
    criterion.validate()?;
    Ok(tokens
        .row_iter()
        .skip(1)
        .enumerate()
        .filter(|(_, row)| criterion.flags(row))
        .map(|(i, _)| i)
        .collect())
}

pub fn detect_abnormal(x: &TokenSequence, criterion: AbnormalCriterion) -> Result<BTreeSet<usize>> {
    detect_in_tokens(&x.tokens, criterion)
}

/// Per-patch Hoyer scores in grid order; zero rows score 0.
pub fn hoyer_map(x: &TokenSequence) -> Vec<f32> {
    (0..x.num_patches())
        .map(|i| hoyer_score(x.patch(i)).unwrap_or(0.0))
        .collect()
}

/// Cosine statistics over the abnormal tokens pooled from many sequences.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AbnormalStats {
    pub count: usize,
    pub mean_pairwise: f64,
    pub min_pairwise: f64,
    /// Mean cosine between each abnormal token and its own sequence's `[CLS]`.
    pub mean_cls: f64,
    /// Mean cosine between each abnormal token and the mean of its sequence's normal patches.
    pub mean_normal: Option<f64>,
}

fn cos(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let n = l2_norm(a) * l2_norm(b);
    if n == 0.0 {
        0.0
    } else {
        dot / n
    }
}

/// Pools abnormal tokens across sequences (positions, layers, samples);
/// `None` when fewer than two are found.
pub fn replace_stats(sequences: &[TokenSequence], criterion: AbnormalCriterion) -> Result<Option<AbnormalStats>> {
    let mut tokens: Vec<&[f32]> = Vec::new();
    let mut cls_cos = Vec::new();
    let mut normal_cos = Vec::new();
    for seq in sequences {
        let flagged = detect_abnormal(seq, criterion)?;
        if flagged.is_empty() {
            continue;
        }
        let d = seq.width();
        let mut normal_mean = vec![0.0f64; d];
        let mut normals = 0usize;
        for i in (0..seq.num_patches()).filter(|i| !flagged.contains(i)) {
            for (m, &v) in normal_mean.iter_mut().zip(seq.patch(i)) {
                *m += v as f64;
            }
            normals += 1;
        }
        let normal_mean: Vec<f32> = normal_mean.iter().map(|v| (v / normals.max(1) as f64) as f32).collect();
        for &i in &flagged {
            let t = seq.patch(i);
            tokens.push(t);
            cls_cos.push(cos(t, seq.cls()));
            if normals > 0 {
                normal_cos.push(cos(t, &normal_mean));
            }
        }
    }
    if tokens.len() < 2 {
        return Ok(None);
    }
    let mut sum = 0.0;
    let mut min = f64::INFINITY;
    let mut pairs = 0usize;
    for i in 0..tokens.len() {
        for j in i + 1..tokens.len() {
            let c = cos(tokens[i], tokens[j]);
            sum += c;
            min = min.min(c);
            pairs += 1;
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(Some(AbnormalStats {
        count: tokens.len(),
        mean_pairwise: sum / pairs as f64,
        min_pairwise: min,
        mean_cls: mean(&cls_cos),
        mean_normal: (!normal_cos.is_empty()).then(|| mean(&normal_cos)),
    }))
}

/// Grid-aligned class index per patch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchLabels {
    pub grid: (usize, usize),
    pub labels: Vec<u32>,
    pub ignore: u32,
}

impl PatchLabels {
    pub fn new(grid: (usize, usize), labels: Vec<u32>, ignore: u32) -> Result<Self> {
        if labels.len() != grid.0 * grid.1 {
            return Err(Error::shape(
                "patch_labels",
                format!("{} labels for a {}x{} grid", labels.len(), grid.0, grid.1),
            ));
        }
        Ok(Self { grid, labels, ignore })
    }

    /// Majority pixel label under each `patch×patch` cell; ties go to the
    /// smaller label value, and a cell whose majority is `ignore` is ignored.
    pub fn from_pixels(gt: &ClassMap, patch: usize, ignore: u32) -> Result<Self> {
        if patch == 0 || !gt.height.is_multiple_of(patch) || !gt.width.is_multiple_of(patch) {
            return Err(Error::InvalidArgument(format!(
                "label map {}x{} not divisible by patch {patch}",
                gt.height, gt.width
            )));
        }
        let (gh, gw) = (gt.height / patch, gt.width / patch);
        let mut labels = Vec::with_capacity(gh * gw);
        for py in 0..gh {
            for px in 0..gw {
                let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
                for y in py * patch..(py + 1) * patch {
                    for x in px * patch..(px + 1) * patch {
                        *counts.entry(gt.get(y, x)).or_default() += 1;
                    }
                }
                let mut best = (0usize, u32::MAX);
                for (&label, &n) in &counts {
                    if n > best.0 {
                        best = (n, label);
                    }
                }
                labels.push(best.1);
            }
        }
        Self::new((gh, gw), labels, ignore)
    }

    pub fn is_ignored(&self, i: usize) -> bool {
        self.labels[i] == self.ignore
    }

    pub fn valid_count(&self) -> usize {
        (0..self.labels.len()).filter(|&i| !self.is_ignored(i)).count()
    }
}

/// Exact ROC AUC via the Mann–Whitney rank statistic with mid-ranks for ties.
///
/// Ties between a positive and a negative score count one half. The
/// numerator is a sum of half-integers, so the result is exact.
pub fn auc_rank(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::shape("auc", format!("{} scores, {} labels", scores.len(), positive.len())));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::DegenerateLabels(format!("{n_pos} positive and {n_neg} negative pairs")));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("auc"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // positions i..j share the mid-rank (i+1 + j) / 2
        let mid = (i + 1 + j) as f64 / 2.0;
        let pos_in_group = order[i..j].iter().filter(|&&k| positive[k]).count();
        rank_sum += mid * pos_in_group as f64;
        i = j;
    }
    let p = n_pos as f64;
    let u = rank_sum - p * (p + 1.0) / 2.0;
    Ok(u / (p * n_neg as f64))
}

/// AUC of patch-pair cosine similarity as a same-class detector, over all
/// unordered pairs of non-ignored patches.
pub fn discriminability_auc(features: &Tensor, labels: &PatchLabels) -> Result<f64> {
    let (n, _) = features.dims2()?;
    if n != labels.labels.len() {
        return Err(Error::shape("discriminability_auc", format!("{n} features, {} labels", labels.labels.len())));
    }
    let keep: Vec<usize> = (0..n).filter(|&i| !labels.is_ignored(i)).collect();
    if keep.len() < 2 {
        return Err(Error::DegenerateLabels(format!("{} labelled patches", keep.len())));
    }
    let rows: Vec<&[f32]> = keep.iter().map(|&i| features.row(i)).collect();
    let kept = Tensor::from_rows(&rows)?;
    let sim = cosine_rows(&kept, &kept)?;
    let m = keep.len();
    let mut scores = Vec::with_capacity(m * (m - 1) / 2);
    let mut positive = Vec::with_capacity(scores.capacity());
    for a in 0..m {
        for b in a + 1..m {
            scores.push(sim.data()[a * m + b] as f64);
            positive.push(labels.labels[keep[a]] == labels.labels[keep[b]]);
        }
    }
    auc_rank(&scores, &positive)
}

/// Fraction of labelled patches whose text argmax matches the label after
/// pushing `x` through the stripped final layer and the visual projection.
pub fn alignment_accuracy(
    x: &TokenSequence,
    weights: &VitWeights,
    text: &TextEmbeddings,
    labels: &PatchLabels,
) -> Result<f64> {
    let l = weights.config.layers;
    if x.layer >= l {
        return Err(Error::InvalidArgument(format!("alignment needs a layer below {l}, got {}", x.layer)));
    }
    let ctx = LayerCtx::from(&weights.config);
    let feats = final_layer_features(x, weights.layer(l)?, &ctx, FinalVariant::IdentityNoFfnNoResidual)?;
    let logits = patch_logits(&project(&feats, weights)?, text)?;
    accuracy(&logits, labels)
}

fn accuracy(logits: &Tensor, labels: &PatchLabels) -> Result<f64> {
    if logits.rows() != labels.labels.len() {
        return Err(Error::shape("accuracy", format!("{} rows, {} labels", logits.rows(), labels.labels.len())));
    }
    let (mut hit, mut total) = (0usize, 0usize);
    for (i, row) in logits.row_iter().enumerate() {
        if labels.is_ignored(i) {
            continue;
        }
        total += 1;
        if argmax(row) as u32 == labels.labels[i] {
            hit += 1;
        }
    }
    if total == 0 {
        return Err(Error::DegenerateLabels("no labelled patches".into()));
    }
    Ok(hit as f64 / total as f64)
}

/// An image with its patch labels and the dataset it was drawn from.
#[derive(Clone, Debug)]
pub struct LabeledSample {
    pub image: Image,
    pub labels: PatchLabels,
    pub dataset: String,
}

/// Discriminability and alignment of one image at one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerMeasurement {
    pub layer: usize,
    /// `None` when the image's labels give no same-class or no cross-class pair.
    pub auc: Option<f64>,
    pub alignment: Option<f64>,
}

fn degenerate_to_none(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::DegenerateLabels(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Layer sweep for one image over layers `1..L` (the final layer excluded).
pub fn measure_layers(
    image: &Image,
    labels: &PatchLabels,
    weights: &VitWeights,
    text: Option<&TextEmbeddings>,
) -> Result<Vec<LayerMeasurement>> {
    let l_total = weights.config.layers;
    let ctx = LayerCtx::from(&weights.config);
    let mut x = crate::engine::embed_image(image, weights)?;
    check_grid(&x, labels)?;
    let mut out = Vec::with_capacity(l_total - 1);
    for l in 1..l_total {
        x = layer_forward_captured(&x, weights.layer(l)?, &ctx, LayerMode::Standard, &BTreeSet::new(), false)?.0;
        let auc = degenerate_to_none(discriminability_auc(&x.patches(), labels))?;
        let alignment = match text {
            Some(t) => degenerate_to_none(alignment_accuracy(&x, weights, t, labels))?,
            None => None,
        };
        out.push(LayerMeasurement { layer: l, auc, alignment });
    }
    Ok(out)
}

fn check_grid(x: &TokenSequence, labels: &PatchLabels) -> Result<()> {
    if x.grid != labels.grid {
        return Err(Error::shape(
            "patch_labels",
            format!("labels on a {:?} grid, tokens on {:?}", labels.grid, x.grid),
        ));
    }
    Ok(())
}

/// Head features with abnormal-token replacement applied to their own
/// flagged positions (`[CLS]` row kept).
pub fn clean_head_feature(
    head: &HeadFeature,
    grid: (usize, usize),
    criterion: Option<AbnormalCriterion>,
) -> Result<HeadFeature> {
    match criterion {
        None => Ok(head.clone()),
        Some(c) => {
            let flagged = detect_in_tokens(&head.features, c)?;
            let (features, _) = replace_abnormal(&head.features, grid, &flagged)?;
            Ok(HeadFeature { id: head.id, features })
        }
    }
}

/// Per-head AUC for one image over every head of layers `1..L`.
pub fn measure_heads(
    image: &Image,
    labels: &PatchLabels,
    weights: &VitWeights,
    criterion: Option<AbnormalCriterion>,
) -> Result<Vec<(HeadId, Option<f64>)>> {
    let cfg = &weights.config;
    let ctx = LayerCtx::from(cfg);
    let all: BTreeSet<usize> = (1..=cfg.heads).collect();
    let mut x = crate::engine::embed_image(image, weights)?;
    check_grid(&x, labels)?;
    let mut out = Vec::with_capacity((cfg.layers - 1) * cfg.heads);
    for l in 1..cfg.layers {
        let (next, msa) = layer_forward_captured(&x, weights.layer(l)?, &ctx, LayerMode::Standard, &all, false)?;
        for head in &msa.heads {
            let cleaned = clean_head_feature(head, x.grid, criterion)?;
            let auc = degenerate_to_none(discriminability_auc(&drop_cls(&cleaned.features)?, labels))?;
            out.push((head.id, auc));
        }
        x = next;
    }
    Ok(out)
}

/// Per-(head, dataset) AUC accumulator.
#[derive(Clone, Debug, Default)]
pub struct HeadAucTable {
    sums: BTreeMap<(HeadId, String), (f64, usize)>,
}

impl HeadAucTable {
    pub fn add(&mut self, dataset: &str, measurements: &[(HeadId, Option<f64>)]) {
        for &(id, auc) in measurements {
            if let Some(a) = auc {
                let e = self.sums.entry((id, dataset.to_string())).or_insert((0.0, 0));
                e.0 += a;
                e.1 += 1;
            }
        }
    }

    /// `(head, dataset) → mean AUC` over the images of that dataset.
    pub fn dataset_means(&self) -> BTreeMap<(HeadId, String), f64> {
        self.sums
            .iter()
            .map(|(k, &(s, n))| (k.clone(), s / n as f64))
            .collect()
    }

    /// Heads sorted by the mean over datasets of the per-dataset mean AUC,
    /// descending; ties by `(layer, head)` ascending.
    pub fn ranking(&self) -> Vec<HeadScore> {
        let mut per_head: BTreeMap<HeadId, Vec<f64>> = BTreeMap::new();
        for ((id, _), m) in self.dataset_means() {
            per_head.entry(id).or_default().push(m);
        }
        let mut scores: Vec<HeadScore> = per_head
            .into_iter()
            .map(|(id, v)| HeadScore {
                id,
                mean_auc: v.iter().sum::<f64>() / v.len() as f64,
            })
            .collect();
        scores.sort_by(|a, b| b.mean_auc.total_cmp(&a.mean_auc).then(a.id.cmp(&b.id)));
        scores
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeadScore {
    pub id: HeadId,
    pub mean_auc: f64,
}

/// Ranks the non-final heads by dataset-averaged discriminability.
pub fn rank_heads(
    samples: &[LabeledSample],
    weights: &VitWeights,
    criterion: Option<AbnormalCriterion>,
) -> Result<Vec<HeadScore>> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("rank_heads needs at least one sample".into()));
    }
    let mut table = HeadAucTable::default();
    for s in samples {
        table.add(&s.dataset, &measure_heads(&s.image, &s.labels, weights, criterion)?);
    }
    let ranking = table.ranking();
    if ranking.is_empty() {
        return Err(Error::DegenerateLabels("no sample produced a defined AUC".into()));
    }
    Ok(ranking)
}

/// Writes a ranking as `rank,layer,head,mean_auc`.
pub fn write_ranking(path: &Path, ranking: &[HeadScore]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    let io = |e| Error::io(path, e);
    writeln!(f, "rank,layer,head,mean_auc").map_err(io)?;
    for (i, s) in ranking.iter().enumerate() {
        writeln!(f, "{},{},{},{:.6}", i + 1, s.id.layer, s.id.head, s.mean_auc).map_err(io)?;
    }
    f.flush().map_err(io)
}

/// Reads a ranking file written by [`write_ranking`], in file order.
pub fn read_ranking(path: &Path) -> Result<Vec<HeadScore>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        let parse_err = || Error::Config(format!("{}:{}: malformed ranking row `{line}`", path.display(), n + 1));
        if f.len() != 4 {
            return Err(parse_err());
        }
        let layer = f[1].parse().map_err(|_| parse_err())?;
        let head = f[2].parse().map_err(|_| parse_err())?;
        let mean_auc = f[3].parse().map_err(|_| parse_err())?;
        out.push(HeadScore {
            id: HeadId::new(layer, head),
            mean_auc,
        });
    }
    Ok(out)
}

/// Dataset-level report used for the layer-wise and head-wise curves.
#[derive(Clone, Debug, Default)]
pub struct DiscriminabilityReport {
    /// `(layer, mean AUC, mean alignment)` for layers `1..L`.
    pub layers: Vec<(usize, Option<f64>, Option<f64>)>,
    pub heads: BTreeMap<(HeadId, String), f64>,
    pub samples: usize,
}

impl DiscriminabilityReport {
    /// Averages per-image layer sweeps (each image weighted equally, images
    /// with an undefined value skipped for that value).
    pub fn from_layer_sweeps(sweeps: &[Vec<LayerMeasurement>]) -> Self {
        let mut acc: BTreeMap<usize, (f64, usize, f64, usize)> = BTreeMap::new();
        for sweep in sweeps {
            for m in sweep {
                let e = acc.entry(m.layer).or_default();
                if let Some(a) = m.auc {
                    e.0 += a;
                    e.1 += 1;
                }
                if let Some(a) = m.alignment {
                    e.2 += a;
                    e.3 += 1;
                }
            }
        }
        let avg = |s: f64, n: usize| (n > 0).then(|| s / n as f64);
        Self {
            layers: acc
                .into_iter()
                .map(|(l, (sa, na, sb, nb))| (l, avg(sa, na), avg(sb, nb)))
                .collect(),
            heads: BTreeMap::new(),
            samples: sweeps.len(),
        }
    }
}
