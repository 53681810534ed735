use super::*;
use crate::testutil::{gaussian, random_weights, rng, toy_config};
use crate::weights::Linear;

type Mat = Vec<Vec<f64>>;

fn to_mat(t: &Tensor) -> Mat {
    t.row_iter().map(|r| r.iter().map(|&v| v as f64).collect()).collect()
}

fn ref_ln(x: &[f64], g: &Tensor, b: &Tensor, eps: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mu = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
    x.iter()
        .enumerate()
        .map(|(i, v)| (v - mu) / (var + eps).sqrt() * g.data()[i] as f64 + b.data()[i] as f64)
        .collect()
}

fn ref_lin(x: &[f64], l: &Linear) -> Vec<f64> {
    let (din, dout) = (l.weight.rows(), l.weight.cols());
    (0..dout)
        .map(|j| (0..din).map(|i| x[i] * l.weight.data()[i * dout + j] as f64).sum::<f64>() + l.bias.data()[j] as f64)
        .collect()
}

fn ref_gelu(v: f64) -> f64 {
    // tanh form differs from erf form by < 1e-3; use a fine numeric integral of the Gaussian pdf instead
    let steps = 4000;
    let lo = -10.0f64;
    if v <= lo {
        return 0.0;
    }
    let h = (v - lo) / steps as f64;
    let pdf = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut s = pdf(lo) + pdf(v);
    for k in 1..steps {
        let t = lo + k as f64 * h;
        s += if k % 2 == 1 { 4.0 } else { 2.0 } * pdf(t);
    }
    v * s * h / 3.0
}

/// Per-head attention outputs (`A_h V_h`, not yet through `W_o`), one matrix per head.
fn ref_heads(x: &Mat, lw: &LayerWeights, heads: usize, eps: f64) -> Vec<Mat> {
    let normed: Mat = x.iter().map(|r| ref_ln(r, &lw.ln_1.gain, &lw.ln_1.bias, eps)).collect();
    let q: Mat = normed.iter().map(|r| ref_lin(r, &lw.q)).collect();
    let k: Mat = normed.iter().map(|r| ref_lin(r, &lw.k)).collect();
    let v: Mat = normed.iter().map(|r| ref_lin(r, &lw.v)).collect();
    let d = q[0].len();
    let dh = d / heads;
    let n = x.len();
    (0..heads)
        .map(|h| {
            let cols = h * dh..(h + 1) * dh;
            (0..n)
                .map(|i| {
                    let logits: Vec<f64> = (0..n)
                        .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                        .collect();
                    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                    let z: f64 = e.iter().sum();
                    cols.clone().map(|c| (0..n).map(|j| e[j] / z * v[j][c]).sum()).collect()
                })
                .collect()
        })
        .collect()
}

fn ref_msa(x: &Mat, lw: &LayerWeights, heads: usize, eps: f64) -> Mat {
    let per = ref_heads(x, lw, heads, eps);
    (0..x.len())
        .map(|i| {
            let concat: Vec<f64> = per.iter().flat_map(|m| m[i].clone()).collect();
            ref_lin(&concat, &lw.o)
        })
        .collect()
}

fn ref_layer(x: &Mat, lw: &LayerWeights, heads: usize, eps: f64, alpha: f64) -> Mat {
    let msa = ref_msa(x, lw, heads, eps);
    let (r, b) = (1.0 + alpha, 1.0 - alpha);
    let mid: Mat = x
        .iter()
        .zip(&msa)
        .map(|(xr, mr)| xr.iter().zip(mr).map(|(a, m)| r * a + b * m).collect())
        .collect();
    mid.iter()
        .map(|row| {
            let n = ref_ln(row, &lw.ln_2.gain, &lw.ln_2.bias, eps);
            let hdn: Vec<f64> = ref_lin(&n, &lw.fc).into_iter().map(ref_gelu).collect();
            let f = ref_lin(&hdn, &lw.proj);
            row.iter().zip(&f).map(|(a, m)| r * a + b * m).collect()
        })
        .collect()
}

fn max_rel(a: &Tensor, b: &Mat) -> f64 {
    let scale = b.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    a.row_iter()
        .zip(b)
        .flat_map(|(x, y)| x.iter().zip(y).map(|(&p, q)| (p as f64 - q).abs()))
        .fold(0.0, f64::max)
        / scale
}

fn random_seq(seed: u64, grid: (usize, usize), d: usize) -> TokenSequence {
    let mut r = rng(seed);
    TokenSequence::new(gaussian(&mut r, &[1 + grid.0 * grid.1, d], 1.0), grid, 0).unwrap()
}

fn all_heads(h: usize) -> BTreeSet<usize> {
    (1..=h).collect()
}

#[test]
fn head_features_sum_to_msa_output() {
    let w = random_weights(toy_config(2, 4, 32), 1);
    let ctx = LayerCtx::from(&w.config);
    let x = random_seq(2, (3, 3), 32);
    let msa = msa_forward(&x, w.layer(1).unwrap(), &ctx, &all_heads(4), false).unwrap();
    let mut sum = Tensor::zeros(&[10, 32]).add_row_vector(w.layer(1).unwrap().o.bias.data()).unwrap();
    for h in &msa.heads {
        sum = sum.add(&h.features).unwrap();
    }
    let diff = sum.max_abs_diff(&msa.output).unwrap();
    let scale = msa.output.data().iter().fold(0.0f32, |m, v| m.max(v.abs()));
    assert!(diff / scale <= 1e-4, "{diff} / {scale}");
    assert_eq!(msa.heads[2].id, HeadId::new(1, 3));
}

#[test]
fn single_head_feature_is_bias_free_output() {
    let w = random_weights(toy_config(2, 1, 8), 3);
    let ctx = LayerCtx::from(&w.config);
    let x = random_seq(4, (2, 2), 8);
    let lw = w.layer(1).unwrap();
    let msa = msa_forward(&x, lw, &ctx, &all_heads(1), false).unwrap();
    let expect = msa.heads[0].features.add_row_vector(lw.o.bias.data()).unwrap();
    assert!(expect.max_abs_diff(&msa.output).unwrap() < 1e-5);
}

#[test]
fn msa_matches_scalar_reference() {
    let w = random_weights(toy_config(2, 2, 8), 5);
    let ctx = LayerCtx::from(&w.config);
    let x = random_seq(6, (1, 2), 8);
    let lw = w.layer(1).unwrap();
    let msa = msa_forward(&x, lw, &ctx, &all_heads(2), true).unwrap();
    let xm = to_mat(&x.tokens);
    assert!(max_rel(&msa.output, &ref_msa(&xm, lw, 2, 1e-5)) < 1e-5);
    let per = ref_heads(&xm, lw, 2, 1e-5);
    let wo = to_mat(&lw.o.weight);
    for (h, hf) in msa.heads.iter().enumerate() {
        let expect: Mat = per[h]
            .iter()
            .map(|row| (0..8).map(|j| row.iter().enumerate().map(|(c, v)| v * wo[h * 4 + c][j]).sum()).collect())
            .collect();
        assert!(max_rel(&hf.features, &expect) < 1e-5);
    }
    for a in msa.attention.unwrap() {
        for row in a.row_iter() {
            assert!((row.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn standard_layer_matches_scalar_reference() {
    let w = random_weights(toy_config(2, 2, 8), 7);
    let ctx = LayerCtx::from(&w.config);
    let x = random_seq(8, (2, 2), 8);
    let lw = w.layer(1).unwrap();
    let out = layer_forward(&x, lw, &ctx, LayerMode::Standard).unwrap();
    assert!(max_rel(&out.tokens, &ref_layer(&to_mat(&x.tokens), lw, 2, 1e-5, 0.0)) < 1e-5);
    assert_eq!(out.layer, 1);
}

#[test]
fn ssr_alpha_zero_is_standard() {
    let w = random_weights(toy_config(2, 4, 16), 9);
    let ctx = LayerCtx::from(&w.config);
    let x = random_seq(10, (3, 3), 16);
    let lw = w.layer(1).unwrap();
    let a = layer_forward(&x, lw, &ctx, LayerMode::Standard).unwrap();
    let b = layer_forward(&x, lw, &ctx, LayerMode::Ssr { alpha: 0.0 }).unwrap();
    assert!(a.tokens.max_abs_diff(&b.tokens).unwrap() <= 1e-6);
}

#[test]
fn ssr_alpha_one_quadruples_the_input() {
    let w = random_weights(toy_config(2, 2, 8), 11);
    let ctx = LayerCtx::from(&w.config);
    let x = random_seq(12, (2, 2), 8);
    let out = layer_forward(&x, w.layer(1).unwrap(), &ctx, LayerMode::Ssr { alpha: 1.0 }).unwrap();
    assert_eq!(out.tokens, x.tokens.scale(4.0));
    assert!(layer_forward(&x, w.layer(1).unwrap(), &ctx, LayerMode::Ssr { alpha: 1.5 }).is_err());
}

#[test]
fn ssr_matches_scalar_reference() {
    let w = random_weights(toy_config(2, 2, 8), 13);
    let ctx = LayerCtx::from(&w.config);
    let x = random_seq(14, (2, 2), 8);
    let lw = w.layer(1).unwrap();
    let out = layer_forward(&x, lw, &ctx, LayerMode::Ssr { alpha: 0.1 }).unwrap();
    assert!(max_rel(&out.tokens, &ref_layer(&to_mat(&x.tokens), lw, 2, 1e-5, 0.1)) < 1e-5);
}

#[test]
fn identity_variant_with_identity_projections_is_layer_norm() {
    let mut w = random_weights(toy_config(2, 2, 8), 15);
    let ctx = LayerCtx::from(&w.config);
    let lw = &mut w.layers[1];
    lw.v = Linear {
        weight: Tensor::identity(8),
        bias: Tensor::zeros(&[8]),
    };
    lw.o = lw.v.clone();
    let x = random_seq(16, (2, 2), 8);
    let lw = w.layer(2).unwrap();
    let out = final_layer_features(&x, lw, &ctx, FinalVariant::IdentityNoFfnNoResidual).unwrap();
    let ln = layer_norm(&x.tokens, &lw.ln_1.gain, &lw.ln_1.bias, 1e-5).unwrap();
    assert!(out.max_abs_diff(&drop_cls(&ln).unwrap()).unwrap() < 1e-6);
}

#[test]
fn variant_attention_shapes_and_sums() {
    let w = random_weights(toy_config(2, 4, 16), 17);
    let ctx = LayerCtx::from(&w.config);
    let x = random_seq(18, (3, 3), 16);
    let lw = w.layer(2).unwrap();
    assert!(variant_attention(&x, lw, &ctx, FinalVariant::IdentityNoFfnNoResidual).unwrap().is_none());
    for (variant, total) in [(FinalVariant::SclipQqkk, 2.0), (FinalVariant::Clearclip, 1.0)] {
        let maps = variant_attention(&x, lw, &ctx, variant).unwrap().unwrap();
        assert_eq!(maps.len(), 4);
        for m in &maps {
            for row in m.row_iter() {
                assert!((row.iter().sum::<f32>() - total).abs() < 1e-5);
            }
        }
    }
}

#[test]
fn clearclip_is_the_bare_attention_branch() {
    let w = random_weights(toy_config(2, 4, 16), 19);
    let ctx = LayerCtx::from(&w.config);
    let x = random_seq(20, (3, 3), 16);
    let lw = w.layer(2).unwrap();
    let msa = msa_forward(&x, lw, &ctx, &BTreeSet::new(), false).unwrap();
    let cc = final_layer_features(&x, lw, &ctx, FinalVariant::Clearclip).unwrap();
    assert_eq!(cc, drop_cls(&msa.output).unwrap());
    let van = final_layer_features(&x, lw, &ctx, FinalVariant::Vanilla).unwrap();
    let full = layer_forward(&x, lw, &ctx, LayerMode::Standard).unwrap();
    assert_eq!(van, full.patches());
}

#[test]
fn sclip_matches_scalar_reference() {
    let w = random_weights(toy_config(2, 2, 8), 21);
    let ctx = LayerCtx::from(&w.config);
    let x = random_seq(22, (1, 2), 8);
    let lw = w.layer(2).unwrap();
    let out = final_layer_features(&x, lw, &ctx, FinalVariant::SclipQqkk).unwrap();

    let xm = to_mat(&x.tokens);
    let normed: Mat = xm.iter().map(|r| ref_ln(r, &lw.ln_1.gain, &lw.ln_1.bias, 1e-5)).collect();
    let q: Mat = normed.iter().map(|r| ref_lin(r, &lw.q)).collect();
    let k: Mat = normed.iter().map(|r| ref_lin(r, &lw.k)).collect();
    let v: Mat = normed.iter().map(|r| ref_lin(r, &lw.v)).collect();
    let softmax_row = |a: &Mat, i: usize, cols: std::ops::Range<usize>| -> Vec<f64> {
        let l: Vec<f64> = (0..a.len())
            .map(|j| cols.clone().map(|c| a[i][c] * a[j][c]).sum::<f64>() / 2.0)
            .collect();
        let z: f64 = l.iter().map(|v| v.exp()).sum();
        l.iter().map(|v| v.exp() / z).collect()
    };
    let mut expect = Vec::new();
    for i in 1..3 {
        let mut concat = vec![0.0; 8];
        for h in 0..2 {
            let cols = h * 4..(h + 1) * 4;
            let aq = softmax_row(&q, i, cols.clone());
            let ak = softmax_row(&k, i, cols.clone());
            for c in cols {
                concat[c] = (0..3).map(|j| (aq[j] + ak[j]) * v[j][c]).sum();
            }
        }
        expect.push(ref_lin(&concat, &lw.o));
    }
    assert!(max_rel(&out, &expect) < 1e-5);
}

#[test]
fn projection_matches_composed_oracle() {
    let w = random_weights(toy_config(2, 2, 8), 23);
    let mut r = rng(24);
    let f = gaussian(&mut r, &[5, 8], 1.0);
    let out = project(&f, &w).unwrap();
    assert_eq!(out.shape(), &[5, 6]);
    for (i, row) in to_mat(&f).iter().enumerate() {
        let n = ref_ln(row, &w.ln_post.gain, &w.ln_post.bias, 1e-5);
        for j in 0..6 {
            let e: f64 = (0..8).map(|c| n[c] * w.proj.data()[c * 6 + j] as f64).sum();
            assert!((out.row(i)[j] as f64 - e).abs() < 1e-5);
        }
    }
}

#[test]
fn tokenize_layout() {
    let w = random_weights(toy_config(2, 2, 8), 25);
    let zero = Image::from_fn(16, 16, |_, _, _| 0.0);
    let x = tokenize(&zero, &w).unwrap();
    assert_eq!(x.tokens.shape(), &[17, 8]);
    assert_eq!((x.grid, x.layer), ((4, 4), 0));
    // zero pixels: every patch token is bias + position before the pre-norm
    let norm = w.ln_pre.as_ref().unwrap();
    let bias = w.patch_bias.as_ref().unwrap();
    let raw = w.positional_embedding.row(5).iter().zip(bias.data()).map(|(a, b)| a + b).collect::<Vec<_>>();
    let expect = layer_norm(&Tensor::from_rows(&[raw]).unwrap(), &norm.gain, &norm.bias, 1e-5).unwrap();
    for (a, b) in x.patch(4).iter().zip(expect.data()) {
        assert!((a - b).abs() < 1e-5);
    }
    assert!(tokenize(&Image::from_fn(15, 16, |_, _, _| 0.0), &w).is_err());
}

#[test]
fn single_patch_embedding_is_a_dot_product() {
    let mut cfg = toy_config(2, 2, 8);
    cfg.image_size = 4;
    let mut w = random_weights(cfg, 27);
    w.ln_pre = None;
    w.patch_bias = None;
    let img = Image::from_fn(4, 4, |y, x, c| (y * 4 + x) as f32 * 0.1 - c as f32);
    let x = tokenize(&img, &w).unwrap();
    assert_eq!(x.tokens.shape(), &[2, 8]);
    for d in 0..8 {
        let mut e = w.positional_embedding.row(1)[d] as f64;
        for c in 0..3 {
            for yy in 0..4 {
                for xx in 0..4 {
                    e += w.patch_weight.row(d)[c * 16 + yy * 4 + xx] as f64 * img.at(yy, xx, c) as f64;
                }
            }
        }
        assert!((x.patch(0)[d] as f64 - e).abs() < 1e-5);
    }
    assert_eq!(x.cls(), w.class_embedding.data().iter().zip(w.positional_embedding.row(0)).map(|(a, b)| a + b).collect::<Vec<_>>());
}

#[test]
fn positional_resampling() {
    let mut w = random_weights(toy_config(2, 2, 8), 29);
    assert_eq!(positional_embedding(&w, (4, 4)).unwrap(), w.positional_embedding);
    let d = 8;
    let mut data = w.positional_embedding.row(0).to_vec();
    for _ in 0..16 {
        data.extend((0..d).map(|i| i as f32 * 0.5));
    }
    w.positional_embedding = Tensor::new(vec![17, d], data).unwrap();
    let p = positional_embedding(&w, (6, 3)).unwrap();
    assert_eq!(p.shape(), &[19, 8]);
    assert_eq!(p.row(0), w.positional_embedding.row(0));
    for r in 1..19 {
        for i in 0..d {
            assert!((p.row(r)[i] - i as f32 * 0.5).abs() < 1e-5);
        }
    }
    let img = Image::from_fn(24, 12, |_, _, _| 0.3);
    assert_eq!(embed_image(&img, &w).unwrap().grid, (6, 3));
}

#[test]
fn head_capture_rejects_out_of_range() {
    let w = random_weights(toy_config(2, 2, 8), 31);
    let ctx = LayerCtx::from(&w.config);
    let x = random_seq(32, (1, 2), 8);
    let bad: BTreeSet<usize> = [3].into();
    assert!(msa_forward(&x, w.layer(1).unwrap(), &ctx, &bad, false).is_err());
}

#[test]
fn variant_names_parse() {
    assert_eq!("clearclip".parse::<FinalVariant>().unwrap(), FinalVariant::Clearclip);
    assert_eq!("sclip".parse::<FinalVariant>().unwrap(), FinalVariant::SclipQqkk);
    assert!("maskclip".parse::<FinalVariant>().is_err());
    let json = serde_json::to_string(&FinalVariant::IdentityNoFfnNoResidual).unwrap();
    assert_eq!(json, "\"identity_no_ffn_no_residual\"");
    assert_eq!(serde_json::to_string(&HeadId::new(8, 9)).unwrap(), "[8,9]");
}
