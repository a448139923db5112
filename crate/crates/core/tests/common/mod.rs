#![allow(clippy::needless_range_loop)] // scalar oracles index explicitly, mirroring the formulas
//! Scalar-loop reference implementations used as test oracles. They share no
//! code with the library kernels: every matrix is a `Vec<Vec<f64>>` walked
//! with plain index loops.
#![allow(dead_code)]

use nutricast_core::classifier::HeadConfig;
use nutricast_core::encoders::ModelConfig;
use nutricast_core::nn::Activation;
use nutricast_core::ParamStore;

pub type Mat = Vec<Vec<f64>>;

pub fn param(store: &ParamStore, name: &str) -> Vec<f64> {
    store.tensor(name).unwrap().data().to_vec()
}

/// `in × out` weight as rows.
pub fn weight(store: &ParamStore, name: &str) -> Mat {
    let t = store.tensor(name).unwrap();
    let (r, c) = (t.shape()[0], t.shape()[1]);
    (0..r).map(|i| (0..c).map(|j| t.data()[i * c + j]).collect()).collect()
}

pub fn affine(x: &Mat, w: &Mat, b: Option<&[f64]>) -> Mat {
    let out = w[0].len();
    x.iter()
        .map(|row| {
            (0..out)
                .map(|j| {
                    let mut s = b.map_or(0.0, |b| b[j]);
                    for i in 0..row.len() {
                        s += row[i] * w[i][j];
                    }
                    s
                })
                .collect()
        })
        .collect()
}

pub fn named_affine(x: &Mat, store: &ParamStore, prefix: &str) -> Mat {
    let b = param(store, &format!("{prefix}.bias"));
    affine(x, &weight(store, &format!("{prefix}.weight")), Some(&b))
}

pub fn layer_norm(x: &Mat, gamma: &[f64], beta: &[f64], eps: f64) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mut mean = 0.0;
            for v in row {
                mean += v;
            }
            mean /= n;
            let mut var = 0.0;
            for v in row {
                var += (v - mean) * (v - mean);
            }
            var /= n;
            let inv = 1.0 / (var + eps).sqrt();
            (0..row.len()).map(|k| (row[k] - mean) * inv * gamma[k] + beta[k]).collect()
        })
        .collect()
}

pub fn named_ln(x: &Mat, store: &ParamStore, prefix: &str, eps: f64) -> Mat {
    layer_norm(x, &param(store, &format!("{prefix}.weight")), &param(store, &format!("{prefix}.bias")), eps)
}

pub fn act(a: Activation, x: f64) -> f64 {
    match a {
        Activation::Gelu => 0.5 * x * (1.0 + libm::erf(x / 2f64.sqrt())),
        Activation::Relu => x.max(0.0),
    }
}

/// Multi-head scaled dot-product attention over already projected q/k/v.
pub fn attention(q: &Mat, k: &Mat, v: &Mat, heads: usize, causal: bool) -> Mat {
    let n = q.len();
    let width = q[0].len();
    let d = width / heads;
    let mut out = vec![vec![0.0; width]; n];
    for h in 0..heads {
        for i in 0..n {
            let last = if causal { i } else { n - 1 };
            let mut scores = Vec::new();
            for j in 0..=last {
                let mut s = 0.0;
                for c in 0..d {
                    s += q[i][h * d + c] * k[j][h * d + c];
                }
                scores.push(s / (d as f64).sqrt());
            }
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
            for j in 0..=last {
                let p = (scores[j] - m).exp() / z;
                for c in 0..d {
                    out[i][h * d + c] += p * v[j][h * d + c];
                }
            }
        }
    }
    out
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

pub fn block(x: &Mat, store: &ParamStore, prefix: &str, heads: usize, causal: bool, cfg: &ModelConfig) -> Mat {
    let h = named_ln(x, store, &format!("{prefix}.ln_1"), cfg.layer_norm_eps);
    let q = named_affine(&h, store, &format!("{prefix}.attn.q"));
    let k = named_affine(&h, store, &format!("{prefix}.attn.k"));
    let v = named_affine(&h, store, &format!("{prefix}.attn.v"));
    let a = named_affine(&attention(&q, &k, &v, heads, causal), store, &format!("{prefix}.attn.out"));
    let x = add(x, &a);
    let h = named_ln(&x, store, &format!("{prefix}.ln_2"), cfg.layer_norm_eps);
    let mut f = named_affine(&h, store, &format!("{prefix}.mlp.fc"));
    for row in f.iter_mut() {
        for v in row.iter_mut() {
            *v = act(cfg.activation, *v);
        }
    }
    add(&x, &named_affine(&f, store, &format!("{prefix}.mlp.proj")))
}

/// Image tower from a preprocessed `H × W × 3` buffer.
pub fn image_forward(pixels: &[f64], cfg: &ModelConfig, store: &ParamStore) -> Vec<f64> {
    let p = cfg.patch_size;
    let res = cfg.image_resolution;
    let g = res / p;
    let mut patches = Mat::new();
    for gy in 0..g {
        for gx in 0..g {
            let mut v = Vec::new();
            for y in 0..p {
                for x in 0..p {
                    for c in 0..3 {
                        v.push(pixels[((gy * p + y) * res + gx * p + x) * 3 + c]);
                    }
                }
            }
            patches.push(v);
        }
    }
    let emb = affine(&patches, &weight(store, "visual.patch_embed.weight"), None);
    let mut tokens = vec![param(store, "visual.class_embedding")];
    tokens.extend(emb);
    let pos = weight(store, "visual.positional_embedding");
    let tokens = add(&tokens, &pos);
    let mut h = named_ln(&tokens, store, "visual.ln_pre", cfg.layer_norm_eps);
    for i in 0..cfg.image_layers {
        h = block(&h, store, &format!("visual.blocks.{i}"), cfg.image_heads, false, cfg);
    }
    let cls = named_ln(&vec![h[0].clone()], store, "visual.ln_post", cfg.layer_norm_eps);
    affine(&cls, &weight(store, "visual.proj"), None).remove(0)
}

/// Text tower over the full sequence with a causal mask, read out at EOS.
pub fn text_forward(ids: &[u32], eos_id: u32, cfg: &ModelConfig, store: &ParamStore) -> Vec<f64> {
    let table = weight(store, "text.token_embedding");
    let pos = weight(store, "text.positional_embedding");
    let x: Mat = ids.iter().map(|&t| table[t as usize].clone()).collect();
    let mut h = add(&x, &pos);
    for i in 0..cfg.text_layers {
        h = block(&h, store, &format!("text.blocks.{i}"), cfg.text_heads, true, cfg);
    }
    let eos = ids.iter().position(|&t| t == eos_id).unwrap();
    let r = named_ln(&vec![h[eos].clone()], store, "text.ln_final", cfg.layer_norm_eps);
    affine(&r, &weight(store, "text.proj"), None).remove(0)
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn head_forward(x: &[f64], head: &HeadConfig, store: &ParamStore) -> Vec<f64> {
    let p = head.prefix();
    let mut h = vec![x.to_vec()];
    for i in 0..head.hidden.len() {
        h = named_affine(&h, store, &format!("{p}.fc{}", i + 1));
        for v in h[0].iter_mut() {
            *v = act(head.activation, *v);
        }
    }
    softmax(&named_affine(&h, store, &format!("{p}.out"))[0])
}

/// One-vs-one AUC oracle by exhaustive pair counting.
pub fn pair_auc(pos: &[f64], neg: &[f64]) -> f64 {
    let mut s = 0.0;
    for &p in pos {
        for &n in neg {
            s += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    s / (pos.len() * neg.len()) as f64
}

/// (macro, weighted) Hand–Till average over present class pairs.
pub fn ovo_oracle(conf: &[Vec<f64>], labels: &[usize], classes: usize) -> Option<(f64, f64)> {
    let (mut sum, mut wsum, mut wtot, mut pairs) = (0.0, 0.0, 0.0, 0);
    for i in 0..classes {
        for j in i + 1..classes {
            let of = |c: usize, col: usize| -> Vec<f64> {
                labels.iter().zip(conf).filter(|(l, _)| **l == c).map(|(_, r)| r[col]).collect()
            };
            let (ii, ji, ij, jj) = (of(i, i), of(j, i), of(i, j), of(j, j));
            if ii.is_empty() || jj.is_empty() {
                continue;
            }
            let a = (pair_auc(&ii, &ji) + pair_auc(&jj, &ij)) / 2.0;
            let w = (ii.len() + jj.len()) as f64;
            sum += a;
            wsum += w * a;
            wtot += w;
            pairs += 1;
        }
    }
    (pairs > 0).then(|| (sum / pairs as f64, wsum / wtot))
}

/// Tiny encoder profile used across tests: resolution 64, width 16, 2 layers.
pub fn tiny_config(vocab: usize) -> ModelConfig {
    let mut c = ModelConfig::tiny(vocab);
    c.image_width = 16;
    c.text_width = 16;
    c.projection_dim = 8;
    c.context_length = 8;
    c
}
