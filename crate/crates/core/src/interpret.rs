//! GradCAM patch maps and per-token saliency.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::classifier::{features_graph, head_graph, ItemInput, NutrientModel};
use crate::encoders::vocab::{BOS, EOS, PAD};
use crate::encoders::{tokenize, words, RgbImage, Vocabulary};
use crate::error::{bail, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Patch-grid relevance map in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub nutrient: String,
    pub target_class: usize,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
    /// Map before min-max normalization (non-negative).
    pub raw: Vec<f64>,
}

impl Heatmap {
    pub fn argmax(&self) -> usize {
        crate::classifier::argmax(&self.values)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SaliencyMethod {
    /// `‖∂logit/∂e_i‖·‖e_i‖` over token embeddings.
    #[default]
    GradientInput,
    /// Head-averaged last-layer attention from the EOS readout.
    Attention,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenWeight {
    /// Position in the token sequence (BOS is position 0).
    pub position: usize,
    pub token: String,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenSaliency {
    pub nutrient: String,
    pub target_class: usize,
    pub method: SaliencyMethod,
    /// Word tokens in order; special tokens are omitted.
    pub tokens: Vec<TokenWeight>,
    pub warning: Option<String>,
}

impl TokenSaliency {
    /// Index into `tokens` of the largest weight.
    pub fn argmax(&self) -> Option<usize> {
        if self.tokens.is_empty() {
            return None;
        }
        let w: Vec<f64> = self.tokens.iter().map(|t| t.weight).collect();
        Some(crate::classifier::argmax(&w))
    }
}

/// Min-max normalization; a constant map becomes all ones if positive and
/// all zeros otherwise.
fn min_max(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        values.iter().map(|v| (v - lo) / (hi - lo)).collect()
    } else {
        values.iter().map(|_| if hi > 0.0 { 1.0 } else { 0.0 }).collect()
    }
}

fn target_logit(
    tape: &mut Tape<'_>,
    model: &NutrientModel,
    features: Var,
    nutrient: &str,
    target_class: usize,
) -> Result<Var> {
    let head = model.head(nutrient)?;
    if target_class >= head.class_count {
        bail!(Domain, "target class {} outside 0..{}", target_class, head.class_count);
    }
    let logits = head_graph(tape, head, features)?;
    tape.pick(logits, target_class)
}

/// GradCAM over the normalized patch tokens that feed attention in the last
/// image block: channel weights are the patch-mean gradients of the target
/// logit, the map is the rectified weighted channel sum.
pub fn gradcam(model: &NutrientModel, input: &ItemInput, nutrient: &str, target_class: usize) -> Result<Heatmap> {
    if !model.variant.uses_image() {
        bail!(Contract, "variant {} has no image encoder", model.variant);
    }
    let mut tape = Tape::tracking_all(&model.params);
    let trace = features_graph(&mut tape, &model.config, model.variant, input)?;
    let logit = target_logit(&mut tape, model, trace.features, nutrient, target_class)?;
    let grads = tape.backward(logit)?;
    let acts_var = trace.image.expect("image variant records an image trace").last_block_tokens;
    let (tokens, width) = tape.dims(acts_var);
    let acts = tape.value(acts_var);
    let zero = vec![0.0; tokens * width];
    let g = grads.node(acts_var).unwrap_or(&zero);
    let patches = tokens - 1;
    let mut alpha = vec![0.0; width];
    for p in 1..tokens {
        for k in 0..width {
            alpha[k] += g[p * width + k];
        }
    }
    alpha.iter_mut().for_each(|a| *a /= patches as f64);
    let raw: Vec<f64> = (1..tokens)
        .map(|p| {
            let s: f64 = (0..width).map(|k| alpha[k] * acts[p * width + k]).sum();
            s.max(0.0)
        })
        .collect();
    let grid = model.config.grid();
    Ok(Heatmap {
        nutrient: nutrient.to_string(),
        target_class,
        rows: grid,
        cols: grid,
        values: min_max(&raw),
        raw,
    })
}

/// Saliency of each word token of `text` for the target logit. An image is
/// required for variants that also read the image.
pub fn text_saliency(
    model: &NutrientModel,
    vocab: &Vocabulary,
    text: &str,
    image: Option<&Tensor>,
    nutrient: &str,
    target_class: usize,
    method: SaliencyMethod,
) -> Result<TokenSaliency> {
    if !model.variant.uses_text() {
        bail!(Contract, "variant {} has no text encoder", model.variant);
    }
    let ids = tokenize(text, vocab, model.config.context_length)?;
    let input = ItemInput {
        image: image.cloned(),
        tokens: Some(ids.clone()),
    };
    let mut tape = Tape::tracking_all(&model.params);
    let trace = features_graph(&mut tape, &model.config, model.variant, &input)?;
    let logit = target_logit(&mut tape, model, trace.features, nutrient, target_class)?;
    let text_trace = trace.text.expect("text variant records a text trace");
    let eos = text_trace.eos;
    let mut weights = vec![0.0; eos + 1];
    match method {
        SaliencyMethod::GradientInput => {
            let grads = tape.backward(logit)?;
            let emb = tape.value(text_trace.token_embeddings);
            let width = model.config.text_width;
            let zero = vec![0.0; emb.len()];
            let g = grads.node(text_trace.token_embeddings).unwrap_or(&zero);
            for (pos, w) in weights.iter_mut().enumerate() {
                let row = pos * width..(pos + 1) * width;
                *w = crate::nn::norm(&g[row.clone()]) * crate::nn::norm(&emb[row]);
            }
        }
        SaliencyMethod::Attention => {
            let Some((heads, tokens, probs)) = tape.last_attention(true) else {
                bail!(Contract, "text tower recorded no attention");
            };
            for (pos, w) in weights.iter_mut().enumerate() {
                *w = (0..heads).map(|h| probs[(h * tokens + eos) * tokens + pos]).sum::<f64>() / heads as f64;
            }
        }
    }
    for (pos, w) in weights.iter_mut().enumerate() {
        if matches!(ids[pos], PAD | BOS | EOS) {
            *w = 0.0;
        }
    }
    let max = weights.iter().copied().fold(0.0, f64::max);
    let source_words = words(text);
    let tokens: Vec<TokenWeight> = (1..eos)
        .map(|pos| TokenWeight {
            position: pos,
            token: source_words.get(pos - 1).cloned().unwrap_or_default(),
            weight: if max > 0.0 { weights[pos] / max } else { 0.0 },
        })
        .collect();
    let warning = tokens.is_empty().then(|| "empty ingredient text".to_string());
    Ok(TokenSaliency {
        nutrient: nutrient.to_string(),
        target_class,
        method,
        tokens,
        warning,
    })
}

/// Alpha-blend a heatmap (red, nearest-neighbor per patch) onto `image`;
/// opacity is `max_alpha · value`.
pub fn render_overlay(image: &RgbImage, heatmap: &Heatmap, max_alpha: f64) -> Result<RgbImage> {
    if heatmap.values.len() != heatmap.rows * heatmap.cols || heatmap.rows == 0 || heatmap.cols == 0 {
        bail!(Dimension, "heatmap grid is inconsistent");
    }
    let mut out = image.clone();
    let tint = [255.0, 0.0, 0.0];
    for y in 0..image.height {
        let r = (y * heatmap.rows / image.height).min(heatmap.rows - 1);
        for x in 0..image.width {
            let c = (x * heatmap.cols / image.width).min(heatmap.cols - 1);
            let a = max_alpha * heatmap.values[r * heatmap.cols + c];
            if a == 0.0 {
                continue;
            }
            let px = image.get(x, y);
            let mut blended = [0u8; 3];
            for ch in 0..3 {
                blended[ch] = libm::round((1.0 - a) * px[ch] as f64 + a * tint[ch]).clamp(0.0, 255.0) as u8;
            }
            out.put(x, y, blended);
        }
    }
    Ok(out)
}

fn escape_html(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for ch in s.chars() {
        match ch {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            c => out.push(c),
        }
    }
    out
}

/// Standalone HTML page with one opacity-coded span per token.
pub fn render_saliency_html(saliency: &TokenSaliency) -> String {
    let mut html = String::from(
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>Token saliency</title></head>\n<body style=\"font-family:sans-serif\">\n",
    );
    html.push_str(&format!(
        "<p>{} &middot; class {}</p>\n<p>",
        escape_html(&saliency.nutrient),
        saliency.target_class
    ));
    for t in &saliency.tokens {
        html.push_str(&format!(
            "<span style=\"background:rgba(220,40,40,{:.3});padding:2px\" title=\"{:.4}\">{}</span> ",
            t.weight,
            t.weight,
            escape_html(&t.token)
        ));
    }
    html.push_str("</p>\n");
    if let Some(w) = &saliency.warning {
        html.push_str(&format!("<p><em>{}</em></p>\n", escape_html(w)));
    }
    html.push_str("</body></html>\n");
    html
}
