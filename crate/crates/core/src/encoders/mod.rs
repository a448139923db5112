//! Image and text transformer encoders.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::nn::Activation;
use crate::tape::{Tape, Var};
use crate::tensor::{ParamGroup, ParamStore, Tensor};

pub mod image;
pub mod text;
pub mod vocab;

pub use image::{encode_image, image_graph, patchify, preprocess, ImageTrace, Preprocessing, RgbImage};
pub use text::{encode_text, text_graph, TextTrace};
pub use vocab::{tokenize, words, Vocabulary};

/// Architecture hyperparameters of both encoders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_resolution: usize,
    pub patch_size: usize,
    pub image_layers: usize,
    pub image_heads: usize,
    pub image_width: usize,
    pub text_layers: usize,
    pub text_heads: usize,
    pub text_width: usize,
    pub context_length: usize,
    pub vocab_size: usize,
    pub projection_dim: usize,
    pub temperature_init: f64,
    pub activation: Activation,
    /// Feed-forward hidden width as a multiple of the block width.
    pub mlp_ratio: usize,
    pub layer_norm_eps: f64,
}

impl ModelConfig {
    /// Full-size profile: ViT-B/32 image tower and a 12-layer, 8-head text
    /// tower.
    pub fn full(vocab_size: usize) -> Self {
        Self {
            image_resolution: 224,
            patch_size: 32,
            image_layers: 12,
            image_heads: 12,
            image_width: 768,
            text_layers: 12,
            text_heads: 8,
            text_width: 512,
            context_length: 77,
            vocab_size,
            projection_dim: 512,
            temperature_init: 0.07,
            activation: Activation::Gelu,
            mlp_ratio: 4,
            layer_norm_eps: 1e-5,
        }
    }

    /// Desk-scale profile used by tests and the `tiny` preset.
    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            image_resolution: 64,
            image_layers: 2,
            image_heads: 2,
            image_width: 64,
            text_layers: 2,
            text_heads: 2,
            text_width: 64,
            context_length: 16,
            projection_dim: 64,
            ..Self::full(vocab_size)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || !self.image_resolution.is_multiple_of(self.patch_size) {
            bail!(
                Config,
                "image resolution {} is not divisible by patch size {}",
                self.image_resolution,
                self.patch_size
            );
        }
        if self.image_heads == 0 || !self.image_width.is_multiple_of(self.image_heads) {
            bail!(Config, "image width {} not divisible by {} heads", self.image_width, self.image_heads);
        }
        if self.text_heads == 0 || !self.text_width.is_multiple_of(self.text_heads) {
            bail!(Config, "text width {} not divisible by {} heads", self.text_width, self.text_heads);
        }
        if self.context_length < 3 {
            bail!(Config, "context length must be at least 3, got {}", self.context_length);
        }
        if self.vocab_size < vocab::SPECIAL_TOKENS.len() {
            bail!(Config, "vocabulary size {} cannot hold the special tokens", self.vocab_size);
        }
        if self.projection_dim == 0 || self.mlp_ratio == 0 {
            bail!(Config, "projection dim and mlp ratio must be positive");
        }
        if !(self.temperature_init > 0.0) || !(self.layer_norm_eps > 0.0) {
            bail!(Config, "temperature and layer-norm eps must be positive");
        }
        Ok(())
    }

    /// Patches per image side.
    pub fn grid(&self) -> usize {
        self.image_resolution / self.patch_size
    }

    /// Patch tokens plus the class token.
    pub fn image_tokens(&self) -> usize {
        self.grid() * self.grid() + 1
    }

    pub fn patch_len(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Image,
    Text,
}

/// Encoder output in the shared projection space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub values: Vec<f64>,
    pub modality: Modality,
}

impl Embedding {
    pub fn new(values: Vec<f64>, modality: Modality) -> Result<Self> {
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            bail!(Domain, "embedding must be non-empty and finite");
        }
        Ok(Self { values, modality })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Name of the learnable log-temperature of the contrastive objective.
pub const LOG_TEMPERATURE: &str = "log_temperature";

fn fan_in<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    Tensor::randn(&[rows, cols], 1.0 / libm::sqrt(rows as f64), rng)
}

fn insert_block<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    width: usize,
    mlp_ratio: usize,
    trainable: bool,
    rng: &mut R,
) -> Result<()> {
    let enc = ParamGroup::Encoder;
    let hidden = width * mlp_ratio;
    for ln in ["ln_1", "ln_2"] {
        store.insert(&format!("{prefix}.{ln}.weight"), Tensor::filled(&[width], 1.0), trainable, enc)?;
        store.insert(&format!("{prefix}.{ln}.bias"), Tensor::zeros(&[width]), trainable, enc)?;
    }
    for proj in ["q", "k", "v", "out"] {
        store.insert(&format!("{prefix}.attn.{proj}.weight"), fan_in(rng, width, width), trainable, enc)?;
        store.insert(&format!("{prefix}.attn.{proj}.bias"), Tensor::zeros(&[width]), trainable, enc)?;
    }
    store.insert(&format!("{prefix}.mlp.fc.weight"), fan_in(rng, width, hidden), trainable, enc)?;
    store.insert(&format!("{prefix}.mlp.fc.bias"), Tensor::zeros(&[hidden]), trainable, enc)?;
    store.insert(&format!("{prefix}.mlp.proj.weight"), fan_in(rng, hidden, width), trainable, enc)?;
    store.insert(&format!("{prefix}.mlp.proj.bias"), Tensor::zeros(&[width]), trainable, enc)?;
    Ok(())
}

/// Add freshly initialized encoder parameters (both towers and the
/// contrastive temperature) to `store`.
pub fn init_encoder_params<R: Rng + ?Sized>(
    config: &ModelConfig,
    store: &mut ParamStore,
    trainable: bool,
    rng: &mut R,
) -> Result<()> {
    config.validate()?;
    let enc = ParamGroup::Encoder;
    let w = config.image_width;
    let scale = 1.0 / libm::sqrt(w as f64);
    store.insert("visual.patch_embed.weight", fan_in(rng, config.patch_len(), w), trainable, enc)?;
    store.insert("visual.class_embedding", Tensor::randn(&[w], scale, rng), trainable, enc)?;
    store.insert(
        "visual.positional_embedding",
        Tensor::randn(&[config.image_tokens(), w], scale, rng),
        trainable,
        enc,
    )?;
    store.insert("visual.ln_pre.weight", Tensor::filled(&[w], 1.0), trainable, enc)?;
    store.insert("visual.ln_pre.bias", Tensor::zeros(&[w]), trainable, enc)?;
    for i in 0..config.image_layers {
        insert_block(store, &format!("visual.blocks.{i}"), w, config.mlp_ratio, trainable, rng)?;
    }
    store.insert("visual.ln_post.weight", Tensor::filled(&[w], 1.0), trainable, enc)?;
    store.insert("visual.ln_post.bias", Tensor::zeros(&[w]), trainable, enc)?;
    store.insert("visual.proj", fan_in(rng, w, config.projection_dim), trainable, enc)?;

    let tw = config.text_width;
    store.insert(
        "text.token_embedding",
        Tensor::randn(&[config.vocab_size, tw], 0.02, rng),
        trainable,
        enc,
    )?;
    store.insert(
        "text.positional_embedding",
        Tensor::randn(&[config.context_length, tw], 0.01, rng),
        trainable,
        enc,
    )?;
    for i in 0..config.text_layers {
        insert_block(store, &format!("text.blocks.{i}"), tw, config.mlp_ratio, trainable, rng)?;
    }
    store.insert("text.ln_final.weight", Tensor::filled(&[tw], 1.0), trainable, enc)?;
    store.insert("text.ln_final.bias", Tensor::zeros(&[tw]), trainable, enc)?;
    store.insert("text.proj", fan_in(rng, tw, config.projection_dim), trainable, enc)?;

    store.insert(
        LOG_TEMPERATURE,
        Tensor::vector(alloc::vec![libm::log(config.temperature_init)])?,
        trainable,
        enc,
    )?;
    Ok(())
}

pub(crate) fn layer_norm(tape: &mut Tape<'_>, x: Var, prefix: &str, eps: f64) -> Result<Var> {
    let g = tape.param(&format!("{prefix}.weight"))?;
    let b = tape.param(&format!("{prefix}.bias"))?;
    tape.layer_norm(x, g, b, eps)
}

pub(crate) fn affine(tape: &mut Tape<'_>, x: Var, prefix: &str) -> Result<Var> {
    let w = tape.param(&format!("{prefix}.weight"))?;
    let b = tape.param(&format!("{prefix}.bias"))?;
    tape.linear(x, w, Some(b))
}

/// Pre-norm residual transformer block; returns the block output and the
/// normalized input that feeds attention.
pub(crate) fn transformer_block(
    tape: &mut Tape<'_>,
    prefix: &str,
    x: Var,
    heads: usize,
    causal: bool,
    config: &ModelConfig,
) -> Result<(Var, Var)> {
    let normed = layer_norm(tape, x, &format!("{prefix}.ln_1"), config.layer_norm_eps)?;
    let q = affine(tape, normed, &format!("{prefix}.attn.q"))?;
    let k = affine(tape, normed, &format!("{prefix}.attn.k"))?;
    let v = affine(tape, normed, &format!("{prefix}.attn.v"))?;
    let mixed = tape.attention(q, k, v, heads, causal)?;
    let attn_out = affine(tape, mixed, &format!("{prefix}.attn.out"))?;
    let x = tape.add(x, attn_out)?;
    let h = layer_norm(tape, x, &format!("{prefix}.ln_2"), config.layer_norm_eps)?;
    let f = affine(tape, h, &format!("{prefix}.mlp.fc"))?;
    let f = tape.activation(f, config.activation);
    let f = affine(tape, f, &format!("{prefix}.mlp.proj"))?;
    Ok((tape.add(x, f)?, normed))
}

/// Parameter-name prefix shared by all encoder weights of a tower.
pub fn tower_prefix(modality: Modality) -> &'static str {
    match modality {
        Modality::Image => "visual.",
        Modality::Text => "text.",
    }
}

pub fn describe(config: &ModelConfig) -> String {
    format!(
        "image {}px/{} L{} H{} W{}, text L{} H{} W{} ctx{}, proj {}",
        config.image_resolution,
        config.patch_size,
        config.image_layers,
        config.image_heads,
        config.image_width,
        config.text_layers,
        config.text_heads,
        config.text_width,
        config.context_length,
        config.projection_dim
    )
}
