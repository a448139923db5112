use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{layer_norm, transformer_block, Embedding, Modality, ModelConfig};
use crate::error::{bail, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{ParamStore, Tensor};

/// 8-bit RGB raster, row-major, channels interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height * 3 {
            bail!(Dimension, "{}x{} RGB image needs {} bytes, got {}", width, height, width * height * 3, pixels.len());
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut pixels = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            pixels.extend_from_slice(&rgb);
        }
        Self { width, height, pixels }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let o = (y * self.width + x) * 3;
        [self.pixels[o], self.pixels[o + 1], self.pixels[o + 2]]
    }

    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let o = (y * self.width + x) * 3;
        self.pixels[o..o + 3].copy_from_slice(&rgb);
    }
}

/// Pixel standardization applied after resizing; stored with checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preprocessing {
    pub resolution: usize,
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Preprocessing {
    /// CLIP-lineage channel statistics.
    pub fn standard(resolution: usize) -> Self {
        Self {
            resolution,
            mean: [0.481_454_66, 0.457_827_5, 0.408_210_73],
            std: [0.268_629_54, 0.261_302_58, 0.275_777_11],
        }
    }
}

/// Scale to `[0, 1]` and standardize per channel. The image must already be
/// resized to the configured resolution.
pub fn preprocess(image: &RgbImage, pre: &Preprocessing) -> Result<Tensor> {
    if image.width != pre.resolution || image.height != pre.resolution {
        bail!(
            Contract,
            "image is {}x{}, expected {}x{} after resizing",
            image.width,
            image.height,
            pre.resolution,
            pre.resolution
        );
    }
    let data = image
        .pixels
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let c = i % 3;
            (p as f64 / 255.0 - pre.mean[c]) / pre.std[c]
        })
        .collect();
    Tensor::new(vec![image.height, image.width, 3], data)
}

/// Split an `H × W × 3` tensor into non-overlapping `P × P` patches in
/// row-major grid order; each patch is flattened `(y, x, channel)`.
pub fn patchify(image: &Tensor, patch_size: usize) -> Result<Tensor> {
    let [h, w, c] = image.shape() else {
        bail!(Dimension, "expected an H×W×3 image, got shape {:?}", image.shape());
    };
    let (h, w, c) = (*h, *w, *c);
    if c != 3 {
        bail!(Dimension, "expected 3 channels, got {}", c);
    }
    if patch_size == 0 || h % patch_size != 0 || w % patch_size != 0 {
        bail!(Contract, "{}x{} image is not divisible into {}px patches; resize first", w, h, patch_size);
    }
    let (gh, gw) = (h / patch_size, w / patch_size);
    let plen = patch_size * patch_size * 3;
    let src = image.data();
    let mut out = Vec::with_capacity(gh * gw * plen);
    for py in 0..gh {
        for px in 0..gw {
            for y in 0..patch_size {
                let row = (py * patch_size + y) * w + px * patch_size;
                out.extend_from_slice(&src[row * 3..(row + patch_size) * 3]);
            }
        }
    }
    Tensor::from_rows(gh * gw, plen, out)
}

/// Handles into an image-encoder forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ImageTrace {
    /// Layer-normalized tokens entering attention in the last transformer
    /// block (class token first), `tokens × width`.
    pub last_block_tokens: Var,
    pub embedding: Var,
}

pub fn image_graph(tape: &mut Tape<'_>, config: &ModelConfig, patches: &Tensor) -> Result<ImageTrace> {
    let (n, plen) = patches.matrix_dims()?;
    if n + 1 != config.image_tokens() || plen != config.patch_len() {
        bail!(
            Contract,
            "expected {} patches of length {}, got {} of length {}",
            config.image_tokens() - 1,
            config.patch_len(),
            n,
            plen
        );
    }
    let x = tape.input(patches)?;
    let w_patch = tape.param("visual.patch_embed.weight")?;
    let embedded = tape.linear(x, w_patch, None)?;
    let cls = tape.param("visual.class_embedding")?;
    let tokens = tape.concat_rows(&[cls, embedded])?;
    let pos = tape.param("visual.positional_embedding")?;
    let tokens = tape.add(tokens, pos)?;
    let mut h = layer_norm(tape, tokens, "visual.ln_pre", config.layer_norm_eps)?;
    let mut last_block_tokens = h;
    for i in 0..config.image_layers {
        (h, last_block_tokens) = transformer_block(
            tape,
            &alloc::format!("visual.blocks.{i}"),
            h,
            config.image_heads,
            false,
            config,
        )?;
    }
    let cls_out = tape.slice_rows(h, 0, 1)?;
    let cls_out = layer_norm(tape, cls_out, "visual.ln_post", config.layer_norm_eps)?;
    let proj = tape.param("visual.proj")?;
    let embedding = tape.linear(cls_out, proj, None)?;
    Ok(ImageTrace {
        last_block_tokens,
        embedding,
    })
}

/// Embed a preprocessed `H × W × 3` image.
pub fn encode_image(image: &Tensor, config: &ModelConfig, params: &ParamStore) -> Result<Embedding> {
    let [h, w, _] = image.shape() else {
        bail!(Contract, "encode_image expects a preprocessed H×W×3 tensor");
    };
    if *h != config.image_resolution || *w != config.image_resolution {
        bail!(Contract, "image is {}x{}, model expects {}px", w, h, config.image_resolution);
    }
    let patches = patchify(image, config.patch_size)?;
    let mut tape = Tape::new(params);
    let trace = image_graph(&mut tape, config, &patches)?;
    Embedding::new(tape.value(trace.embedding).to_vec(), Modality::Image)
}
