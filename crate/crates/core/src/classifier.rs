//! MLP heads over encoder embeddings and the four model variants.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{
    self, image_graph, patchify, text_graph, Embedding, ImageTrace, Modality, ModelConfig, TextTrace,
};
use crate::error::{bail, Error, Result};
use crate::nn::{self, Activation};
use crate::tape::{Tape, Var};
use crate::tensor::{ParamGroup, ParamStore, Tensor};

/// Which embeddings feed the head and whether the encoders train.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    /// Frozen encoders, image embedding.
    VF,
    /// Frozen encoders, text embedding.
    LF,
    /// Frozen encoders, image ‖ text.
    VLF,
    /// Encoders fine-tuned jointly with the head, image ‖ text.
    VL,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::VF, Variant::LF, Variant::VLF, Variant::VL];

    pub fn uses_image(self) -> bool {
        !matches!(self, Variant::LF)
    }

    pub fn uses_text(self) -> bool {
        !matches!(self, Variant::VF)
    }

    pub fn trains_encoders(self) -> bool {
        matches!(self, Variant::VL)
    }

    pub fn input_dim(self, projection_dim: usize) -> usize {
        match self {
            Variant::VF | Variant::LF => projection_dim,
            Variant::VLF | Variant::VL => 2 * projection_dim,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Variant::VF => "VF",
            Variant::LF => "LF",
            Variant::VLF => "VLF",
            Variant::VL => "VL",
        };
        f.write_str(s)
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "VF" => Ok(Variant::VF),
            "LF" => Ok(Variant::LF),
            "VLF" | "LVF" => Ok(Variant::VLF),
            "VL" => Ok(Variant::VL),
            _ => bail!(Config, "unknown variant `{}` (expected VF, LF, VLF or VL)", s),
        }
    }
}

/// One nutrient's classifier head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub nutrient: String,
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub class_count: usize,
    pub activation: Activation,
}

/// Hidden widths of the head.
pub const HEAD_HIDDEN: [usize; 2] = [64, 16];

impl HeadConfig {
    pub fn new(nutrient: &str, input_dim: usize, class_count: usize, activation: Activation) -> Result<Self> {
        let h = Self {
            nutrient: nutrient.to_string(),
            input_dim,
            hidden: HEAD_HIDDEN.to_vec(),
            class_count,
            activation,
        };
        h.validate()?;
        Ok(h)
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_count < 2 {
            bail!(Config, "head `{}` needs at least 2 classes, got {}", self.nutrient, self.class_count);
        }
        if self.input_dim == 0 || self.hidden.contains(&0) {
            bail!(Config, "head `{}` has a zero-width layer", self.nutrient);
        }
        if self.nutrient.is_empty() {
            bail!(Config, "head needs a nutrient name");
        }
        Ok(())
    }

    pub fn prefix(&self) -> String {
        format!("head.{}", self.nutrient)
    }

    fn layer_names(&self) -> Vec<String> {
        let mut names: Vec<String> = (0..self.hidden.len()).map(|i| format!("{}.fc{}", self.prefix(), i + 1)).collect();
        names.push(format!("{}.out", self.prefix()));
        names
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::new();
        let mut prev = self.input_dim;
        for &h in self.hidden.iter().chain(core::iter::once(&self.class_count)) {
            dims.push((prev, h));
            prev = h;
        }
        dims
    }
}

pub fn init_head_params(head: &HeadConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
    head.validate()?;
    for (name, (fan_in, fan_out)) in head.layer_names().into_iter().zip(head.layer_dims()) {
        store.insert(
            &format!("{name}.weight"),
            Tensor::randn(&[fan_in, fan_out], 1.0 / libm::sqrt(fan_in as f64), rng),
            true,
            ParamGroup::Head,
        )?;
        store.insert(&format!("{name}.bias"), Tensor::zeros(&[fan_out]), true, ParamGroup::Head)?;
    }
    Ok(())
}

/// Head logits for `x: batch × input_dim`.
pub fn head_graph(tape: &mut Tape<'_>, head: &HeadConfig, x: Var) -> Result<Var> {
    if tape.dims(x).1 != head.input_dim {
        bail!(
            Dimension,
            "head `{}` expects {} inputs, got {}",
            head.nutrient,
            head.input_dim,
            tape.dims(x).1
        );
    }
    let names = head.layer_names();
    let last = names.len() - 1;
    let mut h = x;
    for (i, name) in names.iter().enumerate() {
        h = encoders::affine(tape, h, name)?;
        if i < last {
            h = tape.activation(h, head.activation);
        }
    }
    Ok(h)
}

/// Class confidences (softmax of the head logits) for one input vector.
pub fn mlp_forward(x: &[f64], head: &HeadConfig, params: &ParamStore) -> Result<Vec<f64>> {
    let mut tape = Tape::new(params);
    let xi = tape.input_matrix(1, x.len(), x.to_vec());
    let logits = head_graph(&mut tape, head, xi)?;
    nn::softmax(tape.value(logits), 1.0)
}

/// `-ln(confidence of the true class)`.
pub fn cross_entropy(confidences: &[f64], true_class: usize) -> Result<f64> {
    let Some(&p) = confidences.get(true_class) else {
        bail!(Domain, "class {} out of range for {} classes", true_class, confidences.len());
    };
    let total: f64 = confidences.iter().sum();
    if confidences.iter().any(|c| !(*c >= 0.0)) || (total - 1.0).abs() > 1e-6 {
        bail!(Domain, "confidences are not a probability distribution");
    }
    Ok(-libm::log(p))
}

/// Mean cross-entropy over a batch.
pub fn batch_cross_entropy(confidences: &[Vec<f64>], classes: &[usize]) -> Result<f64> {
    if confidences.len() != classes.len() || classes.is_empty() {
        bail!(Dimension, "{} predictions for {} labels", confidences.len(), classes.len());
    }
    let mut total = 0.0;
    for (c, &t) in confidences.iter().zip(classes) {
        total += cross_entropy(c, t)?;
    }
    Ok(total / classes.len() as f64)
}

/// Head input for a variant: one embedding or `image ‖ text`.
pub fn assemble_input(variant: Variant, image: Option<&Embedding>, text: Option<&Embedding>) -> Result<Vec<f64>> {
    let need = |e: Option<&Embedding>, m: &str| -> Result<Vec<f64>> {
        match e {
            Some(e) => Ok(e.values.clone()),
            None => bail!(Contract, "variant {} needs the {} embedding", variant, m),
        }
    };
    Ok(match variant {
        Variant::VF => need(image, "image")?,
        Variant::LF => need(text, "text")?,
        Variant::VLF | Variant::VL => {
            let mut v = need(image, "image")?;
            v.extend(need(text, "text")?);
            v
        }
    })
}

/// Encoder inputs of one item.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ItemInput {
    /// Preprocessed `H × W × 3` image.
    pub image: Option<Tensor>,
    /// Full-length token ids.
    pub tokens: Option<Vec<u32>>,
}

/// Encoders, variant and per-nutrient heads over one parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct NutrientModel {
    pub config: ModelConfig,
    pub variant: Variant,
    pub heads: Vec<HeadConfig>,
    pub params: ParamStore,
}

#[derive(Debug, Clone, Copy)]
pub struct FeatureTrace {
    pub features: Var,
    pub image: Option<ImageTrace>,
    pub text: Option<TextTrace>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub class: usize,
    pub confidences: Vec<f64>,
}

/// Lowest index of the maximum.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

impl NutrientModel {
    /// Fresh model: encoders then heads (in the given order) drawn from one
    /// seeded stream.
    pub fn new(config: ModelConfig, variant: Variant, heads: &[(String, usize)], seed: u64) -> Result<Self> {
        config.validate()?;
        if heads.is_empty() {
            bail!(Config, "a model needs at least one nutrient head");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        encoders::init_encoder_params(&config, &mut params, variant.trains_encoders(), &mut rng)?;
        let mut head_configs = Vec::new();
        for (nutrient, classes) in heads {
            if head_configs.iter().any(|h: &HeadConfig| &h.nutrient == nutrient) {
                bail!(Config, "duplicate head for `{}`", nutrient);
            }
            let head = HeadConfig::new(
                nutrient,
                variant.input_dim(config.projection_dim),
                *classes,
                config.activation,
            )?;
            init_head_params(&head, &mut params, &mut rng)?;
            head_configs.push(head);
        }
        Ok(Self {
            config,
            variant,
            heads: head_configs,
            params,
        })
    }

    /// Check that the parameters are exactly those (names, order, shapes)
    /// that `new` creates for this configuration, variant and head set.
    pub fn validate(&self) -> Result<()> {
        for h in &self.heads {
            h.validate()?;
            if h.input_dim != self.variant.input_dim(self.config.projection_dim) {
                bail!(Contract, "head `{}` reads {} features, variant {} supplies {}", h.nutrient, h.input_dim, self.variant, self.variant.input_dim(self.config.projection_dim));
            }
        }
        let heads: Vec<(String, usize)> = self.heads.iter().map(|h| (h.nutrient.clone(), h.class_count)).collect();
        let reference = Self::new(self.config.clone(), self.variant, &heads, 0)?;
        if reference.heads != self.heads {
            bail!(Contract, "head configuration differs from the one the model config implies");
        }
        if reference.params.len() != self.params.len() {
            bail!(Contract, "expected {} parameters, found {}", reference.params.len(), self.params.len());
        }
        for ((_, want), (_, got)) in reference.params.iter().zip(self.params.iter()) {
            if want.name != got.name || want.tensor.shape() != got.tensor.shape() || want.group != got.group {
                bail!(
                    Contract,
                    "parameter `{}` {:?} where `{}` {:?} is expected",
                    got.name,
                    got.tensor.shape(),
                    want.name,
                    want.tensor.shape()
                );
            }
        }
        Ok(())
    }

    pub fn head(&self, nutrient: &str) -> Result<&HeadConfig> {
        match self.heads.iter().find(|h| h.nutrient == nutrient) {
            Some(h) => Ok(h),
            None => bail!(Contract, "model has no head for `{}`", nutrient),
        }
    }

    /// Embeddings this variant consumes.
    pub fn embed(&self, input: &ItemInput) -> Result<(Option<Embedding>, Option<Embedding>)> {
        let image = if self.variant.uses_image() {
            let Some(img) = &input.image else {
                bail!(Contract, "variant {} needs an image", self.variant);
            };
            Some(encoders::encode_image(img, &self.config, &self.params)?)
        } else {
            None
        };
        let text = if self.variant.uses_text() {
            let Some(tokens) = &input.tokens else {
                bail!(Contract, "variant {} needs ingredient tokens", self.variant);
            };
            Some(encoders::encode_text(tokens, &self.config, &self.params)?)
        } else {
            None
        };
        Ok((image, text))
    }

    pub fn predict(&self, nutrient: &str, input: &ItemInput) -> Result<Prediction> {
        let head = self.head(nutrient)?;
        let (image, text) = self.embed(input)?;
        let x = assemble_input(self.variant, image.as_ref(), text.as_ref())?;
        let confidences = mlp_forward(&x, head, &self.params)?;
        Ok(Prediction {
            class: argmax(&confidences),
            confidences,
        })
    }

    /// Predict from cached embeddings (frozen variants).
    pub fn predict_from_embeddings(
        &self,
        nutrient: &str,
        image: Option<&Embedding>,
        text: Option<&Embedding>,
    ) -> Result<Prediction> {
        let head = self.head(nutrient)?;
        let x = assemble_input(self.variant, image, text)?;
        let confidences = mlp_forward(&x, head, &self.params)?;
        Ok(Prediction {
            class: argmax(&confidences),
            confidences,
        })
    }
}

/// Record the feature path of one item on `tape`: encoders as the variant
/// requires, then concatenation.
pub fn features_graph(
    tape: &mut Tape<'_>,
    config: &ModelConfig,
    variant: Variant,
    input: &ItemInput,
) -> Result<FeatureTrace> {
    let image = if variant.uses_image() {
        let Some(img) = &input.image else {
            bail!(Contract, "variant {} needs an image", variant);
        };
        let patches = patchify(img, config.patch_size)?;
        Some(image_graph(tape, config, &patches)?)
    } else {
        None
    };
    let text = if variant.uses_text() {
        let Some(tokens) = &input.tokens else {
            bail!(Contract, "variant {} needs ingredient tokens", variant);
        };
        Some(text_graph(tape, config, tokens)?)
    } else {
        None
    };
    let features = match (image, text) {
        (Some(i), Some(t)) => tape.concat_cols(&[i.embedding, t.embedding])?,
        (Some(i), None) => i.embedding,
        (None, Some(t)) => t.embedding,
        (None, None) => bail!(Contract, "variant {} uses no modality", variant),
    };
    Ok(FeatureTrace { features, image, text })
}

/// Modality a frozen-feature cache entry belongs to.
pub fn modalities(variant: Variant) -> Vec<Modality> {
    let mut m = vec![];
    if variant.uses_image() {
        m.push(Modality::Image);
    }
    if variant.uses_text() {
        m.push(Modality::Text);
    }
    m
}
