//! Training loops for frozen-feature and jointly fine-tuned models, the
//! embedding cache and the checkpoint record.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classifier::{features_graph, head_graph, HeadConfig, ItemInput, NutrientModel, Variant};
use crate::data::{BinningSpec, SplitAssignment};
use crate::encoders::{describe, Embedding, ModelConfig, Preprocessing, Vocabulary, LOG_TEMPERATURE};
use crate::error::{bail, Error, Result};
use crate::optim::AdamState;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::{ParamGroup, ParamId, ParamStore};

/// Checkpoint format version understood by this build.
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Constant,
    /// Cosine decay from the base rates to zero over the run.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    pub nutrients: Vec<String>,
    pub lr_head: f64,
    pub lr_encoders: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Stop after this many epochs without a lower mean training loss.
    pub patience: Option<usize>,
    pub weight_decay: f64,
    /// Global gradient-norm clip.
    pub grad_clip: Option<f64>,
    pub schedule: Schedule,
    /// Weight of the contrastive loss added to cross-entropy (joint variant
    /// only); 0 trains on cross-entropy alone.
    pub contrastive_weight: f64,
    /// Permit a training set smaller than one batch.
    pub allow_short_batch: bool,
}

impl TrainConfig {
    /// The published rates, batch size and epoch count.
    pub fn paper(variant: Variant, nutrients: Vec<String>, seed: u64) -> Self {
        Self {
            variant,
            nutrients,
            lr_head: 1e-3,
            lr_encoders: 1e-7,
            batch_size: 128,
            epochs: 100,
            seed,
            patience: None,
            weight_decay: 0.0,
            grad_clip: None,
            schedule: Schedule::Constant,
            contrastive_weight: 0.0,
            allow_short_batch: true,
        }
    }

    /// Desk-scale run settings paired with [`ModelConfig::tiny`].
    pub fn tiny(variant: Variant, nutrients: Vec<String>, seed: u64) -> Self {
        Self {
            batch_size: 32,
            epochs: 50,
            ..Self::paper(variant, nutrients, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let rate_ok = |r: f64| r.is_finite() && r >= 0.0;
        if !rate_ok(self.lr_head) || !rate_ok(self.lr_encoders) || !rate_ok(self.weight_decay) {
            bail!(Config, "learning rates and weight decay must be finite and non-negative");
        }
        if self.batch_size == 0 {
            bail!(Config, "batch size must be at least 1");
        }
        if self.nutrients.is_empty() {
            bail!(Config, "no nutrient channel selected");
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            bail!(Config, "gradient clip must be positive");
        }
        if !(self.contrastive_weight >= 0.0) {
            bail!(Config, "contrastive weight must be non-negative");
        }
        if self.contrastive_weight > 0.0 && !self.variant.trains_encoders() {
            bail!(Config, "contrastive loss needs trainable encoders (variant VL)");
        }
        Ok(())
    }
}

/// One labelled training item. Nutrients whose value was excluded by binning
/// are simply absent from `labels`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub id: String,
    pub input: ItemInput,
    pub labels: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
}

/// Everything needed to rebuild a trained model and interpret its outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub model: NutrientModel,
    pub vocabulary: Vocabulary,
    pub binning: Vec<BinningSpec>,
    pub preprocessing: Preprocessing,
    pub train_config: Option<TrainConfig>,
    pub seed: u64,
    pub history: Vec<LossRecord>,
    /// Train/test membership the binning and training used.
    pub split: Option<SplitAssignment>,
}

impl Checkpoint {
    pub fn binning_for(&self, nutrient: &str) -> Result<&BinningSpec> {
        match self.binning.iter().find(|b| b.nutrient == nutrient) {
            Some(b) => Ok(b),
            None => bail!(Contract, "checkpoint has no binning for `{}`", nutrient),
        }
    }
}

/// Hex SHA-256 over the encoder configuration and every encoder parameter.
pub fn encoder_hash(config: &ModelConfig, params: &ParamStore) -> String {
    let mut h = Sha256::new();
    h.update(describe(config).as_bytes());
    for (_, p) in params.iter().filter(|(_, p)| p.group == ParamGroup::Encoder) {
        h.update(p.name.as_bytes());
        for d in p.tensor.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in p.tensor.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex(&h.finalize())
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CachedEmbeddings {
    pub image: Option<Embedding>,
    pub text: Option<Embedding>,
}

/// Frozen-encoder embeddings keyed by item id.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingCache {
    pub encoder_hash: String,
    pub entries: BTreeMap<String, CachedEmbeddings>,
}

impl EmbeddingCache {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entry for `id` after checking the cache against `model`. Callers
    /// looking up many items should `check` once and use [`Self::entry`].
    pub fn get(&self, model: &NutrientModel, id: &str) -> Result<&CachedEmbeddings> {
        self.check(model)?;
        self.entry(id)
    }

    /// Entry for `id` without the encoder check.
    pub fn entry(&self, id: &str) -> Result<&CachedEmbeddings> {
        match self.entries.get(id) {
            Some(e) => Ok(e),
            None => bail!(Contract, "no cached embedding for item `{}`", id),
        }
    }

    pub fn check(&self, model: &NutrientModel) -> Result<()> {
        let current = encoder_hash(&model.config, &model.params);
        if current != self.encoder_hash {
            return Err(Error::StaleCache(format!(
                "cache built for encoders {}, model has {}",
                &self.encoder_hash[..12],
                &current[..12]
            )));
        }
        Ok(())
    }
}

/// Embed every item once with the frozen encoders.
pub fn precompute_embeddings<'a, I>(model: &NutrientModel, items: I) -> Result<EmbeddingCache>
where
    I: IntoIterator<Item = (&'a str, &'a ItemInput)>,
{
    if model.variant.trains_encoders() {
        bail!(Contract, "variant {} fine-tunes its encoders; embeddings cannot be cached", model.variant);
    }
    let mut entries = BTreeMap::new();
    for (id, input) in items {
        let (image, text) = model.embed(input)?;
        if entries.insert(String::from(id), CachedEmbeddings { image, text }).is_some() {
            bail!(Validation, "duplicate item id `{}`", id);
        }
    }
    Ok(EmbeddingCache {
        encoder_hash: encoder_hash(&model.config, &model.params),
        entries,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: NutrientModel,
    pub history: Vec<LossRecord>,
    pub epochs_run: usize,
}

/// Labelled rows of one nutrient within a batch.
fn head_loss(tape: &mut Tape<'_>, head: &HeadConfig, features: Var, batch: &[&TrainExample]) -> Result<Option<Var>> {
    let (rows, targets): (Vec<usize>, Vec<usize>) = batch
        .iter()
        .enumerate()
        .filter_map(|(r, ex)| ex.labels.get(&head.nutrient).map(|&c| (r, c)))
        .unzip();
    if rows.is_empty() {
        return Ok(None);
    }
    let selected = if rows.len() == batch.len() {
        features
    } else {
        tape.gather(features, &rows)?
    };
    let logits = head_graph(tape, head, selected)?;
    Ok(Some(tape.cross_entropy(logits, &targets)?))
}

/// Record the training loss of `batch` on `tape`: the sum over heads of the
/// mean cross-entropy plus `contrastive_weight` times the CLIP loss of the
/// batch (joint variant only). Frozen variants read features from `cache`.
pub fn loss_graph(
    tape: &mut Tape<'_>,
    model: &NutrientModel,
    batch: &[&TrainExample],
    contrastive_weight: f64,
    cache: Option<&EmbeddingCache>,
) -> Result<Var> {
    let mut image_rows = Vec::new();
    let mut text_rows = Vec::new();
    let features = match cache {
        Some(cache) => {
            let dim = model.variant.input_dim(model.config.projection_dim);
            let mut data = Vec::with_capacity(batch.len() * dim);
            for ex in batch {
                let e = cache.entry(&ex.id)?;
                data.extend(crate::classifier::assemble_input(model.variant, e.image.as_ref(), e.text.as_ref())?);
            }
            tape.input_matrix(batch.len(), dim, data)
        }
        None => {
            let mut rows = Vec::with_capacity(batch.len());
            for ex in batch {
                let trace = features_graph(tape, &model.config, model.variant, &ex.input)?;
                rows.push(trace.features);
                if let (Some(i), Some(t)) = (trace.image, trace.text) {
                    image_rows.push(i.embedding);
                    text_rows.push(t.embedding);
                }
            }
            tape.concat_rows(&rows)?
        }
    };
    let mut terms = Vec::new();
    for head in &model.heads {
        if let Some(l) = head_loss(tape, head, features, batch)? {
            terms.push(l);
        }
    }
    if contrastive_weight > 0.0 && model.variant.trains_encoders() && image_rows.len() > 1 {
        let images = tape.concat_rows(&image_rows)?;
        let texts = tape.concat_rows(&text_rows)?;
        let log_t = tape.param(LOG_TEMPERATURE)?;
        let clip = tape.clip_loss(images, texts, log_t)?;
        terms.push(tape.scale(clip, contrastive_weight));
    }
    let Some(&first) = terms.first() else {
        bail!(Contract, "batch has no labelled item for any trained nutrient");
    };
    let mut loss = first;
    for &t in &terms[1..] {
        loss = tape.add(loss, t)?;
    }
    Ok(loss)
}

fn batch_gradients(
    model: &NutrientModel,
    config: &TrainConfig,
    batch: &[&TrainExample],
    cache: Option<&EmbeddingCache>,
) -> Result<(f64, Gradients)> {
    let mut tape = Tape::new(&model.params);
    let loss = loss_graph(&mut tape, model, batch, config.contrastive_weight, cache)?;
    let value = tape.scalar(loss)?;
    Ok((value, tape.backward(loss)?))
}

fn clip_gradients(grads: &mut Gradients, slots: usize, max_norm: f64) {
    let mut total = 0.0;
    for i in 0..slots {
        if let Some(g) = grads.param(ParamId(i)) {
            total += g.iter().map(|v| v * v).sum::<f64>();
        }
    }
    let norm = libm::sqrt(total);
    if norm > max_norm {
        let s = max_norm / norm;
        for i in 0..slots {
            if let Some(g) = grads.param_mut(ParamId(i)) {
                g.iter_mut().for_each(|v| *v *= s);
            }
        }
    }
}

/// Optimize `model` on `examples`. Frozen variants train the heads on
/// embeddings computed once up front; the joint variant backpropagates
/// through both encoders in every step.
pub fn train(mut model: NutrientModel, examples: &[TrainExample], config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if config.variant != model.variant {
        bail!(Config, "training config is for {}, model is {}", config.variant, model.variant);
    }
    for n in &config.nutrients {
        model.head(n)?;
    }
    if examples.is_empty() {
        bail!(Domain, "no training examples");
    }
    if examples.len() < config.batch_size && !config.allow_short_batch {
        bail!(
            Config,
            "{} training items do not fill one batch of {}; enable short batches",
            examples.len(),
            config.batch_size
        );
    }
    // heads outside the requested channels stay untouched
    let trained: Vec<String> = config.nutrients.clone();
    for p in model.params.iter_mut() {
        if p.group == ParamGroup::Head {
            p.trainable = trained.iter().any(|n| p.name.starts_with(&format!("head.{n}.")));
        }
    }
    let all_heads = core::mem::take(&mut model.heads);
    model.heads = all_heads.iter().filter(|h| trained.contains(&h.nutrient)).cloned().collect();

    let cache = if model.variant.trains_encoders() {
        None
    } else {
        Some(precompute_embeddings(&model, examples.iter().map(|e| (e.id.as_str(), &e.input)))?)
    };

    let mut adam = AdamState::new(&model.params, config.lr_head, config.lr_encoders);
    adam.weight_decay = config.weight_decay;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let steps_per_epoch = examples.len().div_ceil(config.batch_size);
    let total_steps = (steps_per_epoch * config.epochs).max(1);
    let mut history = Vec::with_capacity(total_steps);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut best = f64::INFINITY;
    let mut stale = 0;
    let mut epochs_run = 0;
    let mut step = 0;

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&TrainExample> = chunk.iter().map(|&i| &examples[i]).collect();
            let (loss, mut grads) = batch_gradients(&model, config, &batch, cache.as_ref())?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, step, loss });
            }
            if let Some(c) = config.grad_clip {
                clip_gradients(&mut grads, model.params.len(), c);
            }
            let scale = match config.schedule {
                Schedule::Constant => 1.0,
                Schedule::Cosine => 0.5 * (1.0 + libm::cos(core::f64::consts::PI * step as f64 / total_steps as f64)),
            };
            adam.step(&mut model.params, &grads, scale)?;
            history.push(LossRecord { epoch, step, loss });
            epoch_loss += loss;
            step += 1;
        }
        epochs_run += 1;
        let mean = epoch_loss / steps_per_epoch as f64;
        if let Some(patience) = config.patience {
            if mean < best {
                best = mean;
                stale = 0;
            } else {
                stale += 1;
                if stale >= patience {
                    break;
                }
            }
        }
    }

    model.heads = all_heads;
    let encoders_trainable = model.variant.trains_encoders();
    for p in model.params.iter_mut() {
        p.trainable = match p.group {
            ParamGroup::Head => true,
            ParamGroup::Encoder => encoders_trainable,
        };
    }
    Ok(TrainOutcome {
        model,
        history,
        epochs_run,
    })
}

/// Class confidences for each input; frozen variants may pass a cache.
pub fn predict_all(
    model: &NutrientModel,
    nutrient: &str,
    items: &[(&str, &ItemInput)],
    cache: Option<&EmbeddingCache>,
) -> Result<Vec<Vec<f64>>> {
    if let Some(c) = cache {
        c.check(model)?;
    }
    items
        .iter()
        .map(|(id, input)| match cache {
            Some(c) => {
                let e = c.entry(id)?;
                Ok(model.predict_from_embeddings(nutrient, e.image.as_ref(), e.text.as_ref())?.confidences)
            }
            None => Ok(model.predict(nutrient, input)?.confidences),
        })
        .collect()
}
