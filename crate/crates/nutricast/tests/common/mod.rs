//! Shared fixtures: synthetic items prepared in memory and small checkpoints.
#![allow(dead_code)]

use nutricast_core::classifier::Variant;
use nutricast_core::data::split_dataset;
use nutricast_core::data::synth::{synth_generate, SynthItem, SynthMode};
use nutricast_core::encoders::{ModelConfig, Preprocessing, Vocabulary};
use nutricast_core::pipeline::{self, prepare_item, PreparedItem};
use nutricast_core::training::{train, Checkpoint, TrainConfig, CHECKPOINT_VERSION};

pub struct Fixture {
    pub synth: Vec<SynthItem>,
    pub prepared: Vec<PreparedItem>,
    pub checkpoint: Checkpoint,
}

pub fn prepare(synth: &[SynthItem], vocab: &Vocabulary, config: &ModelConfig) -> Vec<PreparedItem> {
    let pre = Preprocessing::standard(config.image_resolution);
    synth
        .iter()
        .map(|s| prepare_item(&s.item, &s.image, vocab, config.context_length, &pre).unwrap())
        .collect()
}

/// Tiny-preset model trained (or not, with `epochs = 0`) on synthetic items.
pub fn fixture(
    n: usize,
    data_seed: u64,
    mode: SynthMode,
    variant: Variant,
    nutrients: &[&str],
    seed: u64,
    tweak: impl FnOnce(&mut TrainConfig),
) -> Fixture {
    let synth = synth_generate(n, data_seed, mode).unwrap();
    let ids: Vec<String> = synth.iter().map(|s| s.item.id.clone()).collect();
    let split = split_dataset(&ids, 0.8, seed).unwrap();
    let vocab = Vocabulary::build(
        synth.iter().filter(|s| split.is_train(&s.item.id)).map(|s| s.item.ingredients.as_str()),
        1,
    );
    let config = ModelConfig::tiny(vocab.len());
    let prepared = prepare(&synth, &vocab, &config);
    let (train_items, _) = pipeline::split_sides(&prepared, &split).unwrap();
    let names: Vec<String> = nutrients.iter().map(|s| s.to_string()).collect();
    let binning = pipeline::fit_binning(&train_items, &names, None).unwrap();
    let examples = pipeline::label_examples(&train_items, &binning).unwrap();
    let mut tc = TrainConfig::tiny(variant, names, seed);
    tweak(&mut tc);
    let model = pipeline::model_for(config.clone(), variant, &binning, seed).unwrap();
    let outcome = train(model, &examples, &tc).unwrap();
    let checkpoint = Checkpoint {
        version: CHECKPOINT_VERSION,
        model: outcome.model,
        vocabulary: vocab,
        binning,
        preprocessing: Preprocessing::standard(config.image_resolution),
        train_config: Some(tc),
        seed,
        history: outcome.history,
        split: Some(split),
    };
    Fixture {
        synth,
        prepared,
        checkpoint,
    }
}

/// Bitwise view of a confidence vector.
pub fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}
