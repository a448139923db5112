//! Glue from food items to model inputs, labels and reports.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::classifier::{ItemInput, NutrientModel};
use crate::data::{bin_nutrient, BinningSpec, FoodItem, SplitAssignment};
use crate::encoders::{preprocess, tokenize, Preprocessing, RgbImage, Vocabulary};
use crate::error::{bail, Result};
use crate::evaluation::{evaluate_nutrient, EvalItem, EvalReport};
use crate::training::{predict_all, EmbeddingCache, TrainExample};

/// An item with encoder-ready inputs and its raw nutrient values.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedItem {
    pub id: String,
    pub category: String,
    pub input: ItemInput,
    pub values: BTreeMap<String, f64>,
}

/// Preprocess the (already resized) image and tokenize the ingredients.
pub fn prepare_item(
    item: &FoodItem,
    image: &RgbImage,
    vocab: &Vocabulary,
    context_length: usize,
    pre: &Preprocessing,
) -> Result<PreparedItem> {
    Ok(PreparedItem {
        id: item.id.clone(),
        category: item.category_label().into(),
        input: ItemInput {
            image: Some(preprocess(image, pre)?),
            tokens: Some(tokenize(&item.ingredients, vocab, context_length)?),
        },
        values: item.nutrients.iter().map(|(k, v)| (k.clone(), v.value)).collect(),
    })
}

/// Items of one side of a split, in split order.
pub fn select<'a>(items: &'a [PreparedItem], ids: &[String]) -> Result<Vec<&'a PreparedItem>> {
    let index: BTreeMap<&str, &PreparedItem> = items.iter().map(|i| (i.id.as_str(), i)).collect();
    ids.iter()
        .map(|id| match index.get(id.as_str()) {
            Some(i) => Ok(*i),
            None => bail!(Contract, "split references unknown item `{}`", id),
        })
        .collect()
}

/// Binning specs fitted on the training items only.
pub fn fit_binning(
    train: &[&PreparedItem],
    nutrients: &[String],
    k_override: Option<usize>,
) -> Result<Vec<BinningSpec>> {
    nutrients
        .iter()
        .map(|n| {
            let values: Vec<f64> = train.iter().filter_map(|i| i.values.get(n).copied()).collect();
            Ok(bin_nutrient(n, &values, k_override)?.1)
        })
        .collect()
}

/// Training examples labelled by `specs`; excluded values carry no label.
pub fn label_examples(items: &[&PreparedItem], specs: &[BinningSpec]) -> Result<Vec<TrainExample>> {
    items
        .iter()
        .map(|it| {
            let mut labels = BTreeMap::new();
            for spec in specs {
                if let Some(&v) = it.values.get(&spec.nutrient) {
                    if let Some(c) = spec.assign(v)?.class() {
                        labels.insert(spec.nutrient.clone(), c);
                    }
                }
            }
            Ok(TrainExample {
                id: it.id.clone(),
                input: it.input.clone(),
                labels,
            })
        })
        .collect()
}

/// Fresh model with one head per spec.
pub fn model_for(
    config: crate::encoders::ModelConfig,
    variant: crate::classifier::Variant,
    specs: &[BinningSpec],
    seed: u64,
) -> Result<NutrientModel> {
    let heads: Vec<(String, usize)> = specs.iter().map(|s| (s.nutrient.clone(), s.total_classes())).collect();
    NutrientModel::new(config, variant, &heads, seed)
}

/// Confidences of `model` for the items that carry `spec`'s nutrient.
pub fn score(
    model: &NutrientModel,
    spec: &BinningSpec,
    items: &[&PreparedItem],
    cache: Option<&EmbeddingCache>,
) -> Result<Vec<EvalItem>> {
    let scored: Vec<&PreparedItem> = items.iter().copied().filter(|i| i.values.contains_key(&spec.nutrient)).collect();
    let inputs: Vec<(&str, &ItemInput)> = scored.iter().map(|i| (i.id.as_str(), &i.input)).collect();
    let confidences = predict_all(model, &spec.nutrient, &inputs, cache)?;
    Ok(scored
        .iter()
        .zip(confidences)
        .map(|(i, c)| EvalItem {
            id: i.id.clone(),
            category: i.category.clone(),
            confidences: c,
            true_value: i.values[&spec.nutrient],
        })
        .collect())
}

/// Score `items` for every spec and assemble the report.
pub fn evaluate(
    model: &NutrientModel,
    specs: &[BinningSpec],
    items: &[&PreparedItem],
    cache: Option<&EmbeddingCache>,
    split: &str,
    checkpoint_hash: &str,
    min_category_count: usize,
) -> Result<EvalReport> {
    let mut nutrients = Vec::new();
    for spec in specs {
        nutrients.push(evaluate_nutrient(spec, &score(model, spec, items, cache)?, min_category_count)?);
    }
    Ok(EvalReport {
        split: split.into(),
        checkpoint_hash: checkpoint_hash.into(),
        nutrients,
    })
}

/// `"train"` / `"test"` membership lists of a split.
pub fn split_sides<'a>(
    items: &'a [PreparedItem],
    split: &SplitAssignment,
) -> Result<(Vec<&'a PreparedItem>, Vec<&'a PreparedItem>)> {
    Ok((select(items, &split.train)?, select(items, &split.test)?))
}
