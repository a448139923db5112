//! Small end-to-end runs: overfitting, prediction, interpretability and
//! report assembly on synthetic data.

use nutricast_core::classifier::{NutrientModel, Variant};
use nutricast_core::data::synth::{synth_generate, SynthMode};
use nutricast_core::data::{bin_nutrient, split_dataset};
use nutricast_core::encoders::{ModelConfig, Preprocessing, Vocabulary};
use nutricast_core::evaluation::{category_breakdown, EvalItem};
use nutricast_core::interpret::{gradcam, text_saliency, SaliencyMethod};
use nutricast_core::pipeline::{fit_binning, label_examples, model_for, prepare_item, PreparedItem};
use nutricast_core::training::{train, TrainConfig};

struct Fixture {
    vocab: Vocabulary,
    config: ModelConfig,
    items: Vec<PreparedItem>,
}

fn fixture(n: usize) -> Fixture {
    let synth = synth_generate(n, 3, SynthMode::Standard).unwrap();
    let vocab = Vocabulary::build(synth.iter().map(|s| s.item.ingredients.as_str()), 2);
    let config = ModelConfig::tiny(vocab.len());
    let pre = Preprocessing::standard(config.image_resolution);
    let items = synth
        .iter()
        .map(|s| prepare_item(&s.item, &s.image, &vocab, config.context_length, &pre).unwrap())
        .collect();
    Fixture { vocab, config, items }
}

#[test]
fn ten_items_are_memorized() {
    let f = fixture(10);
    let refs: Vec<&PreparedItem> = f.items.iter().collect();
    let nutrients = vec!["calories".to_string()];
    let specs = fit_binning(&refs, &nutrients, Some(3)).unwrap();
    let examples = label_examples(&refs, &specs).unwrap();
    let model = model_for(f.config.clone(), Variant::VLF, &specs, 1).unwrap();
    let mut tc = TrainConfig::tiny(Variant::VLF, nutrients, 1);
    tc.lr_head = 1e-2;
    tc.epochs = 200;
    let out = train(model, &examples, &tc).unwrap();
    assert_eq!(out.history.len(), 200);
    let last = out.history.last().unwrap().loss;
    assert!(last < 0.05, "final training cross-entropy {last}");
    for ex in &examples {
        let Some(&c) = ex.labels.get("calories") else { continue };
        assert_eq!(out.model.predict("calories", &ex.input).unwrap().class, c, "{}", ex.id);
    }
}

fn model(f: &Fixture, variant: Variant) -> NutrientModel {
    NutrientModel::new(f.config.clone(), variant, &[("fat".into(), 3)], 2).unwrap()
}

#[test]
fn gradcam_properties() {
    let f = fixture(3);
    let mut m = model(&f, Variant::VF);
    let input = &f.items[0].input;
    let h = gradcam(&m, input, "fat", 1).unwrap();
    assert_eq!((h.rows, h.cols), (2, 2));
    assert!(h.values.iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(h.raw.iter().all(|v| *v >= 0.0 && v.is_finite()));
    assert_eq!(h, gradcam(&m, input, "fat", 1).unwrap());
    assert!(gradcam(&m, input, "fat", 3).is_err());

    for name in ["head.fat.out.weight", "head.fat.out.bias"] {
        m.params.by_name_mut(name).unwrap().tensor.data_mut().iter_mut().for_each(|w| *w *= 3.5);
    }
    let scaled = gradcam(&m, input, "fat", 1).unwrap();
    for (a, b) in h.values.iter().zip(&scaled.values) {
        assert!((a - b).abs() < 1e-9);
    }
    assert!(gradcam(&model(&f, Variant::LF), input, "fat", 1).is_err());

    assert_eq!(ModelConfig::full(8).grid(), 7);
}

#[test]
fn token_saliency_properties() {
    let f = fixture(3);
    let m = model(&f, Variant::LF);
    let s = text_saliency(&m, &f.vocab, "salt, zzz, salt", None, "fat", 0, SaliencyMethod::GradientInput).unwrap();
    let words: Vec<&str> = s.tokens.iter().map(|t| t.token.as_str()).collect();
    assert_eq!(words, ["salt", "zzz", "salt"]);
    assert!(s.tokens.iter().all(|t| t.weight.is_finite() && (0.0..=1.0).contains(&t.weight)));
    assert_eq!(s.tokens.iter().map(|t| t.weight).fold(0.0, f64::max), 1.0);
    assert_ne!(s.tokens[0].weight, s.tokens[2].weight);
    assert_eq!(s, text_saliency(&m, &f.vocab, "salt, zzz, salt", None, "fat", 0, SaliencyMethod::GradientInput).unwrap());

    let empty = text_saliency(&m, &f.vocab, "", None, "fat", 0, SaliencyMethod::GradientInput).unwrap();
    assert!(empty.tokens.is_empty());
    assert!(empty.warning.is_some());

    let att = text_saliency(&m, &f.vocab, "salt sugar", None, "fat", 0, SaliencyMethod::Attention).unwrap();
    assert_eq!(att.tokens.len(), 2);
    assert!(text_saliency(&model(&f, Variant::VF), &f.vocab, "salt", None, "fat", 0, SaliencyMethod::GradientInput).is_err());
}

#[test]
fn easy_category_has_more_accurate_items() {
    let values: Vec<f64> = (0..40).map(|i| if i % 4 == 0 { 0.0 } else { i as f64 }).collect();
    let (labels, spec) = bin_nutrient("sodium", &values, None).unwrap();
    let classes = spec.total_classes();
    let items: Vec<EvalItem> = values
        .iter()
        .zip(&labels)
        .enumerate()
        .filter_map(|(i, (v, l))| {
            let c = l.class()?;
            let easy = i % 2 == 0;
            let guess = if easy { c } else { (c + 1) % classes };
            let mut conf = vec![0.0; classes];
            conf[guess] = 1.0;
            Some(EvalItem {
                id: format!("s{i}"),
                category: if easy { "beverage".into() } else { "snack".into() },
                confidences: conf,
                true_value: *v,
            })
        })
        .collect();
    let cats = category_breakdown(&spec, &items, 5).unwrap();
    let get = |c: &str| cats.iter().find(|r| r.category == c).unwrap();
    assert!(get("beverage").metrics.error_buckets.under_10 > get("snack").metrics.error_buckets.under_10);
}

#[test]
fn split_seeds_differ() {
    let ids: Vec<String> = (0..1000).map(|i| format!("p{i}")).collect();
    let a = split_dataset(&ids, 0.7, 1).unwrap();
    let b = split_dataset(&ids, 0.7, 2).unwrap();
    assert_ne!(a.train, b.train);
    assert_eq!((a.train.len(), a.test.len()), (700, 300));
    assert!(split_dataset(&ids, 1.0, 1).is_err());
    assert!(split_dataset(&ids, 0.0, 1).is_err());
}
