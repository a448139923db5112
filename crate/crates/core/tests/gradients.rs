//! Tape gradients against central finite differences, and the optimizer.

mod common;

use std::collections::BTreeMap;

use common::tiny_config;
use nutricast_core::classifier::{ItemInput, NutrientModel, Variant};
use nutricast_core::encoders::{ModelConfig, Vocabulary, tokenize};
use nutricast_core::gradcheck::{analytic_gradients, compare_gradients, grad_check};
use nutricast_core::optim::AdamState;
use nutricast_core::tape::Tape;
use nutricast_core::training::{loss_graph, TrainExample};
use nutricast_core::{ParamGroup, ParamId, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn batch(config: &ModelConfig, vocab: &Vocabulary, n: usize) -> Vec<TrainExample> {
    let texts = ["salt sugar", "water flour salt", "sugar", "flour water"];
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    (0..n)
        .map(|i| {
            let r = config.image_resolution;
            let image = Tensor::new(vec![r, r, 3], (0..r * r * 3).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap();
            let tokens = tokenize(texts[i % texts.len()], vocab, config.context_length).unwrap();
            TrainExample {
                id: format!("g{i}"),
                input: ItemInput {
                    image: Some(image),
                    tokens: Some(tokens),
                },
                labels: BTreeMap::from([("fat".to_string(), i % 3), ("sodium".to_string(), (i + 1) % 2)]),
            }
        })
        .collect()
}

fn vocab() -> Vocabulary {
    Vocabulary::build(["salt sugar water flour"; 2], 2)
}

fn check_model(config: ModelConfig, samples: usize) -> f64 {
    let v = vocab();
    let model = NutrientModel::new(config.clone(), Variant::VL, &[("fat".into(), 3), ("sodium".into(), 2)], 4).unwrap();
    let examples = batch(&config, &v, 3);
    let refs: Vec<&TrainExample> = examples.iter().collect();
    let loss = |t: &mut Tape<'_>| loss_graph(t, &model, &refs, 1.0, None);
    let report = grad_check(&model.params, loss, 1e-5, samples, 7).unwrap();
    assert!(report.coordinates >= samples.min(model.params.iter().map(|(_, p)| p.tensor.len()).sum()));
    report.max_relative_error
}

#[test]
fn full_model_width_16() {
    let err = check_model(tiny_config(8), 300);
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn full_model_tiny_preset() {
    let mut c = ModelConfig::tiny(8);
    c.context_length = 8;
    let err = check_model(c, 200);
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn corrupted_gradient_is_detected() {
    let v = vocab();
    let config = tiny_config(8);
    let model = NutrientModel::new(config.clone(), Variant::VL, &[("fat".into(), 3)], 4).unwrap();
    let examples = batch(&config, &v, 2);
    let refs: Vec<&TrainExample> = examples.iter().collect();
    let loss = |t: &mut Tape<'_>| loss_graph(t, &model, &refs, 0.0, None);
    let (_, mut grads) = analytic_gradients(&model.params, &loss).unwrap();
    for i in 0..model.params.len() {
        if let Some(g) = grads.param_mut(ParamId(i)) {
            g.iter_mut().for_each(|x| *x = *x * 1.5 + 0.1);
        }
    }
    let report = compare_gradients(&model.params, &loss, &grads, 1e-5, 200, 1).unwrap();
    assert!(report.max_relative_error > 1e-2, "{report:?}");
}

#[test]
fn backward_trivial_cases() {
    let mut s = ParamStore::new();
    s.insert("w", Tensor::from_rows(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.0, 4.0]).unwrap(), true, ParamGroup::Head)
        .unwrap();
    s.insert("f", Tensor::vector(vec![2.0]).unwrap(), false, ParamGroup::Encoder).unwrap();
    let mut t = Tape::new(&s);
    let w = t.param("w").unwrap();
    let f = t.param("f").unwrap();
    let sw = t.sum(w);
    let sf = t.sum(f);
    let total = t.add(sw, sf).unwrap();
    let g = t.backward(total).unwrap();
    assert_eq!(g.param(ParamId(0)).unwrap(), &[1.0; 6]);
    assert!(g.param(ParamId(1)).is_none());

    let mut t = Tape::new(&s);
    let w = t.param("w").unwrap();
    let z = t.scale(w, 0.0);
    let z = t.sum(z);
    let g = t.backward(z).unwrap();
    assert_eq!(g.param(ParamId(0)).unwrap(), &[0.0; 6]);

    let mut t = Tape::new(&s);
    let w = t.param("w").unwrap();
    assert!(matches!(t.backward(w), Err(nutricast_core::Error::Contract(_))));
}

fn quadratic(s: &ParamStore) -> (f64, nutricast_core::tape::Gradients) {
    analytic_gradients(s, &|t: &mut Tape<'_>| {
        let x = t.param("x")?;
        let sq = t.mul(x, x)?;
        Ok(t.sum(sq))
    })
    .unwrap()
}

#[test]
fn adam_steps() {
    let mut s = ParamStore::new();
    s.insert("x", Tensor::vector(vec![3.0, -2.0, 0.5]).unwrap(), true, ParamGroup::Head).unwrap();
    s.insert("frozen", Tensor::vector(vec![1.5]).unwrap(), false, ParamGroup::Encoder).unwrap();
    let before = s.clone();

    let (_, g) = quadratic(&s);
    let mut still = AdamState::new(&s, 0.0, 0.0);
    still.step(&mut s, &g, 1.0).unwrap();
    assert_eq!(s, before);

    let lr = 0.01;
    let mut adam = AdamState::new(&s, lr, lr);
    adam.step(&mut s, &g, 1.0).unwrap();
    let x = s.tensor("x").unwrap().data();
    for (new, old) in x.iter().zip(before.tensor("x").unwrap().data()) {
        assert!((new - (old - lr * old.signum())).abs() < 1e-9, "{new} vs {old}");
    }
    let (l1, g) = quadratic(&s);
    adam.step(&mut s, &g, 1.0).unwrap();
    let (l2, _) = quadratic(&s);
    assert!(l2 < l1);
    assert_eq!(adam.step_count(), 2);
    assert_eq!(s.tensor("frozen").unwrap().data(), &[1.5]);
}
