//! Symmetry and isolation properties of the encoders and the classifier.

mod common;

use common::tiny_config;
use nutricast_core::classifier::{assemble_input, ItemInput, NutrientModel, Variant};
use nutricast_core::encoders::vocab::{BOS, EOS, PAD};
use nutricast_core::encoders::{encode_image, encode_text, tokenize, Embedding, Modality, Vocabulary};
use nutricast_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn image(seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(vec![64, 64, 3], (0..64 * 64 * 3).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

/// Move 32 px cell `from[c]` to cell `c`.
fn permute_cells(img: &Tensor, from: [usize; 4]) -> Tensor {
    let mut out = vec![0.0; img.len()];
    for (dst, &src) in from.iter().enumerate() {
        let (dy, dx) = (dst / 2 * 32, dst % 2 * 32);
        let (sy, sx) = (src / 2 * 32, src % 2 * 32);
        for y in 0..32 {
            for x in 0..32 {
                for c in 0..3 {
                    out[((dy + y) * 64 + dx + x) * 3 + c] = img.data()[((sy + y) * 64 + sx + x) * 3 + c];
                }
            }
        }
    }
    Tensor::new(vec![64, 64, 3], out).unwrap()
}

fn model(variant: Variant) -> NutrientModel {
    NutrientModel::new(tiny_config(12), variant, &[("fat".into(), 3)], 5).unwrap()
}

#[test]
fn patch_permutation() {
    let mut m = model(Variant::VF);
    let img = image(1);
    let perms = [[1, 0, 3, 2], [3, 2, 1, 0], [2, 3, 0, 1], [0, 2, 1, 3]];
    let base = encode_image(&img, &m.config, &m.params).unwrap();
    let differs = perms
        .iter()
        .any(|p| encode_image(&permute_cells(&img, *p), &m.config, &m.params).unwrap() != base);
    assert!(differs, "position embeddings have no effect");

    m.params
        .by_name_mut("visual.positional_embedding")
        .unwrap()
        .tensor
        .data_mut()
        .fill(0.0);
    let base = encode_image(&img, &m.config, &m.params).unwrap();
    for p in perms {
        let e = encode_image(&permute_cells(&img, p), &m.config, &m.params).unwrap();
        for (a, b) in e.values.iter().zip(&base.values) {
            assert!((a - b).abs() < 1e-12, "{p:?}: {a} vs {b}");
        }
    }
}

#[test]
fn padding_after_eos_is_ignored() {
    let m = model(Variant::LF);
    let mut a = vec![PAD; 8];
    a[..4].copy_from_slice(&[BOS, 5, 6, EOS]);
    let mut b = a.clone();
    b[5] = 7;
    b[7] = 4;
    let ea = encode_text(&a, &m.config, &m.params).unwrap();
    let eb = encode_text(&b, &m.config, &m.params).unwrap();
    assert_eq!(ea, eb);
}

#[test]
fn encoders_are_deterministic_and_fixed_width() {
    let m = model(Variant::VL);
    let img = image(2);
    assert_eq!(encode_image(&img, &m.config, &m.params).unwrap(), encode_image(&img, &m.config, &m.params).unwrap());
    let vocab = Vocabulary::build(["salt sugar water"; 2], 2);
    for text in ["", "salt", "salt sugar water salt sugar water salt sugar water"] {
        let ids = tokenize(text, &vocab, m.config.context_length).unwrap();
        let e = encode_text(&ids, &m.config, &m.params).unwrap();
        assert_eq!(e.dim(), m.config.projection_dim);
        assert_eq!(e, encode_text(&ids, &m.config, &m.params).unwrap());
    }
}

#[test]
fn modality_isolation() {
    let vocab = Vocabulary::build(["salt sugar water flour"; 2], 2);
    let ctx = tiny_config(12).context_length;
    let a = ItemInput {
        image: Some(image(3)),
        tokens: Some(tokenize("salt water", &vocab, ctx).unwrap()),
    };
    let b = ItemInput {
        image: Some(image(4)),
        tokens: Some(tokenize("sugar flour flour", &vocab, ctx).unwrap()),
    };
    let edited_text = ItemInput {
        image: a.image.clone(),
        tokens: b.tokens.clone(),
    };
    let edited_image = ItemInput {
        image: b.image.clone(),
        tokens: a.tokens.clone(),
    };
    let vf = model(Variant::VF);
    assert_eq!(vf.predict("fat", &a).unwrap(), vf.predict("fat", &edited_text).unwrap());
    assert_ne!(vf.predict("fat", &a).unwrap(), vf.predict("fat", &edited_image).unwrap());
    let lf = model(Variant::LF);
    assert_eq!(lf.predict("fat", &a).unwrap(), lf.predict("fat", &edited_image).unwrap());
    assert_ne!(lf.predict("fat", &a).unwrap(), lf.predict("fat", &edited_text).unwrap());
    let vlf = model(Variant::VLF);
    assert_eq!(vlf.predict("fat", &a).unwrap(), vlf.predict("fat", &a).unwrap());
}

#[test]
fn input_assembly() {
    let img = Embedding::new(vec![1.0, 2.0], Modality::Image).unwrap();
    let txt = Embedding::new(vec![3.0, 4.0], Modality::Text).unwrap();
    assert_eq!(assemble_input(Variant::VF, Some(&img), None).unwrap(), vec![1.0, 2.0]);
    assert_eq!(assemble_input(Variant::LF, Some(&img), Some(&txt)).unwrap(), vec![3.0, 4.0]);
    assert_eq!(assemble_input(Variant::VLF, Some(&img), Some(&txt)).unwrap(), vec![1.0, 2.0, 3.0, 4.0]);
    assert_eq!(assemble_input(Variant::VL, Some(&img), Some(&txt)).unwrap(), vec![1.0, 2.0, 3.0, 4.0]);
    assert!(assemble_input(Variant::VLF, Some(&img), None).is_err());
    assert!(assemble_input(Variant::LF, Some(&img), None).is_err());
}

#[test]
fn heads_do_not_share_parameters() {
    let m = NutrientModel::new(tiny_config(12), Variant::VLF, &[("fat".into(), 3), ("sodium".into(), 4)], 1).unwrap();
    let names: Vec<&str> = m.params.iter().map(|(_, p)| p.name.as_str()).collect();
    let fat: Vec<_> = names.iter().filter(|n| n.starts_with("head.fat.")).collect();
    let sodium: Vec<_> = names.iter().filter(|n| n.starts_with("head.sodium.")).collect();
    assert_eq!(fat.len(), 6);
    assert_eq!(sodium.len(), 6);
    assert_eq!(m.params.tensor("head.sodium.out.weight").unwrap().shape(), &[16, 4]);
}
