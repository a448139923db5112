//! Randomized invariants.

mod common;

use common::{ovo_oracle, pair_auc};
use nutricast_core::chem::{fat_content, sodium_content};
use nutricast_core::contrastive::{clip_loss, cosine_similarity, info_nce_image, info_nce_text, SimilarityMatrix};
use nutricast_core::data::{bin_nutrient, split_dataset, BinLabel};
use nutricast_core::encoders::vocab::{BOS, EOS, PAD};
use nutricast_core::encoders::{tokenize, Embedding, Modality, Vocabulary};
use nutricast_core::evaluation::{auc_binary, error_distribution, macro_auc_ovo};
use nutricast_core::nn::softmax;
use nutricast_core::tape::Tape;
use nutricast_core::{ParamStore, Tensor};
use proptest::prelude::*;

fn logits() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-30.0f64..30.0, 1..12)
}

/// Non-negative values with plenty of zeros and ties.
fn nutrient_values() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(
        prop_oneof![
            2 => Just(0.0),
            3 => (1u32..12).prop_map(|v| v as f64),
            3 => 0.01f64..500.0,
        ],
        1..120,
    )
}

fn longest_tie_run(sorted: &[f64]) -> usize {
    let mut best = 0;
    let mut run = 0;
    for i in 0..sorted.len() {
        run = if i > 0 && sorted[i] == sorted[i - 1] { run + 1 } else { 1 };
        best = best.max(run);
    }
    best
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn softmax_is_a_shift_invariant_distribution(z in logits(), c in -50.0f64..50.0, tau in 0.05f64..5.0) {
        let p = softmax(&z, tau).unwrap();
        prop_assert!(p.iter().all(|v| *v > 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
        let q = softmax(&shifted, tau).unwrap();
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn argmax_ignores_temperature(z in logits(), tau in 0.05f64..5.0) {
        let a = nutricast_core::classifier::argmax(&softmax(&z, 1.0).unwrap());
        let b = nutricast_core::classifier::argmax(&softmax(&z, tau).unwrap());
        prop_assert_eq!(z[a], z[b]);
    }

    #[test]
    fn attention_rows_are_distributions(
        data in prop::collection::vec(-3.0f64..3.0, 5 * 8),
        causal in any::<bool>(),
    ) {
        let store = ParamStore::new();
        let mut t = Tape::new(&store);
        let x = t.input(&Tensor::from_rows(5, 8, data).unwrap()).unwrap();
        let y = t.attention(x, x, x, 2, causal).unwrap();
        prop_assert_eq!(t.dims(y), (5, 8));
        let (heads, n, probs) = t.last_attention(causal).unwrap();
        for h in 0..heads {
            for i in 0..n {
                let row = &probs[(h * n + i) * n..(h * n + i + 1) * n];
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                if causal {
                    prop_assert!(row[i + 1..].iter().all(|p| *p == 0.0));
                }
            }
        }
    }

    #[test]
    fn binning_invariants(values in nutrient_values()) {
        let has_zero = values.contains(&0.0);
        let result = bin_nutrient("x", &values, None);
        if !has_zero {
            prop_assert!(matches!(result, Err(nutricast_core::Error::Config(_))));
            return Ok(());
        }
        let (labels, spec) = result.unwrap();
        let n = values.len();
        let excluded = labels.iter().filter(|l| **l == BinLabel::Excluded).count();
        prop_assert!(excluded as f64 <= 0.05 * n as f64 + 1e-9, "{} of {} excluded", excluded, n);
        for (v, l) in values.iter().zip(&labels) {
            match l {
                BinLabel::Excluded => prop_assert!(*v > spec.threshold),
                BinLabel::Class(c) => {
                    prop_assert_eq!(*c == 0, *v == 0.0);
                    prop_assert!(*c <= spec.class_count);
                    prop_assert_eq!(spec.assign(*v).unwrap(), *l);
                }
            }
        }
        // monotone
        let mut kept: Vec<(f64, usize)> = values.iter().zip(&labels).filter_map(|(v, l)| l.class().map(|c| (*v, c))).collect();
        kept.sort_by(|a, b| a.0.total_cmp(&b.0));
        prop_assert!(kept.windows(2).all(|w| w[0].1 <= w[1].1));
        prop_assert!(spec.edges.windows(2).all(|w| w[0] < w[1]));
        prop_assert_eq!(spec.edges.len(), spec.class_count);
        prop_assert_eq!(spec.representatives.len(), spec.class_count + 1);
        prop_assert_eq!(spec.representatives[0], 0.0);
        // class sizes and representatives
        let nonzero: Vec<f64> = kept.iter().filter(|k| k.1 > 0).map(|k| k.0).collect();
        let tie = longest_tie_run(&nonzero);
        let mut sizes = Vec::new();
        for c in 1..=spec.class_count {
            let members: Vec<f64> = kept.iter().filter(|k| k.1 == c).map(|k| k.0).collect();
            prop_assert!(!members.is_empty());
            let r = spec.representatives[c];
            prop_assert!(members[0] <= r && r <= *members.last().unwrap());
            prop_assert_eq!(*members.last().unwrap(), spec.edges[c - 1]);
            sizes.push(members.len());
        }
        if let (Some(lo), Some(hi)) = (sizes.iter().min(), sizes.iter().max()) {
            // A boundary that lands inside a tie run moves past it, which can
            // grow one class and shrink its successor by up to one run each.
            let k = spec.class_count;
            let target_hi = nonzero.len().div_ceil(k);
            prop_assert!(*hi <= target_hi + 2 * tie, "sizes {:?}, tie run {}", sizes, tie);
            prop_assert!(lo + tie + 1 >= nonzero.len() / k, "sizes {:?}, tie run {}", sizes, tie);
            if tie == 1 {
                prop_assert!(hi - lo <= 1, "sizes {:?}", sizes);
            }
        }
    }

    #[test]
    fn split_is_a_seeded_partition(n in 1usize..300, seed in any::<u64>()) {
        let ids: Vec<String> = (0..n).map(|i| format!("i{i}")).collect();
        let s = split_dataset(&ids, 0.7, seed).unwrap();
        prop_assert_eq!(s.train.len(), (0.7 * n as f64 + 1e-9).floor() as usize);
        let mut all: Vec<String> = s.train.iter().chain(&s.test).cloned().collect();
        all.sort();
        let mut expect = ids.clone();
        expect.sort();
        prop_assert_eq!(all, expect);
        prop_assert_eq!(split_dataset(&ids, 0.7, seed).unwrap(), s);
    }

    #[test]
    fn auc_is_rank_based(
        scores in prop::collection::vec(0u8..10, 2..80),
        flips in prop::collection::vec(any::<bool>(), 80),
    ) {
        let mut pos: Vec<bool> = flips[..scores.len()].to_vec();
        pos[0] = true;
        pos[1] = false;
        let s: Vec<f64> = scores.iter().map(|v| *v as f64 / 10.0).collect();
        let a = auc_binary(&s, &pos).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        let transformed: Vec<f64> = s.iter().map(|v| (3.0 * v).exp() - 7.0).collect();
        prop_assert_eq!(auc_binary(&transformed, &pos).unwrap(), a);
        // two-class one-vs-one reduces to the binary AUC
        let conf: Vec<Vec<f64>> = s.iter().map(|v| vec![1.0 - v, *v]).collect();
        let labels: Vec<usize> = pos.iter().map(|p| *p as usize).collect();
        let ovo = macro_auc_ovo(&conf, &labels).unwrap();
        prop_assert!((ovo.macro_auc - a).abs() < 1e-12);
        let p: Vec<f64> = s.iter().zip(&pos).filter(|(_, b)| **b).map(|(v, _)| *v).collect();
        let q: Vec<f64> = s.iter().zip(&pos).filter(|(_, b)| !**b).map(|(v, _)| *v).collect();
        prop_assert!((a - pair_auc(&p, &q)).abs() < 1e-12);
    }

    #[test]
    fn ovo_matches_brute_force(
        classes in 2usize..=5,
        rows in prop::collection::vec((0usize..5, prop::collection::vec(0u8..4, 5)), 2..200),
    ) {
        let labels: Vec<usize> = rows.iter().map(|r| r.0 % classes).collect();
        let conf: Vec<Vec<f64>> = rows.iter().map(|r| r.1[..classes].iter().map(|v| *v as f64).collect()).collect();
        match (macro_auc_ovo(&conf, &labels), ovo_oracle(&conf, &labels, classes)) {
            (Ok(got), Some((m, w))) => {
                prop_assert!((got.macro_auc - m).abs() < 1e-9);
                prop_assert!((got.weighted_auc - w).abs() < 1e-9);
            }
            (Err(_), None) => {}
            (got, oracle) => prop_assert!(false, "{:?} vs {:?}", got, oracle),
        }
    }

    #[test]
    fn error_buckets_partition_items(values in nutrient_values(), picks in prop::collection::vec(0usize..100, 120)) {
        prop_assume!(values.contains(&0.0));
        let (_, spec) = bin_nutrient("x", &values, None).unwrap();
        let predicted: Vec<usize> = picks[..values.len()].iter().map(|p| p % spec.total_classes()).collect();
        let b = error_distribution(&predicted, &spec, &values).unwrap();
        prop_assert_eq!(b.count, values.len());
        prop_assert!((b.under_10 + b.under_30 + b.over_30 + b.undefined - 1.0).abs() < 1e-12);
    }

    #[test]
    fn closed_forms_are_exact(w in 0.0f64..1e3, f in 1e-3f64..1e3, v in 0.0f64..1e4) {
        prop_assert_eq!(fat_content(w, w, f).unwrap(), 0.0);
        prop_assert_eq!(sodium_content(v).unwrap(), 39.07 * v);
        prop_assert_eq!(fat_content(w + 1.0, w, f).unwrap(), 0.05 * ((w + 1.0) - w) * f);
    }

    #[test]
    fn contrastive_bounds(
        n in 1usize..6,
        raw in prop::collection::vec(-1.0f64..1.0, 36),
        tau in 0.05f64..1.0,
    ) {
        let rows: Vec<Vec<f64>> = (0..n).map(|i| raw[i * 6..i * 6 + n].to_vec()).collect();
        let s = SimilarityMatrix::from_rows(&rows, tau).unwrap();
        let (li, lt) = (info_nce_image(&s), info_nce_text(&s));
        prop_assert!(li >= 0.0 && lt >= 0.0);
        prop_assert_eq!(clip_loss(&s), clip_loss(&s.transpose()));
        prop_assert!((info_nce_text(&s) - info_nce_image(&s.transpose())).abs() < 1e-12);
        // strictly dominant diagonal
        let dominant: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..n).map(|j| if i == j { 1.0 } else { rows[i][j].min(0.9) }).collect())
            .collect();
        let d = SimilarityMatrix::from_rows(&dominant, tau).unwrap();
        if n > 1 {
            prop_assert!(clip_loss(&d) < (n as f64).ln());
        }
    }

    #[test]
    fn cosine_in_range(a in prop::collection::vec(-5.0f64..5.0, 4), b in prop::collection::vec(-5.0f64..5.0, 4)) {
        prop_assume!(a.iter().any(|v| v.abs() > 1e-3) && b.iter().any(|v| v.abs() > 1e-3));
        let ea = Embedding::new(a.clone(), Modality::Image).unwrap();
        let eb = Embedding::new(b, Modality::Text).unwrap();
        let s = cosine_similarity(&ea, &eb).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
        prop_assert!((cosine_similarity(&ea, &ea).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tokenization_shape(words in prop::collection::vec("[a-z]{1,6}", 0..40), ctx in 3usize..20) {
        let vocab = Vocabulary::build(["salt sugar water", "salt sugar water"], 2);
        let text = words.join(", ");
        let ids = tokenize(&text, &vocab, ctx).unwrap();
        prop_assert_eq!(ids.len(), ctx);
        prop_assert_eq!(ids[0], BOS);
        let eos = ids.iter().position(|t| *t == EOS).unwrap();
        prop_assert_eq!(eos, (words.len() + 1).min(ctx - 1));
        prop_assert!(ids[eos + 1..].iter().all(|t| *t == PAD));
    }
}
