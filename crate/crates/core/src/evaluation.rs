//! One-vs-one AUC, error buckets, tolerance compliance and per-category
//! breakdowns.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::classifier::argmax;
use crate::data::{BinLabel, BinningSpec};
use crate::error::{bail, Error, Result};

/// Mann–Whitney AUC: `(wins + ties/2) / (n_pos·n_neg)`, counted exactly.
pub fn auc_binary(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        bail!(Dimension, "{} scores for {} labels", scores.len(), positive.len());
    }
    if scores.iter().any(|s| s.is_nan()) {
        bail!(Domain, "NaN score");
    }
    let n_pos = positive.iter().filter(|p| **p).count() as u64;
    let n_neg = positive.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedAuc(alloc::format!(
            "{} positives and {} negatives",
            n_pos,
            n_neg
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the win count, so ties stay integral
    let mut twice_wins: u64 = 0;
    let mut neg_below: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut pos_g, mut neg_g) = (0u64, 0u64);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if positive[order[j]] {
                pos_g += 1;
            } else {
                neg_g += 1;
            }
            j += 1;
        }
        twice_wins += pos_g * (2 * neg_below + neg_g);
        neg_below += neg_g;
        i = j;
    }
    Ok(twice_wins as f64 / 2.0 / (n_pos * n_neg) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairAuc {
    pub i: usize,
    pub j: usize,
    pub auc: f64,
    pub n_i: usize,
    pub n_j: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OvoAuc {
    pub macro_auc: f64,
    /// Pair AUCs weighted by `n_i + n_j`.
    pub weighted_auc: f64,
    pub pairs: Vec<PairAuc>,
    /// Pairs with at least one class absent.
    pub skipped: Vec<(usize, usize)>,
}

/// Symmetric one-vs-one average over all class pairs present in `labels`.
pub fn macro_auc_ovo(confidences: &[Vec<f64>], labels: &[usize]) -> Result<OvoAuc> {
    if confidences.len() != labels.len() {
        bail!(Dimension, "{} confidence rows for {} labels", confidences.len(), labels.len());
    }
    let Some(m) = confidences.first().map(|c| c.len()) else {
        return Err(Error::UndefinedAuc("no samples".to_string()));
    };
    if confidences.iter().any(|c| c.len() != m) {
        bail!(Dimension, "ragged confidence rows");
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= m) {
        bail!(Domain, "label {} outside {} classes", l, m);
    }
    let mut counts = alloc::vec![0usize; m];
    labels.iter().for_each(|&l| counts[l] += 1);

    let mut pairs = Vec::new();
    let mut skipped = Vec::new();
    for i in 0..m {
        for j in i + 1..m {
            if counts[i] == 0 || counts[j] == 0 {
                skipped.push((i, j));
                continue;
            }
            let rows: Vec<usize> = (0..labels.len()).filter(|&r| labels[r] == i || labels[r] == j).collect();
            let is_i: Vec<bool> = rows.iter().map(|&r| labels[r] == i).collect();
            let is_j: Vec<bool> = is_i.iter().map(|b| !b).collect();
            let si: Vec<f64> = rows.iter().map(|&r| confidences[r][i]).collect();
            let sj: Vec<f64> = rows.iter().map(|&r| confidences[r][j]).collect();
            let auc = (auc_binary(&si, &is_i)? + auc_binary(&sj, &is_j)?) / 2.0;
            pairs.push(PairAuc {
                i,
                j,
                auc,
                n_i: counts[i],
                n_j: counts[j],
            });
        }
    }
    if pairs.is_empty() {
        return Err(Error::UndefinedAuc("fewer than two classes present".to_string()));
    }
    let macro_auc = pairs.iter().map(|p| p.auc).sum::<f64>() / pairs.len() as f64;
    let total_weight: f64 = pairs.iter().map(|p| (p.n_i + p.n_j) as f64).sum();
    let weighted_auc = pairs.iter().map(|p| p.auc * (p.n_i + p.n_j) as f64).sum::<f64>() / total_weight;
    Ok(OvoAuc {
        macro_auc,
        weighted_auc,
        pairs,
        skipped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorBucket {
    Under10,
    Under30,
    Over30,
    /// True value 0 but a non-zero prediction.
    Undefined,
}

/// Bucket of one prediction and its relative error when defined.
pub fn classify_error(predicted: f64, truth: f64) -> (ErrorBucket, Option<f64>) {
    if truth == 0.0 {
        return if predicted == 0.0 {
            (ErrorBucket::Under10, Some(0.0))
        } else {
            (ErrorBucket::Undefined, None)
        };
    }
    let rel = (predicted - truth).abs() / truth;
    let bucket = if rel < 0.10 {
        ErrorBucket::Under10
    } else if rel < 0.30 {
        ErrorBucket::Under30
    } else {
        ErrorBucket::Over30
    };
    (bucket, Some(rel))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ErrorBuckets {
    pub under_10: f64,
    pub under_30: f64,
    pub over_30: f64,
    pub undefined: f64,
    pub count: usize,
}

/// Histogram of relative errors after mapping classes to representative
/// values.
pub fn error_distribution(predicted: &[usize], spec: &BinningSpec, truth: &[f64]) -> Result<ErrorBuckets> {
    if predicted.len() != truth.len() {
        bail!(Dimension, "{} predictions for {} values", predicted.len(), truth.len());
    }
    let mut c = [0usize; 4];
    for (&p, &t) in predicted.iter().zip(truth) {
        let (bucket, _) = classify_error(spec.value_of(p)?, t);
        c[bucket as usize] += 1;
    }
    let n = predicted.len();
    let frac = |k: usize| if n == 0 { 0.0 } else { k as f64 / n as f64 };
    Ok(ErrorBuckets {
        under_10: frac(c[0]),
        under_30: frac(c[1]),
        over_30: frac(c[2]),
        undefined: frac(c[3]),
        count: n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NutrientKind {
    /// Declared amount must stay below 120% of the true amount.
    Risk,
    /// Declared amount must reach at least 80% of the true amount.
    Beneficial,
}

impl core::str::FromStr for NutrientKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "risk" => Ok(Self::Risk),
            "beneficial" => Ok(Self::Beneficial),
            _ => bail!(Config, "unknown nutrient kind `{}`; expected risk or beneficial", s),
        }
    }
}

/// Regulatory kind of a named nutrient, if it has one.
pub fn nutrient_kind(nutrient: &str) -> Option<NutrientKind> {
    let n = nutrient.to_ascii_lowercase();
    match n.as_str() {
        "fat" | "cholesterol" | "sodium" | "calories" => Some(NutrientKind::Risk),
        "protein" | "fiber" => Some(NutrientKind::Beneficial),
        _ if n.starts_with("vitamin") => Some(NutrientKind::Beneficial),
        _ => None,
    }
}

pub fn tolerance_compliance(predicted: f64, truth: f64, kind: NutrientKind) -> Result<bool> {
    if !(truth > 0.0) || !predicted.is_finite() {
        bail!(Domain, "tolerance needs a positive true value and a finite prediction");
    }
    Ok(match kind {
        NutrientKind::Risk => predicted < 1.2 * truth,
        NutrientKind::Beneficial => predicted >= 0.8 * truth,
    })
}

/// One scored item of one nutrient.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalItem {
    pub id: String,
    pub category: String,
    pub confidences: Vec<f64>,
    pub true_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub n_items: usize,
    pub macro_auc: Option<f64>,
    pub weighted_auc: Option<f64>,
    /// Why the AUC is missing, or which class pairs were skipped.
    pub auc_note: Option<String>,
    pub error_buckets: ErrorBuckets,
    pub tolerance_pass_rate: Option<f64>,
    /// Items with true value 0, which the tolerance rule does not cover.
    pub tolerance_zero_truth: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryReport {
    pub category: String,
    pub low_confidence: bool,
    #[serde(flatten)]
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NutrientReport {
    pub nutrient: String,
    pub kind: Option<NutrientKind>,
    pub n_excluded: usize,
    #[serde(flatten)]
    pub metrics: Metrics,
    pub categories: Vec<CategoryReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub checkpoint_hash: String,
    pub nutrients: Vec<NutrientReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemError {
    pub id: String,
    pub category: String,
    pub true_value: f64,
    pub true_class: Option<usize>,
    pub predicted_class: usize,
    pub predicted_value: f64,
    pub relative_error: Option<f64>,
    pub bucket: ErrorBucket,
}

/// Per-item outcome rows (excluded items carry no true class).
pub fn item_errors(spec: &BinningSpec, items: &[EvalItem]) -> Result<Vec<ItemError>> {
    items
        .iter()
        .map(|it| {
            let predicted_class = argmax(&it.confidences);
            let predicted_value = spec.value_of(predicted_class)?;
            let (bucket, relative_error) = classify_error(predicted_value, it.true_value);
            Ok(ItemError {
                id: it.id.clone(),
                category: it.category.clone(),
                true_value: it.true_value,
                true_class: spec.assign(it.true_value)?.class(),
                predicted_class,
                predicted_value,
                relative_error,
                bucket,
            })
        })
        .collect()
}

fn metrics(spec: &BinningSpec, kind: Option<NutrientKind>, items: &[&EvalItem]) -> Result<Metrics> {
    let mut conf = Vec::new();
    let mut labels = Vec::new();
    let mut predicted = Vec::new();
    let mut truth = Vec::new();
    for it in items {
        if let BinLabel::Class(c) = spec.assign(it.true_value)? {
            conf.push(it.confidences.clone());
            labels.push(c);
            predicted.push(argmax(&it.confidences));
            truth.push(it.true_value);
        }
    }
    let (macro_auc, weighted_auc, auc_note) = match macro_auc_ovo(&conf, &labels) {
        Ok(o) => {
            let note = (!o.skipped.is_empty()).then(|| alloc::format!("skipped absent-class pairs {:?}", o.skipped));
            (Some(o.macro_auc), Some(o.weighted_auc), note)
        }
        Err(Error::UndefinedAuc(msg)) => (None, None, Some(msg)),
        Err(e) => return Err(e),
    };
    let mut pass = 0usize;
    let mut judged = 0usize;
    let mut zero_truth = 0usize;
    if let Some(kind) = kind {
        for (&p, &t) in predicted.iter().zip(&truth) {
            if t > 0.0 {
                judged += 1;
                pass += tolerance_compliance(spec.value_of(p)?, t, kind)? as usize;
            } else {
                zero_truth += 1;
            }
        }
    }
    Ok(Metrics {
        n_items: labels.len(),
        macro_auc,
        weighted_auc,
        auc_note,
        error_buckets: error_distribution(&predicted, spec, &truth)?,
        tolerance_pass_rate: (judged > 0).then(|| pass as f64 / judged as f64),
        tolerance_zero_truth: zero_truth,
    })
}

/// Global and per-category metrics for one nutrient. Categories with fewer
/// than `min_category_count` scored items are flagged as low-confidence.
pub fn evaluate_nutrient(spec: &BinningSpec, items: &[EvalItem], min_category_count: usize) -> Result<NutrientReport> {
    let classes = spec.total_classes();
    if let Some(it) = items.iter().find(|it| it.confidences.len() != classes) {
        bail!(
            Dimension,
            "item `{}` has {} confidences, binning of `{}` has {} classes",
            it.id,
            it.confidences.len(),
            spec.nutrient,
            classes
        );
    }
    let kind = nutrient_kind(&spec.nutrient);
    let all: Vec<&EvalItem> = items.iter().collect();
    let global = metrics(spec, kind, &all)?;
    let n_excluded = items.len() - global.n_items;
    Ok(NutrientReport {
        nutrient: spec.nutrient.clone(),
        kind,
        n_excluded,
        metrics: global,
        categories: category_breakdown(spec, items, min_category_count)?,
    })
}

pub fn category_breakdown(spec: &BinningSpec, items: &[EvalItem], min_count: usize) -> Result<Vec<CategoryReport>> {
    let kind = nutrient_kind(&spec.nutrient);
    let mut groups: BTreeMap<&str, Vec<&EvalItem>> = BTreeMap::new();
    for it in items {
        let c = if it.category.trim().is_empty() {
            crate::data::UNCATEGORIZED
        } else {
            it.category.as_str()
        };
        groups.entry(c).or_default().push(it);
    }
    groups
        .into_iter()
        .map(|(category, members)| {
            let metrics = metrics(spec, kind, &members)?;
            Ok(CategoryReport {
                category: category.to_string(),
                low_confidence: metrics.n_items < min_count,
                metrics,
            })
        })
        .collect()
}
