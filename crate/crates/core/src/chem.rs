//! Chemistry closed forms and the database / model / laboratory comparison.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::evaluation::classify_error;

/// Sodium titration factor per mL of titrant.
pub const SODIUM_FACTOR: f64 = 39.07;
/// Fat extraction factor.
pub const FAT_FACTOR: f64 = 0.05;

/// Fat content from flask weights before (`w_a`) and after (`w_b`)
/// extraction and the freeze-dried sample weight `w_f`, as
/// `0.05·(w_a − w_b)·w_f`.
///
/// The product with `w_f` only balances dimensionally under an implicit
/// percentage convention; it is kept as published.
pub fn fat_content(w_a: f64, w_b: f64, w_f: f64) -> Result<f64> {
    if !(w_a.is_finite() && w_b.is_finite() && w_f.is_finite()) || w_b < 0.0 {
        bail!(Domain, "weights must be finite and non-negative");
    }
    if w_a < w_b {
        bail!(Domain, "negative extract: flask weight {} is below {}", w_a, w_b);
    }
    if !(w_f > 0.0) {
        bail!(Domain, "freeze-dried weight must be positive, got {}", w_f);
    }
    Ok(FAT_FACTOR * (w_a - w_b) * w_f)
}

/// Sodium content from the titrant volume in mL, `39.07·V`.
pub fn sodium_content(titrant_ml: f64) -> Result<f64> {
    if !(titrant_ml >= 0.0) || !titrant_ml.is_finite() {
        bail!(Domain, "titrant volume must be finite and non-negative, got {}", titrant_ml);
    }
    Ok(SODIUM_FACTOR * titrant_ml)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChemRecord {
    pub id: String,
    pub nutrient: String,
    pub chem_mean: f64,
    pub chem_sd: f64,
    pub method: String,
}

impl ChemRecord {
    pub fn validate(&self) -> Result<()> {
        if !(self.chem_sd >= 0.0) || !self.chem_mean.is_finite() || !self.chem_sd.is_finite() {
            bail!(Validation, "chemistry record `{}`/`{}` has invalid mean or sd", self.id, self.nutrient);
        }
        Ok(())
    }
}

/// A value of one nutrient for one sample from the database or the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceValue {
    pub id: String,
    pub nutrient: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub id: String,
    pub nutrient: String,
    pub bfpd_value: f64,
    pub model_value: f64,
    pub chem_mean: f64,
    pub chem_sd: f64,
    /// Model versus chemistry; `None` when the chemistry value is 0 and the
    /// model's is not.
    pub relative_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThreeSourceReport {
    pub rows: Vec<ComparisonRow>,
    /// Sample ids missing from at least one source.
    pub unmatched: Vec<String>,
    /// Nutrients left out of the rows and summary.
    pub excluded_nutrients: Vec<String>,
    /// Fraction of rows with model-vs-chemistry error below 10%.
    pub fraction_under_10: f64,
}

/// Join the three sources on `(id, nutrient)`. The fat channel is left out
/// unless `include_fat` is set.
pub fn three_source_report(
    database: &[SourceValue],
    model: &[SourceValue],
    chem: &[ChemRecord],
    include_fat: bool,
) -> Result<ThreeSourceReport> {
    let excluded: Vec<String> = if include_fat { Vec::new() } else { Vec::from(["fat".to_string()]) };
    let keep = |n: &str| !excluded.iter().any(|e| e.eq_ignore_ascii_case(n));
    let index = |src: &[SourceValue]| -> Result<BTreeMap<(String, String), f64>> {
        let mut m = BTreeMap::new();
        for s in src.iter().filter(|s| keep(&s.nutrient)) {
            if m.insert((s.id.clone(), s.nutrient.clone()), s.value).is_some() {
                bail!(Validation, "duplicate value for `{}`/`{}`", s.id, s.nutrient);
            }
        }
        Ok(m)
    };
    let db = index(database)?;
    let md = index(model)?;
    let mut ch = BTreeMap::new();
    for c in chem.iter().filter(|c| keep(&c.nutrient)) {
        c.validate()?;
        if ch.insert((c.id.clone(), c.nutrient.clone()), c).is_some() {
            bail!(Validation, "duplicate chemistry record for `{}`/`{}`", c.id, c.nutrient);
        }
    }

    let all_keys: BTreeSet<&(String, String)> = db.keys().chain(md.keys()).chain(ch.keys()).collect();
    let mut rows = Vec::new();
    let mut unmatched = BTreeSet::new();
    for key in all_keys {
        match (db.get(key), md.get(key), ch.get(key)) {
            (Some(&bfpd_value), Some(&model_value), Some(c)) => {
                let (_, relative_error) = classify_error(model_value, c.chem_mean);
                rows.push(ComparisonRow {
                    id: key.0.clone(),
                    nutrient: key.1.clone(),
                    bfpd_value,
                    model_value,
                    chem_mean: c.chem_mean,
                    chem_sd: c.chem_sd,
                    relative_error,
                });
            }
            _ => {
                unmatched.insert(key.0.clone());
            }
        }
    }
    if rows.is_empty() {
        bail!(Validation, "no sample appears in all three sources");
    }
    let hits = rows.iter().filter(|r| matches!(r.relative_error, Some(e) if e < 0.10)).count();
    Ok(ThreeSourceReport {
        fraction_under_10: hits as f64 / rows.len() as f64,
        rows,
        unmatched: unmatched.into_iter().collect(),
        excluded_nutrients: excluded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn closed_forms() {
        assert_eq!(fat_content(3.25, 3.25, 7.0).unwrap(), 0.0);
        assert!((fat_content(3.0, 2.0, 2.0).unwrap() - 0.1).abs() < 1e-15);
        assert!(fat_content(1.0, 2.0, 1.0).is_err());
        assert!(fat_content(2.0, 1.0, 0.0).is_err());
        assert_eq!(sodium_content(0.0).unwrap(), 0.0);
        assert_eq!(sodium_content(1.0).unwrap(), 39.07);
        assert_eq!(sodium_content(2.5).unwrap(), 97.675);
        assert!(sodium_content(-1.0).is_err());
    }

    fn sv(id: &str, n: &str, v: f64) -> SourceValue {
        SourceValue {
            id: id.to_string(),
            nutrient: n.to_string(),
            value: v,
        }
    }

    fn cr(id: &str, n: &str, mean: f64) -> ChemRecord {
        ChemRecord {
            id: id.to_string(),
            nutrient: n.to_string(),
            chem_mean: mean,
            chem_sd: 0.5,
            method: "titration".to_string(),
        }
    }

    #[test]
    fn join_and_summary() {
        let ids = ["a", "b", "c", "d", "e"];
        let db: Vec<_> = ids.iter().map(|i| sv(i, "sodium", 100.0)).collect();
        let model: Vec<_> = ids
            .iter()
            .zip([101.0, 95.0, 108.0, 150.0, 100.0])
            .map(|(i, v)| sv(i, "sodium", v))
            .collect();
        let mut chem: Vec<_> = ids.iter().map(|i| cr(i, "sodium", 100.0)).collect();
        let r = three_source_report(&db, &model, &chem, false).unwrap();
        assert_eq!(r.fraction_under_10, 0.8);
        chem.pop();
        let r = three_source_report(&db, &model, &chem, false).unwrap();
        assert_eq!(r.rows.len(), 4);
        assert_eq!(r.unmatched, vec!["e".to_string()]);
        let fat = three_source_report(&[sv("a", "fat", 1.0)], &[sv("a", "fat", 1.0)], &[cr("a", "fat", 1.0)], false);
        assert!(fat.is_err());
        let fat = three_source_report(&[sv("a", "fat", 1.0)], &[sv("a", "fat", 1.0)], &[cr("a", "fat", 1.0)], true).unwrap();
        assert_eq!(fat.fraction_under_10, 1.0);
    }
}
