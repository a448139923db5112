use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

/// Quantile used as the outlier threshold.
pub const THRESHOLD_QUANTILE: (usize, usize) = (19, 20);

/// Discretization of one nutrient. Class 0 is reserved for zero; classes
/// `1..=class_count` cover the non-zero values up to `threshold`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinningSpec {
    pub nutrient: String,
    pub threshold: f64,
    /// Number of non-zero classes `K`.
    pub class_count: usize,
    /// Upper edge (largest member) of each non-zero class.
    pub edges: Vec<f64>,
    /// Median of each class; `representatives[0] == 0`.
    pub representatives: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinLabel {
    Class(usize),
    /// Above the outlier threshold; dropped for this nutrient.
    Excluded,
}

impl BinLabel {
    pub fn class(self) -> Option<usize> {
        match self {
            BinLabel::Class(c) => Some(c),
            BinLabel::Excluded => None,
        }
    }
}

impl BinningSpec {
    /// Classes including the zero class.
    pub fn total_classes(&self) -> usize {
        self.class_count + 1
    }

    /// Label a value with this spec (e.g. a test-split item).
    pub fn assign(&self, value: f64) -> Result<BinLabel> {
        if !value.is_finite() || value < 0.0 {
            bail!(Domain, "nutrient value {} is not a finite non-negative number", value);
        }
        if value == 0.0 {
            return Ok(BinLabel::Class(0));
        }
        if value > self.threshold || self.class_count == 0 {
            return Ok(BinLabel::Excluded);
        }
        let c = self.edges.iter().position(|&e| value <= e).unwrap_or(self.class_count - 1);
        Ok(BinLabel::Class(c + 1))
    }

    /// Representative value of a class.
    pub fn value_of(&self, class: usize) -> Result<f64> {
        match self.representatives.get(class) {
            Some(v) => Ok(*v),
            None => bail!(Domain, "class {} outside 0..{}", class, self.representatives.len()),
        }
    }
}

/// Linear-interpolation quantile at `h = (n + 1)·q` (1-based), clamped to the
/// sample range.
fn threshold(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    let (num, den) = THRESHOLD_QUANTILE;
    let scaled = num * (n + 1);
    let k = scaled / den;
    if k == 0 {
        return sorted[0];
    }
    if k >= n {
        return sorted[n - 1];
    }
    let frac = (scaled % den) as f64 / den as f64;
    let (lo, hi) = (sorted[k - 1], sorted[k]);
    lo + frac * (hi - lo)
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

/// `round(a / b)` with halves rounded up, for `b > 0`.
fn div_round(a: usize, b: usize) -> usize {
    (2 * a + b) / (2 * b)
}

/// Discretize one nutrient: drop values above the 0.95 quantile, give zeros
/// class 0, and split the sorted non-zero values into `K` contiguous groups of
/// near-equal count without splitting runs of equal values.
///
/// `K` defaults to `max(1, round(non_zero / zero))`. When tie runs make a group
/// boundary fall past the end, fewer than `K` classes are produced and the
/// spec records the effective count.
pub fn bin_nutrient(nutrient: &str, values: &[f64], k_override: Option<usize>) -> Result<(Vec<BinLabel>, BinningSpec)> {
    if values.is_empty() {
        bail!(Domain, "cannot bin `{}`: no values", nutrient);
    }
    if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
        bail!(Domain, "cannot bin `{}`: invalid value {}", nutrient, v);
    }
    if k_override == Some(0) {
        bail!(Config, "class count override must be at least 1");
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let t = threshold(&sorted);

    let zeros = values.iter().filter(|v| **v == 0.0).count();
    let mut nonzero: Vec<f64> = values.iter().copied().filter(|v| *v > 0.0 && *v <= t).collect();
    nonzero.sort_by(f64::total_cmp);
    let m = nonzero.len();

    let k = match (k_override, zeros) {
        _ if m == 0 => 0,
        (Some(k), _) => k,
        (None, 0) => bail!(
            Config,
            "`{}` has no zero values, so the class count is undefined; pass an explicit class count",
            nutrient
        ),
        (None, z) => div_round(m, z).max(1),
    };

    // Group starts; a boundary never splits a run of equal values.
    let mut starts = vec![0usize];
    for c in 1..k {
        let target = div_round(c * m, k).max(starts[starts.len() - 1] + 1);
        let mut b = target;
        while b < m && nonzero[b] == nonzero[b - 1] {
            b += 1;
        }
        if b >= m {
            break;
        }
        starts.push(b);
    }
    let groups: Vec<&[f64]> = if m == 0 {
        Vec::new()
    } else {
        starts
            .iter()
            .enumerate()
            .map(|(i, &s)| &nonzero[s..starts.get(i + 1).copied().unwrap_or(m)])
            .collect()
    };

    let spec = BinningSpec {
        nutrient: nutrient.to_string(),
        threshold: t,
        class_count: groups.len(),
        edges: groups.iter().map(|g| g[g.len() - 1]).collect(),
        representatives: core::iter::once(0.0).chain(groups.iter().map(|g| median(g))).collect(),
    };
    let labels = values.iter().map(|&v| spec.assign(v)).collect::<Result<Vec<_>>>()?;
    Ok((labels, spec))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn classes(labels: &[BinLabel]) -> Vec<usize> {
        labels.iter().map(|l| l.class().unwrap()).collect()
    }

    #[test]
    fn worked_example() {
        let (labels, spec) = bin_nutrient("fat", &[0.0, 0.0, 1.0, 2.0, 3.0, 4.0], None).unwrap();
        assert_eq!(classes(&labels), vec![0, 0, 1, 1, 2, 2]);
        assert_eq!(spec.class_count, 2);
        assert_eq!(spec.edges, vec![2.0, 4.0]);
        assert_eq!(spec.representatives, vec![0.0, 1.5, 3.5]);
        assert_eq!(spec.threshold, 4.0);
    }

    #[test]
    fn all_zero() {
        let (labels, spec) = bin_nutrient("fat", &[0.0; 5], None).unwrap();
        assert_eq!(classes(&labels), vec![0; 5]);
        assert_eq!(spec.class_count, 0);
        assert_eq!(spec.representatives, vec![0.0]);
    }

    #[test]
    fn no_zeros_needs_override() {
        assert!(matches!(bin_nutrient("fat", &[1.0, 2.0], None), Err(crate::Error::Config(_))));
        let (labels, _) = bin_nutrient("fat", &[1.0, 2.0, 3.0, 4.0], Some(2)).unwrap();
        assert_eq!(classes(&labels), vec![1, 1, 2, 2]);
    }

    #[test]
    fn ties_move_boundary_up() {
        let v = [0.0, 0.0, 0.0, 1.0, 2.0, 3.0, 3.0, 4.0, 5.0];
        let (labels, spec) = bin_nutrient("x", &v, None).unwrap();
        // the target boundary (index 3 of the non-zeros) sits inside the run of 3s
        assert_eq!(classes(&labels), vec![0, 0, 0, 1, 1, 1, 1, 2, 2]);
        assert_eq!(spec.edges, vec![3.0, 5.0]);
        let (labels, _) = bin_nutrient("x", &[0.0, 0.0, 1.0, 2.0, 2.0, 2.0], None).unwrap();
        assert_eq!(classes(&labels), vec![0, 0, 1, 1, 1, 1]);
        let (labels, spec) = bin_nutrient("x", &[0.0, 0.0, 5.0, 5.0, 5.0, 5.0], None).unwrap();
        assert_eq!(classes(&labels), vec![0, 0, 1, 1, 1, 1]);
        assert_eq!(spec.class_count, 1);
    }

    #[test]
    fn outliers_are_excluded() {
        let mut v: Vec<f64> = (0..40).map(|i| (i % 2) as f64).collect();
        v.push(1000.0);
        let (labels, spec) = bin_nutrient("x", &v, None).unwrap();
        assert_eq!(labels[40], BinLabel::Excluded);
        assert!(spec.threshold < 1000.0);
        assert_eq!(spec.assign(2000.0).unwrap(), BinLabel::Excluded);
        assert_eq!(spec.assign(0.5).unwrap(), BinLabel::Class(1));
    }
}
