use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

/// Train/test partition of item ids. Both lists keep the input order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub seed: u64,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

impl SplitAssignment {
    pub fn is_train(&self, id: &str) -> bool {
        self.train.iter().any(|t| t == id)
    }
}

/// Seeded shuffle; the first `⌊ratio·n⌋` shuffled items go to training.
pub fn split_dataset(ids: &[String], ratio: f64, seed: u64) -> Result<SplitAssignment> {
    if !(ratio > 0.0 && ratio < 1.0) {
        bail!(Config, "split ratio must lie in (0, 1), got {}", ratio);
    }
    if ids.is_empty() {
        bail!(Domain, "cannot split an empty dataset");
    }
    let unique: BTreeSet<&String> = ids.iter().collect();
    if unique.len() != ids.len() {
        bail!(Validation, "item ids are not unique");
    }
    let n = ids.len();
    // the epsilon keeps e.g. 0.7·10 from flooring to 6
    let n_train = libm::floor(ratio * n as f64 + 1e-9) as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut in_train = alloc::vec![false; n];
    for &i in &order[..n_train] {
        in_train[i] = true;
    }
    let (mut train, mut test) = (Vec::with_capacity(n_train), Vec::with_capacity(n - n_train));
    for (id, t) in ids.iter().zip(in_train) {
        if t {
            train.push(id.clone());
        } else {
            test.push(id.clone());
        }
    }
    Ok(SplitAssignment { seed, train, test })
}
