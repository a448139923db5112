//! Cosine similarity matrices and the symmetric InfoNCE objective.
//!
//! These are the plain-value forms; training uses [`Tape::clip_loss`], which
//! computes the same quantity with gradients.
//!
//! [`Tape::clip_loss`]: crate::tape::Tape::clip_loss

use alloc::vec::Vec;

use crate::encoders::Embedding;
use crate::error::{bail, Result};
use crate::nn;
use crate::tape::TEMPERATURE_RANGE;

/// Row `i` holds image `i` against every text.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    n: usize,
    values: Vec<f64>,
    temperature: f64,
}

impl SimilarityMatrix {
    pub fn from_rows(rows: &[Vec<f64>], temperature: f64) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            bail!(Dimension, "empty similarity matrix");
        }
        if let Some(r) = rows.iter().find(|r| r.len() != n) {
            bail!(Dimension, "similarity matrix is not square: {} rows, a row of {}", n, r.len());
        }
        if !(temperature > 0.0) {
            bail!(Domain, "temperature must be positive, got {}", temperature);
        }
        if rows.iter().flatten().any(|v| !(-1.0 - 1e-12..=1.0 + 1e-12).contains(v)) {
            bail!(Domain, "cosine similarities must lie in [-1, 1]");
        }
        Ok(Self {
            n,
            values: rows.iter().flatten().copied().collect(),
            temperature,
        })
    }

    /// Pairwise cosine similarities of two equally sized embedding batches.
    pub fn from_embeddings(images: &[Embedding], texts: &[Embedding], temperature: f64) -> Result<Self> {
        if images.len() != texts.len() {
            bail!(Dimension, "{} images vs {} texts", images.len(), texts.len());
        }
        let rows = images
            .iter()
            .map(|a| texts.iter().map(|b| cosine_similarity(a, b)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        Self::from_rows(&rows, temperature)
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn transpose(&self) -> Self {
        let n = self.n;
        let mut values = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                values.push(self.values[j * n + i]);
            }
        }
        Self {
            n,
            values,
            temperature: self.temperature,
        }
    }
}

/// Learnable temperature from its log-space parameter, clamped.
pub fn temperature_from_log(log_temperature: f64) -> f64 {
    libm::exp(log_temperature).clamp(TEMPERATURE_RANGE.0, TEMPERATURE_RANGE.1)
}

pub fn cosine_similarity(a: &Embedding, b: &Embedding) -> Result<f64> {
    if a.dim() != b.dim() {
        bail!(Dimension, "embedding dims {} vs {}", a.dim(), b.dim());
    }
    let (na, nb) = (nn::norm(&a.values), nn::norm(&b.values));
    if !(na > 0.0 && nb > 0.0) {
        bail!(Domain, "cosine similarity of a zero-norm vector");
    }
    Ok((nn::dot(&a.values, &b.values) / (na * nb)).clamp(-1.0, 1.0))
}

/// Image-to-text InfoNCE: rows are softmax-normalized.
pub fn info_nce_image(s: &SimilarityMatrix) -> f64 {
    let n = s.n;
    let mut row = Vec::with_capacity(n);
    let mut total = 0.0;
    for i in 0..n {
        row.clear();
        row.extend((0..n).map(|j| s.get(i, j) / s.temperature));
        total += nn::log_sum_exp(&row) - row[i];
    }
    total / n as f64
}

/// Text-to-image InfoNCE: columns are softmax-normalized.
pub fn info_nce_text(s: &SimilarityMatrix) -> f64 {
    info_nce_image(&s.transpose())
}

/// Mean of the two directional losses.
pub fn clip_loss(s: &SimilarityMatrix) -> f64 {
    (info_nce_image(s) + info_nce_text(s)) / 2.0
}
