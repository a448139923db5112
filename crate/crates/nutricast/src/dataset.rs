//! Manifest + image loading into encoder-ready items.

use std::path::{Path, PathBuf};

use nutricast_core::data::FoodItem;
use nutricast_core::encoders::{Preprocessing, RgbImage, Vocabulary};
use nutricast_core::pipeline::{prepare_item, PreparedItem};
use rayon::prelude::*;

use crate::error::Result;
use crate::imageio::load_image;
use crate::manifest::load_manifest;

/// Items of a manifest with their decoded, resized images.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: PathBuf,
    pub items: Vec<FoodItem>,
    pub images: Vec<RgbImage>,
}

/// Relative image paths resolve against the manifest's directory.
pub fn image_path(manifest: &Path, item: &FoodItem) -> PathBuf {
    let p = Path::new(&item.image_path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest.parent().unwrap_or(Path::new(".")).join(p)
    }
}

pub fn load_dataset(manifest: &Path, resolution: usize) -> Result<Dataset> {
    let items = load_manifest(manifest)?;
    let images = items
        .par_iter()
        .map(|it| load_image(&image_path(manifest, it), resolution))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        manifest: manifest.to_path_buf(),
        items,
        images,
    })
}

impl Dataset {
    pub fn ids(&self) -> Vec<String> {
        self.items.iter().map(|i| i.id.clone()).collect()
    }

    pub fn prepare(&self, vocab: &Vocabulary, context_length: usize, pre: &Preprocessing) -> Result<Vec<PreparedItem>> {
        self.items
            .par_iter()
            .zip(&self.images)
            .map(|(it, img)| Ok(prepare_item(it, img, vocab, context_length, pre)?))
            .collect()
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.items.iter().position(|i| i.id == id)
    }
}
