//! Deterministic synthetic products with known nutrient rules.
//!
//! Each image is a 2×2 grid of 32 px cells; a product shows one colored glyph
//! per ingredient in distinct cells. Glyph colors are drawn independently of
//! the ingredient list, so some channels are readable only from the image and
//! others only from the text:
//!
//! | channel        | rule                                        | source |
//! |----------------|---------------------------------------------|--------|
//! | `fat`          | `#red + 4·#yellow`                          | image  |
//! | `carbohydrate` | `2·#green + 5·#blue`                        | image  |
//! | `sodium`       | sum of per-ingredient weights               | text   |
//! | `protein`      | sum of per-ingredient weights               | text   |
//! | `calories`     | `120·#{sugar, oil} + 50·#red`               | both   |
//!
//! Two planted modes add a `marker` channel decided by a single glyph or a
//! single ingredient, for localization checks.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::item::{FoodItem, NutrientValue};
use crate::encoders::RgbImage;
use crate::error::{bail, Result};

pub const RESOLUTION: usize = 64;
pub const CELL: usize = 32;
pub const GRID: usize = RESOLUTION / CELL;
pub const GLYPHS_PER_ITEM: usize = 3;
pub const BACKGROUND: [u8; 3] = [235, 235, 235];

pub const INGREDIENTS: [&str; 12] = [
    "water", "sugar", "salt", "flour", "oil", "milk", "cocoa", "rice", "soy", "egg", "butter", "vanilla",
];
pub const CATEGORIES: [&str; 4] = ["beverage", "snack", "dairy", "bakery"];
pub const CHANNELS: [(&str, &str); 5] = [
    ("fat", "g"),
    ("sodium", "mg"),
    ("protein", "g"),
    ("carbohydrate", "g"),
    ("calories", "kcal"),
];
/// Channel written by the planted modes.
pub const MARKER: &str = "marker";
/// Ingredients that decide the marker channel in planted-ingredient mode.
pub const MARKER_INGREDIENTS: [(&str, f64); 3] = [("sugar", 0.0), ("salt", 10.0), ("oil", 20.0)];

const SODIUM: [(&str, f64); 5] = [("salt", 400.0), ("soy", 250.0), ("butter", 100.0), ("milk", 50.0), ("egg", 70.0)];
const PROTEIN: [(&str, f64); 4] = [("milk", 3.0), ("egg", 6.0), ("soy", 4.0), ("flour", 2.0)];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GlyphColor {
    Red,
    Green,
    Blue,
    Yellow,
}

impl GlyphColor {
    pub const ALL: [GlyphColor; 4] = [GlyphColor::Red, GlyphColor::Green, GlyphColor::Blue, GlyphColor::Yellow];

    pub fn rgb(self) -> [u8; 3] {
        match self {
            GlyphColor::Red => [220, 30, 30],
            GlyphColor::Green => [30, 170, 60],
            GlyphColor::Blue => [40, 60, 220],
            GlyphColor::Yellow => [235, 200, 30],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Disc,
    Square,
    Triangle,
    Diamond,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Disc, Shape::Square, Shape::Triangle, Shape::Diamond];

    fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            Shape::Disc => dx * dx + dy * dy <= r * r,
            Shape::Square => dx.abs() <= 0.8 * r && dy.abs() <= 0.8 * r,
            Shape::Triangle => dy >= -r && dy <= 0.8 * r && dx.abs() <= 0.5 * (dy + r),
            Shape::Diamond => dx.abs() + dy.abs() <= r,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Glyph {
    /// Row-major index into the patch grid.
    pub cell: usize,
    pub color: GlyphColor,
    pub shape: Shape,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthMode {
    #[default]
    Standard,
    /// A single glyph; `marker` = 10 when it is red, 0 when blue.
    PlantedGlyph,
    /// `marker` is decided by the single marker ingredient present.
    PlantedIngredient,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthItem {
    pub item: FoodItem,
    pub image: RgbImage,
    pub glyphs: Vec<Glyph>,
    pub ingredients: Vec<String>,
    /// Cell of the deciding glyph (planted-glyph mode).
    pub marker_cell: Option<usize>,
    /// The deciding ingredient (planted-ingredient mode).
    pub marker_ingredient: Option<String>,
}

/// Per-ingredient contribution to a text-determined channel.
pub fn ingredient_weight(nutrient: &str, ingredient: &str) -> f64 {
    let table: &[(&str, f64)] = match nutrient {
        "sodium" => &SODIUM,
        "protein" => &PROTEIN,
        _ => &[],
    };
    table.iter().find(|(i, _)| *i == ingredient).map_or(0.0, |(_, w)| *w)
}

fn count(glyphs: &[Glyph], color: GlyphColor) -> f64 {
    glyphs.iter().filter(|g| g.color == color).count() as f64
}

/// The generator's rule table applied to one composition.
pub fn channel_values(ingredients: &[String], glyphs: &[Glyph]) -> BTreeMap<String, f64> {
    let text_sum = |n: &str| ingredients.iter().map(|i| ingredient_weight(n, i)).sum::<f64>();
    let energy = ingredients.iter().filter(|i| *i == "sugar" || *i == "oil").count() as f64;
    let mut out = BTreeMap::new();
    out.insert("fat".to_string(), count(glyphs, GlyphColor::Red) + 4.0 * count(glyphs, GlyphColor::Yellow));
    out.insert("sodium".to_string(), text_sum("sodium"));
    out.insert("protein".to_string(), text_sum("protein"));
    out.insert(
        "carbohydrate".to_string(),
        2.0 * count(glyphs, GlyphColor::Green) + 5.0 * count(glyphs, GlyphColor::Blue),
    );
    out.insert("calories".to_string(), 120.0 * energy + 50.0 * count(glyphs, GlyphColor::Red));
    out
}

pub fn render(glyphs: &[Glyph], rng: &mut ChaCha8Rng) -> RgbImage {
    let mut img = RgbImage::filled(RESOLUTION, RESOLUTION, BACKGROUND);
    for g in glyphs {
        let r = rng.random_range(9.0..13.0);
        let cx = (g.cell % GRID * CELL) as f64 + CELL as f64 / 2.0 + rng.random_range(-3.0..3.0);
        let cy = (g.cell / GRID * CELL) as f64 + CELL as f64 / 2.0 + rng.random_range(-3.0..3.0);
        let (x0, y0) = (g.cell % GRID * CELL, g.cell / GRID * CELL);
        for y in y0..y0 + CELL {
            for x in x0..x0 + CELL {
                if g.shape.contains(x as f64 + 0.5 - cx, y as f64 + 0.5 - cy, r) {
                    img.put(x, y, g.color.rgb());
                }
            }
        }
    }
    img
}

fn statement(ingredients: &[String]) -> String {
    let mut s = ingredients.join(", ");
    if let Some(first) = s.get_mut(..1) {
        first.make_ascii_uppercase();
    }
    s
}

fn generate_one(index: usize, seed: u64, mode: SynthMode) -> SynthItem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);

    let mut cells: Vec<usize> = (0..GRID * GRID).collect();
    cells.shuffle(&mut rng);
    let cells = &cells[..GLYPHS_PER_ITEM];
    let shape = |rng: &mut ChaCha8Rng| *Shape::ALL.choose(rng).expect("non-empty");

    let mut marker_cell = None;
    let mut marker_ingredient = None;
    let mut marker_value = None;
    let glyphs: Vec<Glyph>;
    let ingredients: Vec<String>;
    match mode {
        SynthMode::Standard | SynthMode::PlantedIngredient => {
            glyphs = cells
                .iter()
                .map(|&cell| Glyph {
                    cell,
                    color: *GlyphColor::ALL.choose(&mut rng).expect("non-empty"),
                    shape: shape(&mut rng),
                })
                .collect();
            if mode == SynthMode::Standard {
                ingredients = INGREDIENTS
                    .choose_multiple(&mut rng, GLYPHS_PER_ITEM)
                    .map(|s| s.to_string())
                    .collect();
            } else {
                let (marker, value) = *MARKER_INGREDIENTS.choose(&mut rng).expect("non-empty");
                let others: Vec<&str> = INGREDIENTS
                    .iter()
                    .copied()
                    .filter(|i| MARKER_INGREDIENTS.iter().all(|(m, _)| m != i))
                    .collect();
                let mut list: Vec<String> = others
                    .choose_multiple(&mut rng, GLYPHS_PER_ITEM - 1)
                    .map(|s| s.to_string())
                    .collect();
                list.push(marker.to_string());
                list.shuffle(&mut rng);
                ingredients = list;
                marker_ingredient = Some(marker.to_string());
                marker_value = Some(value);
            }
        }
        SynthMode::PlantedGlyph => {
            let red = rng.random_bool(0.5);
            let marker = Glyph {
                cell: cells[0],
                color: if red { GlyphColor::Red } else { GlyphColor::Blue },
                shape: shape(&mut rng),
            };
            glyphs = Vec::from([marker]);
            ingredients = INGREDIENTS
                .choose_multiple(&mut rng, GLYPHS_PER_ITEM)
                .map(|s| s.to_string())
                .collect();
            marker_cell = Some(cells[0]);
            marker_value = Some(if red { 10.0 } else { 0.0 });
        }
    }
    let category = CATEGORIES.choose(&mut rng).expect("non-empty").to_string();
    let image = render(&glyphs, &mut rng);

    let values = channel_values(&ingredients, &glyphs);
    let mut nutrients = BTreeMap::new();
    for (name, unit) in CHANNELS {
        nutrients.insert(
            name.to_string(),
            NutrientValue {
                value: values[name],
                unit: unit.to_string(),
            },
        );
    }
    if let Some(v) = marker_value {
        nutrients.insert(
            MARKER.to_string(),
            NutrientValue {
                value: v,
                unit: "g".to_string(),
            },
        );
    }
    let id = format!("syn-{index:05}");
    SynthItem {
        item: FoodItem {
            image_path: format!("images/{id}.png"),
            id,
            ingredients: statement(&ingredients),
            nutrients,
            category,
        },
        image,
        glyphs,
        ingredients,
        marker_cell,
        marker_ingredient,
    }
}

/// `n` items; item `i` depends only on `(seed, i, mode)`.
pub fn synth_generate(n: usize, seed: u64, mode: SynthMode) -> Result<Vec<SynthItem>> {
    if n == 0 {
        bail!(Domain, "synthetic dataset needs at least one item");
    }
    Ok((0..n).map(|i| generate_one(i, seed, mode)).collect())
}

/// Item `index` alone; equal to `synth_generate(..)[index]`.
pub fn synth_item(index: usize, seed: u64, mode: SynthMode) -> SynthItem {
    generate_one(index, seed, mode)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_rejects_zero() {
        let a = synth_generate(20, 7, SynthMode::Standard).unwrap();
        let b = synth_generate(20, 7, SynthMode::Standard).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[13], synth_item(13, 7, SynthMode::Standard));
        assert_ne!(a, synth_generate(20, 8, SynthMode::Standard).unwrap());
        assert!(synth_generate(0, 7, SynthMode::Standard).is_err());
    }

    #[test]
    fn planted_rule() {
        let ingredients = ["salt".to_string(), "milk".to_string()];
        let v = channel_values(&ingredients, &[]);
        assert_eq!(v["sodium"], ingredient_weight("sodium", "salt") + ingredient_weight("sodium", "milk"));
        assert_eq!(v["sodium"], 450.0);
        assert_eq!(v["fat"], 0.0);
    }

    #[test]
    fn items_follow_rules() {
        for s in synth_generate(50, 1, SynthMode::Standard).unwrap() {
            let v = channel_values(&s.ingredients, &s.glyphs);
            for (name, value) in v {
                assert_eq!(s.item.nutrients[&name].value, value);
            }
            assert_eq!(s.glyphs.len(), 3);
            assert_eq!(s.image.width, RESOLUTION);
            let mut cells: Vec<usize> = s.glyphs.iter().map(|g| g.cell).collect();
            cells.sort();
            cells.dedup();
            assert_eq!(cells.len(), 3);
        }
    }

    #[test]
    fn planted_modes() {
        for s in synth_generate(30, 2, SynthMode::PlantedGlyph).unwrap() {
            let cell = s.marker_cell.unwrap();
            let marker = s.glyphs.iter().find(|g| g.cell == cell).unwrap();
            let expect = if marker.color == GlyphColor::Red { 10.0 } else { 0.0 };
            assert_eq!(s.item.nutrients[MARKER].value, expect);
            assert_eq!(s.glyphs.len(), 1);
        }
        for s in synth_generate(30, 2, SynthMode::PlantedIngredient).unwrap() {
            let m = s.marker_ingredient.clone().unwrap();
            let markers: Vec<_> = s.ingredients.iter().filter(|i| MARKER_INGREDIENTS.iter().any(|(n, _)| n == i)).collect();
            assert_eq!(markers, [&m]);
        }
    }
}
