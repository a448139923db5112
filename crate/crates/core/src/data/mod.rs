//! Food items, nutrient discretization, splitting and the synthetic corpus.

mod binning;
mod item;
mod split;
pub mod synth;

pub use binning::{bin_nutrient, BinLabel, BinningSpec};
pub use item::{check_items, nutrient_values, FoodItem, NutrientValue, UNCATEGORIZED};
pub use split::{split_dataset, SplitAssignment};
