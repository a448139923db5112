use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

/// Category label used for items with an empty `category`.
pub const UNCATEGORIZED: &str = "(uncategorized)";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NutrientValue {
    pub value: f64,
    pub unit: String,
}

/// One product: image reference, ingredient statement and labelled nutrients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FoodItem {
    pub id: String,
    pub image_path: String,
    pub ingredients: String,
    pub nutrients: BTreeMap<String, NutrientValue>,
    pub category: String,
}

impl FoodItem {
    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            bail!(Validation, "item has an empty id");
        }
        for (name, v) in &self.nutrients {
            if !v.value.is_finite() || v.value < 0.0 {
                bail!(Validation, "item `{}`: nutrient `{}` has invalid value {}", self.id, name, v.value);
            }
        }
        Ok(())
    }

    pub fn category_label(&self) -> &str {
        if self.category.trim().is_empty() {
            UNCATEGORIZED
        } else {
            &self.category
        }
    }
}

/// Item-level validation plus the cross-item rules: unique ids and one unit
/// per nutrient.
pub fn check_items(items: &[FoodItem]) -> Result<()> {
    let mut ids = BTreeSet::new();
    let mut units: BTreeMap<&str, (&str, &str)> = BTreeMap::new();
    for item in items {
        item.validate()?;
        if !ids.insert(item.id.as_str()) {
            bail!(Validation, "duplicate item id `{}`", item.id);
        }
        for (name, v) in &item.nutrients {
            match units.get(name.as_str()) {
                Some((unit, first)) if *unit != v.unit => bail!(
                    Validation,
                    "nutrient `{}` has unit `{}` on item `{}` but `{}` on item `{}`",
                    name,
                    v.unit,
                    item.id,
                    unit,
                    first
                ),
                Some(_) => {}
                None => {
                    units.insert(name, (&v.unit, &item.id));
                }
            }
        }
    }
    Ok(())
}

/// Values of one nutrient; items without it yield `None`.
pub fn nutrient_values(items: &[FoodItem], nutrient: &str) -> Vec<Option<f64>> {
    items.iter().map(|i| i.nutrients.get(nutrient).map(|v| v.value)).collect()
}
