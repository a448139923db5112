//! JSON-lines product manifests.

use std::collections::BTreeMap;
use std::path::Path;

use nutricast_core::data::FoodItem;

use crate::error::{read, write, Error, Result};

/// Parse and validate a manifest. Blank lines are skipped; every other line
/// must be one item object. Errors carry the 1-based line number.
pub fn load_manifest(path: &Path) -> Result<Vec<FoodItem>> {
    let bytes = read(path)?;
    let text = std::str::from_utf8(&bytes).map_err(|e| Error::format(path, format!("not UTF-8: {e}")))?;
    parse_manifest(text, path)
}

pub fn parse_manifest(text: &str, path: &Path) -> Result<Vec<FoodItem>> {
    let fail = |line: usize, message: String| Error::Manifest {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut items: Vec<FoodItem> = Vec::new();
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    let mut units: BTreeMap<String, (String, usize)> = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let item: FoodItem = serde_json::from_str(raw).map_err(|e| fail(line, e.to_string()))?;
        item.validate().map_err(|e| fail(line, e.to_string()))?;
        if let Some(first) = seen.insert(item.id.clone(), line) {
            return Err(fail(line, format!("duplicate id `{}` (first on line {first})", item.id)));
        }
        for (nutrient, v) in &item.nutrients {
            match units.get(nutrient) {
                Some((unit, at)) if *unit != v.unit => {
                    return Err(fail(
                        line,
                        format!("`{nutrient}` in `{}` but `{unit}` on line {at}", v.unit),
                    ))
                }
                Some(_) => {}
                None => {
                    units.insert(nutrient.clone(), (v.unit.clone(), line));
                }
            }
        }
        items.push(item);
    }
    Ok(items)
}

pub fn manifest_text(items: &[FoodItem]) -> Result<String> {
    let mut out = String::new();
    for it in items {
        out.push_str(&serde_json::to_string(it).map_err(|e| Error::Usage(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, items: &[FoodItem]) -> Result<()> {
    write(path, manifest_text(items)?)
}
