//! Evaluation and training exports.

use std::fmt::Write as _;
use std::path::Path;

use nutricast_core::evaluation::{EvalReport, ItemError};
use nutricast_core::training::LossRecord;

use crate::error::{write, Error, Result};

fn csv_text<F>(header: &[&str], fill: F) -> Result<String>
where
    F: FnOnce(&mut csv::Writer<Vec<u8>>) -> csv::Result<()>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(|e| Error::Usage(e.to_string()))?;
    fill(&mut w).map_err(|e| Error::Usage(e.to_string()))?;
    let bytes = w.into_inner().map_err(|e| Error::Usage(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("CSV of UTF-8 fields"))
}

/// `epoch,step,loss`, one row per optimizer step.
pub fn loss_csv(history: &[LossRecord]) -> Result<String> {
    csv_text(&["epoch", "step", "loss"], |w| {
        history
            .iter()
            .try_for_each(|r| w.write_record([r.epoch.to_string(), r.step.to_string(), r.loss.to_string()]))
    })
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// Per-item outcomes keyed by nutrient.
pub type ItemRows = Vec<(String, Vec<ItemError>)>;

/// Per-item outcomes of every evaluated nutrient.
pub fn item_csv(rows: &ItemRows) -> Result<String> {
    let header = [
        "nutrient",
        "id",
        "category",
        "true_value",
        "true_class",
        "predicted_class",
        "predicted_value",
        "relative_error",
        "bucket",
    ];
    csv_text(&header, |w| {
        for (nutrient, items) in rows {
            for e in items {
                let bucket = serde_json::to_value(e.bucket).expect("bucket serializes");
                w.write_record([
                    nutrient.clone(),
                    e.id.clone(),
                    e.category.clone(),
                    e.true_value.to_string(),
                    opt(e.true_class),
                    e.predicted_class.to_string(),
                    e.predicted_value.to_string(),
                    opt(e.relative_error),
                    bucket.as_str().unwrap_or_default().to_string(),
                ])?;
            }
        }
        Ok(())
    })
}

/// Stacked horizontal bars of the error buckets, one bar per nutrient.
pub fn bucket_svg(report: &EvalReport) -> String {
    const ROW: usize = 28;
    const LEFT: f64 = 120.0;
    const WIDTH: f64 = 400.0;
    let colors = ["#2e7d32", "#f9a825", "#c62828", "#9e9e9e"];
    let height = 40 + ROW * report.nutrients.len();
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="560" height="{height}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<text x="4" y="16">relative error: &lt;10% / &lt;30% / &#8805;30% / undefined ({} split)</text>"#, report.split);
    for (row, n) in report.nutrients.iter().enumerate() {
        let y = 28 + row * ROW;
        let _ = writeln!(svg, r#"<text x="4" y="{}">{}</text>"#, y + 14, escape(&n.nutrient));
        let b = &n.metrics.error_buckets;
        let mut x = LEFT;
        for (frac, color) in [b.under_10, b.under_30, b.over_30, b.undefined].into_iter().zip(colors) {
            let w = frac * WIDTH;
            if w > 0.0 {
                let _ = writeln!(svg, r#"<rect x="{x:.2}" y="{y}" width="{w:.2}" height="20" fill="{color}"/>"#);
            }
            x += w;
        }
    }
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write(path, text)
}
