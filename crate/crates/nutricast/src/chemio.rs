//! Chemistry CSV input and three-source report export.

use std::path::Path;

use nutricast_core::chem::{ChemRecord, ThreeSourceReport};

use crate::error::{write, write_json, Error, Result};

/// Read `id,nutrient,chem_mean,chem_sd,method` rows. Errors name the 1-based
/// line (the header is line 1).
pub fn load_chem_csv(path: &Path) -> Result<Vec<ChemRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::format(path, e))?;
    let headers = reader.headers().map_err(|e| Error::format(path, e))?.clone();
    let expected = ["id", "nutrient", "chem_mean", "chem_sd", "method"];
    if headers.iter().ne(expected.iter().copied()) {
        return Err(Error::Manifest {
            path: path.to_path_buf(),
            line: 1,
            message: format!("header must be `{}`", expected.join(",")),
        });
    }
    let mut out = Vec::new();
    for row in reader.deserialize::<ChemRecord>() {
        let record = row.map_err(|e| Error::Manifest {
            path: path.to_path_buf(),
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        record.validate()?;
        out.push(record);
    }
    Ok(out)
}

pub fn three_source_csv(report: &ThreeSourceReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["id", "nutrient", "bfpd_value", "model_value", "chem_mean", "chem_sd", "relative_error"])
        .and_then(|_| {
            report.rows.iter().try_for_each(|r| {
                w.write_record([
                    r.id.clone(),
                    r.nutrient.clone(),
                    r.bfpd_value.to_string(),
                    r.model_value.to_string(),
                    r.chem_mean.to_string(),
                    r.chem_sd.to_string(),
                    r.relative_error.map(|e| e.to_string()).unwrap_or_default(),
                ])
            })
        })
        .map_err(|e| Error::Usage(e.to_string()))?;
    let bytes = w.into_inner().map_err(|e| Error::Usage(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("CSV of UTF-8 fields"))
}

/// `<stem>.csv` (one row per joined sample; x/y/z = database/model/chemistry,
/// radius = chem_sd) and `<stem>.json` (the full report).
pub fn write_three_source(dir: &Path, stem: &str, report: &ThreeSourceReport) -> Result<Vec<std::path::PathBuf>> {
    let csv_path = dir.join(format!("{stem}.csv"));
    let json_path = dir.join(format!("{stem}.json"));
    write(&csv_path, three_source_csv(report)?)?;
    write_json(&json_path, report)?;
    Ok(vec![csv_path, json_path])
}
