//! CSV ingestion: a header row, then responses followed by covariates.

use std::io::Read;
use std::path::Path;

use nalgebra::DMatrix;

use crate::em_fitter::Dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct CsvData {
    pub response_names: Vec<String>,
    /// Names of the design columns, `(intercept)` first when one is added.
    pub design_names: Vec<String>,
    pub dataset: Dataset,
}

pub const INTERCEPT_NAME: &str = "(intercept)";

pub fn read_csv(path: &Path, responses: usize, intercept: bool) -> Result<CsvData> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Input(format!("cannot open {}: {e}", path.display())))?;
    parse_csv(file, responses, intercept)
}

/// The first `responses` columns are responses and the rest covariates.
/// Diagnostics name the offending line, counting the header as line 1.
pub fn parse_csv<R: Read>(input: R, responses: usize, intercept: bool) -> Result<CsvData> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Input(format!("line 1: unreadable header: {e}")))?
        .iter()
        .map(str::to_owned)
        .collect();
    let width = header.len();
    if header.iter().all(|h| h.is_empty()) {
        return Err(Error::Input("line 1: missing header row".into()));
    }
    if responses == 0 || responses > width {
        return Err(Error::Input(format!(
            "line 1: --responses {responses} is outside 1..={width} for a {width}-column header"
        )));
    }
    if !intercept && responses == width {
        return Err(Error::Input("line 1: no covariate columns and no intercept".into()));
    }
    let mut values = Vec::new();
    let mut rows = 0usize;
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            Error::Input(format!("line {line}: {e}"))
        })?;
        let line = record.position().map_or(rows as u64 + 2, |p| p.line());
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        if record.len() != width {
            return Err(Error::Input(format!(
                "line {line}: expected {width} fields, found {}",
                record.len()
            )));
        }
        for (c, field) in record.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| {
                Error::Input(format!("line {line}, column '{}': '{field}' is not a number", header[c]))
            })?;
            if !v.is_finite() {
                return Err(Error::Input(format!(
                    "line {line}, column '{}': value must be finite",
                    header[c]
                )));
            }
            values.push(v);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::Input("no data rows after the header".into()));
    }
    let all = DMatrix::from_row_slice(rows, width, &values);
    let y = all.columns(0, responses).into_owned();
    let covariates = all.columns(responses, width - responses).into_owned();
    let mut design_names: Vec<String> = header[responses..].to_vec();
    let dataset = if intercept {
        design_names.insert(0, INTERCEPT_NAME.to_owned());
        Dataset::with_intercept(y, &covariates)?
    } else {
        Dataset::new(y, covariates)?
    };
    Ok(CsvData {
        response_names: header[..responses].to_vec(),
        design_names,
        dataset,
    })
}
