//! Plain-CSV recordings: one series per column, the first column is `x0`.

use std::path::Path;

use hnpe::ObservationBundle;

use crate::error::{CliError, CliResult};

fn err(path: &Path, msg: String) -> CliError {
    CliError::Validation(format!("ingestion error in {}: {msg}", path.display()))
}

/// Reads a recording CSV. A first row without any numeric cell is taken as
/// a header. Columns must have equal lengths and numeric cells only.
pub fn ingest_timeseries(path: &Path) -> CliResult<ObservationBundle> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| err(path, e.to_string()))?;
    let mut rows: Vec<Vec<String>> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| err(path, e.to_string()))?;
        rows.push(rec.iter().map(str::to_string).collect());
    }
    let header = match rows.first() {
        Some(first) if first.iter().all(|c| c.parse::<f64>().is_err()) => Some(rows.remove(0)),
        _ => None,
    };
    let width = header
        .as_ref()
        .map(Vec::len)
        .unwrap_or(0)
        .max(rows.iter().map(Vec::len).max().unwrap_or(0));
    if width == 0 || rows.is_empty() {
        return Err(err(path, "no data rows".into()));
    }
    let name = |j: usize| match header.as_ref().and_then(|h| h.get(j)).filter(|s| !s.is_empty()) {
        Some(n) => format!("column {} ({n})", j + 1),
        None => format!("column {}", j + 1),
    };
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); width];
    let mut ended = vec![false; width];
    for (i, row) in rows.iter().enumerate() {
        for j in 0..width {
            let cell = row.get(j).map(String::as_str).unwrap_or("");
            if cell.is_empty() {
                ended[j] = true;
                continue;
            }
            if ended[j] {
                return Err(err(path, format!("{} has a gap before row {}", name(j), i + 1)));
            }
            let v: f64 = cell.parse().map_err(|_| {
                err(
                    path,
                    format!("non-numeric cell {cell:?} in {} at row {}", name(j), i + 1),
                )
            })?;
            if !v.is_finite() {
                return Err(err(path, format!("non-finite value in {} at row {}", name(j), i + 1)));
            }
            columns[j].push(v);
        }
    }
    let len = columns[0].len();
    if let Some(j) = (0..width).find(|&j| columns[j].len() != len) {
        return Err(err(
            path,
            format!(
                "ragged columns: {} has {} values, column 1 has {len}",
                name(j),
                columns[j].len()
            ),
        ));
    }
    let x0 = columns.remove(0);
    ObservationBundle::new(x0, columns).map_err(CliError::from)
}
