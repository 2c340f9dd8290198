//! CSV datasets: a header row, then one row per observation. Training files
//! hold the feature columns followed by the response; query files hold
//! features only. Numbers are written in shortest round-trip form.

use std::fs::File;
use std::path::Path;

use mgcp::{Matrix, OutputData, Role};

use crate::error::{CliError, CliResult};

fn read_rows(path: &Path) -> CliResult<(Vec<String>, Vec<Vec<f64>>)> {
    let file = File::open(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(file);
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        let row = record
            .iter()
            .enumerate()
            .map(|(col, field)| {
                field.parse::<f64>().map_err(|_| {
                    CliError::Data(format!(
                        "{}: row {} column `{}`: `{field}` is not a number",
                        path.display(),
                        line + 1,
                        header.get(col).map(String::as_str).unwrap_or("?")
                    ))
                })
            })
            .collect::<CliResult<Vec<f64>>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(CliError::Data(format!("{}: no data rows", path.display())));
    }
    Ok((header, rows))
}

/// Reads features and a trailing response column.
pub fn read_output(path: &Path, role: Role) -> CliResult<OutputData<f64>> {
    let (header, rows) = read_rows(path)?;
    if header.len() < 2 {
        return Err(CliError::Data(format!(
            "{}: need at least one feature column and a response column",
            path.display()
        )));
    }
    let d = header.len() - 1;
    let mut xs = Vec::with_capacity(rows.len() * d);
    let mut ys = Vec::with_capacity(rows.len());
    for row in rows {
        xs.extend_from_slice(&row[..d]);
        ys.push(row[d]);
    }
    let n = ys.len();
    OutputData::new(Matrix::from_row_major(n, d, xs), ys, role)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Reads a feature-only file.
pub fn read_features(path: &Path) -> CliResult<(Vec<String>, Matrix<f64>)> {
    let (header, rows) = read_rows(path)?;
    let d = header.len();
    let n = rows.len();
    Ok((header, Matrix::from_row_major(n, d, rows.concat())))
}

pub fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> CliResult<()> {
    let out = |e: csv::Error| CliError::Output(format!("{}: {e}", path.display()));
    let mut writer = csv::Writer::from_path(path).map_err(out)?;
    writer.write_record(header).map_err(out)?;
    for row in rows {
        writer.write_record(row).map_err(out)?;
    }
    writer.flush().map_err(|e| CliError::Output(format!("{}: {e}", path.display())))
}

pub fn num(v: f64) -> String {
    v.to_string()
}

pub fn joined<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(";")
}
