//! CSV ingestion, export and the train/test splitter.

use std::path::Path;

use bayesfit::diagnostics::format_float;
use bayesfit::linalg::Matrix;
use bayesfit::rng::{self, purpose};
use rand::seq::SliceRandom;

use crate::CliError;

/// A numeric CSV table. Rows are numbered from 1, counting data rows only.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

/// Features, target and feature names extracted from a table.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Matrix,
    pub y: Vec<f64>,
    pub feature_names: Vec<String>,
}

fn io_error(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

/// Reads a headed CSV of numbers. Missing and non-numeric cells are data
/// errors naming the row and column.
pub fn read_table(path: &Path) -> Result<Table, CliError> {
    let file = std::fs::File::open(path).map_err(|e| io_error(path, e))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let data_error = |msg: String| CliError::Data(format!("{}: {msg}", path.display()));
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| data_error(e.to_string()))?
        .iter()
        .map(str::to_owned)
        .collect();
    if header.is_empty() || header.iter().all(String::is_empty) {
        return Err(data_error("empty file".into()));
    }
    for (j, name) in header.iter().enumerate() {
        if name.is_empty() {
            return Err(data_error(format!("column {} has an empty name", j + 1)));
        }
        if header[..j].contains(name) {
            return Err(data_error(format!("duplicate column {name}")));
        }
    }
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| match e.kind() {
            csv::ErrorKind::UnequalLengths { len, expected_len, .. } => data_error(format!(
                "row {row}: expected {expected_len} fields, found {len}"
            )),
            _ => data_error(format!("row {row}: {e}")),
        })?;
        let mut values = Vec::with_capacity(header.len());
        for (cell, name) in record.iter().zip(&header) {
            if cell.is_empty() {
                return Err(data_error(format!("row {row}, column {name}: missing value")));
            }
            let v: f64 = cell.parse().map_err(|_| {
                data_error(format!("row {row}, column {name}: not a number: {cell:?}"))
            })?;
            if !v.is_finite() {
                return Err(data_error(format!("row {row}, column {name}: non-finite value {cell}")));
            }
            values.push(v);
        }
        rows.push(values);
    }
    if rows.is_empty() {
        return Err(data_error("no data rows".into()));
    }
    Ok(Table { header, rows })
}

/// Writes `table` with round-tripping float formatting.
pub fn write_table(table: &Table, path: &Path) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_error(path, e))?;
    w.write_record(&table.header).map_err(|e| io_error(path, e))?;
    for row in &table.rows {
        w.write_record(row.iter().map(|v| format_float(*v)))
            .map_err(|e| io_error(path, e))?;
    }
    w.flush().map_err(|e| io_error(path, e))
}

impl Table {
    fn column_index(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    /// Splits off `target`; the remaining columns become features in header order.
    pub fn dataset(&self, target: &str) -> Result<Dataset, CliError> {
        let t = self
            .column_index(target)
            .ok_or_else(|| CliError::Data(format!("target column {target} not found")))?;
        let feature_names: Vec<String> = self
            .header
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != t)
            .map(|(_, h)| h.clone())
            .collect();
        if feature_names.is_empty() {
            return Err(CliError::Data("no feature columns besides the target".into()));
        }
        let d = feature_names.len();
        let x = Matrix::from_fn(self.rows.len(), d, |i, j| {
            let col = if j < t { j } else { j + 1 };
            self.rows[i][col]
        });
        let y = self.rows.iter().map(|r| r[t]).collect();
        Ok(Dataset { x, y, feature_names })
    }

    /// Selects `features` by name, in that order. Extra columns are ignored.
    pub fn features(&self, features: &[String]) -> Result<Matrix, CliError> {
        let idx = features
            .iter()
            .map(|f| {
                self.column_index(f)
                    .ok_or_else(|| CliError::Data(format!("feature column {f} not found")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Matrix::from_fn(self.rows.len(), idx.len(), |i, j| self.rows[i][idx[j]]))
    }

    pub fn select(&self, rows: &[usize]) -> Table {
        Table {
            header: self.header.clone(),
            rows: rows.iter().map(|&i| self.rows[i].clone()).collect(),
        }
    }
}

/// Loads `path` and splits off the `target` column.
pub fn load_csv(path: &Path, target: &str) -> Result<Dataset, CliError> {
    read_table(path)?.dataset(target)
}

/// Row indices `(train, test)` from a seeded permutation; the test set takes
/// the first `round(n · fraction)` permuted rows.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>), CliError> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(CliError::Usage(format!("test fraction must be in [0, 1), got {fraction}")));
    }
    let n_test = (n as f64 * fraction).round() as usize;
    if n - n_test < 2 {
        return Err(CliError::Data(format!(
            "a test fraction of {fraction} leaves {} training rows out of {n}; need at least 2",
            n - n_test
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng::stream(seed, purpose::SPLIT, 0));
    let test = perm[..n_test].to_vec();
    let train = perm[n_test..].to_vec();
    Ok((train, test))
}

/// A train/test partition of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub x_train: Matrix,
    pub y_train: Vec<f64>,
    pub x_test: Matrix,
    pub y_test: Vec<f64>,
}

pub fn train_test_split(x: &Matrix, y: &[f64], fraction: f64, seed: u64) -> Result<Split, CliError> {
    if x.rows() != y.len() {
        return Err(CliError::Data(format!("{} feature rows but {} targets", x.rows(), y.len())));
    }
    let (train, test) = split_indices(y.len(), fraction, seed)?;
    Ok(Split {
        x_train: x.select_rows(&train),
        y_train: train.iter().map(|&i| y[i]).collect(),
        x_test: x.select_rows(&test),
        y_test: test.iter().map(|&i| y[i]).collect(),
    })
}
