use std::fs::File;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;

use crate::error::{DuetError, Result};

/// A multivariate series stored channel-major: `values[[n, t]]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesDataset {
    pub values: Array2<f64>,
    pub channel_names: Vec<String>,
    pub source_path: String,
    pub frequency_label: String,
}

impl TimeSeriesDataset {
    /// Builds a dataset from channel-major values, checking the invariants.
    pub fn new(values: Array2<f64>, channel_names: Vec<String>) -> Result<Self> {
        let (n, l) = values.dim();
        if n == 0 || l == 0 {
            return Err(DuetError::EmptyDataset(format!("{n} channels x {l} rows")));
        }
        if channel_names.len() != n {
            return Err(crate::error::shape_mismatch(
                "channel names",
                n,
                channel_names.len(),
            ));
        }
        if let Some(((c, t), v)) = values.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(DuetError::Parse {
                row: t + 1,
                col: c + 1,
                detail: format!("non-finite value {v}"),
            });
        }
        Ok(Self {
            values,
            channel_names,
            source_path: String::new(),
            frequency_label: String::new(),
        })
    }

    pub fn channels(&self) -> usize {
        self.values.nrows()
    }

    pub fn len(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Reads a comma-separated file whose rows are ascending timestamps.
///
/// The optional `date_column` is matched by header name and dropped; every
/// other column becomes a channel. Parse errors report the 1-based data row
/// (header excluded) and the 1-based channel column (date column excluded).
pub fn load_dataset(
    path: impl AsRef<Path>,
    has_header: bool,
    date_column: Option<&str>,
) -> Result<TimeSeriesDataset> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(DuetError::FileNotFound(path.to_path_buf()));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| DuetError::Io(std::io::Error::other(e)))?;

    let headers: Vec<String> = if has_header {
        reader
            .headers()
            .map_err(|e| DuetError::Io(std::io::Error::other(e)))?
            .iter()
            .map(str::to_owned)
            .collect()
    } else {
        Vec::new()
    };
    let skip = match date_column {
        Some(name) if has_header => headers.iter().position(|h| h == name),
        _ => None,
    };

    let mut columns: Vec<Vec<f64>> = Vec::new();
    let mut rows = 0usize;
    for (r, record) in reader.records().enumerate() {
        let record = record.map_err(|e| DuetError::Parse {
            row: r + 1,
            col: 0,
            detail: e.to_string(),
        })?;
        let cells: Vec<&str> = record
            .iter()
            .enumerate()
            .filter(|(i, _)| Some(*i) != skip)
            .map(|(_, c)| c)
            .collect();
        if columns.is_empty() {
            columns = vec![Vec::new(); cells.len()];
        } else if cells.len() != columns.len() {
            return Err(DuetError::Parse {
                row: r + 1,
                col: cells.len().min(columns.len()) + 1,
                detail: format!("expected {} fields, found {}", columns.len(), cells.len()),
            });
        }
        for (c, cell) in cells.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| DuetError::Parse {
                row: r + 1,
                col: c + 1,
                detail: format!("`{cell}` is not a number"),
            })?;
            if !v.is_finite() {
                return Err(DuetError::Parse {
                    row: r + 1,
                    col: c + 1,
                    detail: format!("`{cell}` is not finite"),
                });
            }
            columns[c].push(v);
        }
        rows += 1;
    }
    if rows == 0 || columns.is_empty() {
        return Err(DuetError::EmptyDataset(path.display().to_string()));
    }

    let n = columns.len();
    let names = if has_header {
        headers
            .iter()
            .enumerate()
            .filter(|(i, _)| Some(*i) != skip)
            .map(|(_, h)| h.clone())
            .collect()
    } else {
        (0..n).map(|i| format!("c{i}")).collect()
    };
    let flat: Vec<f64> = columns.into_iter().flatten().collect();
    let values = Array2::from_shape_vec((n, rows), flat).expect("column lengths agree");
    let mut ds = TimeSeriesDataset::new(values, names)?;
    ds.source_path = path.display().to_string();
    Ok(ds)
}

/// Writes a dataset in the ingestion format: an integer `date` index column
/// followed by one column per channel.
pub fn write_dataset_csv(ds: &TimeSeriesDataset, path: impl AsRef<Path>) -> Result<()> {
    let mut out = std::io::BufWriter::new(File::create(path)?);
    write!(out, "date")?;
    for name in &ds.channel_names {
        write!(out, ",{name}")?;
    }
    writeln!(out)?;
    for t in 0..ds.len() {
        write!(out, "{t}")?;
        for n in 0..ds.channels() {
            write!(out, ",{}", ds.values[[n, t]])?;
        }
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}
