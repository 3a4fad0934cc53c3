//! CSV output: comma-separated, header row, floats with 17 significant digits.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CsvError {
    #[error(transparent)]
    Csv(#[from] ::csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("row {row} has {found} fields, header has {expected}")]
    Width { row: usize, expected: usize, found: usize },
}

/// `{:.16e}` keeps every bit of an `f64` through a text round trip.
pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes numeric rows under `header`.
pub fn write_rows<W, I>(out: W, header: &[String], rows: I) -> Result<(), CsvError>
where
    W: CsvSink,
    I: IntoIterator<Item = Vec<f64>>,
{
    let mut w = ::csv::Writer::from_writer(out.open()?);
    w.write_record(header)?;
    for (i, r) in rows.into_iter().enumerate() {
        if r.len() != header.len() {
            return Err(CsvError::Width {
                row: i,
                expected: header.len(),
                found: r.len(),
            });
        }
        w.write_record(r.iter().map(|v| format_float(*v)))?;
    }
    w.flush()?;
    Ok(())
}

/// Something a CSV writer can be opened on.
pub trait CsvSink {
    type Writer: Write;
    fn open(self) -> Result<Self::Writer, std::io::Error>;
}

impl CsvSink for &Path {
    type Writer = File;
    fn open(self) -> Result<File, std::io::Error> {
        File::create(self)
    }
}

impl<'a> CsvSink for &'a mut Vec<u8> {
    type Writer = &'a mut Vec<u8>;
    fn open(self) -> Result<Self::Writer, std::io::Error> {
        Ok(self)
    }
}

/// Reads a numeric CSV written by [`write_rows`].
pub fn read_rows(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>), CsvError> {
    let mut r = ::csv::Reader::from_path(path)?;
    let header = r.headers()?.iter().map(str::to_owned).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        rows.push(
            rec.iter()
                .map(|f| f.parse::<f64>().map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e)))
                .collect::<Result<Vec<_>, _>>()?,
        );
    }
    Ok((header, rows))
}

/// Column names `prefix_0 .. prefix_{n-1}`.
pub fn indexed(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}_{i}")).collect()
}
