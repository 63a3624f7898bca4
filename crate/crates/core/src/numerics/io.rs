//! Plain CSV matrices: one row per line, comma separated decimal floats, no
//! header. Point clouds use the same layout with one point per line.

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use crate::{DenseMatrix, Error, ParticleCloud, Result};

pub fn read_matrix<R: Read>(reader: R) -> Result<DenseMatrix> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (line, record) in rdr.records().enumerate() {
        let record = record?;
        let row = record
            .iter()
            .map(|field| {
                field.parse::<f64>().map_err(|e| {
                    Error::Parse(format!("line {}: `{field}`: {e}", line + 1))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    DenseMatrix::from_rows(&rows)
}

pub fn write_matrix<W: Write>(writer: W, m: &DenseMatrix) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    for i in 0..m.rows() {
        wtr.write_record(m.row(i).iter().map(|v| format_float(*v)))?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_matrix_file(path: impl AsRef<Path>) -> Result<DenseMatrix> {
    read_matrix(BufReader::new(File::open(path)?))
}

pub fn read_cloud_file(path: impl AsRef<Path>) -> Result<ParticleCloud> {
    ParticleCloud::new(read_matrix_file(path)?)
}

/// Shortest decimal representation that round-trips to the same `f64`.
pub fn format_float(v: f64) -> String {
    format!("{v:?}")
}
