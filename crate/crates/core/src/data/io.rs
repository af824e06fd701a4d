//! Matrix files.
//!
//! CSV: UTF-8, comma separated, no header, one sample per row, `.` decimal
//! point. Values are written with 17 significant digits.
//!
//! CSMS binary: the ASCII magic `CSMS`, a version byte (`1`), little-endian
//! `u32` rows and cols, then `rows * cols` little-endian IEEE-754 `f32`
//! values in row-major order.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};

use crate::data::matrix::check_finite;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CSMS";
pub const VERSION: u8 = 1;
const HEADER_LEN: usize = 4 + 1 + 4 + 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatrixFormat {
    Csv,
    Bin,
}

impl MatrixFormat {
    /// `.csv` is CSV; `.bin` and `.csms` are binary.
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => Ok(MatrixFormat::Csv),
            Some(e) if e.eq_ignore_ascii_case("bin") || e.eq_ignore_ascii_case("csms") => {
                Ok(MatrixFormat::Bin)
            }
            _ => Err(Error::InvalidArgument(format!(
                "cannot infer matrix format from {}",
                path.display()
            ))),
        }
    }
}

impl FromStr for MatrixFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(MatrixFormat::Csv),
            "bin" => Ok(MatrixFormat::Bin),
            other => Err(Error::InvalidArgument(format!("unknown format {other:?}"))),
        }
    }
}

pub fn load_matrix(path: &Path, format: MatrixFormat) -> Result<Array2<f64>> {
    let m = match format {
        MatrixFormat::Csv => read_csv(path)?,
        MatrixFormat::Bin => {
            let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
            decode_bin(&bytes).map_err(|message| Error::Parse {
                path: path.to_path_buf(),
                line: 0,
                message,
            })?
        }
    };
    check_finite(m.view())?;
    Ok(m)
}

/// Load with the format inferred from the extension.
pub fn load_matrix_auto(path: &Path) -> Result<Array2<f64>> {
    load_matrix(path, MatrixFormat::from_path(path)?)
}

pub fn save_matrix(m: ArrayView2<'_, f64>, path: &Path, format: MatrixFormat) -> Result<()> {
    check_finite(m)?;
    let bytes = match format {
        MatrixFormat::Csv => encode_csv(m).into_bytes(),
        MatrixFormat::Bin => encode_bin(m)?,
    };
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&bytes)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn save_matrix_auto(m: ArrayView2<'_, f64>, path: &Path) -> Result<()> {
    save_matrix(m, path, MatrixFormat::from_path(path)?)
}

fn read_csv(path: &Path) -> Result<Array2<f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Parse {
                path: path.to_path_buf(),
                line: 0,
                message: format!("{other:?}"),
            },
        })?;

    let mut cols = None;
    let mut rows = 0usize;
    let mut flat = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            Error::Parse {
                path: path.to_path_buf(),
                line,
                message: e.to_string(),
            }
        })?;
        let line = record.position().map_or(rows as u64 + 1, |p| p.line());
        let expected = *cols.get_or_insert(record.len());
        if record.len() != expected {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("expected {expected} values, found {}", record.len()),
            });
        }
        for field in record.iter() {
            let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("not a number: {field:?}"),
            })?;
            flat.push(v);
        }
        rows += 1;
    }
    let cols = cols.unwrap_or(0);
    Array2::from_shape_vec((rows, cols), flat).map_err(|e| Error::Shape(e.to_string()))
}

pub fn encode_csv(m: ArrayView2<'_, f64>) -> String {
    let mut out = String::with_capacity(m.len() * 24);
    for row in m.rows() {
        let mut first = true;
        for v in row {
            if !first {
                out.push(',');
            }
            first = false;
            out.push_str(&format!("{v:.16e}"));
        }
        out.push('\n');
    }
    out
}

pub fn encode_bin(m: ArrayView2<'_, f64>) -> Result<Vec<u8>> {
    let (rows, cols) = m.dim();
    let rows32 = u32::try_from(rows).map_err(|_| Error::Shape(format!("{rows} rows")))?;
    let cols32 = u32::try_from(cols).map_err(|_| Error::Shape(format!("{cols} cols")))?;
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * m.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&rows32.to_le_bytes());
    out.extend_from_slice(&cols32.to_le_bytes());
    for ((row, col), &v) in m.indexed_iter() {
        let x = v as f32;
        if !x.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "value {v} at row {row}, col {col} overflows f32 storage"
            )));
        }
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_bin(bytes: &[u8]) -> std::result::Result<Array2<f64>, String> {
    if bytes.len() < HEADER_LEN {
        return Err(format!("truncated header ({} bytes)", bytes.len()));
    }
    if &bytes[..4] != MAGIC {
        return Err("bad magic, expected CSMS".into());
    }
    if bytes[4] != VERSION {
        return Err(format!("unsupported version {}", bytes[4]));
    }
    let rows = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
    let payload = &bytes[HEADER_LEN..];
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| format!("header {rows}x{cols} overflows"))?;
    if payload.len() != expected {
        return Err(format!(
            "payload is {} bytes, header {rows}x{cols} needs {expected}",
            payload.len()
        ));
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Array2::from_shape_vec((rows, cols), values).map_err(|e| e.to_string())
}
