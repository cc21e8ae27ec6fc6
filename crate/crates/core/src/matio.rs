//! Complex matrix text format shared between the library and the
//! experiment harness.
//!
//! Layout: a header line `rows,cols`, then one line per matrix row with
//! comma-separated `re:im` pairs. Values are written with 17 significant
//! digits so a write/read round trip is bit exact.

use crate::CMat;
use ndarray::Array2;
use num_complex::Complex64;
use std::fmt::Write as _;
use std::io;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MatIoError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("malformed matrix file: {0}")]
    Malformed(String),
}

/// Serializes a matrix to the dump format.
pub fn write_matrix_string(a: &CMat) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{},{}", a.nrows(), a.ncols());
    for row in a.rows() {
        let mut first = true;
        for v in row {
            if !first {
                out.push(',');
            }
            first = false;
            let _ = write!(out, "{:.16e}:{:.16e}", v.re, v.im);
        }
        out.push('\n');
    }
    out
}

pub fn write_matrix(path: &Path, a: &CMat) -> Result<(), MatIoError> {
    std::fs::write(path, write_matrix_string(a))?;
    Ok(())
}

/// Parses a matrix from the dump format.
pub fn read_matrix_string(text: &str) -> Result<CMat, MatIoError> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| MatIoError::Malformed("empty file".into()))?;
    let (r, c) = header
        .split_once(',')
        .ok_or_else(|| MatIoError::Malformed(format!("bad header {header:?}")))?;
    let rows: usize = r
        .trim()
        .parse()
        .map_err(|_| MatIoError::Malformed(format!("bad row count {r:?}")))?;
    let cols: usize = c
        .trim()
        .parse()
        .map_err(|_| MatIoError::Malformed(format!("bad column count {c:?}")))?;
    let mut a = Array2::zeros((rows, cols));
    for i in 0..rows {
        let line = lines
            .next()
            .ok_or_else(|| MatIoError::Malformed(format!("missing row {i}")))?;
        let mut entries = line.split(',');
        for j in 0..cols {
            let pair = entries
                .next()
                .ok_or_else(|| MatIoError::Malformed(format!("row {i} short at column {j}")))?;
            let (re, im) = pair
                .split_once(':')
                .ok_or_else(|| MatIoError::Malformed(format!("bad entry {pair:?}")))?;
            let re: f64 = re
                .parse()
                .map_err(|_| MatIoError::Malformed(format!("bad real part {re:?}")))?;
            let im: f64 = im
                .parse()
                .map_err(|_| MatIoError::Malformed(format!("bad imaginary part {im:?}")))?;
            a[[i, j]] = Complex64::new(re, im);
        }
        if entries.next().is_some() {
            return Err(MatIoError::Malformed(format!("row {i} has extra entries")));
        }
    }
    Ok(a)
}

pub fn read_matrix(path: &Path) -> Result<CMat, MatIoError> {
    read_matrix_string(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_and_shape() {
        let a = Array2::from_shape_fn((2, 3), |(i, j)| Complex64::new(i as f64, j as f64));
        let text = write_matrix_string(&a);
        assert!(text.starts_with("2,3\n"));
        let b = read_matrix_string(&text).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_malformed() {
        assert!(read_matrix_string("").is_err());
        assert!(read_matrix_string("2,2\n1:2,3:4\n").is_err());
        assert!(read_matrix_string("1,1\n1;2\n").is_err());
    }

    proptest! {
        #[test]
        fn round_trip_bit_exact(values in proptest::collection::vec((-1e6f64..1e6, -1e6f64..1e6), 1..40)) {
            let n = values.len();
            let a = Array2::from_shape_vec((1, n),
                values.into_iter().map(|(re, im)| Complex64::new(re, im)).collect()).unwrap();
            let b = read_matrix_string(&write_matrix_string(&a)).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
