//! Text matrices: a `rows cols` header, then one line per row of
//! space-separated values in `{:.16e}` form (17 significant digits, enough
//! for every `f64` to read back bit-identically).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{CliError, CliResult};

pub fn to_string(m: &DMatrix<f64>) -> String {
    let mut s = String::with_capacity(24 * (m.len() + 1));
    let _ = writeln!(s, "{} {}", m.nrows(), m.ncols());
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            if c > 0 {
                s.push(' ');
            }
            let _ = write!(s, "{:.16e}", m[(r, c)]);
        }
        s.push('\n');
    }
    s
}

/// Parses the body of a matrix block. `origin` is used in error messages.
pub fn parse(text: &str, origin: &Path) -> CliResult<DMatrix<f64>> {
    let bad = |msg: String| CliError::Format { path: origin.to_path_buf(), msg };
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad("empty matrix file".into()))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| bad(format!("bad header {header:?}")))?;
    let [rows, cols] = dims[..] else {
        return Err(bad(format!("header must be `rows cols`, got {header:?}")));
    };
    let mut values = Vec::with_capacity(rows * cols);
    let mut seen_rows = 0;
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let before = values.len();
        for tok in line.split_whitespace() {
            let v: f64 = tok.parse().map_err(|_| bad(format!("row {}: bad value {tok:?}", i + 1)))?;
            values.push(v);
        }
        if values.len() - before != cols {
            return Err(bad(format!("row {} has {} values, expected {cols}", i + 1, values.len() - before)));
        }
        seen_rows += 1;
    }
    if seen_rows != rows {
        return Err(bad(format!("declared {rows} rows, found {seen_rows}")));
    }
    Ok(DMatrix::from_row_slice(rows, cols, &values))
}

pub fn write(path: &Path, m: &DMatrix<f64>) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, to_string(m)).map_err(|e| CliError::io(path, e))
}

pub fn read(path: &Path) -> CliResult<DMatrix<f64>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn format_is_stable() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, -0.5, 0.1, 3e-300]);
        let s = to_string(&m);
        assert_eq!(
            s,
            "2 2\n1.0000000000000000e0 -5.0000000000000000e-1\n1.0000000000000001e-1 3.0000000000000002e-300\n"
        );
        assert_eq!(parse(&s, Path::new("m")).unwrap(), m);
    }

    #[test]
    fn empty_shapes_round_trip() {
        let m = DMatrix::<f64>::zeros(0, 3);
        assert_eq!(parse(&to_string(&m), Path::new("m")).unwrap().shape(), (0, 3));
    }

    #[test]
    fn malformed_inputs_are_rejected() {
        let p = Path::new("m");
        assert!(parse("", p).is_err());
        assert!(parse("2\n1\n", p).is_err());
        assert!(parse("1 2\n1.0\n", p).is_err());
        assert!(parse("2 1\n1.0\n", p).is_err());
        assert!(parse("1 1\nabc\n", p).is_err());
    }
}
