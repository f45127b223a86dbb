use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::warn;

use crate::error::{Error, Result};
use crate::graphcore::ConnectivityMatrix;

/// Slack allowed on symmetry, range and diagonal before a file is rejected.
pub const INPUT_TOLERANCE: f64 = 1e-9;

pub fn read_matrix_csv(path: &Path) -> Result<ConnectivityMatrix> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_matrix_csv(&text, path)
}

/// Parses and validates one matrix. Row and column numbers in errors are 1-based.
///
/// Entries within [`INPUT_TOLERANCE`] of a valid matrix are repaired (averaged
/// with their mirror, clamped, diagonal zeroed) and a warning is logged.
pub fn parse_matrix_csv(text: &str, path: &Path) -> Result<ConnectivityMatrix> {
    let cell = |row: usize, col: usize, reason: String| Error::Cell {
        file: path.to_path_buf(),
        row: row + 1,
        col: col + 1,
        reason,
    };

    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (r, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .enumerate()
            .map(|(c, field)| {
                field
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| cell(r, c, format!("cannot parse {:?}: {e}", field.trim())))
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    let n = rows.len();
    if n == 0 {
        return Err(Error::Data(format!(
            "{}: empty matrix file",
            path.display()
        )));
    }
    for (r, row) in rows.iter().enumerate() {
        if row.len() != n {
            return Err(cell(
                r,
                row.len().min(n),
                format!("row has {} values, expected {n}", row.len()),
            ));
        }
    }

    let tol = INPUT_TOLERANCE;
    let mut repaired = false;
    let mut weights = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let w = rows[i][j];
            if !w.is_finite() {
                return Err(cell(i, j, format!("{w} is not finite")));
            }
            if w < -tol || w > 1.0 + tol {
                return Err(cell(i, j, format!("{w} lies outside [0, 1]")));
            }
            if i == j {
                if w.abs() > tol {
                    return Err(cell(i, j, format!("diagonal entry {w} must be 0")));
                }
                repaired |= w != 0.0;
                continue;
            }
            let mirror = rows[j][i];
            if (w - mirror).abs() > tol {
                return Err(cell(i, j, format!("{w} differs from its mirror {mirror}")));
            }
            let v = if w == mirror { w } else { 0.5 * (w + mirror) };
            let v = v.clamp(0.0, 1.0);
            repaired |= v != w;
            weights[i * n + j] = v;
        }
    }
    if repaired {
        warn!(
            "{}: repaired entries within {tol} of a valid connectivity matrix",
            path.display()
        );
    }
    ConnectivityMatrix::new(n, weights)
}

/// Writes shortest round-trip decimals so a reload is bit-exact.
pub fn write_matrix_csv(path: &Path, g: &ConnectivityMatrix) -> Result<()> {
    let n = g.n_rois();
    let mut s = String::with_capacity(n * n * 20);
    for i in 0..n {
        for (j, w) in g.row(i).iter().enumerate() {
            if j > 0 {
                s.push(',');
            }
            write!(s, "{w}").unwrap();
        }
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<ConnectivityMatrix> {
        parse_matrix_csv(text, Path::new("m.csv"))
    }

    #[test]
    fn out_of_range_names_cell() {
        let err = parse("0,1.5\n1.5,0\n").unwrap_err();
        match err {
            Error::Cell {
                row, col, reason, ..
            } => {
                assert_eq!((row, col), (1, 2));
                assert!(reason.contains("1.5"));
            }
            e => panic!("{e}"),
        }
    }

    #[test]
    fn unparsable_names_cell() {
        let err = parse("0,0.1,0.2\n0.1,0,x\n0.2,0.3,0\n").unwrap_err();
        assert!(matches!(err, Error::Cell { row: 2, col: 3, .. }), "{err}");
        assert!(err.to_string().contains("m.csv"));
    }

    #[test]
    fn small_asymmetry_is_repaired() {
        let g = parse("0,0.5\n0.5000000001,0\n").unwrap();
        assert_eq!(g.get(0, 1), g.get(1, 0));
        assert!((g.get(0, 1) - 0.50000000005).abs() < 1e-15);
    }

    #[test]
    fn large_asymmetry_rejected() {
        assert!(matches!(parse("0,0.5\n0.6,0\n"), Err(Error::Cell { .. })));
    }

    #[test]
    fn ragged_rows_rejected() {
        assert!(matches!(
            parse("0,0.5\n0.5\n"),
            Err(Error::Cell { row: 2, .. })
        ));
    }

    #[test]
    fn write_then_read_is_exact() {
        let g = ConnectivityMatrix::from_rows(&[
            vec![0.0, 0.1 + 0.2, 1.0 / 3.0],
            vec![0.1 + 0.2, 0.0, 1e-17],
            vec![1.0 / 3.0, 1e-17, 0.0],
        ])
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.csv");
        write_matrix_csv(&p, &g).unwrap();
        assert_eq!(read_matrix_csv(&p).unwrap(), g);
    }
}
