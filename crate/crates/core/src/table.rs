//! Subject × column matrices stored as CSV with a leading `id` column.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::cohort::{open_csv, parse_num};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledMatrix<T> {
    pub ids: Vec<String>,
    pub columns: Vec<String>,
    pub values: Matrix<T>,
}

impl<T: Scalar> LabeledMatrix<T> {
    pub fn new(ids: Vec<String>, columns: Vec<String>, values: Matrix<T>) -> Result<Self> {
        if values.rows() != ids.len() || values.cols() != columns.len() {
            return Err(Error::Validation(format!(
                "matrix is {}×{} for {} ids and {} columns",
                values.rows(),
                values.cols(),
                ids.len(),
                columns.len()
            )));
        }
        Ok(LabeledMatrix { ids, columns, values })
    }

    /// Non-finite values are written as empty cells.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("id");
        for c in &self.columns {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for (i, id) in self.ids.iter().enumerate() {
            out.push_str(id);
            for j in 0..self.columns.len() {
                let v = self.values[(i, j)];
                out.push(',');
                if v.is_finite() {
                    let _ = write!(out, "{v}");
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv_string()).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let (headers, rows) = open_csv(path)?;
        if headers.first().map(String::as_str) != Some("id") {
            return Err(Error::Schema(format!("{}: first column must be 'id'", path.display())));
        }
        let columns: Vec<String> = headers[1..].to_vec();
        let mut ids = Vec::with_capacity(rows.len());
        let mut data = Vec::with_capacity(rows.len() * columns.len());
        for (r, rec) in rows.iter().enumerate() {
            ids.push(rec[0].to_string());
            for (j, c) in columns.iter().enumerate() {
                let cell = rec.get(j + 1).unwrap_or("");
                data.push(if cell.is_empty() { T::nan() } else { parse_num(path, r + 2, c, cell)? });
            }
        }
        let values = Matrix::from_vec(ids.len(), columns.len(), data)?;
        Self::new(ids, columns, values)
    }

    /// Row index of every id in `ids`; missing ids are listed in the error.
    pub fn align(&self, ids: &[String]) -> Result<Vec<usize>> {
        let index: std::collections::HashMap<&str, usize> =
            self.ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let mut missing = Vec::new();
        let rows: Vec<usize> = ids
            .iter()
            .filter_map(|id| {
                let r = index.get(id.as_str()).copied();
                if r.is_none() {
                    missing.push(id.clone());
                }
                r
            })
            .collect();
        if missing.is_empty() {
            Ok(rows)
        } else {
            let shown: Vec<_> = missing.iter().take(5).cloned().collect();
            Err(Error::Validation(format!("{} ids not found in matrix (first: {})", missing.len(), shown.join(", "))))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_is_exact() {
        let values = Matrix::from_rows(&[vec![0.1, -2.5e-17], vec![1.0 / 3.0, f64::NAN]]).unwrap();
        let m = LabeledMatrix::new(vec!["a".into(), "b".into()], vec!["r1".into(), "r2".into()], values).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        m.write_csv(&p).unwrap();
        let back = LabeledMatrix::<f64>::read_csv(&p).unwrap();
        assert_eq!(back.ids, m.ids);
        assert_eq!(back.values[(1, 0)], 1.0 / 3.0);
        assert_eq!(back.values[(0, 1)], -2.5e-17);
        assert!(back.values[(1, 1)].is_nan());
        assert_eq!(back.to_csv_string(), m.to_csv_string());
    }

    #[test]
    fn align_reports_missing_ids() {
        let m = LabeledMatrix::new(vec!["a".into(), "b".into()], vec![], Matrix::<f64>::zeros(2, 0)).unwrap();
        assert_eq!(m.align(&["b".into(), "a".into()]).unwrap(), vec![1, 0]);
        assert!(m.align(&["c".into()]).is_err());
    }
}
