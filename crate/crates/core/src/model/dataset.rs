use crate::error::{Error, Result};

/// Row-major matrix of 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows.checked_mul(cols) != Some(data.len()) {
            return Err(Error::invalid(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != cols {
                return Err(Error::invalid(format!(
                    "row {i} has {} entries, expected {cols}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// Features plus regression targets, one row per example.
///
/// Always nonempty and finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Matrix,
    targets: Vec<f64>,
}

impl Dataset {
    pub fn new(features: Matrix, targets: Vec<f64>) -> Result<Self> {
        if targets.is_empty() {
            return Err(Error::invalid("dataset has no rows"));
        }
        if features.rows() != targets.len() {
            return Err(Error::invalid(format!(
                "{} feature rows but {} targets",
                features.rows(),
                targets.len()
            )));
        }
        if features.cols() == 0 {
            return Err(Error::invalid("dataset has no feature columns"));
        }
        if let Some(i) = features.as_slice().iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite feature at row {}, column {}",
                i / features.cols(),
                i % features.cols()
            )));
        }
        if let Some(i) = targets.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite target at row {i}")));
        }
        Ok(Dataset { features, targets })
    }

    pub fn from_rows(rows: &[Vec<f64>], targets: Vec<f64>) -> Result<Self> {
        Dataset::new(Matrix::from_rows(rows)?, targets)
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn row(&self, i: usize) -> (&[f64], f64) {
        (self.features.row(i), self.targets[i])
    }

    /// New dataset made of the given rows, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Dataset> {
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        let mut targets = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::invalid(format!("row index {i} out of range")));
            }
            data.extend_from_slice(self.features.row(i));
            targets.push(self.targets[i]);
        }
        Dataset::new(Matrix::new(indices.len(), d, data)?, targets)
    }

    /// Split into the first `n` rows and the rest.
    pub fn split_at(&self, n: usize) -> Result<(Dataset, Dataset)> {
        if n == 0 || n >= self.len() {
            return Err(Error::invalid(format!(
                "cannot split {} rows at {n}",
                self.len()
            )));
        }
        let head: Vec<usize> = (0..n).collect();
        let tail: Vec<usize> = (n..self.len()).collect();
        Ok((self.select(&head)?, self.select(&tail)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_ragged_and_non_finite() {
        assert!(Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0]]).is_err());
        assert!(Dataset::from_rows(&[vec![f64::NAN]], vec![1.0]).is_err());
        assert!(Dataset::from_rows(&[vec![1.0]], vec![f64::INFINITY]).is_err());
        assert!(Dataset::from_rows(&[], vec![]).is_err());
    }

    #[test]
    fn split_keeps_order() {
        let ds =
            Dataset::from_rows(&[vec![1.0], vec![2.0], vec![3.0]], vec![10.0, 20.0, 30.0]).unwrap();
        let (a, b) = ds.split_at(2).unwrap();
        assert_eq!(a.targets(), &[10.0, 20.0]);
        assert_eq!(b.targets(), &[30.0]);
        assert_eq!(b.features().row(0), &[3.0]);
    }
}
