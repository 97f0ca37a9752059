//! Observed data: outcome, binary treatment and covariates.

use crate::error::{Error, Result};

/// Observed triplets `(y, z, x)` for `n` units.
///
/// Covariates are stored column-wise; `names[j]` labels `columns[j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    y: Vec<f64>,
    z: Vec<bool>,
    columns: Vec<Vec<f64>>,
    names: Vec<String>,
}

impl Dataset {
    /// Validates and builds a dataset. `z` must contain only 0.0 or 1.0.
    pub fn new(y: Vec<f64>, z: Vec<f64>, columns: Vec<Vec<f64>>, names: Vec<String>) -> Result<Self> {
        let z = z
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                if v == 1.0 {
                    Ok(true)
                } else if v == 0.0 {
                    Ok(false)
                } else {
                    Err(Error::InvalidData(format!("treatment value {v} at row {i} is not 0 or 1")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_bool(y, z, columns, names)
    }

    pub fn from_bool(y: Vec<f64>, z: Vec<bool>, columns: Vec<Vec<f64>>, names: Vec<String>) -> Result<Self> {
        let n = y.len();
        if n < 2 {
            return Err(Error::InvalidData(format!("need at least 2 rows, found {n}")));
        }
        if z.len() != n {
            return Err(Error::DimensionMismatch { expected: n, found: z.len() });
        }
        if columns.len() != names.len() {
            return Err(Error::InvalidData(format!(
                "{} covariate columns but {} names",
                columns.len(),
                names.len()
            )));
        }
        for (col, name) in columns.iter().zip(&names) {
            if col.len() != n {
                return Err(Error::DimensionMismatch { expected: n, found: col.len() });
            }
            if let Some(i) = col.iter().position(|v| !v.is_finite()) {
                return Err(Error::InvalidData(format!("non-finite value in `{name}` at row {i}")));
            }
        }
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidData(format!("non-finite outcome at row {i}")));
        }
        let treated = z.iter().filter(|&&t| t).count();
        if treated == 0 || treated == n {
            return Err(Error::InvalidData("both treatment groups must be non-empty".into()));
        }
        Ok(Self { y, z, columns, names })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn z(&self) -> &[bool] {
        &self.z
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn columns(&self) -> &[Vec<f64>] {
        &self.columns
    }

    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|j| self.columns[j].as_slice())
    }

    pub fn n_treated(&self) -> usize {
        self.z.iter().filter(|&&t| t).count()
    }

    /// Resamples rows by index (used for the bootstrap).
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let pick = |v: &[f64]| rows.iter().map(|&i| v[i]).collect::<Vec<_>>();
        Self::from_bool(
            pick(&self.y),
            rows.iter().map(|&i| self.z[i]).collect(),
            self.columns.iter().map(|c| pick(c)).collect(),
            self.names.clone(),
        )
    }
}
