//! Logistic propensity-score model: design construction, maximum-likelihood
//! fitting by Newton–Raphson with step-halving, and prediction.

use nalgebra::DVector;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{solve_symmetric, weighted_colsum, weighted_crossprod};
use crate::term::Term;

/// Regressor matrix with a leading intercept column, stored column-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    cols: Vec<Vec<f64>>,
    labels: Vec<String>,
}

impl DesignMatrix {
    /// Builds a design from raw columns (without intercept); the intercept is
    /// prepended.
    pub fn from_columns(columns: Vec<Vec<f64>>, labels: Vec<String>) -> Result<Self> {
        let n = columns.first().map(Vec::len).unwrap_or(0);
        Self::with_rows(n, columns, labels)
    }

    pub fn intercept_only(n: usize) -> Result<Self> {
        Self::with_rows(n, Vec::new(), Vec::new())
    }

    fn with_rows(n: usize, columns: Vec<Vec<f64>>, labels: Vec<String>) -> Result<Self> {
        if columns.len() != labels.len() {
            return Err(Error::DimensionMismatch { expected: columns.len(), found: labels.len() });
        }
        if columns.len() + 1 > n {
            return Err(Error::InvalidData(format!(
                "design has {} columns but only {n} rows",
                columns.len() + 1
            )));
        }
        for (c, label) in columns.iter().zip(&labels) {
            if c.len() != n {
                return Err(Error::DimensionMismatch { expected: n, found: c.len() });
            }
            if let Some(row) = c.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFiniteTerm { term: label.clone(), row });
            }
        }
        let mut cols = Vec::with_capacity(columns.len() + 1);
        cols.push(vec![1.0; n]);
        cols.extend(columns);
        Ok(Self { cols, labels })
    }

    pub fn nrows(&self) -> usize {
        self.cols[0].len()
    }

    /// Number of columns including the intercept.
    pub fn ncols(&self) -> usize {
        self.cols.len()
    }

    /// Term labels, excluding the intercept.
    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// All columns, the first being the intercept.
    pub fn columns(&self) -> &[Vec<f64>] {
        &self.cols
    }

    pub fn row(&self, i: usize) -> DVector<f64> {
        DVector::from_iterator(self.cols.len(), self.cols.iter().map(|c| c[i]))
    }

    pub fn linear_predictor(&self, beta: &[f64]) -> Result<Vec<f64>> {
        if beta.len() != self.ncols() {
            return Err(Error::DimensionMismatch { expected: self.ncols(), found: beta.len() });
        }
        let mut eta = vec![0.0; self.nrows()];
        for (c, b) in self.cols.iter().zip(beta) {
            for (e, x) in eta.iter_mut().zip(c) {
                *e += b * x;
            }
        }
        Ok(eta)
    }

    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let cols = self.cols[1..].iter().map(|c| rows.iter().map(|&i| c[i]).collect()).collect();
        Self::with_rows(rows.len(), cols, self.labels.clone())
    }
}

/// Builds the intercept-augmented design for `terms` over `data`.
pub fn build_design(data: &Dataset, terms: &[Term]) -> Result<DesignMatrix> {
    let columns = terms.iter().map(|t| t.eval(data)).collect::<Result<Vec<_>>>()?;
    let labels = terms.iter().map(|t| t.label.clone()).collect();
    DesignMatrix::with_rows(data.n(), columns, labels)
}

/// Identity terms for every covariate of `data`.
pub fn all_columns(data: &Dataset) -> Vec<Term> {
    data.names().iter().map(|n| Term::column(n)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub max_iter: usize,
    pub score_tol: f64,
    pub step_halving_max: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { max_iter: 100, score_tol: 1e-8, step_halving_max: 30 }
    }
}

/// A fitted logistic regression.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticModel {
    pub beta: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub max_abs_score: f64,
}

/// Newton steps larger than this (sup norm, relative to `1 + |beta|`) mean
/// the iterate is still moving, whatever the score says. Under separation
/// the score decays geometrically while the step stays O(1).
const STEP_TOL: f64 = 1e-6;

/// Relative rounding allowance when comparing objective values.
const NLL_ROUNDING: f64 = 64.0 * f64::EPSILON;

/// Largest double strictly below one.
const ONE_BELOW: f64 = 1.0 - f64::EPSILON / 2.0;

/// Numerically stable `1 / (1 + exp(-eta))`, kept inside the open unit
/// interval at the representable extremes.
pub fn logistic(eta: f64) -> f64 {
    let p = if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let t = eta.exp();
        t / (1.0 + t)
    };
    p.clamp(f64::MIN_POSITIVE, ONE_BELOW)
}

/// `log(1 + exp(eta))` without overflow.
fn softplus(eta: f64) -> f64 {
    if eta > 0.0 {
        eta + (-eta).exp().ln_1p()
    } else {
        eta.exp().ln_1p()
    }
}

fn neg_log_likelihood(eta: &[f64], z: &[bool]) -> f64 {
    eta.iter()
        .zip(z)
        .map(|(&e, &t)| softplus(e) - if t { e } else { 0.0 })
        .sum()
}

/// Maximum-likelihood logistic fit of `z` on `design`, starting from zero.
pub fn fit_logistic(design: &DesignMatrix, z: &[bool], opts: &FitOptions) -> Result<LogisticModel> {
    let n = design.nrows();
    if z.len() != n {
        return Err(Error::DimensionMismatch { expected: n, found: z.len() });
    }
    let k = design.ncols();
    let cols = design.columns();
    let mut beta = DVector::<f64>::zeros(k);
    let mut eta = vec![0.0; n];
    let mut nll = neg_log_likelihood(&eta, z);
    let mut max_abs_score = f64::INFINITY;

    for iter in 0..opts.max_iter {
        let e: Vec<f64> = eta.iter().map(|&v| logistic(v)).collect();
        let resid: Vec<f64> = z.iter().zip(&e).map(|(&t, p)| f64::from(u8::from(t)) - p).collect();
        let score = weighted_colsum(cols, &resid);
        max_abs_score = score.amax();
        let w: Vec<f64> = e.iter().map(|p| p * (1.0 - p)).collect();
        let info = weighted_crossprod(cols, &w);
        let step = match solve_symmetric(&info, &score, "logistic information matrix") {
            Ok(step) => step,
            // Singular at β = 0 means collinear columns. Later on it means the
            // fitted scores are running off to 0 or 1.
            Err(err) if iter == 0 => return Err(err),
            Err(_) => return Err(Error::NonConvergence { iterations: iter, max_abs_score }),
        };
        let scale = 1.0 + beta.amax();
        if max_abs_score <= opts.score_tol && step.amax() <= STEP_TOL * scale {
            return Ok(LogisticModel {
                beta: beta.iter().cloned().collect(),
                converged: true,
                iterations: iter,
                max_abs_score,
            });
        }

        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..=opts.step_halving_max {
            let cand = &beta + &step * t;
            let cand_eta = design.linear_predictor(cand.as_slice())?;
            let cand_nll = neg_log_likelihood(&cand_eta, z);
            // Near the optimum the change in the objective is below the
            // rounding error of its sum, so ties at that scale are accepted.
            let slack = NLL_ROUNDING * nll.abs().max(1.0);
            if cand_nll.is_finite() && cand_nll <= nll + slack {
                beta = cand;
                eta = cand_eta;
                nll = cand_nll;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            // No step lowers the objective: we sit at the floating-point optimum.
            if max_abs_score <= opts.score_tol {
                return Ok(LogisticModel {
                    beta: beta.iter().cloned().collect(),
                    converged: true,
                    iterations: iter,
                    max_abs_score,
                });
            }
            return Err(Error::NonConvergence { iterations: iter + 1, max_abs_score });
        }
        if beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::NonConvergence { iterations: iter + 1, max_abs_score });
        }
    }
    Err(Error::NonConvergence { iterations: opts.max_iter, max_abs_score })
}

/// Fitted propensity scores with their range.
#[derive(Debug, Clone, PartialEq)]
pub struct PsPrediction {
    pub e: Vec<f64>,
    pub min: f64,
    pub max: f64,
}

pub fn predict_ps(model: &LogisticModel, design: &DesignMatrix) -> Result<PsPrediction> {
    let eta = design.linear_predictor(&model.beta)?;
    let e: Vec<f64> = eta.into_iter().map(logistic).collect();
    let min = e.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = e.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(PsPrediction { e, min, max })
}
