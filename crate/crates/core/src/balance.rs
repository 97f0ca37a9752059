//! Covariate balance before and after weighting.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::pscore::{predict_ps, DesignMatrix, LogisticModel};
use crate::tilt::TiltSpec;

fn group_moments(x: &[f64], z: &[bool], arm: bool) -> (f64, f64, usize) {
    let vals: Vec<f64> = x.iter().zip(z).filter(|(_, &t)| t == arm).map(|(&v, _)| v).collect();
    let n = vals.len();
    let mean = vals.iter().sum::<f64>() / n as f64;
    let var = if n > 1 {
        vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    (mean, var, n)
}

/// `sqrt((s1² + s0²) / 2)` from unweighted sample variances.
pub fn pooled_sd(x: &[f64], z: &[bool]) -> f64 {
    let (_, v1, _) = group_moments(x, z, true);
    let (_, v0, _) = group_moments(x, z, false);
    ((v1 + v0) / 2.0).sqrt()
}

fn weighted_means(x: &[f64], z: &[bool], w: &[f64]) -> Result<(f64, f64)> {
    let (mut s1, mut s0, mut a1, mut a0) = (0.0, 0.0, 0.0, 0.0);
    for ((&x, &t), &w) in x.iter().zip(z).zip(w) {
        if t {
            s1 += w;
            a1 += w * x;
        } else {
            s0 += w;
            a0 += w * x;
        }
    }
    if !(s1 > 0.0) {
        return Err(Error::EmptyArm { arm: "treated" });
    }
    if !(s0 > 0.0) {
        return Err(Error::EmptyArm { arm: "control" });
    }
    Ok((a1 / s1, a0 / s0))
}

/// Standardized mean difference of `x` under weights `w`, scaled by the
/// unweighted pooled SD so that values are comparable across weightings.
pub fn weighted_smd(x: &[f64], z: &[bool], w: &[f64]) -> Result<f64> {
    if x.len() != z.len() || w.len() != z.len() {
        return Err(Error::DimensionMismatch { expected: z.len(), found: x.len().min(w.len()) });
    }
    let (m1, m0) = weighted_means(x, z, w)?;
    let sd = pooled_sd(x, z);
    if sd == 0.0 {
        // A constant covariate is balanced by any weights.
        return if m1 == m0 { Ok(0.0) } else { Err(Error::ZeroPooledSd) };
    }
    Ok((m1 - m0) / sd)
}

/// Kish effective sample size `(Σw)² / Σw²` per arm, treated first.
pub fn effective_sample_size(w: &[f64], z: &[bool]) -> Result<(f64, f64)> {
    let mut acc = [[0.0; 2]; 2];
    for (&w, &t) in w.iter().zip(z) {
        let g = usize::from(!t);
        acc[g][0] += w;
        acc[g][1] += w * w;
    }
    if !(acc[0][0] > 0.0) {
        return Err(Error::EmptyArm { arm: "treated" });
    }
    if !(acc[1][0] > 0.0) {
        return Err(Error::EmptyArm { arm: "control" });
    }
    Ok((acc[0][0].powi(2) / acc[0][1], acc[1][0].powi(2) / acc[1][1]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateBalance {
    pub covariate: String,
    /// Whether the column enters the propensity model as a term.
    pub in_model: bool,
    pub smd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodBalance {
    pub method: TiltSpec,
    pub rows: Vec<CovariateBalance>,
    pub ess_treated: f64,
    pub ess_control: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceReport {
    /// Unweighted SMDs, one per covariate.
    pub baseline: Vec<CovariateBalance>,
    pub n_treated: usize,
    pub n_control: usize,
    pub methods: Vec<MethodBalance>,
}

impl BalanceReport {
    pub fn covariates(&self) -> impl Iterator<Item = &str> {
        self.baseline.iter().map(|r| r.covariate.as_str())
    }

    pub fn max_abs_smd(rows: &[CovariateBalance]) -> f64 {
        rows.iter().map(|r| r.smd.abs()).fold(0.0, f64::max)
    }
}

/// Balance of every design term and of every dataset column that is not itself
/// a design term, unweighted and under each of `specs`.
pub fn balance_report(
    data: &Dataset,
    design: &DesignMatrix,
    model: &LogisticModel,
    specs: &[TiltSpec],
) -> Result<BalanceReport> {
    let z = data.z();
    let mut covs: Vec<(String, bool, &[f64])> = design
        .labels()
        .iter()
        .zip(&design.columns()[1..])
        .map(|(l, c)| (l.clone(), true, c.as_slice()))
        .collect();
    for (name, col) in data.names().iter().zip(data.columns()) {
        if !design.labels().contains(name) {
            covs.push((name.clone(), false, col.as_slice()));
        }
    }

    let ones = vec![1.0; z.len()];
    let rows_for = |w: &[f64]| -> Result<Vec<CovariateBalance>> {
        covs.iter()
            .map(|(name, in_model, col)| {
                Ok(CovariateBalance {
                    covariate: name.clone(),
                    in_model: *in_model,
                    smd: weighted_smd(col, z, w)?,
                })
            })
            .collect()
    };
    let baseline = rows_for(&ones)?;

    let e = if specs.is_empty() { Vec::new() } else { predict_ps(model, design)?.e };
    let mut methods = Vec::with_capacity(specs.len());
    for &spec in specs {
        let w: Vec<f64> = e.iter().zip(z).map(|(&p, &t)| spec.weight_unchecked(p, t)).collect();
        let (ess_treated, ess_control) = effective_sample_size(&w, z)?;
        methods.push(MethodBalance { method: spec, rows: rows_for(&w)?, ess_treated, ess_control });
    }
    let n_treated = data.n_treated();
    Ok(BalanceReport { baseline, n_treated, n_control: data.n() - n_treated, methods })
}
