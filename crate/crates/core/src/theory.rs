//! Monte Carlo evaluation of the large-sample variance of the weighted
//! estimator and of its bias when the score model is misspecified.
//!
//! The variance is
//!
//! ```text
//! AV = E[h]^{-2} E[h² (σ1²/e + σ0²/(1-e))]
//! ```
//!
//! and the bias, with `ẽ` the limit of the misspecified fit and `h̃ = h(ẽ)`,
//!
//! ```text
//! ABias = E[(e/ẽ) h̃ m1] / E[(e/ẽ) h̃] - E[((1-e)/(1-ẽ)) h̃ m0] / E[((1-e)/(1-ẽ)) h̃] - Δ_h.
//! ```

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dgp::{
    generate_population, misspecified_terms, outcome_variance, McValue, Misspec, ScenarioConfig,
};
use crate::error::{Error, Result};
use crate::linalg::{solve_symmetric, weighted_colsum, weighted_crossprod};
use crate::pscore::{build_design, fit_logistic, predict_ps, DesignMatrix, FitOptions};
use crate::tilt::TiltSpec;

/// Smallest Monte Carlo sample accepted for the variance.
pub const MIN_MC: usize = 100_000;
/// Smallest super-population used to approximate the misspecified limit.
pub const MIN_FIT_N: usize = 1_000_000;

const VARIANCE_SALT: u64 = 0xa5a5_0001;
const BIAS_SALT: u64 = 0xa5a5_0002;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsymptoticReport {
    pub method: TiltSpec,
    pub av: f64,
    pub mc_se_av: f64,
    pub abias: f64,
    pub mc_se_abias: f64,
    pub beta_tilde: Vec<f64>,
}

/// Chunked sums folded in chunk order.
fn chunked_sums<F>(n: usize, width: usize, f: F) -> Vec<f64>
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    const CHUNK: usize = 1 << 16;
    let partial: Vec<Vec<f64>> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut acc = vec![0.0; width];
            for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
                f(i, &mut acc);
            }
            acc
        })
        .collect();
    let mut total = vec![0.0; width];
    for p in &partial {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    total
}

/// `A / B²` over per-unit pairs `(a_i, b_i)`, with a delta-method standard
/// error.
fn ratio_over_square(e: &[f64], pair: impl Fn(f64) -> (f64, f64) + Sync) -> McValue {
    let n = e.len();
    let s = chunked_sums(n, 5, |i, acc| {
        let (a, b) = pair(e[i]);
        acc[0] += a;
        acc[1] += b;
        acc[2] += a * a;
        acc[3] += a * b;
        acc[4] += b * b;
    });
    let nf = n as f64;
    let (a, b) = (s[0] / nf, s[1] / nf);
    let (caa, cab, cbb) = (s[2] / nf - a * a, s[3] / nf - a * b, s[4] / nf - b * b);
    // Gradient of a/b² is (1/b², -2a/b³).
    let (ga, gb) = (1.0 / (b * b), -2.0 * a / (b * b * b));
    let var = (ga * ga * caa + 2.0 * ga * gb * cab + gb * gb * cbb).max(0.0);
    McValue { value: a / (b * b), mc_se: (var / nf).sqrt() }
}

/// Asymptotic variance evaluated at the true scores `e` with outcome
/// variance `sigma2` in both arms.
pub fn asymptotic_variance_at(e: &[f64], spec: TiltSpec, sigma2: f64) -> McValue {
    ratio_over_square(e, |p| {
        let h = spec.h(p);
        (h * h * (sigma2 / p + sigma2 / (1.0 - p)), h)
    })
}

/// Asymptotic variance of the overlap-weighted estimator, `σ² / E[e(1-e)]`,
/// which follows from `h²(1/e + 1/(1-e)) = e(1-e)`.
pub fn overlap_variance_at(e: &[f64], sigma2: f64) -> McValue {
    ratio_over_square(e, |p| {
        let h = p * (1.0 - p);
        (sigma2 * h, h)
    })
}

/// Asymptotic variance for `spec` over a fresh super-population of `mc_n`.
pub fn asymptotic_variance(config: &ScenarioConfig, spec: TiltSpec, mc_n: usize) -> Result<McValue> {
    if mc_n < MIN_MC {
        return Err(Error::InvalidConfig(format!("Monte Carlo size {mc_n} is below {MIN_MC}")));
    }
    let pop = generate_population(config, mc_n, VARIANCE_SALT)?;
    Ok(asymptotic_variance_at(&pop.e_true, spec, outcome_variance(config.dgp)))
}

/// Inputs to the bias formula, one entry per unit.
pub struct BiasInputs<'a> {
    pub e: &'a [f64],
    pub e_tilde: &'a [f64],
    pub m0: &'a [f64],
    pub delta: &'a [f64],
}

/// Bias value with its per-unit influence terms, scaled so that the variance
/// of the estimate is `Σ psi² / n²`.
struct BiasParts {
    value: f64,
    psi: Vec<f64>,
    /// Treated and control normalizers `E[r1]`, `E[r0]`.
    b1: f64,
    b0: f64,
    q1: f64,
    q0: f64,
}

impl BiasParts {
    fn mc_value(&self) -> McValue {
        let n = self.psi.len() as f64;
        let ss: f64 = self.psi.iter().map(|p| p * p).sum();
        McValue { value: self.value, mc_se: ss.sqrt() / n }
    }
}

fn bias_parts(inp: &BiasInputs<'_>, h: impl Fn(f64) -> f64 + Sync) -> BiasParts {
    let n = inp.e.len();
    let terms = |i: usize| {
        let (e, et) = (inp.e[i], inp.e_tilde[i]);
        let ht = h(et);
        let h = h(e);
        let m0 = inp.m0[i];
        let m1 = m0 + inp.delta[i];
        let r1 = e / et * ht;
        let r0 = (1.0 - e) / (1.0 - et) * ht;
        // (numerator, denominator) for the three ratios.
        [(r1 * m1, r1), (r0 * m0, r0), (h * inp.delta[i], h)]
    };
    let s = chunked_sums(n, 6, |i, acc| {
        for (k, (a, b)) in terms(i).into_iter().enumerate() {
            acc[2 * k] += a;
            acc[2 * k + 1] += b;
        }
    });
    let nf = n as f64;
    let ratio = |k: usize| s[2 * k] / s[2 * k + 1];
    let (q1, q0, qd) = (ratio(0), ratio(1), ratio(2));
    let (b1, b0, bd) = (s[1] / nf, s[3] / nf, s[5] / nf);
    let psi = (0..n)
        .into_par_iter()
        .map(|i| {
            let t = terms(i);
            (t[0].0 - q1 * t[0].1) / b1 - (t[1].0 - q0 * t[1].1) / b0 - (t[2].0 - qd * t[2].1) / bd
        })
        .collect();
    BiasParts { value: q1 - q0 - qd, psi, b1, b0, q1, q0 }
}

/// The bias formula evaluated on one sample with `e_tilde` held fixed. The
/// standard error combines the three ratios through their joint influence
/// terms.
pub fn asymptotic_bias_at(inp: &BiasInputs<'_>, spec: TiltSpec) -> McValue {
    bias_parts(inp, |e| spec.h(e)).mc_value()
}

/// [`asymptotic_bias_at`] for an arbitrary tilting function.
pub fn asymptotic_bias_with(inp: &BiasInputs<'_>, h: impl Fn(f64) -> f64 + Sync) -> McValue {
    bias_parts(inp, h).mc_value()
}

/// Adds to `parts.psi` the influence of the fitted coefficients behind
/// `e_tilde`: the gradient of the bias in `beta`, mapped through the inverse
/// information of the logistic fit on the same sample.
fn add_fit_influence(
    parts: &mut BiasParts,
    inp: &BiasInputs<'_>,
    spec: TiltSpec,
    design: &DesignMatrix,
    z: &[bool],
) -> Result<()> {
    let n = inp.e.len();
    let nf = n as f64;
    // d e_tilde / d beta = e_tilde (1 - e_tilde) x.
    let coef: Vec<f64> = (0..n)
        .map(|i| {
            let (e, et) = (inp.e[i], inp.e_tilde[i]);
            let (ht, dht) = (spec.h(et), spec.dh(et));
            let m0 = inp.m0[i];
            let m1 = m0 + inp.delta[i];
            let d1 = e * (1.0 - et) * (dht - ht / et);
            let d0 = (1.0 - e) * et * (dht + ht / (1.0 - et));
            ((m1 - parts.q1) * d1 / parts.b1 - (m0 - parts.q0) * d0 / parts.b0) / nf
        })
        .collect();
    let grad = weighted_colsum(design.columns(), &coef);
    let w: Vec<f64> = inp.e_tilde.iter().map(|p| p * (1.0 - p) / nf).collect();
    let info = weighted_crossprod(design.columns(), &w);
    let a = solve_symmetric(&info, &grad, "bias information")?;
    let xa = design.linear_predictor(a.as_slice())?;
    for i in 0..n {
        parts.psi[i] += (f64::from(u8::from(z[i])) - inp.e_tilde[i]) * xa[i];
    }
    Ok(())
}

/// Bias of the estimator under `misspec` for `spec`. The limit of the
/// misspecified fit is approximated by fitting on a super-population of
/// `max(mc_n, 10^6)` units; the bias is then evaluated on that same sample,
/// and its standard error includes the sampling noise of that fit. Under
/// correct specification the limit is the true score itself.
pub fn asymptotic_bias(
    config: &ScenarioConfig,
    spec: TiltSpec,
    misspec: Misspec,
    mc_n: usize,
) -> Result<(McValue, Vec<f64>)> {
    let reports = asymptotic_biases(config, &[spec], misspec, mc_n)?;
    let (v, beta) = reports.into_iter().next().expect("one spec requested");
    Ok((v, beta))
}

/// [`asymptotic_bias`] for several tilts sharing one fit.
pub fn asymptotic_biases(
    config: &ScenarioConfig,
    specs: &[TiltSpec],
    misspec: Misspec,
    mc_n: usize,
) -> Result<Vec<(McValue, Vec<f64>)>> {
    if mc_n < MIN_MC {
        return Err(Error::InvalidConfig(format!("Monte Carlo size {mc_n} is below {MIN_MC}")));
    }
    let mut cfg = *config;
    cfg.misspec = misspec;
    let n = mc_n.max(MIN_FIT_N);
    let pop = generate_population(&cfg, n, BIAS_SALT)?;
    let fitted = if misspec == Misspec::None {
        None
    } else {
        let design = build_design(&pop.dataset, &misspecified_terms(&cfg)?)?;
        // Summation error in the score grows with n.
        let opts = FitOptions { score_tol: 1e-8 * n as f64, ..FitOptions::default() };
        let model = fit_logistic(&design, pop.dataset.z(), &opts)?;
        let e = predict_ps(&model, &design)?.e;
        Some((design, model.beta, e))
    };
    let (e_tilde, beta) = match &fitted {
        Some((_, beta, e)) => (e.as_slice(), beta.clone()),
        None => (pop.e_true.as_slice(), cfg.beta()),
    };
    let inp = BiasInputs { e: &pop.e_true, e_tilde, m0: &pop.m0, delta: &pop.delta_unit };
    specs
        .iter()
        .map(|&s| {
            let mut parts = bias_parts(&inp, |e| s.h(e));
            if let Some((design, _, _)) = &fitted {
                add_fit_influence(&mut parts, &inp, s, design, pop.dataset.z())?;
            }
            Ok((parts.mc_value(), beta.clone()))
        })
        .collect()
}

/// Variance and bias for each of `specs`.
pub fn theory_report(config: &ScenarioConfig, specs: &[TiltSpec], mc_n: usize) -> Result<Vec<AsymptoticReport>> {
    let biases = asymptotic_biases(config, specs, config.misspec, mc_n)?;
    let pop = generate_population(config, mc_n.max(MIN_MC), VARIANCE_SALT)?;
    let sigma2 = outcome_variance(config.dgp);
    Ok(specs
        .iter()
        .zip(biases)
        .map(|(&spec, (b, beta_tilde))| {
            let av = asymptotic_variance_at(&pop.e_true, spec, sigma2);
            AsymptoticReport {
                method: spec,
                av: av.value,
                mc_se_av: av.mc_se,
                abias: b.value,
                mc_se_abias: b.mc_se,
                beta_tilde,
            }
        })
        .collect())
}
