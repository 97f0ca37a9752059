//! Hajek-type weighted treatment-effect estimators with M-estimation sandwich
//! variances that account for the estimated propensity score.
//!
//! For a tilting function `h` the estimator is the difference of the
//! `h/e`-weighted treated mean and the `h/(1-e)`-weighted control mean. Its
//! influence term for unit `i` is
//!
//! ```text
//! I_i = E_h^{-1} [ z h/e (y - Δ1) - (1-z) h/(1-e) (y - Δ0) - (z - e) H_β E_ββ^{-1} x ]
//! ```
//!
//! with `E_h = mean(h)`, `E_ββ = mean(e(1-e) x x')` and `H_β = (V_β - U_β)/N`
//! the derivative of the two weighted-mean estimating equations in `β`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{solve_symmetric, weighted_colsum, weighted_crossprod};
use crate::pscore::{fit_logistic, predict_ps, DesignMatrix, FitOptions, LogisticModel};
use crate::tilt::TiltSpec;

/// An estimation method: a balancing-weight tilt, or the stabilized
/// (unnormalized) IPW estimator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Method {
    Balancing(TiltSpec),
    StabilizedIpw,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Balancing(spec) => spec.fmt(f),
            Method::StabilizedIpw => f.write_str("SIPW"),
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sipw" | "stabilized" | "stabilized-ipw" => Ok(Method::StabilizedIpw),
            _ => s.parse().map(Method::Balancing),
        }
    }
}

impl From<TiltSpec> for Method {
    fn from(spec: TiltSpec) -> Self {
        Method::Balancing(spec)
    }
}

impl Serialize for Method {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Method {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Point estimate, sandwich standard error and diagnostics for one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectEstimate {
    pub method: Method,
    pub delta: f64,
    pub delta1: f64,
    pub delta0: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Kish-type variance inflation of the weights.
    pub vi: f64,
    /// Units with positive weight.
    pub n_retained: usize,
    pub n: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HajekParts {
    pub delta: f64,
    pub delta1: f64,
    pub delta0: f64,
}

fn arm_totals(z: &[bool], w: &[f64]) -> Result<(f64, f64)> {
    let (mut s1, mut s0) = (0.0, 0.0);
    for (&t, &w) in z.iter().zip(w) {
        if t {
            s1 += w;
        } else {
            s0 += w;
        }
    }
    if !(s1 > 0.0) {
        return Err(Error::EmptyArm { arm: "treated" });
    }
    if !(s0 > 0.0) {
        return Err(Error::EmptyArm { arm: "control" });
    }
    Ok((s1, s0))
}

/// Ratio-normalized weighted difference in group means.
pub fn hajek_estimate(y: &[f64], z: &[bool], w: &[f64]) -> Result<HajekParts> {
    if z.len() != y.len() || w.len() != y.len() {
        return Err(Error::DimensionMismatch { expected: y.len(), found: z.len().min(w.len()) });
    }
    let (s1, s0) = arm_totals(z, w)?;
    let (mut a1, mut a0) = (0.0, 0.0);
    for ((&y, &t), &w) in y.iter().zip(z).zip(w) {
        if t {
            a1 += w * y;
        } else {
            a0 += w * y;
        }
    }
    let delta1 = a1 / s1;
    let delta0 = a0 / s0;
    Ok(HajekParts { delta: delta1 - delta0, delta1, delta0 })
}

/// `N1 (N - N1) / N · [Σ_1 w² / (Σ_1 w)² + Σ_0 w² / (Σ_0 w)²]`.
pub fn variance_inflation(w: &[f64], z: &[bool]) -> Result<f64> {
    if w.len() != z.len() {
        return Err(Error::DimensionMismatch { expected: z.len(), found: w.len() });
    }
    let (s1, s0) = arm_totals(z, w)?;
    let (mut q1, mut q0) = (0.0, 0.0);
    for (&t, &w) in z.iter().zip(w) {
        if t {
            q1 += w * w;
        } else {
            q0 += w * w;
        }
    }
    let n = z.len() as f64;
    let n1 = z.iter().filter(|&&t| t).count() as f64;
    Ok(n1 * (n - n1) / n * (q1 / (s1 * s1) + q0 / (s0 * s0)))
}

/// Standard normal quantile.
pub fn normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

/// Symmetric normal-theory interval `delta ± z_{(1+level)/2} · se`.
pub fn confidence_interval(delta: f64, se: f64, level: f64) -> (f64, f64) {
    debug_assert!(level > 0.0 && level < 1.0);
    if se == 0.0 {
        return (delta, delta);
    }
    let half = normal_quantile(0.5 + level / 2.0) * se;
    (delta - half, delta + half)
}

fn mean_info(design: &DesignMatrix, e: &[f64]) -> nalgebra::DMatrix<f64> {
    let n = e.len() as f64;
    let w: Vec<f64> = e.iter().map(|p| p * (1.0 - p)).collect();
    weighted_crossprod(design.columns(), &w) / n
}

/// Sandwich variance for arbitrary per-unit tilt values `h` and derivatives
/// `dh = dh/de`, evaluated at fitted scores `e`.
///
/// This is the general path; [`sandwich_variance`] fills `h` and `dh` from a
/// [`TiltSpec`].
#[allow(clippy::too_many_arguments)]
pub fn sandwich_variance_with(
    y: &[f64],
    z: &[bool],
    design: &DesignMatrix,
    e: &[f64],
    h: &[f64],
    dh: &[f64],
    delta1: f64,
    delta0: f64,
) -> Result<f64> {
    let n = y.len();
    for len in [z.len(), e.len(), h.len(), dh.len(), design.nrows()] {
        if len != n {
            return Err(Error::DimensionMismatch { expected: n, found: len });
        }
    }
    let nf = n as f64;
    let e_h = h.iter().sum::<f64>() / nf;
    if !(e_h > 0.0) {
        return Err(Error::EmptyArm { arm: "both" });
    }
    let e_bb = mean_info(design, e);

    // U_β and V_β collapse to Σ c_i x_i with scalar c_i.
    let mut c = vec![0.0; n];
    for i in 0..n {
        let (p, hi, di) = (e[i], h[i], dh[i]);
        c[i] = if z[i] {
            // -(z (1-e)(e h' - h) / e)(y - Δ1)
            -(1.0 - p) * (di * p - hi) / p * (y[i] - delta1)
        } else {
            p * (di * (1.0 - p) + hi) / (1.0 - p) * (y[i] - delta0)
        };
    }
    let h_beta = weighted_colsum(design.columns(), &c) / nf;
    let a = solve_symmetric(&e_bb, &h_beta, "E_ββ")?;
    let xa = design.linear_predictor(a.as_slice())?;

    let mut ss = 0.0;
    for i in 0..n {
        let (p, hi) = (e[i], h[i]);
        let zi = f64::from(u8::from(z[i]));
        let main = if z[i] {
            hi / p * (y[i] - delta1)
        } else {
            -hi / (1.0 - p) * (y[i] - delta0)
        };
        let infl = (main - (zi - p) * xa[i]) / e_h;
        ss += infl * infl;
    }
    Ok(ss / (nf * nf))
}

/// Sandwich variance of the balancing-weight estimator for `spec`.
pub fn sandwich_variance(
    y: &[f64],
    z: &[bool],
    design: &DesignMatrix,
    model: &LogisticModel,
    spec: TiltSpec,
    est: (f64, f64),
) -> Result<f64> {
    let e = predict_ps(model, design)?.e;
    let h: Vec<f64> = e.iter().map(|&p| spec.h(p)).collect();
    let dh: Vec<f64> = e.iter().map(|&p| spec.dh(p)).collect();
    sandwich_variance_with(y, z, design, &e, &h, &dh, est.0, est.1)
}

/// Full estimate for `spec` given fitted scores `e` on `design`.
pub fn estimate_with_scores(
    data: &Dataset,
    design: &DesignMatrix,
    e: &[f64],
    spec: TiltSpec,
    level: f64,
) -> Result<EffectEstimate> {
    let (y, z) = (data.y(), data.z());
    if e.len() != y.len() {
        return Err(Error::DimensionMismatch { expected: y.len(), found: e.len() });
    }
    if let Some(&bad) = e.iter().find(|&&p| !(p > 0.0 && p < 1.0)) {
        return Err(Error::ScoreOutOfRange(bad));
    }
    let w: Vec<f64> = e.iter().zip(z).map(|(&p, &t)| spec.weight_unchecked(p, t)).collect();
    let parts = hajek_estimate(y, z, &w)?;
    let h: Vec<f64> = e.iter().map(|&p| spec.h(p)).collect();
    let dh: Vec<f64> = e.iter().map(|&p| spec.dh(p)).collect();
    let var = sandwich_variance_with(y, z, design, e, &h, &dh, parts.delta1, parts.delta0)?;
    let se = var.max(0.0).sqrt();
    let (ci_low, ci_high) = confidence_interval(parts.delta, se, level);
    Ok(EffectEstimate {
        method: Method::Balancing(spec),
        delta: parts.delta,
        delta1: parts.delta1,
        delta0: parts.delta0,
        se,
        ci_low,
        ci_high,
        vi: variance_inflation(&w, z)?,
        n_retained: w.iter().filter(|&&w| w > 0.0).count(),
        n: y.len(),
    })
}

/// Predicts scores from `model` and estimates the effect for `spec`. Trimmed
/// IPW zeroes weights outside the band without refitting the score model.
pub fn estimate_effect(
    data: &Dataset,
    design: &DesignMatrix,
    model: &LogisticModel,
    spec: TiltSpec,
    level: f64,
) -> Result<EffectEstimate> {
    let ps = predict_ps(model, design)?;
    estimate_with_scores(data, design, &ps.e, spec, level)
}

/// Stabilized IPW with weights `P̂/ê` (treated) and `(1-P̂)/(1-ê)` (control),
/// `P̂ = Σz/N`, each arm normalized by its expected weight total. `P̂` is
/// treated as fixed in the variance.
pub fn stabilized_ipw_with_scores(
    data: &Dataset,
    design: &DesignMatrix,
    e: &[f64],
    level: f64,
) -> Result<EffectEstimate> {
    let (y, z) = (data.y(), data.z());
    let n = y.len();
    if e.len() != n || design.nrows() != n {
        return Err(Error::DimensionMismatch { expected: n, found: e.len() });
    }
    let nf = n as f64;
    let p1 = data.n_treated() as f64 / nf;
    let p0 = 1.0 - p1;

    let sw: Vec<f64> = e
        .iter()
        .zip(z)
        .map(|(&p, &t)| if t { p1 / p } else { p0 / (1.0 - p) })
        .collect();
    let (mut a1, mut a0) = (0.0, 0.0);
    for ((&yi, &t), &w) in y.iter().zip(z).zip(&sw) {
        if t {
            a1 += w * yi;
        } else {
            a0 += w * yi;
        }
    }
    let delta1 = a1 / (nf * p1);
    let delta0 = a0 / (nf * p0);
    let delta = delta1 - delta0;

    // H^s_β / N with the per-arm normalization folded in.
    let c: Vec<f64> = (0..n)
        .map(|i| {
            let p = e[i];
            if z[i] {
                (1.0 - p) / p * y[i]
            } else {
                p / (1.0 - p) * y[i]
            }
        })
        .collect();
    let h_beta = weighted_colsum(design.columns(), &c) / nf;
    let a = solve_symmetric(&mean_info(design, e), &h_beta, "E_ββ")?;
    let xa = design.linear_predictor(a.as_slice())?;
    let mut ss = 0.0;
    for i in 0..n {
        let p = e[i];
        let zi = f64::from(u8::from(z[i]));
        let main = if z[i] { y[i] / p } else { -y[i] / (1.0 - p) };
        let infl = main - delta - (zi - p) * xa[i];
        ss += infl * infl;
    }
    let se = (ss / (nf * nf)).sqrt();
    let (ci_low, ci_high) = confidence_interval(delta, se, level);
    Ok(EffectEstimate {
        method: Method::StabilizedIpw,
        delta,
        delta1,
        delta0,
        se,
        ci_low,
        ci_high,
        vi: variance_inflation(&sw, z)?,
        n_retained: n,
        n,
    })
}

pub fn stabilized_ipw(
    data: &Dataset,
    design: &DesignMatrix,
    model: &LogisticModel,
    level: f64,
) -> Result<EffectEstimate> {
    let ps = predict_ps(model, design)?;
    stabilized_ipw_with_scores(data, design, &ps.e, level)
}

/// How trimmed IPW treats the score model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrimPolicy {
    /// Trim on the full-sample scores, then refit the score model on the
    /// retained units and apply IPW there.
    #[default]
    Refit,
    /// Zero the weights outside the band and keep the full-sample fit.
    FullSampleFit,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimateOptions {
    pub level: f64,
    pub trim: TrimPolicy,
    pub fit: FitOptions,
}

impl Default for EstimateOptions {
    fn default() -> Self {
        Self { level: 0.95, trim: TrimPolicy::default(), fit: FitOptions::default() }
    }
}

/// Trimmed IPW that keeps units with `alpha <= e <= 1 - alpha`, refits the
/// score model on them and reports IPW on the retained sample.
pub fn trimmed_refit(
    data: &Dataset,
    design: &DesignMatrix,
    e: &[f64],
    alpha: f64,
    fit: &FitOptions,
    level: f64,
) -> Result<EffectEstimate> {
    let spec = TiltSpec::trimmed(alpha)?;
    if e.len() != data.n() {
        return Err(Error::DimensionMismatch { expected: data.n(), found: e.len() });
    }
    let keep: Vec<usize> = (0..e.len()).filter(|&i| spec.h(e[i]) > 0.0).collect();
    let kept_treated = keep.iter().filter(|&&i| data.z()[i]).count();
    if kept_treated == 0 {
        return Err(Error::EmptyArm { arm: "treated" });
    }
    if kept_treated == keep.len() {
        return Err(Error::EmptyArm { arm: "control" });
    }
    let sub = data.select_rows(&keep)?;
    let sub_design = design.select_rows(&keep)?;
    let model = fit_logistic(&sub_design, sub.z(), fit)?;
    let mut est = estimate_effect(&sub, &sub_design, &model, TiltSpec::Ipw, level)?;
    est.method = Method::Balancing(spec);
    est.n = data.n();
    Ok(est)
}

/// Dispatches on [`Method`] given full-sample scores `e`.
pub fn estimate_method(
    data: &Dataset,
    design: &DesignMatrix,
    e: &[f64],
    method: Method,
    opts: &EstimateOptions,
) -> Result<EffectEstimate> {
    match method {
        Method::Balancing(TiltSpec::TrimmedIpw(alpha)) if opts.trim == TrimPolicy::Refit => {
            trimmed_refit(data, design, e, alpha, &opts.fit, opts.level)
        }
        Method::Balancing(spec) => estimate_with_scores(data, design, e, spec, opts.level),
        Method::StabilizedIpw => stabilized_ipw_with_scores(data, design, e, opts.level),
    }
}

/// Whether `delta` lies in `[min(y) - max(y), max(y) - min(y)]`.
pub fn within_outcome_range(delta: f64, y: &[f64]) -> bool {
    let lo = y.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = y.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    delta >= lo - hi - 1e-12 && delta <= hi - lo + 1e-12
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pscore::{fit_logistic, FitOptions};

    #[test]
    fn hajek_hand_example() {
        let p = hajek_estimate(&[1.0, 2.0, 3.0, 4.0], &[true, true, false, false], &[1.0, 3.0, 2.0, 2.0])
            .unwrap();
        assert!((p.delta1 - 1.75).abs() < 1e-15);
        assert!((p.delta0 - 3.5).abs() < 1e-15);
        assert!((p.delta + 1.75).abs() < 1e-15);
    }

    #[test]
    fn hajek_unit_weights_are_group_means() {
        let y = [1.0, 5.0, 2.0, 2.0, 8.0];
        let z = [true, true, false, false, false];
        let p = hajek_estimate(&y, &z, &[1.0; 5]).unwrap();
        assert!((p.delta - (3.0 - 4.0)).abs() < 1e-15);
        let q = hajek_estimate(&y, &z, &[7.0; 5]).unwrap();
        assert_eq!((p.delta, p.delta1, p.delta0), (q.delta, q.delta1, q.delta0));
    }

    #[test]
    fn hajek_empty_arm() {
        let r = hajek_estimate(&[1.0, 2.0], &[true, false], &[1.0, 0.0]);
        assert_eq!(r, Err(Error::EmptyArm { arm: "control" }));
    }

    #[test]
    fn vi_examples() {
        let z = [true, true, false, false];
        assert!((variance_inflation(&[1.0, 1.0, 1.0, 3.0], &z).unwrap() - 1.125).abs() < 1e-15);
        assert!((variance_inflation(&[2.5; 4], &z).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn normal_intervals() {
        assert_eq!(confidence_interval(1.3, 0.0, 0.95), (1.3, 1.3));
        let (lo, hi) = confidence_interval(0.0, 1.0, 0.95);
        assert!((hi - 1.959964).abs() < 1e-6 && (lo + 1.959964).abs() < 1e-6);
        let (lo, hi) = confidence_interval(2.0, 3.0, 0.5);
        assert!((lo - (2.0 - 0.674490 * 3.0)).abs() < 3e-6);
        assert!((hi - (2.0 + 0.674490 * 3.0)).abs() < 3e-6);
    }

    fn toy() -> (Dataset, DesignMatrix, LogisticModel) {
        let x: Vec<f64> = (0..30).map(|i| (f64::from(i) * 0.37).sin() * 2.0).collect();
        let z: Vec<f64> = (0..30).map(|i| if (i * 7 + 3) % 5 < 2 { 1.0 } else { 0.0 }).collect();
        let y: Vec<f64> = x.iter().zip(&z).map(|(x, z)| 1.0 + 0.5 * x + z).collect();
        let d = Dataset::new(y, z, vec![x.clone()], vec!["x".into()]).unwrap();
        let des = DesignMatrix::from_columns(vec![x], vec!["x".into()]).unwrap();
        let m = fit_logistic(&des, d.z(), &FitOptions::default()).unwrap();
        (d, des, m)
    }

    #[test]
    fn constant_outcome_has_zero_variance() {
        let (d, des, m) = toy();
        let c = Dataset::from_bool(vec![4.2; d.n()], d.z().to_vec(), d.columns().to_vec(), d.names().to_vec())
            .unwrap();
        for spec in TiltSpec::standard_seven() {
            let est = estimate_effect(&c, &des, &m, spec, 0.95).unwrap();
            assert!(est.se < 1e-6, "{spec}: {}", est.se);
            let v = sandwich_variance(c.y(), c.z(), &des, &m, spec, (est.delta1, est.delta0)).unwrap();
            assert!(v < 1e-12);
        }
        let s = stabilized_ipw(
            &Dataset::from_bool(vec![0.0; d.n()], d.z().to_vec(), d.columns().to_vec(), d.names().to_vec())
                .unwrap(),
            &des,
            &m,
            0.95,
        )
        .unwrap();
        assert_eq!(s.delta, 0.0);
        assert_eq!(s.se, 0.0);
    }

    #[test]
    fn stabilized_equals_group_means_when_scores_are_constant() {
        let y = vec![3.0, 1.0, 4.0, 1.0, 5.0, 9.0];
        let z = vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0];
        let d = Dataset::new(y, z, vec![vec![0.0; 6]], vec!["c".into()]).unwrap();
        let des = DesignMatrix::intercept_only(6).unwrap();
        let m = fit_logistic(&des, d.z(), &FitOptions::default()).unwrap();
        let s = stabilized_ipw(&d, &des, &m, 0.95).unwrap();
        let diff = (3.0 + 4.0 + 9.0) / 3.0 - (1.0 + 1.0 + 5.0) / 3.0;
        assert!((s.delta - diff).abs() < 1e-12, "{}", s.delta);
    }

    #[test]
    fn trimmed_without_active_trimming_equals_ipw() {
        let (d, des, m) = toy();
        let ps = predict_ps(&m, &des).unwrap();
        assert!(ps.min >= 0.1 && ps.max <= 0.9, "{:?}", (ps.min, ps.max));
        let a = estimate_effect(&d, &des, &m, TiltSpec::Ipw, 0.95).unwrap();
        let b = estimate_effect(&d, &des, &m, TiltSpec::TrimmedIpw(0.1), 0.95).unwrap();
        assert_eq!(a.delta, b.delta);
        assert_eq!(a.se, b.se);
        assert_eq!(b.n_retained, d.n());
    }

    #[test]
    fn trimming_everything_is_an_error() {
        let (d, des, m) = toy();
        let r = estimate_effect(&d, &des, &m, TiltSpec::TrimmedIpw(0.49), 0.95);
        assert!(matches!(r, Err(Error::EmptyArm { .. })), "{r:?}");
    }

    #[test]
    fn method_parsing() {
        assert_eq!("sipw".parse::<Method>().unwrap(), Method::StabilizedIpw);
        assert_eq!("ow".parse::<Method>().unwrap(), Method::Balancing(TiltSpec::Overlap));
        assert_eq!(Method::StabilizedIpw.to_string(), "SIPW");
    }
}
