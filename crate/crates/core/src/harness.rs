//! Monte Carlo evaluation of the estimators over replicated datasets.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dgp::{generate, misspecified_terms, true_estimands, ScenarioConfig};
use crate::error::{Error, Result};
use crate::estimate::{estimate_method, EffectEstimate, EstimateOptions, Method, TrimPolicy};
use crate::pscore::{build_design, fit_logistic, predict_ps, FitOptions};
use crate::tilt::TiltSpec;

/// One replicate's contribution to the summary of a method.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReplicateEstimate {
    pub delta: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl From<&EffectEstimate> for ReplicateEstimate {
    fn from(e: &EffectEstimate) -> Self {
        Self { delta: e.delta, se: e.se, ci_low: e.ci_low, ci_high: e.ci_high }
    }
}

/// Operating characteristics of one method in one scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodMetrics {
    pub method: Method,
    pub true_value: f64,
    pub true_mc_se: f64,
    pub mean: f64,
    /// `100 (mean - true) / true`.
    pub rel_bias_pct: f64,
    pub rmse: f64,
    /// Sample standard deviation across replicates; 0 when only one replicate
    /// succeeded, in which case `sd_defined` is false.
    pub sd: f64,
    pub sd_defined: bool,
    pub mean_se: f64,
    pub coverage: f64,
    pub n_ok: usize,
    pub n_failed: usize,
}

impl MethodMetrics {
    /// Monte Carlo standard error of `rel_bias_pct`.
    pub fn bias_mc_se_pct(&self) -> f64 {
        100.0 * self.sd / (self.true_value.abs() * (self.n_ok as f64).sqrt())
    }
}

/// Summarizes replicate estimates against `true_value`.
pub fn aggregate(method: Method, estimates: &[ReplicateEstimate], true_value: f64) -> Result<MethodMetrics> {
    if estimates.is_empty() {
        return Err(Error::InvalidConfig("no successful replicates to aggregate".into()));
    }
    if true_value == 0.0 {
        return Err(Error::ZeroTrueValue);
    }
    let r = estimates.len() as f64;
    let mean = estimates.iter().map(|e| e.delta).sum::<f64>() / r;
    let mse = estimates.iter().map(|e| (e.delta - true_value).powi(2)).sum::<f64>() / r;
    let sd_defined = estimates.len() > 1;
    let sd = if sd_defined {
        (estimates.iter().map(|e| (e.delta - mean).powi(2)).sum::<f64>() / (r - 1.0)).sqrt()
    } else {
        0.0
    };
    let covered = estimates
        .iter()
        .filter(|e| e.ci_low <= true_value && true_value <= e.ci_high)
        .count();
    Ok(MethodMetrics {
        method,
        true_value,
        true_mc_se: 0.0,
        mean,
        rel_bias_pct: 100.0 * (mean - true_value) / true_value,
        rmse: mse.sqrt(),
        sd,
        sd_defined,
        mean_se: estimates.iter().map(|e| e.se).sum::<f64>() / r,
        coverage: covered as f64 / r,
        n_ok: estimates.len(),
        n_failed: 0,
    })
}

/// The estimand a method targets: stabilized IPW shares the IPW target.
pub fn target_tilt(method: Method) -> TiltSpec {
    match method {
        Method::Balancing(spec) => spec,
        Method::StabilizedIpw => TiltSpec::Ipw,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HarnessOptions {
    /// Worker threads; 0 uses the rayon default.
    pub workers: usize,
    pub superpop_n: usize,
    pub level: f64,
    pub trim: TrimPolicy,
    pub fit: FitOptions,
}

impl Default for HarnessOptions {
    fn default() -> Self {
        Self {
            workers: 0,
            superpop_n: 10_000_000,
            level: 0.95,
            trim: TrimPolicy::default(),
            fit: FitOptions::default(),
        }
    }
}

impl HarnessOptions {
    pub fn estimate_options(&self) -> EstimateOptions {
        EstimateOptions { level: self.level, trim: self.trim, fit: self.fit }
    }
}

/// Per-replicate estimates and per-method summaries of a scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioRun {
    pub metrics: Vec<MethodMetrics>,
    /// `estimates[r][m]`: replicate `r`, method `m`, `None` on failure.
    pub estimates: Vec<Vec<Option<EffectEstimate>>>,
}

/// Every method on replicate `r`. A failed fit fails all methods.
pub fn run_replicate(
    config: &ScenarioConfig,
    methods: &[Method],
    replicate: u64,
    opts: &HarnessOptions,
) -> Vec<Result<EffectEstimate>> {
    let fitted = (|| -> Result<_> {
        let sim = generate(config, replicate)?;
        let design = build_design(&sim.dataset, &misspecified_terms(config)?)?;
        let model = fit_logistic(&design, sim.dataset.z(), &opts.fit)?;
        let e = predict_ps(&model, &design)?.e;
        Ok((sim, design, e))
    })();
    match fitted {
        Ok((sim, design, e)) => {
            let eo = opts.estimate_options();
            methods.iter().map(|&m| estimate_method(&sim.dataset, &design, &e, m, &eo)).collect()
        }
        Err(err) => methods.iter().map(|_| Err(err.clone())).collect(),
    }
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Io(format!("cannot start worker pool: {e}")))
}

/// Runs all replicates of `config`. Replicates are independent and the
/// summaries fold them in index order, so results do not depend on
/// `opts.workers`. Fails if any method loses more than 5% of replicates.
pub fn run_scenario(config: &ScenarioConfig, methods: &[Method], opts: &HarnessOptions) -> Result<ScenarioRun> {
    config.validate()?;
    if methods.is_empty() {
        return Err(Error::InvalidConfig("no methods requested".into()));
    }
    let pool = pool(opts.workers)?;
    pool.install(|| {
        let tilts: Vec<TiltSpec> = methods.iter().map(|&m| target_tilt(m)).collect();
        let truth = true_estimands(config, &tilts, opts.superpop_n)?;

        let results: Vec<Vec<Result<EffectEstimate>>> = (0..config.replicates as u64)
            .into_par_iter()
            .map(|r| run_replicate(config, methods, r, opts))
            .collect();

        let mut metrics = Vec::with_capacity(methods.len());
        for (m, &method) in methods.iter().enumerate() {
            let ok: Vec<ReplicateEstimate> = results
                .iter()
                .filter_map(|row| row[m].as_ref().ok().map(ReplicateEstimate::from))
                .collect();
            let n_failed = config.replicates - ok.len();
            if n_failed * 20 > config.replicates {
                return Err(Error::ExcessiveFailures { failed: n_failed, replicates: config.replicates });
            }
            let mut mm = aggregate(method, &ok, truth[m].value)?;
            mm.true_mc_se = truth[m].mc_se;
            mm.n_failed = n_failed;
            metrics.push(mm);
        }
        let estimates = results.into_iter().map(|row| row.into_iter().map(Result::ok).collect()).collect();
        Ok(ScenarioRun { metrics, estimates })
    })
}

/// The seven standard weighting methods.
pub fn default_methods() -> Vec<Method> {
    TiltSpec::standard_seven().into_iter().map(Method::Balancing).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn est(delta: f64, se: f64) -> ReplicateEstimate {
        ReplicateEstimate { delta, se, ci_low: delta - 1.96 * se, ci_high: delta + 1.96 * se }
    }

    #[test]
    fn hand_example() {
        let m = aggregate(Method::Balancing(TiltSpec::Overlap), &[est(1.1, 0.1), est(0.9, 0.1)], 1.0).unwrap();
        assert!(m.rel_bias_pct.abs() < 1e-12);
        assert!((m.rmse - 0.1).abs() < 1e-12);
        assert!((m.sd - 0.02f64.sqrt()).abs() < 1e-12);
        assert_eq!(m.coverage, 1.0);
    }

    #[test]
    fn single_replicate() {
        let m = aggregate(Method::Balancing(TiltSpec::Ipw), &[est(1.3, 0.2)], 1.0).unwrap();
        assert!(!m.sd_defined);
        assert_eq!(m.sd, 0.0);
        assert!((m.rmse - 0.3).abs() < 1e-12);
    }

    #[test]
    fn zero_truth_rejected() {
        let r = aggregate(Method::Balancing(TiltSpec::Ipw), &[est(1.0, 0.1)], 0.0);
        assert_eq!(r, Err(Error::ZeroTrueValue));
    }

    #[test]
    fn exact_estimates_are_covered() {
        let m = aggregate(Method::Balancing(TiltSpec::Ipw), &[est(2.0, 0.5); 4], 2.0).unwrap();
        assert_eq!((m.rel_bias_pct, m.rmse, m.coverage), (0.0, 0.0, 1.0));
    }
}
