//! Simulation designs, their true propensity and outcome functions, and
//! super-population estimands.
//!
//! Two designs are provided. The omission design has two binary and two
//! correlated normal covariates plus a square and an interaction; studies
//! drop one term at a time from the score model. The transformation design
//! draws two bivariate normal pairs and fits the score on nonlinear
//! transforms of them.
//!
//! Every dataset is a pure function of `(config, replicate)`: replicate `r`
//! draws from the ChaCha8 stream `r` of the generator seeded with
//! `config.seed`.

use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::pscore::logistic;
use crate::term::Term;
use crate::tilt::TiltSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dgp {
    Omission,
    Transformation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Overlap {
    Good,
    Moderate,
    Poor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prevalence {
    Medium,
    Low,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Effect {
    /// Constant effect of 1.
    Homogeneous,
    /// `Δ(e) = -4e² + 3.94e + 0.69` in the true score.
    Heterogeneous,
}

/// Which score model is fitted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Misspec {
    None,
    /// Omission design without `X2`.
    OmitX2,
    /// Omission design without `X5 = X1²`.
    OmitX1sq,
    /// Omission design without `X6 = X2·X4`.
    OmitX2X4,
    /// Transformation design on mildly distorted covariates.
    Mild,
    /// Transformation design on strongly distorted covariates.
    Major,
}

impl Overlap {
    pub const ALL: [Overlap; 3] = [Overlap::Good, Overlap::Moderate, Overlap::Poor];

    fn index(self) -> usize {
        self as usize
    }
}

impl Prevalence {
    pub const ALL: [Prevalence; 2] = [Prevalence::Medium, Prevalence::Low];
}

/// One simulation cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub dgp: Dgp,
    pub overlap: Overlap,
    pub prevalence: Prevalence,
    pub effect: Effect,
    #[serde(default = "default_misspec")]
    pub misspec: Misspec,
    pub n: usize,
    pub replicates: usize,
    pub seed: u64,
}

fn default_misspec() -> Misspec {
    Misspec::None
}

pub const MIN_N: usize = 50;

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < MIN_N {
            return Err(Error::InvalidConfig(format!("n = {} is below the minimum of {MIN_N}", self.n)));
        }
        if self.replicates == 0 {
            return Err(Error::InvalidConfig("replicates must be at least 1".into()));
        }
        let ok = match self.misspec {
            Misspec::None => true,
            Misspec::OmitX2 | Misspec::OmitX1sq | Misspec::OmitX2X4 => self.dgp == Dgp::Omission,
            Misspec::Mild | Misspec::Major => self.dgp == Dgp::Transformation,
        };
        if !ok {
            return Err(Error::InvalidConfig(format!(
                "misspecification {:?} does not apply to the {:?} design",
                self.misspec, self.dgp
            )));
        }
        Ok(())
    }

    /// Coefficients of the true logit on `(1, X1, ..., Xp)`.
    pub fn beta(&self) -> Vec<f64> {
        let k = self.overlap.index();
        match self.dgp {
            Dgp::Omission => {
                let s = [1.0, 2.0, 3.0][k];
                let mut b: Vec<f64> =
                    [-0.5, 0.3, 0.4, 0.4, 0.4, -0.1, -0.1].iter().map(|v| v * s).collect();
                if self.prevalence == Prevalence::Low {
                    b[0] = [-1.5, -3.0, -4.0][k];
                }
                b
            }
            Dgp::Transformation => {
                let s = [1.0, 2.0, 3.0][k];
                let mut b: Vec<f64> =
                    [-0.2, 0.3, 0.15, 0.22, 0.15, -0.15].iter().map(|v| v * s).collect();
                if self.prevalence == Prevalence::Low {
                    b[0] = [-1.5, -2.5, -3.5][k];
                }
                b
            }
        }
    }
}

/// Number of generated covariates.
pub fn n_covariates(dgp: Dgp) -> usize {
    match dgp {
        Dgp::Omission => 6,
        Dgp::Transformation => 5,
    }
}

pub fn covariate_names(dgp: Dgp) -> Vec<String> {
    (1..=n_covariates(dgp)).map(|j| format!("X{j}")).collect()
}

type Unit = [f64; 6];

/// Draws one unit's covariates. Unused trailing slots are zero.
fn draw_covariates<R: Rng>(dgp: Dgp, rng: &mut R) -> Unit {
    match dgp {
        Dgp::Omission => {
            let x4 = f64::from(u8::from(rng.random::<f64>() < 0.5));
            let x3 = f64::from(u8::from(rng.random::<f64>() < 0.4 + 0.2 * x4));
            let m1 = x4 - x3 + 0.5 * x3 * x4;
            let m2 = -x4 + x3 + x3 * x4;
            let var = 2.0 - x3;
            let cov = 0.25 * (1.0 + x3);
            let l11 = var.sqrt();
            let l21 = cov / l11;
            let l22 = (var - l21 * l21).sqrt();
            let u1: f64 = rng.sample(StandardNormal);
            let u2: f64 = rng.sample(StandardNormal);
            let x1 = m1 + l11 * u1;
            let x2 = m2 + l21 * u1 + l22 * u2;
            [x1, x2, x3, x4, x1 * x1, x2 * x4]
        }
        Dgp::Transformation => {
            const RHO: f64 = 0.2;
            let l22 = (1.0 - RHO * RHO).sqrt();
            let pair = |rng: &mut R| {
                let u1: f64 = rng.sample(StandardNormal);
                let u2: f64 = rng.sample(StandardNormal);
                (2.0 + u1, 4.0 + RHO * u1 + l22 * u2)
            };
            let (x1, x2) = pair(rng);
            let (x3, x4) = pair(rng);
            [x1, x2, x3, x4, x2 * x2, 0.0]
        }
    }
}

fn true_ps(beta: &[f64], x: &Unit) -> f64 {
    let eta = beta[0] + beta[1..].iter().zip(x).map(|(b, x)| b * x).sum::<f64>();
    logistic(eta)
}

/// Treatment effect for a unit with true score `e`.
pub fn unit_effect(effect: Effect, e: f64) -> f64 {
    match effect {
        Effect::Homogeneous => 1.0,
        Effect::Heterogeneous => -4.0 * e * e + 3.94 * e + 0.69,
    }
}

/// Control-arm outcome regression `E[Y(0) | X]`.
fn outcome_mean0(dgp: Dgp, x: &Unit) -> f64 {
    match dgp {
        Dgp::Omission => {
            0.5 + x[0] + 0.6 * x[1] + 2.2 * x[2] + 1.2 * x[3] + 0.1 * x[4] + x[5]
        }
        Dgp::Transformation => 9.0 + 0.1 * x[0] - 0.05 * (x[1] - x[2] + x[3]),
    }
}

/// Conditional outcome variance, the same in both arms.
pub fn outcome_variance(_dgp: Dgp) -> f64 {
    1.0
}

/// A generated sample with its potential outcomes and true nuisance values.
#[derive(Debug, Clone, PartialEq)]
pub struct SimDataset {
    pub dataset: Dataset,
    pub e_true: Vec<f64>,
    pub y1: Vec<f64>,
    pub y0: Vec<f64>,
    pub delta_unit: Vec<f64>,
    /// `E[Y(0) | X]`; `E[Y(1) | X]` adds `delta_unit`.
    pub m0: Vec<f64>,
}

/// Column-major accumulation of generated units.
struct Columns {
    x: Vec<Vec<f64>>,
    z: Vec<bool>,
    e: Vec<f64>,
    y0: Vec<f64>,
    y1: Vec<f64>,
    delta: Vec<f64>,
    m0: Vec<f64>,
}

impl Columns {
    fn with_capacity(p: usize, n: usize) -> Self {
        Self {
            x: vec![Vec::with_capacity(n); p],
            z: Vec::with_capacity(n),
            e: Vec::with_capacity(n),
            y0: Vec::with_capacity(n),
            y1: Vec::with_capacity(n),
            delta: Vec::with_capacity(n),
            m0: Vec::with_capacity(n),
        }
    }

    fn push_units<R: Rng>(&mut self, config: &ScenarioConfig, beta: &[f64], n: usize, rng: &mut R) {
        let p = self.x.len();
        for _ in 0..n {
            let x = draw_covariates(config.dgp, rng);
            let e = true_ps(beta, &x);
            let z = rng.random::<f64>() < e;
            let eps: f64 = rng.sample(StandardNormal);
            let m0 = outcome_mean0(config.dgp, &x);
            let d = unit_effect(config.effect, e);
            for (col, v) in self.x.iter_mut().zip(&x[..p]) {
                col.push(*v);
            }
            self.z.push(z);
            self.e.push(e);
            self.y0.push(m0 + eps);
            self.y1.push(m0 + d + eps);
            self.delta.push(d);
            self.m0.push(m0);
        }
    }

    fn append(&mut self, other: Columns) {
        for (a, b) in self.x.iter_mut().zip(other.x) {
            a.extend(b);
        }
        self.z.extend(other.z);
        self.e.extend(other.e);
        self.y0.extend(other.y0);
        self.y1.extend(other.y1);
        self.delta.extend(other.delta);
        self.m0.extend(other.m0);
    }

    fn finish(self, dgp: Dgp) -> Result<SimDataset> {
        let y = self
            .z
            .iter()
            .zip(self.y1.iter().zip(&self.y0))
            .map(|(&t, (&a, &b))| if t { a } else { b })
            .collect();
        let dataset = Dataset::from_bool(y, self.z, self.x, covariate_names(dgp))?;
        Ok(SimDataset {
            dataset,
            e_true: self.e,
            y1: self.y1,
            y0: self.y0,
            delta_unit: self.delta,
            m0: self.m0,
        })
    }
}

/// The generator for replicate `replicate` of a scenario seeded with `seed`.
pub fn replicate_rng(seed: u64, replicate: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replicate);
    rng
}

/// Draws `n` units from `rng`. Fails only if the sample lacks one of the arms.
pub fn generate_with_rng<R: Rng>(config: &ScenarioConfig, n: usize, rng: &mut R) -> Result<SimDataset> {
    let mut cols = Columns::with_capacity(n_covariates(config.dgp), n);
    cols.push_units(config, &config.beta(), n, rng);
    cols.finish(config.dgp)
}

/// Replicate `replicate` of `config`, of size `config.n`.
pub fn generate(config: &ScenarioConfig, replicate: u64) -> Result<SimDataset> {
    generate_with_rng(config, config.n, &mut replicate_rng(config.seed, replicate))
}

/// Omission-design generator; `config.dgp` must be `Omission`.
pub fn gen_omission(config: &ScenarioConfig, rng: &mut ChaCha8Rng) -> Result<SimDataset> {
    if config.dgp != Dgp::Omission {
        return Err(Error::InvalidConfig("expected the omission design".into()));
    }
    generate_with_rng(config, config.n, rng)
}

/// Transformation-design generator; `config.dgp` must be `Transformation`.
pub fn gen_transformation(config: &ScenarioConfig, rng: &mut ChaCha8Rng) -> Result<SimDataset> {
    if config.dgp != Dgp::Transformation {
        return Err(Error::InvalidConfig("expected the transformation design".into()));
    }
    generate_with_rng(config, config.n, rng)
}

/// Score-model terms for the configured misspecification.
pub fn misspecified_terms(config: &ScenarioConfig) -> Result<Vec<Term>> {
    let mut cfg = *config;
    cfg.n = cfg.n.max(MIN_N);
    cfg.replicates = cfg.replicates.max(1);
    cfg.validate()?;
    let cols = |names: &[&str]| names.iter().map(|n| Term::column(n)).collect::<Vec<_>>();
    Ok(match (config.dgp, config.misspec) {
        (Dgp::Omission, Misspec::None) => cols(&["X1", "X2", "X3", "X4", "X5", "X6"]),
        (Dgp::Omission, Misspec::OmitX2) => cols(&["X1", "X3", "X4", "X5", "X6"]),
        (Dgp::Omission, Misspec::OmitX1sq) => cols(&["X1", "X2", "X3", "X4", "X6"]),
        (Dgp::Omission, Misspec::OmitX2X4) => cols(&["X1", "X2", "X3", "X4", "X5"]),
        (Dgp::Transformation, Misspec::None) => cols(&["X1", "X2", "X3", "X4", "X5"]),
        (Dgp::Transformation, Misspec::Mild) => {
            Term::parse_list("exp(0.1*X1), X2*(1+X1)+10, (0.04*X3+0.6)^2, (X4+20)^2")?
        }
        (Dgp::Transformation, Misspec::Major) => {
            Term::parse_list("exp(0.33*X1), X2*(1+X1)+10, (0.04*X3+0.6)^2, (0.1*X2+X4+20)^2")?
        }
        _ => unreachable!("validated above"),
    })
}

/// A Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McValue {
    pub value: f64,
    pub mc_se: f64,
}

/// Seed of the super-population generator, separate from any scenario seed.
pub const SUPERPOP_SEED: u64 = 0x5_eed0_f5e7_a7e5;

/// Units per independently seeded super-population chunk.
pub const CHUNK: usize = 1 << 16;

fn chunk_sizes(n: usize) -> Vec<usize> {
    (0..n.div_ceil(CHUNK)).map(|c| CHUNK.min(n - c * CHUNK)).collect()
}

/// Draws a super-population of `n` units in parallel chunks; chunk `c` uses
/// stream `c` of [`SUPERPOP_SEED`] XOR `salt`, so the result does not depend
/// on the thread count.
pub fn generate_population(config: &ScenarioConfig, n: usize, salt: u64) -> Result<SimDataset> {
    let beta = config.beta();
    let p = n_covariates(config.dgp);
    let parts: Vec<Columns> = chunk_sizes(n)
        .into_par_iter()
        .enumerate()
        .map(|(c, size)| {
            let mut rng = replicate_rng(SUPERPOP_SEED ^ salt, c as u64);
            let mut cols = Columns::with_capacity(p, size);
            cols.push_units(config, &beta, size, &mut rng);
            cols
        })
        .collect();
    let mut all = Columns::with_capacity(p, n);
    for part in parts {
        all.append(part);
    }
    all.finish(config.dgp)
}

/// Per-chunk sums for the ratio `Σ hΔ / Σ h`.
#[derive(Debug, Clone, Copy, Default)]
struct RatioSums {
    a: f64,
    b: f64,
    aa: f64,
    ab: f64,
    bb: f64,
}

impl RatioSums {
    fn add(&mut self, a: f64, b: f64) {
        self.a += a;
        self.b += b;
        self.aa += a * a;
        self.ab += a * b;
        self.bb += b * b;
    }

    fn merge(&mut self, o: &RatioSums) {
        self.a += o.a;
        self.b += o.b;
        self.aa += o.aa;
        self.ab += o.ab;
        self.bb += o.bb;
    }

    /// Ratio with a delta-method standard error.
    fn ratio(&self, n: usize) -> McValue {
        let nf = n as f64;
        let r = self.a / self.b;
        let var = ((self.aa - 2.0 * r * self.ab + r * r * self.bb) / nf).max(0.0);
        McValue { value: r, mc_se: var.sqrt() / (self.b / nf) / nf.sqrt() }
    }
}

/// Chunked parallel Monte Carlo over covariate draws. `f` maps a unit's true
/// score to one `(a, b)` pair per output; chunk sums are folded in chunk
/// order.
fn ratio_mc<F>(config: &ScenarioConfig, n: usize, outputs: usize, f: F) -> Vec<McValue>
where
    F: Fn(f64, &mut [(f64, f64)]) + Sync,
{
    let beta = config.beta();
    let partial: Vec<Vec<RatioSums>> = chunk_sizes(n)
        .into_par_iter()
        .enumerate()
        .map(|(c, size)| {
            let mut rng = replicate_rng(SUPERPOP_SEED, c as u64);
            let mut sums = vec![RatioSums::default(); outputs];
            let mut buf = vec![(0.0, 0.0); outputs];
            for _ in 0..size {
                let x = draw_covariates(config.dgp, &mut rng);
                let e = true_ps(&beta, &x);
                f(e, &mut buf);
                for (s, &(a, b)) in sums.iter_mut().zip(&buf) {
                    s.add(a, b);
                }
            }
            sums
        })
        .collect();
    let mut total = vec![RatioSums::default(); outputs];
    for chunk in &partial {
        for (t, s) in total.iter_mut().zip(chunk) {
            t.merge(s);
        }
    }
    total.iter().map(|s| s.ratio(n)).collect()
}

pub const MIN_SUPERPOP: usize = 100_000;

fn cache() -> &'static Mutex<HashMap<String, McValue>> {
    static CACHE: OnceLock<Mutex<HashMap<String, McValue>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

fn cache_key(config: &ScenarioConfig, spec: &TiltSpec, n: usize) -> String {
    format!(
        "{:?}/{:?}/{:?}/{:?}/{spec:?}/{n}",
        config.dgp, config.overlap, config.prevalence, config.effect
    )
}

/// True estimands `E[h(e) Δ] / E[h(e)]` for several tilts from one
/// super-population of `superpop_n` units. Results are cached per process.
pub fn true_estimands(config: &ScenarioConfig, specs: &[TiltSpec], superpop_n: usize) -> Result<Vec<McValue>> {
    if superpop_n < MIN_SUPERPOP {
        return Err(Error::InvalidConfig(format!(
            "super-population size {superpop_n} is below {MIN_SUPERPOP}"
        )));
    }
    let keys: Vec<String> = specs.iter().map(|s| cache_key(config, s, superpop_n)).collect();
    {
        let map = cache().lock().expect("estimand cache poisoned");
        if let Some(hit) = keys.iter().map(|k| map.get(k).copied()).collect::<Option<Vec<_>>>() {
            return Ok(hit);
        }
    }
    let effect = config.effect;
    let values = ratio_mc(config, superpop_n, specs.len(), |e, out| {
        let d = unit_effect(effect, e);
        for (o, s) in out.iter_mut().zip(specs) {
            let h = s.h(e);
            *o = (h * d, h);
        }
    });
    let mut map = cache().lock().expect("estimand cache poisoned");
    for (k, v) in keys.into_iter().zip(&values) {
        map.insert(k, *v);
    }
    Ok(values)
}

pub fn true_estimand(config: &ScenarioConfig, spec: TiltSpec, superpop_n: usize) -> Result<McValue> {
    Ok(true_estimands(config, &[spec], superpop_n)?[0])
}

/// Treatment prevalence `P(Z = 1)` over `n` simulated units, with its
/// binomial standard error.
pub fn prevalence(config: &ScenarioConfig, n: usize) -> Result<McValue> {
    let sim = generate_population(config, n, 0x9e37_79b9)?;
    let p = sim.dataset.n_treated() as f64 / n as f64;
    Ok(McValue { value: p, mc_se: (p * (1.0 - p) / n as f64).sqrt() })
}

/// `E[e(X)]` by chunked Monte Carlo.
pub fn mean_true_ps(config: &ScenarioConfig, n: usize) -> McValue {
    ratio_mc(config, n, 1, |e, out| out[0] = (e, 1.0))[0]
}
