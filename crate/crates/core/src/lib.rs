//! Propensity-score balancing weights and the machinery around them.
//!
//! The crate covers the tilting-function family (IPW, trimmed IPW, ATT, ATC,
//! overlap, matching and entropy weights), ratio-normalized effect estimators
//! with sandwich standard errors that account for the estimated propensity
//! score, balance diagnostics, two simulation designs with super-population
//! estimands, a Monte Carlo harness, and numerical evaluation of the
//! asymptotic variance and misspecification bias.

pub mod balance;
pub mod cli;
pub mod data;
pub mod dgp;
pub mod error;
pub mod estimate;
pub mod harness;
pub mod linalg;
pub mod pscore;
pub mod svg;
pub mod term;
pub mod theory;
pub mod tilt;

pub use data::Dataset;
pub use error::{Error, Result};
pub use estimate::{EffectEstimate, Method};
pub use pscore::{DesignMatrix, FitOptions, LogisticModel};
pub use term::Term;
pub use tilt::TiltSpec;
