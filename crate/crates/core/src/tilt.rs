//! Tilting functions `h(e)` of the balancing-weight family, their derivatives
//! in `e`, and the group weights `h/e` (treated) and `h/(1-e)` (control).
//!
//! The sandwich variance needs `dh/dβ'`, obtained by the chain rule
//! `h_β = h'(e) · e(1-e) · x'` from [`TiltSpec::derivative`].

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TiltSpec {
    /// `h = 1`, the average treatment effect.
    Ipw,
    /// `h = 1{alpha <= e <= 1 - alpha}`.
    TrimmedIpw(f64),
    /// `h = e`, effect on the treated.
    Treated,
    /// `h = 1 - e`, effect on the controls.
    Control,
    /// `h = e(1 - e)`.
    Overlap,
    /// `h = min(e, 1 - e)`.
    Matching,
    /// `h = -[e ln e + (1 - e) ln(1 - e)]`.
    Entropy,
}

fn check_e(e: f64) -> Result<()> {
    if e > 0.0 && e < 1.0 {
        Ok(())
    } else {
        Err(Error::ScoreOutOfRange(e))
    }
}

/// `-[e ln e + (1-e) ln(1-e)]` with `0 ln 0 = 0`.
fn entropy(e: f64) -> f64 {
    let a = if e > 0.0 { e * e.ln() } else { 0.0 };
    let b = if e < 1.0 { (1.0 - e) * (-e).ln_1p() } else { 0.0 };
    -(a + b)
}

impl TiltSpec {
    /// Trimmed IPW with threshold `alpha` in `(0, 0.5)`.
    pub fn trimmed(alpha: f64) -> Result<Self> {
        if alpha > 0.0 && alpha < 0.5 {
            Ok(TiltSpec::TrimmedIpw(alpha))
        } else {
            Err(Error::InvalidConfig(format!("trimming threshold {alpha} outside (0, 0.5)")))
        }
    }

    /// The seven weighting schemes compared throughout: IPW, IPW trimmed at
    /// 0.05/0.10/0.15, overlap, matching and entropy weights.
    pub fn standard_seven() -> Vec<Self> {
        vec![
            TiltSpec::Ipw,
            TiltSpec::TrimmedIpw(0.05),
            TiltSpec::TrimmedIpw(0.1),
            TiltSpec::TrimmedIpw(0.15),
            TiltSpec::Overlap,
            TiltSpec::Matching,
            TiltSpec::Entropy,
        ]
    }

    /// Tilting function `h(e)` without the range check, for hot loops over
    /// scores already known to lie in `(0, 1)`.
    #[inline]
    pub fn h(&self, e: f64) -> f64 {
        match *self {
            TiltSpec::Ipw => 1.0,
            TiltSpec::TrimmedIpw(a) => {
                if e >= a && e <= 1.0 - a {
                    1.0
                } else {
                    0.0
                }
            }
            TiltSpec::Treated => e,
            TiltSpec::Control => 1.0 - e,
            TiltSpec::Overlap => e * (1.0 - e),
            TiltSpec::Matching => e.min(1.0 - e),
            TiltSpec::Entropy => entropy(e),
        }
    }

    #[inline]
    pub fn dh(&self, e: f64) -> f64 {
        match *self {
            // indicator treated as locally constant
            TiltSpec::Ipw | TiltSpec::TrimmedIpw(_) => 0.0,
            TiltSpec::Treated => 1.0,
            TiltSpec::Control => -1.0,
            TiltSpec::Overlap => 1.0 - 2.0 * e,
            TiltSpec::Matching => {
                if e < 0.5 {
                    1.0
                } else if e > 0.5 {
                    -1.0
                } else {
                    0.0
                }
            }
            TiltSpec::Entropy => (-e).ln_1p() - e.ln(),
        }
    }

    pub fn value(&self, e: f64) -> Result<f64> {
        check_e(e)?;
        Ok(self.h(e))
    }

    /// `dh/de`. The matching kink at `e = 0.5` has derivative 0 and the
    /// trimming indicator is differentiated as a constant.
    pub fn derivative(&self, e: f64) -> Result<f64> {
        check_e(e)?;
        Ok(self.dh(e))
    }

    /// Group weight: `h/e` for treated units, `h/(1-e)` for controls.
    pub fn weight(&self, e: f64, treated: bool) -> Result<f64> {
        check_e(e)?;
        Ok(self.weight_unchecked(e, treated))
    }

    #[inline]
    pub fn weight_unchecked(&self, e: f64, treated: bool) -> f64 {
        match (*self, treated) {
            (TiltSpec::Treated, true) | (TiltSpec::Control, false) => 1.0,
            (TiltSpec::Overlap, true) => 1.0 - e,
            (TiltSpec::Overlap, false) => e,
            (TiltSpec::Matching, true) => ((1.0 - e) / e).min(1.0),
            (TiltSpec::Matching, false) => (e / (1.0 - e)).min(1.0),
            (spec, true) => spec.h(e) / e,
            (spec, false) => spec.h(e) / (1.0 - e),
        }
    }

    pub fn is_trimmed(&self) -> bool {
        matches!(self, TiltSpec::TrimmedIpw(_))
    }

    pub fn label(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for TiltSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TiltSpec::Ipw => f.write_str("IPW"),
            TiltSpec::TrimmedIpw(a) => write!(f, "IPW({a})"),
            TiltSpec::Treated => f.write_str("ATT"),
            TiltSpec::Control => f.write_str("ATC"),
            TiltSpec::Overlap => f.write_str("OW"),
            TiltSpec::Matching => f.write_str("MW"),
            TiltSpec::Entropy => f.write_str("EW"),
        }
    }
}

impl FromStr for TiltSpec {
    type Err = Error;

    /// Accepts `ipw`, `ipw(0.1)`, `trim:0.1`, `att`, `atc`, `ow`, `mw`, `ew`
    /// (case-insensitive) and the long names `overlap`, `matching`, `entropy`,
    /// `treated`, `control`.
    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_lowercase();
        let alpha = |a: &str| -> Result<Self> {
            let v = a
                .trim()
                .parse::<f64>()
                .map_err(|_| Error::InvalidConfig(format!("bad trimming threshold in `{s}`")))?;
            TiltSpec::trimmed(v)
        };
        match t.as_str() {
            "ipw" | "ate" => Ok(TiltSpec::Ipw),
            "att" | "treated" => Ok(TiltSpec::Treated),
            "atc" | "control" => Ok(TiltSpec::Control),
            "ow" | "overlap" | "ato" => Ok(TiltSpec::Overlap),
            "mw" | "matching" => Ok(TiltSpec::Matching),
            "ew" | "entropy" => Ok(TiltSpec::Entropy),
            _ => {
                if let Some(rest) = t.strip_prefix("ipw(").and_then(|r| r.strip_suffix(')')) {
                    alpha(rest)
                } else if let Some(rest) = t.strip_prefix("trim:") {
                    alpha(rest)
                } else {
                    Err(Error::InvalidConfig(format!("unknown weighting method `{s}`")))
                }
            }
        }
    }
}

impl Serialize for TiltSpec {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for TiltSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
