//! Threshold functions `f(n)` for the integral-test experiments.
//!
//! Grammar (whitespace ignored):
//!
//! ```text
//! loglog            log log n
//! C*loglog          C · log log n        (also `C·loglog`)
//! sqrt-log          √(log n)
//! log^P             (log n)^P            (power of log)
//! ```

use std::fmt;
use std::str::FromStr;

use serde::{Serialize, Serializer};
use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FSpec {
    LogLog { scale: f64 },
    SqrtLog,
    PowLog { power: f64 },
}

#[derive(Debug, Error, PartialEq)]
#[error("bad threshold function `{0}`: expected loglog, C*loglog, sqrt-log or log^P")]
pub struct FSpecError(pub String);

impl FSpec {
    pub fn eval(&self, n: f64) -> f64 {
        let l = n.ln();
        match *self {
            FSpec::LogLog { scale } => scale * l.ln(),
            FSpec::SqrtLog => l.sqrt(),
            FSpec::PowLog { power } => l.powf(power),
        }
    }
}

impl FromStr for FSpec {
    type Err = FSpecError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t: String = s.chars().filter(|c| !c.is_whitespace()).collect();
        let err = || FSpecError(s.to_string());
        if t == "loglog" {
            return Ok(FSpec::LogLog { scale: 1.0 });
        }
        if t == "sqrt-log" {
            return Ok(FSpec::SqrtLog);
        }
        if let Some(p) = t.strip_prefix("log^") {
            let power: f64 = p.parse().map_err(|_| err())?;
            return if power.is_finite() { Ok(FSpec::PowLog { power }) } else { Err(err()) };
        }
        for sep in ['*', '·'] {
            if let Some((c, rest)) = t.split_once(sep) {
                if rest == "loglog" {
                    let scale: f64 = c.parse().map_err(|_| err())?;
                    return if scale.is_finite() && scale > 0.0 { Ok(FSpec::LogLog { scale }) } else { Err(err()) };
                }
            }
        }
        Err(err())
    }
}

impl fmt::Display for FSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FSpec::LogLog { scale } if *scale == 1.0 => write!(f, "loglog"),
            FSpec::LogLog { scale } => write!(f, "{scale}*loglog"),
            FSpec::SqrtLog => write!(f, "sqrt-log"),
            FSpec::PowLog { power } => write!(f, "log^{power}"),
        }
    }
}

impl Serialize for FSpec {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_each_form() {
        assert_eq!("loglog".parse(), Ok(FSpec::LogLog { scale: 1.0 }));
        assert_eq!("1.5 * loglog".parse(), Ok(FSpec::LogLog { scale: 1.5 }));
        assert_eq!("2·loglog".parse(), Ok(FSpec::LogLog { scale: 2.0 }));
        assert_eq!("sqrt-log".parse(), Ok(FSpec::SqrtLog));
        assert_eq!("log^0.75".parse(), Ok(FSpec::PowLog { power: 0.75 }));
        for bad in ["", "exp", "x*loglog", "-1*loglog", "log^", "loglog+1"] {
            assert!(bad.parse::<FSpec>().is_err(), "{bad}");
        }
    }

    #[test]
    fn display_round_trips() {
        for s in ["loglog", "1.1*loglog", "sqrt-log", "log^2"] {
            let f: FSpec = s.parse().unwrap();
            assert_eq!(f.to_string().parse::<FSpec>().unwrap(), f);
        }
        let f: FSpec = "loglog".parse().unwrap();
        assert!((f.eval(1e6) - (1e6f64).ln().ln()).abs() < 1e-15);
    }
}
