//! Built-in self-checks run by `wavetrunk verify`.

pub mod dsp;
pub mod gradcheck;
pub mod props;

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Outcome of one named check.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckResult {
    pub fn new(name: impl Into<String>, value: f64, tolerance: f64, passed: bool) -> Self {
        Self { name: name.into(), value, tolerance, passed }
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} value={:.3e} tol={:.1e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.value,
            self.tolerance
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Gradcheck,
    Dsp,
    Props,
    All,
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gradcheck" => Ok(Suite::Gradcheck),
            "dsp" => Ok(Suite::Dsp),
            "props" => Ok(Suite::Props),
            "all" => Ok(Suite::All),
            _ => Err(Error::invalid(format!("unknown suite `{s}` (expected gradcheck, dsp, props or all)"))),
        }
    }
}

/// Runs `suite`. `corrupt` names a gradcheck case whose analytic gradient
/// is perturbed before comparison.
pub fn run(suite: Suite, corrupt: Option<&str>) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    if matches!(suite, Suite::Gradcheck | Suite::All) {
        out.extend(gradcheck::run(corrupt)?);
    }
    if matches!(suite, Suite::Dsp | Suite::All) {
        out.extend(dsp::run()?);
    }
    if matches!(suite, Suite::Props | Suite::All) {
        out.extend(props::run()?);
    }
    Ok(out)
}
