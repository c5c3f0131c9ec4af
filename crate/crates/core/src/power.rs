//! Analytic power of the allelic case-control test on log OR.
//!
//! Case allele frequency follows from the control frequency and the allelic
//! odds ratio, the log-OR variance is the 2×2 allele-table approximation and
//! the test is two-sided.

use crate::error::check_range;
use crate::special::{norm_cdf, norm_isf};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerScenario {
    pub n_cases: u64,
    pub n_controls: u64,
    pub raf_controls: f64,
    pub allelic_or: f64,
    pub alpha: f64,
}

impl PowerScenario {
    pub fn new(n_cases: u64, n_controls: u64, raf_controls: f64, allelic_or: f64, alpha: f64) -> Result<Self> {
        let s = Self { n_cases, n_controls, raf_controls, allelic_or, alpha };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_cases == 0 || self.n_controls == 0 {
            return Err(Error::OutOfRange { name: "sample size", value: 0.0 });
        }
        if !(self.raf_controls > 0.0 && self.raf_controls < 1.0) {
            return Err(Error::DegenerateAlleleFrequency(self.raf_controls));
        }
        check_range("allelic_or", self.allelic_or, self.allelic_or > 0.0 && self.allelic_or.is_finite())?;
        check_range("alpha", self.alpha, self.alpha > 0.0 && self.alpha < 1.0)
    }
}

/// Risk-allele frequency in cases implied by the control frequency and OR.
pub fn case_allele_freq(raf_controls: f64, allelic_or: f64) -> f64 {
    allelic_or * raf_controls / (1.0 + raf_controls * (allelic_or - 1.0))
}

pub fn power_allelic(s: &PowerScenario) -> Result<f64> {
    s.validate()?;
    Ok(power_at(s.n_cases as f64, s.n_controls as f64, s.raf_controls, s.allelic_or, s.alpha))
}

// Same formula with real-valued arm sizes, used by the sample-size search.
fn power_at(n_cases: f64, n_controls: f64, p0: f64, or: f64, alpha: f64) -> f64 {
    let p1 = case_allele_freq(p0, or);
    let var = 1.0 / (2.0 * n_cases * p1 * (1.0 - p1)) + 1.0 / (2.0 * n_controls * p0 * (1.0 - p0));
    let ncp = libm::log(or) / libm::sqrt(var);
    let crit = norm_isf(0.5 * alpha);
    norm_cdf(ncp - crit) + norm_cdf(-ncp - crit)
}

const MAX_CASES: u64 = 1 << 40;
// Slack for rounding in the power comparison at the exact solution.
const POWER_SLACK: f64 = 1e-12;

/// Smallest number of cases, with `controls_per_case · n_cases` controls,
/// whose power reaches `target_power`.
pub fn required_cases(target_power: f64, controls_per_case: f64, raf: f64, or: f64, alpha: f64) -> Result<u64> {
    check_range("alpha", alpha, alpha > 0.0 && alpha < 1.0)?;
    check_range("target_power", target_power, target_power > alpha && target_power < 1.0)?;
    check_range("controls_per_case", controls_per_case, controls_per_case > 0.0 && controls_per_case.is_finite())?;
    if !(raf > 0.0 && raf < 1.0) {
        return Err(Error::DegenerateAlleleFrequency(raf));
    }
    check_range("or", or, or > 0.0 && or.is_finite())?;

    let reaches = |n: u64| {
        let n = n as f64;
        power_at(n, n * controls_per_case, raf, or, alpha) >= target_power - POWER_SLACK
    };
    if !reaches(MAX_CASES) {
        return Err(Error::UnreachablePower { target: target_power });
    }
    if reaches(1) {
        return Ok(1);
    }
    // Power is monotone in n: grow an upper bracket, then bisect.
    let mut hi = 2u64;
    while !reaches(hi) {
        hi *= 2;
    }
    let mut lo = hi / 2;
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if reaches(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}
