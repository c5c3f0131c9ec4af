//! Approximate Bayes factors for association under a point-null versus
//! normal-smear prior, and the posterior odds they imply.

use alloc::vec::Vec;
use core::f64::consts::{LN_10, PI};
use core::str::FromStr;

use crate::error::check_range;
use crate::special::{norm_isf, z_from_two_sided_p};
use crate::{Error, Result};

/// Two-sided tail mass beyond OR 0.5 / 2.0 used by [`CalibrationMode::ByTail`].
pub const TAIL_MASS: f64 = 0.021;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum CalibrationMode {
    /// `E|log OR| = log(or_average)` under the smear.
    #[default]
    ByMeanAbs,
    /// `P(OR < 0.5 or OR > 2) = 2.1%` under the smear; ignores `or_average`.
    ByTail,
}

impl FromStr for CalibrationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mean_abs" | "by_mean_abs" => Ok(CalibrationMode::ByMeanAbs),
            "tail" | "by_tail" => Ok(CalibrationMode::ByTail),
            _ => Err(Error::InvalidRecord("prior mode must be mean_abs or tail")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorSpec {
    pub or_average: f64,
    /// SD of the normal prior on log OR.
    pub prior_sd: f64,
    /// Prior odds of association, e.g. 1/99,999.
    pub prior_odds: f64,
    pub calibration_mode: CalibrationMode,
}

impl PriorSpec {
    pub fn new(or_average: f64, mode: CalibrationMode, prior_odds: f64) -> Result<Self> {
        check_range("prior_odds", prior_odds, prior_odds > 0.0 && prior_odds.is_finite())?;
        let prior_sd = prior_sd_from_or_av(or_average, mode)?;
        Ok(Self { or_average, prior_sd, prior_odds, calibration_mode: mode })
    }

    /// Prior variance of log OR.
    pub fn w(&self) -> f64 {
        self.prior_sd * self.prior_sd
    }
}

impl Default for PriorSpec {
    fn default() -> Self {
        PriorSpec::new(1.15, CalibrationMode::ByMeanAbs, 1.0 / 99_999.0).expect("valid default prior")
    }
}

/// Bayes factor is alternative over null; posterior odds favor association.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CredibilityResult {
    pub log10_bf: f64,
    pub log10_posterior_odds: f64,
    pub posterior_odds: f64,
    pub posterior_prob: f64,
    pub null_variance: f64,
}

/// Sampling variance of the additive log-OR estimate at β = 0, from the
/// Fisher information of `logit P(case) = α + βG` with the intercept profiled
/// out: `V = 1 / (N φ(1-φ) · 2f(1-f))`, φ the case fraction, f the allele
/// frequency (genotype variance under Hardy-Weinberg).
pub fn null_variance_additive(n_cases: u64, n_controls: u64, raf: f64) -> Result<f64> {
    if n_cases == 0 || n_controls == 0 {
        return Err(Error::OutOfRange { name: "sample size", value: 0.0 });
    }
    if !(raf > 0.0 && raf < 1.0) {
        return Err(Error::DegenerateAlleleFrequency(raf));
    }
    let n = (n_cases + n_controls) as f64;
    let phi = n_cases as f64 / n;
    let var_g = 2.0 * raf * (1.0 - raf);
    Ok(1.0 / (n * phi * (1.0 - phi) * var_g))
}

/// `BF = sqrt(v/(v+W)) · exp(z² W / (2(v+W)))` with `z = beta_hat/sqrt(v)`.
pub fn approx_bayes_factor(beta_hat: f64, v: f64, prior: &PriorSpec) -> Result<CredibilityResult> {
    check_range("v", v, v > 0.0 && v.is_finite())?;
    check_range("beta_hat", beta_hat, beta_hat.is_finite())?;
    let w = prior.w();
    let z2 = beta_hat * beta_hat / v;
    let ln_bf = 0.5 * libm::log(v / (v + w)) + 0.5 * z2 * w / (v + w);
    let log10_bf = ln_bf / LN_10;
    let log10_post = log10_bf + libm::log10(prior.prior_odds);
    let posterior_odds = libm::pow(10.0, log10_post);
    // odds / (1 + odds), written to stay finite when odds overflow.
    let posterior_prob = 1.0 / (1.0 + libm::pow(10.0, -log10_post));
    Ok(CredibilityResult {
        log10_bf,
        log10_posterior_odds: log10_post,
        posterior_odds,
        posterior_prob,
        null_variance: v,
    })
}

pub fn prior_sd_from_or_av(or_average: f64, mode: CalibrationMode) -> Result<f64> {
    match mode {
        CalibrationMode::ByMeanAbs => {
            check_range("or_average", or_average, or_average > 1.0 && or_average.is_finite())?;
            // E|X| = σ sqrt(2/π) for a centred normal.
            Ok(libm::log(or_average) * libm::sqrt(PI / 2.0))
        }
        CalibrationMode::ByTail => Ok(core::f64::consts::LN_2 / norm_isf(0.5 * TAIL_MASS)),
    }
}

/// Bayes factor needed to move `prior_odds` to `target_posterior_odds`.
pub fn bf_threshold_for_posterior(prior_odds: f64, target_posterior_odds: f64) -> Result<f64> {
    check_range("prior_odds", prior_odds, prior_odds > 0.0)?;
    check_range("target_posterior_odds", target_posterior_odds, target_posterior_odds > 0.0)?;
    Ok(target_posterior_odds / prior_odds)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub p: f64,
    pub log10_bf: f64,
}

/// log10 BF as a function of two-sided p-value for one design: the estimate
/// is placed at `z · sqrt(V)` with V from [`null_variance_additive`].
pub fn bf_curve(p_grid: &[f64], n_cases: u64, n_controls: u64, raf: f64, prior: &PriorSpec) -> Result<Vec<CurvePoint>> {
    let v = null_variance_additive(n_cases, n_controls, raf)?;
    p_grid
        .iter()
        .map(|&p| {
            check_range("p", p, p > 0.0 && p <= 1.0)?;
            let beta_hat = z_from_two_sided_p(p) * libm::sqrt(v);
            let r = approx_bayes_factor(beta_hat, v, prior)?;
            Ok(CurvePoint { p, log10_bf: r.log10_bf })
        })
        .collect()
}
