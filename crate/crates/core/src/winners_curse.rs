//! Winner's-curse correction by conditional maximum likelihood.
//!
//! An estimate reported because it passed `|z| >= c` follows a normal
//! distribution truncated to that event. Maximizing the truncated likelihood
//! over the true effect gives a shrunken estimate that undoes the selection
//! bias on average.

use core::f64::consts::LN_2;

use crate::error::check_range;
use crate::power::required_cases;
use crate::special::{ln_norm_cdf, z_from_two_sided_p};
use crate::{Error, Result};

const GRID_POINTS: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectedEffect {
    pub beta_hat: f64,
    pub se: f64,
    /// |z| threshold the estimate survived.
    pub selection_z: f64,
}

impl SelectedEffect {
    pub fn new(beta_hat: f64, se: f64, selection_z: f64) -> Result<Self> {
        if !(se > 0.0) || !se.is_finite() {
            return Err(Error::NonPositiveSe(se));
        }
        check_range("selection_z", selection_z, selection_z > 0.0 && selection_z.is_finite())?;
        let z = libm::fabs(beta_hat) / se;
        if z < selection_z {
            return Err(Error::NotSelected { z, threshold: selection_z });
        }
        Ok(Self { beta_hat, se, selection_z })
    }

    /// Threshold given as a two-sided significance level.
    pub fn at_alpha(beta_hat: f64, se: f64, alpha: f64) -> Result<Self> {
        check_range("alpha", alpha, alpha > 0.0 && alpha < 1.0)?;
        Self::new(beta_hat, se, z_from_two_sided_p(alpha))
    }

    pub fn z(&self) -> f64 {
        self.beta_hat / self.se
    }
}

fn ln_add_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + libm::log1p(libm::exp(-libm::fabs(a - b)))
}

// ln P(|Z + mu| >= c) for Z standard normal.
fn ln_selection_prob(mu: f64, c: f64) -> f64 {
    ln_add_exp(ln_norm_cdf(mu - c), ln_norm_cdf(-mu - c))
}

/// Truncated log-likelihood of observing `z` given mean `mu` (z units).
pub fn conditional_log_likelihood(z: f64, mu: f64, c: f64) -> f64 {
    -0.5 * (z - mu) * (z - mu) - ln_selection_prob(mu, c)
}

// d/dmu of the log-likelihood.
fn score(z: f64, mu: f64, c: f64) -> f64 {
    let ln_d = ln_selection_prob(mu, c);
    let ln_phi = |x: f64| -0.5 * x * x - 0.5 * (LN_2 + libm::log(core::f64::consts::PI));
    let up = libm::exp(ln_phi(mu - c) - ln_d);
    let down = libm::exp(ln_phi(mu + c) - ln_d);
    (z - mu) - (up - down)
}

/// Conditional MLE of the true effect. `|result| <= |beta_hat|`, same sign.
pub fn conditional_mle_correct(e: &SelectedEffect) -> Result<f64> {
    let e = SelectedEffect::new(e.beta_hat, e.se, e.selection_z)?;
    let z = libm::fabs(e.z());
    let c = e.selection_z;
    if z == 0.0 {
        return Ok(0.0);
    }
    // Over [-z, z] the likelihood at -mu never beats +mu, so search [0, z].
    let ll = |mu: f64| conditional_log_likelihood(z, mu, c);
    let step = z / GRID_POINTS as f64;
    let mut best = 0usize;
    let mut best_ll = ll(0.0);
    for i in 1..=GRID_POINTS {
        let v = ll(i as f64 * step);
        if v > best_ll {
            best_ll = v;
            best = i;
        }
    }
    let mut lo = best.saturating_sub(1) as f64 * step;
    let mut hi = (best + 1).min(GRID_POINTS) as f64 * step;

    // Tolerance 1e-8 on the beta scale, tighter in z units when se < 1.
    let tol = (1e-8 / e.se).min(1e-8);
    let mu = if score(z, lo, c) > 0.0 && score(z, hi, c) < 0.0 {
        while hi - lo > tol {
            let mid = 0.5 * (lo + hi);
            if score(z, mid, c) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    } else {
        // Maximum sits on a boundary of the search interval.
        let inv_phi = 0.618_033_988_749_894_8;
        let (mut a, mut b) = (lo, hi);
        while b - a > tol {
            let x1 = b - inv_phi * (b - a);
            let x2 = a + inv_phi * (b - a);
            if ll(x1) < ll(x2) {
                a = x1;
            } else {
                b = x2;
            }
        }
        0.5 * (a + b)
    };
    let mu = mu.clamp(0.0, z);
    Ok(libm::copysign(mu * e.se, e.beta_hat))
}

/// Cases needed to replicate at `alpha_rep` with `target_power`, planning
/// with the corrected effect.
pub fn replication_sample_size(
    e: &SelectedEffect,
    raf: f64,
    controls_per_case: f64,
    alpha_rep: f64,
    target_power: f64,
) -> Result<u64> {
    let corrected = conditional_mle_correct(e)?;
    required_cases(target_power, controls_per_case, raf, libm::exp(libm::fabs(corrected)), alpha_rep)
}

/// The same plan built on the uncorrected estimate.
pub fn naive_replication_sample_size(
    e: &SelectedEffect,
    raf: f64,
    controls_per_case: f64,
    alpha_rep: f64,
    target_power: f64,
) -> Result<u64> {
    required_cases(target_power, controls_per_case, raf, libm::exp(libm::fabs(e.beta_hat)), alpha_rep)
}
