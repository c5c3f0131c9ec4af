//! Per-variant evidence synthesis across studies.
//!
//! Inverse-variance fixed-effect pooling, DerSimonian-Laird random effects,
//! Cochran's Q, I² with a test-based interval, prediction intervals and
//! directional weighted-Z combination of p-values.
//!
//! All sums run in input order through [`CompensatedSum`], so the same input
//! sequence always produces the same bits.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::error::check_range;
use crate::special::{chi2_sf, norm_isf, t_quantile, two_sided_p, TwoSidedP};
use crate::sum::CompensatedSum;
use crate::sumstats::VariantRecord;
use crate::{Error, Result};

/// |θ| below this makes τ/|θ| undefined.
pub const H_RATIO_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct EffectEstimate {
    pub beta: f64,
    pub se: f64,
    pub study_id: String,
    pub n_effective: f64,
}

impl EffectEstimate {
    pub fn new(beta: f64, se: f64, study_id: impl Into<String>) -> Result<Self> {
        Self::with_n(beta, se, study_id, 0.0)
    }

    pub fn with_n(beta: f64, se: f64, study_id: impl Into<String>, n_effective: f64) -> Result<Self> {
        if !(se > 0.0) || !se.is_finite() {
            return Err(Error::NonPositiveSe(se));
        }
        check_range("beta", beta, beta.is_finite())?;
        check_range("n_effective", n_effective, n_effective >= 0.0)?;
        Ok(Self { beta, se, study_id: study_id.into(), n_effective })
    }

    /// Effective case-control size `4 / (1/n_cases + 1/n_controls)`, or 0 when
    /// either count is missing.
    pub fn from_record(r: &VariantRecord) -> Result<Self> {
        let n_eff = if r.n_cases > 0 && r.n_controls > 0 {
            4.0 / (1.0 / r.n_cases as f64 + 1.0 / r.n_controls as f64)
        } else {
            0.0
        };
        Self::with_n(r.beta, r.se, r.study_id.clone(), n_eff)
    }

    fn weight(&self, tau2: f64) -> f64 {
        1.0 / (self.se * self.se + tau2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MetaModel {
    Fixed,
    RandomDl,
}

impl MetaModel {
    pub fn as_str(self) -> &'static str {
        match self {
            MetaModel::Fixed => "fixed",
            MetaModel::RandomDl => "random_dl",
        }
    }
}

impl fmt::Display for MetaModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QTest {
    pub q: f64,
    pub df: usize,
    pub p_value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ISquared {
    pub point: f64,
    pub ci95: (f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeterogeneityBlock {
    pub q: f64,
    pub q_df: usize,
    pub q_pvalue: f64,
    pub i_squared: f64,
    pub i_squared_ci: (f64, f64),
    pub tau_squared: f64,
    /// τ/|θ| with θ the random-effects pooled estimate; `None` when |θ| is
    /// below [`H_RATIO_EPS`].
    pub h_ratio: Option<f64>,
}

impl HeterogeneityBlock {
    /// Block for a single study: nothing to compare against.
    pub fn single() -> Self {
        Self {
            q: 0.0,
            q_df: 0,
            q_pvalue: 1.0,
            i_squared: 0.0,
            i_squared_ci: (0.0, 0.0),
            tau_squared: 0.0,
            h_ratio: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetaResult {
    pub model: MetaModel,
    pub pooled_beta: f64,
    pub pooled_se: f64,
    pub z: f64,
    pub p_value: f64,
    pub log10_p: f64,
    pub k_studies: usize,
    pub heterogeneity: HeterogeneityBlock,
    pub prediction_interval: Option<(f64, f64)>,
}

// Weighted mean and its SE with weights 1/(se² + tau2).
fn pool(effects: &[EffectEstimate], tau2: f64) -> (f64, f64) {
    if let [e] = effects {
        return (e.beta, libm::sqrt(e.se * e.se + tau2));
    }
    let mut sw = CompensatedSum::new();
    let mut swb = CompensatedSum::new();
    for e in effects {
        let w = e.weight(tau2);
        sw.add(w);
        swb.add(w * e.beta);
    }
    let sw = sw.value();
    (swb.value() / sw, 1.0 / libm::sqrt(sw))
}

fn result(model: MetaModel, beta: f64, se: f64, k: usize, het: HeterogeneityBlock, pi: Option<(f64, f64)>) -> MetaResult {
    let z = beta / se;
    let TwoSidedP { p, log10_p } = two_sided_p(z);
    MetaResult {
        model,
        pooled_beta: beta,
        pooled_se: se,
        z,
        p_value: p,
        log10_p,
        k_studies: k,
        heterogeneity: het,
        prediction_interval: pi,
    }
}

fn heterogeneity_or_single(effects: &[EffectEstimate]) -> Result<HeterogeneityBlock> {
    if effects.len() >= 2 {
        heterogeneity(effects)
    } else {
        Ok(HeterogeneityBlock::single())
    }
}

/// Inverse-variance fixed-effect pooling.
pub fn fixed_effect(effects: &[EffectEstimate]) -> Result<MetaResult> {
    if effects.is_empty() {
        return Err(Error::NoStudies);
    }
    let (beta, se) = pool(effects, 0.0);
    let het = heterogeneity_or_single(effects)?;
    Ok(result(MetaModel::Fixed, beta, se, effects.len(), het, None))
}

pub fn cochran_q(effects: &[EffectEstimate]) -> Result<QTest> {
    if effects.len() < 2 {
        return Err(Error::HeterogeneityUndefined(effects.len()));
    }
    let (fixed, _) = pool(effects, 0.0);
    let q = effects
        .iter()
        .map(|e| {
            let d = e.beta - fixed;
            e.weight(0.0) * d * d
        })
        .collect::<CompensatedSum>()
        .value();
    let df = effects.len() - 1;
    let p = chi2_sf(q, df as f64).clamp(f64::MIN_POSITIVE, 1.0);
    Ok(QTest { q, df, p_value: p })
}

/// I² point estimate with the test-based 95% interval on ln H, H = sqrt(Q/df).
pub fn i_squared(q: f64, df: usize) -> Result<ISquared> {
    if df < 1 {
        return Err(Error::HeterogeneityUndefined(df + 1));
    }
    check_range("q", q, q >= 0.0)?;
    if q == 0.0 {
        return Ok(ISquared { point: 0.0, ci95: (0.0, 0.0) });
    }
    let dff = df as f64;
    let point = ((q - dff) / q).max(0.0);

    let se_ln_h = if q > dff + 1.0 {
        0.5 * (libm::log(q) - libm::log(dff)) / (libm::sqrt(2.0 * q) - libm::sqrt(2.0 * dff - 1.0))
    } else if df >= 2 {
        let m = dff - 1.0;
        libm::sqrt(1.0 / (2.0 * m) * (1.0 - 1.0 / (3.0 * m * m)))
    } else {
        // One degree of freedom with Q <= 2: the interval is uninformative.
        return Ok(ISquared { point, ci95: (0.0, 1.0) });
    };
    let z = norm_isf(0.025);
    let ln_h = 0.5 * libm::log(q / dff);
    let to_i2 = |h: f64| {
        let h2 = h * h;
        ((h2 - 1.0) / h2).clamp(0.0, 1.0)
    };
    let lo = to_i2(libm::exp(ln_h - z * se_ln_h));
    let hi = to_i2(libm::exp(ln_h + z * se_ln_h));
    Ok(ISquared { point, ci95: (lo, hi) })
}

/// DerSimonian-Laird moment estimator of the between-study variance.
pub fn tau_squared_dl(effects: &[EffectEstimate]) -> Result<f64> {
    let q = cochran_q(effects)?;
    Ok(dl_from_q(effects, q.q))
}

fn dl_from_q(effects: &[EffectEstimate], q: f64) -> f64 {
    let mut sw = CompensatedSum::new();
    let mut sw2 = CompensatedSum::new();
    for e in effects {
        let w = e.weight(0.0);
        sw.add(w);
        sw2.add(w * w);
    }
    let sw = sw.value();
    let denom = sw - sw2.value() / sw;
    let df = (effects.len() - 1) as f64;
    if denom > 0.0 {
        ((q - df) / denom).max(0.0)
    } else {
        0.0
    }
}

/// Full heterogeneity block for two or more studies.
pub fn heterogeneity(effects: &[EffectEstimate]) -> Result<HeterogeneityBlock> {
    let qt = cochran_q(effects)?;
    let i2 = i_squared(qt.q, qt.df)?;
    let tau2 = dl_from_q(effects, qt.q);
    let (theta, _) = pool(effects, tau2);
    let h_ratio = if libm::fabs(theta) < H_RATIO_EPS {
        None
    } else {
        Some(libm::sqrt(tau2) / libm::fabs(theta))
    };
    Ok(HeterogeneityBlock {
        q: qt.q,
        q_df: qt.df,
        q_pvalue: qt.p_value,
        i_squared: i2.point,
        i_squared_ci: i2.ci95,
        tau_squared: tau2,
        h_ratio,
    })
}

/// DerSimonian-Laird random-effects pooling with a 95% prediction interval
/// when at least three studies are available.
pub fn random_effects(effects: &[EffectEstimate]) -> Result<MetaResult> {
    random_effects_alpha(effects, 0.05)
}

pub fn random_effects_alpha(effects: &[EffectEstimate], alpha: f64) -> Result<MetaResult> {
    if effects.len() < 2 {
        return Err(Error::HeterogeneityUndefined(effects.len()));
    }
    let het = heterogeneity(effects)?;
    random_with(effects, het, alpha)
}

/// Random-effects pooling at a caller-supplied τ². With `tau2 = 0` the pooled
/// estimate is bit-identical to [`fixed_effect`].
pub fn random_effects_with_tau2(effects: &[EffectEstimate], tau2: f64) -> Result<MetaResult> {
    if effects.len() < 2 {
        return Err(Error::HeterogeneityUndefined(effects.len()));
    }
    check_range("tau2", tau2, tau2 >= 0.0)?;
    let mut het = heterogeneity(effects)?;
    het.tau_squared = tau2;
    random_with(effects, het, 0.05)
}

fn random_with(effects: &[EffectEstimate], het: HeterogeneityBlock, alpha: f64) -> Result<MetaResult> {
    let k = effects.len();
    let (beta, se) = pool(effects, het.tau_squared);
    let pi = if k >= 3 {
        Some(prediction_interval(beta, se, het.tau_squared, k, alpha)?)
    } else {
        None
    };
    Ok(result(MetaModel::RandomDl, beta, se, k, het, pi))
}

/// `mu ± t(k-2, 1-alpha/2) * sqrt(tau2 + se_mu²)`.
pub fn prediction_interval(mu: f64, se_mu: f64, tau2: f64, k: usize, alpha: f64) -> Result<(f64, f64)> {
    if k < 3 {
        return Err(Error::InsufficientStudiesForPrediction(k));
    }
    check_range("alpha", alpha, alpha > 0.0 && alpha < 1.0)?;
    check_range("tau2", tau2, tau2 >= 0.0)?;
    check_range("se_mu", se_mu, se_mu >= 0.0)?;
    let t = t_quantile(1.0 - 0.5 * alpha, (k - 2) as f64);
    let half = t * libm::sqrt(tau2 + se_mu * se_mu);
    Ok((mu - half, mu + half))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    Positive,
    Negative,
}

impl Direction {
    pub fn of(x: f64) -> Direction {
        if x < 0.0 {
            Direction::Negative
        } else {
            Direction::Positive
        }
    }

    pub fn sign(self) -> f64 {
        match self {
            Direction::Positive => 1.0,
            Direction::Negative => -1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DirectionalP {
    /// Two-sided p-value.
    pub p: f64,
    pub direction: Direction,
    pub n_effective: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum WeightMode {
    #[default]
    None,
    SqrtN,
    N,
}

impl FromStr for WeightMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "none" => Ok(WeightMode::None),
            "sqrt_n" | "sqrtn" => Ok(WeightMode::SqrtN),
            "n" => Ok(WeightMode::N),
            _ => Err(Error::InvalidRecord("weight mode must be none, sqrt_n or n")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CombinedZ {
    pub z: f64,
    pub p_value: f64,
    pub log10_p: f64,
}

/// Weighted Z (Stouffer) combination of two-sided p-values with effect
/// directions: `z_i = dir_i * Φ⁻¹(1 - p_i/2)`, `Z = Σ a_i z_i / sqrt(Σ a_i²)`.
pub fn combine_pvalues_weighted_z(studies: &[DirectionalP], mode: WeightMode) -> Result<CombinedZ> {
    if studies.is_empty() {
        return Err(Error::NoStudies);
    }
    let mut num = CompensatedSum::new();
    let mut den = CompensatedSum::new();
    for (i, s) in studies.iter().enumerate() {
        check_range("p", s.p, s.p > 0.0 && s.p <= 1.0)?;
        let a = match mode {
            WeightMode::None => 1.0,
            WeightMode::SqrtN | WeightMode::N => {
                let n = s.n_effective.filter(|n| *n > 0.0).ok_or(Error::MissingSampleSize { index: i })?;
                if mode == WeightMode::SqrtN {
                    libm::sqrt(n)
                } else {
                    n
                }
            }
        };
        let z = s.direction.sign() * norm_isf(0.5 * s.p);
        num.add(a * z);
        den.add(a * a);
    }
    let z = num.value() / libm::sqrt(den.value());
    let TwoSidedP { p, log10_p } = two_sided_p(z);
    Ok(CombinedZ { z, p_value: p, log10_p })
}

/// Heterogeneity with the discovery study removed, so that winner's-curse
/// inflation of the discovery effect does not masquerade as heterogeneity.
pub fn heterogeneity_excluding_discovery(effects: &[EffectEstimate], discovery_id: &str) -> Result<HeterogeneityBlock> {
    if !effects.iter().any(|e| e.study_id == discovery_id) {
        return Err(Error::StudyNotFound(discovery_id.into()));
    }
    let rest: Vec<EffectEstimate> = effects.iter().filter(|e| e.study_id != discovery_id).cloned().collect();
    if rest.len() < 2 {
        return Err(Error::HeterogeneityUndefined(rest.len()));
    }
    heterogeneity(&rest)
}
