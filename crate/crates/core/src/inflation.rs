//! Genomic-control λ and quantile-quantile data for genome-wide scans.

use alloc::vec::Vec;

use crate::meta::{fixed_effect, random_effects, EffectEstimate, MetaResult};
use crate::special::{chi2_1_isf, CHISQ1_MEDIAN};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum InputKind {
    Chisq1df,
    PValue,
}

/// Coordinates are -log10 p.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QqPoint {
    pub expected: f64,
    pub observed: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanDiagnostics {
    pub lambda_gc: f64,
    pub n_tests: usize,
    /// Sorted by `expected` ascending.
    pub qq_points: Vec<QqPoint>,
}

/// Median observed 1-df chi-squared over the null median.
pub fn lambda_gc(values: &[f64], kind: InputKind) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut chisq: Vec<f64> = match kind {
        InputKind::Chisq1df => values.to_vec(),
        InputKind::PValue => values.iter().map(|&p| chi2_1_isf(p)).collect(),
    };
    Ok(median(&mut chisq) / CHISQ1_MEDIAN)
}

fn median(xs: &mut [f64]) -> f64 {
    let n = xs.len();
    let mid = n / 2;
    let (_, upper, _) = xs.select_nth_unstable_by(mid, f64::total_cmp);
    let upper = *upper;
    if n % 2 == 1 {
        upper
    } else {
        // Largest element of the lower half.
        let lower = xs[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    }
}

/// Thinning of QQ points in the bulk of the distribution, where points
/// overlap on any plot. Tail points are always kept.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Thinning {
    /// Points with expected -log10 p above this are all kept.
    pub tail_threshold: f64,
    /// Upper bound on the number of bulk points kept.
    pub max_bulk_points: usize,
}

impl Default for Thinning {
    fn default() -> Self {
        Self { tail_threshold: 2.0, max_bulk_points: 50_000 }
    }
}

/// QQ points on the -log10 scale. The i-th smallest p-value (1-based) is
/// paired with the expected quantile (i - 0.5)/n.
pub fn qq_points(p_values: &[f64], thinning: Option<Thinning>) -> Vec<QqPoint> {
    let n = p_values.len();
    let mut sorted = p_values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let nf = n as f64;
    // Largest p first so that expected -log10 p ascends.
    let all = sorted.iter().enumerate().rev().map(move |(i, &p)| QqPoint {
        expected: -libm::log10((i as f64 + 0.5) / nf),
        observed: -libm::log10(p),
    });
    match thinning {
        None => all.collect(),
        Some(t) => {
            let bulk = sorted
                .iter()
                .enumerate()
                .filter(|(i, _)| -libm::log10((*i as f64 + 0.5) / nf) <= t.tail_threshold)
                .count();
            let stride = if t.max_bulk_points == 0 { usize::MAX } else { bulk.div_ceil(t.max_bulk_points).max(1) };
            all.enumerate()
                .filter(|(j, q)| q.expected > t.tail_threshold || j % stride == 0 || *j + 1 == bulk)
                .map(|(_, q)| q)
                .collect()
        }
    }
}

pub fn diagnostics(p_values: &[f64], thinning: Option<Thinning>) -> Result<ScanDiagnostics> {
    Ok(ScanDiagnostics {
        lambda_gc: lambda_gc(p_values, InputKind::PValue)?,
        n_tests: p_values.len(),
        qq_points: qq_points(p_values, thinning),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelComparison {
    pub fixed: ScanDiagnostics,
    pub random: ScanDiagnostics,
    /// Single-study variants, for which random effects reduces to fixed.
    pub single_study_variants: usize,
}

/// Per-variant meta-analysis under both models over a scan, then λ and QQ
/// data for each model.
pub fn compare_models_diagnostics<'a, I>(scan: I, thinning: Option<Thinning>) -> Result<ModelComparison>
where
    I: IntoIterator<Item = &'a [EffectEstimate]>,
{
    let mut fixed_p = Vec::new();
    let mut random_p = Vec::new();
    let mut single = 0usize;
    for effects in scan {
        if effects.is_empty() {
            continue;
        }
        let (f, r) = both_models(effects)?;
        if effects.len() < 2 {
            single += 1;
        }
        fixed_p.push(f.p_value);
        random_p.push(r.p_value);
    }
    Ok(ModelComparison {
        fixed: diagnostics(&fixed_p, thinning)?,
        random: diagnostics(&random_p, thinning)?,
        single_study_variants: single,
    })
}

/// Fixed and random-effects results for one variant; with one study the
/// random-effects result is the fixed-effect one.
pub fn both_models(effects: &[EffectEstimate]) -> Result<(MetaResult, MetaResult)> {
    let f = fixed_effect(effects)?;
    let r = if effects.len() >= 2 { random_effects(effects)? } else { f };
    Ok((f, r))
}
