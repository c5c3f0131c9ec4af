//! Case-control consortium simulator with known truth.
//!
//! Every random draw for a (variant, study) pair comes from its own ChaCha
//! substream keyed by the root seed, so output does not depend on the order
//! or thread in which pairs are generated.

use std::io::{self, Read};

use gwrep_core::meta::{fixed_effect, EffectEstimate};
use gwrep_core::power::{case_allele_freq, power_allelic, PowerScenario};
use gwrep_core::special::two_sided_p;
use gwrep_core::sumstats::{is_palindromic, Allele, GeneticModel, VariantRecord};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::{fmt_f64, study_header, write_record};

// Stream id reserved for per-variant (study-independent) draws.
const VARIANT_STREAM: u64 = u64::MAX;
const CHUNK: u64 = 1 << 14;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyDesign {
    pub id: String,
    pub n_cases: u64,
    pub n_controls: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub studies: Vec<StudyDesign>,
    /// Risk-allele frequency in controls.
    pub raf: f64,
    pub true_or: f64,
    /// SD of per-study log OR around `ln(true_or)` for non-null variants.
    #[serde(default)]
    pub tau: f64,
    pub n_variants: u64,
    #[serde(default)]
    pub fraction_null: f64,
    pub seed: u64,
    /// Draw genotype counts under Hardy-Weinberg instead of allele counts.
    #[serde(default)]
    pub genotype_level: bool,
}

impl SimConfig {
    /// Equal-sized studies named `study1..studyK`.
    pub fn uniform(k: usize, n_cases: u64, n_controls: u64) -> Self {
        Self {
            studies: (1..=k).map(|i| StudyDesign { id: format!("study{i}"), n_cases, n_controls }).collect(),
            raf: 0.4,
            true_or: 1.0,
            tau: 0.0,
            n_variants: 1000,
            fraction_null: 1.0,
            seed: 1,
            genotype_level: false,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::Invalid(m.into()));
        if self.studies.is_empty() {
            return bad("at least one study required");
        }
        if self.studies.iter().any(|s| s.n_cases == 0 || s.n_controls == 0) {
            return bad("every study needs cases and controls");
        }
        if !(self.raf > 0.0 && self.raf < 1.0) {
            return bad("raf must lie in (0, 1)");
        }
        if !(self.true_or > 0.0 && self.true_or.is_finite()) {
            return bad("true_or must be positive");
        }
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            return bad("tau must be nonnegative");
        }
        if !(0.0..=1.0).contains(&self.fraction_null) {
            return bad("fraction_null must lie in [0, 1]");
        }
        Ok(())
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Independent generator for one (index, stream) pair under a root seed.
pub fn substream(root: u64, index: u64, stream: u64) -> ChaCha8Rng {
    let base = splitmix64(root ^ splitmix64(index));
    let mut key = [0u8; 32];
    for (i, chunk) in key.chunks_exact_mut(8).enumerate() {
        chunk.copy_from_slice(&splitmix64(base.wrapping_add(i as u64)).to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(stream);
    rng
}

const ALLELE_PAIRS: [(Allele, Allele); 8] = [
    (Allele::A, Allele::C),
    (Allele::A, Allele::G),
    (Allele::C, Allele::A),
    (Allele::C, Allele::T),
    (Allele::G, Allele::A),
    (Allele::G, Allele::T),
    (Allele::T, Allele::C),
    (Allele::T, Allele::G),
];

#[derive(Debug, Clone, Copy, PartialEq)]
struct VariantTruth {
    is_null: bool,
    mean_beta: f64,
    alleles: (Allele, Allele),
}

fn variant_truth(cfg: &SimConfig, v: u64) -> VariantTruth {
    let mut r = substream(cfg.seed, v, VARIANT_STREAM);
    let is_null = r.random::<f64>() < cfg.fraction_null;
    let alleles = ALLELE_PAIRS[r.random_range(0..ALLELE_PAIRS.len())];
    VariantTruth { is_null, mean_beta: if is_null { 0.0 } else { cfg.true_or.ln() }, alleles }
}

/// Allelic log-OR estimate from one simulated 2×2 table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TableEstimate {
    pub beta: f64,
    pub se: f64,
    /// Pooled effect-allele frequency over cases and controls.
    pub eaf: f64,
    /// A zero cell forced the 0.5 continuity correction.
    pub haldane: bool,
}

fn effect_allele_count<R: Rng>(rng: &mut R, n: u64, p: f64, genotype_level: bool) -> u64 {
    if genotype_level {
        let hom = Binomial::new(n, p * p).expect("valid probability").sample(rng);
        let het_p = if p >= 1.0 { 0.0 } else { (2.0 * p * (1.0 - p) / (1.0 - p * p)).min(1.0) };
        let het = Binomial::new(n - hom, het_p).expect("valid probability").sample(rng);
        2 * hom + het
    } else {
        Binomial::new(2 * n, p).expect("valid probability").sample(rng)
    }
}

/// Samples one study and estimates the allelic log OR with its Wald SE.
pub fn sample_table<R: Rng>(rng: &mut R, n_cases: u64, n_controls: u64, raf: f64, beta: f64, genotype_level: bool) -> TableEstimate {
    let p1 = case_allele_freq(raf, beta.exp());
    let a = effect_allele_count(rng, n_cases, p1, genotype_level) as f64;
    let c = effect_allele_count(rng, n_controls, raf, genotype_level) as f64;
    let b = 2.0 * n_cases as f64 - a;
    let d = 2.0 * n_controls as f64 - c;
    let eaf = (a + c) / (a + b + c + d);
    let haldane = a == 0.0 || b == 0.0 || c == 0.0 || d == 0.0;
    let (a, b, c, d) = if haldane { (a + 0.5, b + 0.5, c + 0.5, d + 0.5) } else { (a, b, c, d) };
    TableEstimate {
        beta: (a * d / (b * c)).ln(),
        se: (1.0 / a + 1.0 / b + 1.0 / c + 1.0 / d).sqrt(),
        eaf,
        haldane,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TruthRow {
    pub variant_id: String,
    pub study_id: String,
    pub is_null: bool,
    pub mean_beta: f64,
    pub study_beta: f64,
    pub haldane: bool,
}

pub fn variant_id(v: u64) -> String {
    format!("rs{}", v + 1)
}

fn simulate_pair(cfg: &SimConfig, v: u64, s: usize, t: &VariantTruth) -> (VariantRecord, TruthRow) {
    let design = &cfg.studies[s];
    let mut r = substream(cfg.seed, v, s as u64);
    let study_beta = if t.is_null {
        0.0
    } else {
        let z: f64 = StandardNormal.sample(&mut r);
        t.mean_beta + cfg.tau * z
    };
    let est = sample_table(&mut r, design.n_cases, design.n_controls, cfg.raf, study_beta, cfg.genotype_level);
    let id = variant_id(v);
    let record = VariantRecord {
        study_id: design.id.clone(),
        variant_id: id.clone(),
        chromosome: "1".into(),
        position: 1000 + 10 * v,
        effect_allele: t.alleles.0,
        other_allele: t.alleles.1,
        effect_allele_freq: est.eaf,
        beta: est.beta,
        se: est.se,
        p_value: two_sided_p(est.beta / est.se).p,
        n_cases: design.n_cases,
        n_controls: design.n_controls,
        genetic_model: GeneticModel::Additive,
        phenotype: None,
    };
    let truth = TruthRow {
        variant_id: id,
        study_id: design.id.clone(),
        is_null: t.is_null,
        mean_beta: t.mean_beta,
        study_beta,
        haldane: est.haldane,
    };
    (record, truth)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOutput {
    /// One table per study, each in variant order.
    pub studies: Vec<Vec<VariantRecord>>,
    /// Variant-major, then study order.
    pub truth: Vec<TruthRow>,
}

pub fn simulate_consortium(cfg: &SimConfig) -> Result<SimOutput, SimError> {
    cfg.validate()?;
    let k = cfg.studies.len();
    let per_variant: Vec<Vec<(VariantRecord, TruthRow)>> = (0..cfg.n_variants)
        .into_par_iter()
        .map(|v| {
            let t = variant_truth(cfg, v);
            (0..k).map(|s| simulate_pair(cfg, v, s, &t)).collect()
        })
        .collect();
    let mut studies: Vec<Vec<VariantRecord>> = (0..k).map(|_| Vec::with_capacity(cfg.n_variants as usize)).collect();
    let mut truth = Vec::with_capacity(per_variant.len() * k);
    for pairs in per_variant {
        for (s, (rec, t)) in pairs.into_iter().enumerate() {
            studies[s].push(rec);
            truth.push(t);
        }
    }
    Ok(SimOutput { studies, truth })
}

/// Records of one study generated lazily in variant order. Identical to the
/// matching table from [`simulate_consortium`].
pub fn study_stream(cfg: &SimConfig, study: usize) -> impl Iterator<Item = VariantRecord> + '_ {
    (0..cfg.n_variants).map(move |v| simulate_pair(cfg, v, study, &variant_truth(cfg, v)).0)
}

/// Study-schema TSV bytes produced on demand from a record iterator.
pub struct TsvStream<I> {
    records: I,
    buf: Vec<u8>,
    pos: usize,
}

impl<I: Iterator<Item = VariantRecord>> TsvStream<I> {
    pub fn new(records: I) -> Self {
        let mut buf = study_header().into_bytes();
        buf.push(b'\n');
        Self { records, buf, pos: 0 }
    }
}

impl<I: Iterator<Item = VariantRecord>> Read for TsvStream<I> {
    fn read(&mut self, out: &mut [u8]) -> io::Result<usize> {
        while self.pos == self.buf.len() {
            self.buf.clear();
            self.pos = 0;
            match self.records.next() {
                Some(r) => write_record(&mut self.buf, &r)?,
                None => return Ok(0),
            }
        }
        let n = out.len().min(self.buf.len() - self.pos);
        out[..n].copy_from_slice(&self.buf[self.pos..self.pos + n]);
        self.pos += n;
        Ok(n)
    }
}

pub fn write_truth<W: io::Write>(w: &mut W, truth: &[TruthRow]) -> io::Result<()> {
    writeln!(w, "variant_id\tstudy_id\tis_null\tmean_beta\tstudy_beta\thaldane_corrected")?;
    for t in truth {
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}\t{}",
            t.variant_id,
            t.study_id,
            t.is_null,
            fmt_f64(t.mean_beta),
            fmt_f64(t.study_beta),
            t.haldane
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectedHit {
    pub variant_index: u64,
    pub naive_beta: f64,
    pub se: f64,
    /// True log OR in the discovery study.
    pub true_beta: f64,
    /// Fixed-effect pooled (beta, se) over the remaining studies, if any.
    pub replication: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscoveryScan {
    pub selected: Vec<SelectedHit>,
    pub n_scanned: u64,
}

/// The first study is the discovery stage; variants with two-sided
/// `p <= discovery_alpha` there are kept. Scanning stops after `stop_after`
/// hits when given, otherwise covers all `n_variants`.
pub fn simulate_discovery_replication(
    cfg: &SimConfig,
    discovery_alpha: f64,
    stop_after: Option<usize>,
) -> Result<DiscoveryScan, SimError> {
    cfg.validate()?;
    if !(discovery_alpha > 0.0 && discovery_alpha <= 1.0) {
        return Err(SimError::Invalid("discovery_alpha must lie in (0, 1]".into()));
    }
    let want = stop_after.unwrap_or(usize::MAX);
    let mut selected = Vec::new();
    let mut scanned = 0u64;
    let mut start = 0u64;
    while start < cfg.n_variants && selected.len() < want {
        let end = (start + CHUNK).min(cfg.n_variants);
        let hits: Vec<Option<SelectedHit>> = (start..end)
            .into_par_iter()
            .map(|v| discovery_hit(cfg, v, discovery_alpha))
            .collect();
        for (i, h) in hits.into_iter().enumerate() {
            if selected.len() >= want {
                break;
            }
            scanned = start + i as u64 + 1;
            if let Some(h) = h {
                selected.push(h);
            }
        }
        start = end;
    }
    Ok(DiscoveryScan { selected, n_scanned: scanned })
}

fn discovery_hit(cfg: &SimConfig, v: u64, alpha: f64) -> Option<SelectedHit> {
    let t = variant_truth(cfg, v);
    let (disc, truth) = simulate_pair(cfg, v, 0, &t);
    if disc.p_value > alpha {
        return None;
    }
    let reps: Vec<EffectEstimate> = (1..cfg.studies.len())
        .map(|s| {
            let r = simulate_pair(cfg, v, s, &t).0;
            EffectEstimate::new(r.beta, r.se, r.study_id).expect("simulated se is positive")
        })
        .collect();
    let replication = fixed_effect(&reps).ok().map(|m| (m.pooled_beta, m.pooled_se));
    Some(SelectedHit { variant_index: v, naive_beta: disc.beta, se: disc.se, true_beta: truth.study_beta, replication })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PerturbationKind {
    StrandFlip,
    AlleleSwap,
    StrandFlipAndSwap,
}

impl PerturbationKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PerturbationKind::StrandFlip => "strand_flip",
            PerturbationKind::AlleleSwap => "allele_swap",
            PerturbationKind::StrandFlipAndSwap => "strand_flip_and_swap",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Perturbation {
    pub study_index: usize,
    pub record_index: usize,
    pub kind: PerturbationKind,
}

fn apply(r: &mut VariantRecord, kind: PerturbationKind) {
    let flip = matches!(kind, PerturbationKind::StrandFlip | PerturbationKind::StrandFlipAndSwap);
    let swap = matches!(kind, PerturbationKind::AlleleSwap | PerturbationKind::StrandFlipAndSwap);
    if flip {
        r.effect_allele = r.effect_allele.complement();
        r.other_allele = r.other_allele.complement();
    }
    if swap {
        std::mem::swap(&mut r.effect_allele, &mut r.other_allele);
        r.beta = -r.beta;
        r.effect_allele_freq = 1.0 - r.effect_allele_freq;
    }
}

/// Randomly relabels records of every study after the first. Each record
/// receives one [`PerturbationKind`] with chance 3/4 and is otherwise kept.
/// Palindromic records are never touched since a flip cannot be recovered.
pub fn perturb_for_harmonization(tables: &[Vec<VariantRecord>], seed: u64) -> (Vec<Vec<VariantRecord>>, Vec<Perturbation>) {
    let mut out = tables.to_vec();
    let mut log = Vec::new();
    for (s, table) in out.iter_mut().enumerate().skip(1) {
        for (i, r) in table.iter_mut().enumerate() {
            if is_palindromic(r.effect_allele, r.other_allele) {
                continue;
            }
            let kind = match substream(seed, i as u64, s as u64).random_range(0..4u8) {
                0 => continue,
                1 => PerturbationKind::StrandFlip,
                2 => PerturbationKind::AlleleSwap,
                _ => PerturbationKind::StrandFlipAndSwap,
            };
            apply(r, kind);
            log.push(Perturbation { study_index: s, record_index: i, kind });
        }
    }
    (out, log)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McPower {
    pub analytic: f64,
    pub empirical: f64,
    pub hits: u64,
    pub reps: u64,
    /// Wilson 95% interval for the empirical power.
    pub ci95: (f64, f64),
}

pub fn wilson_interval(hits: u64, n: u64) -> (f64, f64) {
    let z = 1.959_963_984_540_054_f64;
    let (x, n) = (hits as f64, n as f64);
    let denom = n + z * z;
    let center = (x + 0.5 * z * z) / denom;
    let half = z / denom * (x * (n - x) / n + 0.25 * z * z).sqrt();
    ((center - half).max(0.0), (center + half).min(1.0))
}

/// Monte Carlo check of the analytic allelic power for one design.
pub fn power_validate_mc(s: &PowerScenario, reps: u64, seed: u64, genotype_level: bool) -> Result<McPower, SimError> {
    let analytic = power_allelic(s).map_err(|e| SimError::Invalid(e.to_string()))?;
    if reps == 0 {
        return Err(SimError::Invalid("reps must be positive".into()));
    }
    let beta = s.allelic_or.ln();
    let hits: u64 = (0..reps)
        .into_par_iter()
        .map(|i| {
            let mut r = substream(seed, i, 0);
            let e = sample_table(&mut r, s.n_cases, s.n_controls, s.raf_controls, beta, genotype_level);
            u64::from(two_sided_p(e.beta / e.se).p <= s.alpha)
        })
        .sum();
    Ok(McPower { analytic, empirical: hits as f64 / reps as f64, hits, reps, ci95: wilson_interval(hits, reps) })
}
