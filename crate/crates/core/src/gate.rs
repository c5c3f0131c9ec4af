//! Rule engine deciding whether a discovery association was replicated.
//!
//! Rules run in a fixed order and every rule that fires is appended to the
//! verdict's trace, so a verdict can be audited step by step:
//!
//! 1. variant identity, or an LD proxy at `r² >= proxy_r2_min`
//! 2. genetic model identity
//! 3. phenotype label comparison (flag only)
//! 4. direction of the pooled replication effect against discovery
//! 5. replication-only significance → `replicated_exact`
//! 6. all-data significance → `replicated_combined`
//! 7. power of the replication sample at the winner's-curse corrected effect
//! 8. heterogeneity advisory (flag only)

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use bitflags::bitflags;

use crate::error::check_range;
use crate::meta::{fixed_effect, Direction, EffectEstimate, HeterogeneityBlock, MetaResult};
use crate::power::{power_allelic, PowerScenario};
use crate::special::z_from_two_sided_p;
use crate::sumstats::{align_alleles, AlleleFrame, VariantRecord};
use crate::winners_curse::{conditional_mle_correct, SelectedEffect};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum DirectionRule {
    #[default]
    MustMatch,
    FlagOnly,
}

impl FromStr for DirectionRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "must_match" => Ok(DirectionRule::MustMatch),
            "flag_only" => Ok(DirectionRule::FlagOnly),
            _ => Err(Error::InvalidRecord("direction rule must be must_match or flag_only")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateConfig {
    pub require_same_variant: bool,
    /// Minimum r² for a proxy; only consulted when an LD table is supplied.
    pub proxy_r2_min: f64,
    pub require_same_model: bool,
    pub replication_alpha: f64,
    pub combined_alpha: f64,
    pub direction_rule: DirectionRule,
    /// Significance level the discovery estimate was selected at; sets the
    /// truncation point for the winner's-curse correction.
    pub discovery_alpha: f64,
    /// Power below this attaches `insufficient_power`.
    pub min_power: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            require_same_variant: true,
            proxy_r2_min: 0.8,
            require_same_model: true,
            replication_alpha: 1e-4,
            combined_alpha: 5e-8,
            direction_rule: DirectionRule::MustMatch,
            discovery_alpha: 5e-8,
            min_power: 0.8,
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        check_range("proxy_r2_min", self.proxy_r2_min, (0.0..=1.0).contains(&self.proxy_r2_min))?;
        check_range("replication_alpha", self.replication_alpha, self.replication_alpha > 0.0 && self.replication_alpha < 1.0)?;
        check_range("combined_alpha", self.combined_alpha, self.combined_alpha > 0.0 && self.combined_alpha < 1.0)?;
        check_range("discovery_alpha", self.discovery_alpha, self.discovery_alpha > 0.0 && self.discovery_alpha < 1.0)?;
        check_range("min_power", self.min_power, (0.0..=1.0).contains(&self.min_power))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Status {
    ReplicatedExact,
    ReplicatedCombined,
    NotReplicated,
    Indeterminate,
}

impl Status {
    pub fn as_str(self) -> &'static str {
        match self {
            Status::ReplicatedExact => "replicated_exact",
            Status::ReplicatedCombined => "replicated_combined",
            Status::NotReplicated => "not_replicated",
            Status::Indeterminate => "indeterminate",
        }
    }
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

bitflags! {
    #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
    pub struct ReasonCodes: u8 {
        const SAMPLING_ERROR_DEFAULT = 1 << 0;
        const INSUFFICIENT_POWER = 1 << 1;
        const MODEL_MISMATCH = 1 << 2;
        const LD_PROXY_UNVERIFIED = 1 << 3;
        const DIRECTION_FLIP = 1 << 4;
        const PHENOTYPE_MISMATCH_FLAG = 1 << 5;
        const HETEROGENEITY_FLAG = 1 << 6;
    }
}

const REASON_NAMES: [(ReasonCodes, &str); 7] = [
    (ReasonCodes::SAMPLING_ERROR_DEFAULT, "sampling_error_default"),
    (ReasonCodes::INSUFFICIENT_POWER, "insufficient_power"),
    (ReasonCodes::MODEL_MISMATCH, "model_mismatch"),
    (ReasonCodes::LD_PROXY_UNVERIFIED, "ld_proxy_unverified"),
    (ReasonCodes::DIRECTION_FLIP, "direction_flip"),
    (ReasonCodes::PHENOTYPE_MISMATCH_FLAG, "phenotype_mismatch_flag"),
    (ReasonCodes::HETEROGENEITY_FLAG, "heterogeneity_flag"),
];

impl ReasonCodes {
    pub fn to_field(self) -> String {
        let mut out = String::new();
        for (f, n) in REASON_NAMES {
            if self.contains(f) {
                if !out.is_empty() {
                    out.push(';');
                }
                out.push_str(n);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Rule {
    NoReplications,
    VariantIdentity,
    ModelIdentity,
    PhenotypeLabel,
    NoUsableReplications,
    DirectionConcordance,
    ReplicationSignificance,
    CombinedSignificance,
    PowerAtCorrectedEffect,
    HeterogeneityAdvisory,
}

impl Rule {
    pub fn id(self) -> &'static str {
        match self {
            Rule::NoReplications => "no_replications",
            Rule::VariantIdentity => "variant_identity",
            Rule::ModelIdentity => "model_identity",
            Rule::PhenotypeLabel => "phenotype_label",
            Rule::NoUsableReplications => "no_usable_replications",
            Rule::DirectionConcordance => "direction_concordance",
            Rule::ReplicationSignificance => "replication_significance",
            Rule::CombinedSignificance => "combined_significance",
            Rule::PowerAtCorrectedEffect => "power_at_corrected_effect",
            Rule::HeterogeneityAdvisory => "heterogeneity_advisory",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RuleFired {
    pub rule: Rule,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationVerdict {
    pub variant_id: String,
    pub status: Status,
    pub reason_codes: ReasonCodes,
    /// Fixed-effect synthesis of discovery plus usable replications.
    pub combined: Option<MetaResult>,
    /// Fixed-effect synthesis of usable replications only.
    pub replication: Option<MetaResult>,
    pub corrected_discovery_beta: Option<f64>,
    pub power_at_observed_effect: Option<f64>,
    pub trace: Vec<RuleFired>,
}

impl ReplicationVerdict {
    fn fire(&mut self, rule: Rule, passed: bool) {
        self.trace.push(RuleFired { rule, passed });
    }

    /// `rule:pass|fail` entries in firing order, comma separated.
    pub fn trace_field(&self) -> String {
        let mut out = String::new();
        for (i, r) in self.trace.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            out.push_str(r.rule.id());
            out.push_str(if r.passed { ":pass" } else { ":fail" });
        }
        out
    }

    pub fn replication_p(&self) -> Option<f64> {
        self.replication.map(|m| m.p_value)
    }
}

/// Symmetric table of pairwise r² between variant ids.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LdTable {
    pairs: BTreeMap<(String, String), f64>,
}

impl LdTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, a: &str, b: &str, r2: f64) {
        self.pairs.insert(ordered(a, b), r2);
    }

    pub fn r2(&self, a: &str, b: &str) -> Option<f64> {
        if a == b {
            return Some(1.0);
        }
        self.pairs.get(&ordered(a, b)).copied()
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

fn ordered(a: &str, b: &str) -> (String, String) {
    if a <= b {
        (a.into(), b.into())
    } else {
        (b.into(), a.into())
    }
}

fn same_variant(a: &VariantRecord, b: &VariantRecord) -> bool {
    a.variant_id == b.variant_id || a.key() == b.key()
}

fn same_phenotype(a: &Option<String>, b: &Option<String>) -> bool {
    match (a, b) {
        (Some(x), Some(y)) => x.trim().eq_ignore_ascii_case(y.trim()),
        _ => true,
    }
}

pub fn assess(
    discovery: &VariantRecord,
    replications: &[VariantRecord],
    cfg: &GateConfig,
    ld: Option<&LdTable>,
) -> Result<ReplicationVerdict> {
    cfg.validate()?;
    discovery.validate()?;
    let mut v = ReplicationVerdict {
        variant_id: discovery.variant_id.clone(),
        status: Status::Indeterminate,
        reason_codes: ReasonCodes::empty(),
        combined: None,
        replication: None,
        corrected_discovery_beta: None,
        power_at_observed_effect: None,
        trace: Vec::new(),
    };
    if replications.is_empty() {
        v.fire(Rule::NoReplications, false);
        return Ok(v);
    }

    let frame = AlleleFrame::of(discovery);
    let mut usable: Vec<VariantRecord> = Vec::with_capacity(replications.len());
    let mut identity_ok = true;
    let mut model_ok = true;
    let mut phenotype_ok = true;
    for r in replications {
        r.validate()?;
        let record = if same_variant(discovery, r) {
            let aligned = align_alleles(r, &frame);
            if aligned.is_dropped() {
                identity_ok = false;
                continue;
            }
            aligned.record
        } else if !cfg.require_same_variant {
            r.clone()
        } else {
            let r2 = ld.and_then(|t| t.r2(&discovery.variant_id, &r.variant_id));
            match r2 {
                Some(x) if x >= cfg.proxy_r2_min => r.clone(),
                _ => {
                    identity_ok = false;
                    v.reason_codes |= ReasonCodes::LD_PROXY_UNVERIFIED;
                    continue;
                }
            }
        };
        if record.genetic_model != discovery.genetic_model {
            model_ok = false;
            v.reason_codes |= ReasonCodes::MODEL_MISMATCH;
            if cfg.require_same_model {
                continue;
            }
        }
        if !same_phenotype(&discovery.phenotype, &record.phenotype) {
            phenotype_ok = false;
            v.reason_codes |= ReasonCodes::PHENOTYPE_MISMATCH_FLAG;
        }
        usable.push(record);
    }
    v.fire(Rule::VariantIdentity, identity_ok);
    v.fire(Rule::ModelIdentity, model_ok);
    v.fire(Rule::PhenotypeLabel, phenotype_ok);

    if usable.is_empty() {
        v.fire(Rule::NoUsableReplications, false);
        v.status = Status::NotReplicated;
        return Ok(v);
    }

    let rep_effects = usable.iter().map(EffectEstimate::from_record).collect::<Result<Vec<_>>>()?;
    let mut all_effects = Vec::with_capacity(rep_effects.len() + 1);
    all_effects.push(EffectEstimate::from_record(discovery)?);
    all_effects.extend(rep_effects.iter().cloned());
    let rep = fixed_effect(&rep_effects)?;
    let combined = fixed_effect(&all_effects)?;
    v.replication = Some(rep);
    v.combined = Some(combined);

    let concordant = Direction::of(rep.pooled_beta) == Direction::of(discovery.beta);
    v.fire(Rule::DirectionConcordance, concordant);
    if !concordant {
        v.reason_codes |= ReasonCodes::DIRECTION_FLIP;
    }

    if !concordant && cfg.direction_rule == DirectionRule::MustMatch {
        v.status = Status::NotReplicated;
    } else {
        // A flipped replication never counts as exact, even when only flagged.
        let exact = concordant && rep.p_value < cfg.replication_alpha;
        v.fire(Rule::ReplicationSignificance, exact);
        if exact {
            v.status = Status::ReplicatedExact;
        } else {
            let comb = combined.p_value < cfg.combined_alpha;
            v.fire(Rule::CombinedSignificance, comb);
            if comb {
                v.status = Status::ReplicatedCombined;
            } else {
                v.status = Status::NotReplicated;
                v.reason_codes |= ReasonCodes::SAMPLING_ERROR_DEFAULT;
            }
        }
    }

    if let Some((corrected, power)) = power_at_corrected(discovery, &usable, cfg)? {
        v.corrected_discovery_beta = Some(corrected);
        v.power_at_observed_effect = Some(power);
        let enough = power >= cfg.min_power;
        v.fire(Rule::PowerAtCorrectedEffect, enough);
        if !enough {
            v.reason_codes |= ReasonCodes::INSUFFICIENT_POWER;
        }
    }

    if combined.k_studies >= 2 {
        v = heterogeneity_advisory(v, &combined.heterogeneity);
    }
    Ok(v)
}

// Corrected discovery log OR and the replication sample's power to detect it.
// The truncation point is the discovery threshold, or the discovery |z| when
// the estimate did not reach it.
fn power_at_corrected(discovery: &VariantRecord, usable: &[VariantRecord], cfg: &GateConfig) -> Result<Option<(f64, f64)>> {
    let n_cases: u64 = usable.iter().map(|r| r.n_cases).sum();
    let n_controls: u64 = usable.iter().map(|r| r.n_controls).sum();
    let z = libm::fabs(discovery.beta / discovery.se);
    if n_cases == 0 || n_controls == 0 || z == 0.0 {
        return Ok(None);
    }
    let c = z_from_two_sided_p(cfg.discovery_alpha).min(z);
    let corrected = conditional_mle_correct(&SelectedEffect::new(discovery.beta, discovery.se, c)?)?;
    let raf = if corrected >= 0.0 {
        discovery.effect_allele_freq
    } else {
        1.0 - discovery.effect_allele_freq
    };
    if !(raf > 0.0 && raf < 1.0) {
        return Ok(None);
    }
    let s = PowerScenario::new(n_cases, n_controls, raf, libm::exp(libm::fabs(corrected)), cfg.replication_alpha)?;
    Ok(Some((corrected, power_allelic(&s)?)))
}

/// Attaches `heterogeneity_flag` when Cochran's Q is significant at 0.05 or
/// I² exceeds 0.5. Status is never changed.
pub fn heterogeneity_advisory(mut verdict: ReplicationVerdict, het: &HeterogeneityBlock) -> ReplicationVerdict {
    let flagged = het.q_pvalue < 0.05 || het.i_squared > 0.5;
    verdict.fire(Rule::HeterogeneityAdvisory, !flagged);
    if flagged {
        verdict.reason_codes |= ReasonCodes::HETEROGENEITY_FLAG;
    }
    verdict
}
