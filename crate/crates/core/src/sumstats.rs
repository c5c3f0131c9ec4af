//! Per-study summary statistics and allele harmonization.
//!
//! Every study reports an effect for one allele of a biallelic variant. Before
//! effects can be pooled they must refer to the same allele on the same
//! strand. [`align_alleles`] maps one record onto a reference allele frame and
//! [`harmonize`] does that for every study reporting a variant.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use bitflags::bitflags;

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Allele {
    A,
    C,
    G,
    T,
}

impl Allele {
    pub const ALL: [Allele; 4] = [Allele::A, Allele::C, Allele::G, Allele::T];

    pub fn complement(self) -> Allele {
        match self {
            Allele::A => Allele::T,
            Allele::T => Allele::A,
            Allele::C => Allele::G,
            Allele::G => Allele::C,
        }
    }

    pub fn as_char(self) -> char {
        match self {
            Allele::A => 'A',
            Allele::C => 'C',
            Allele::G => 'G',
            Allele::T => 'T',
        }
    }
}

impl fmt::Display for Allele {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_char())
    }
}

impl FromStr for Allele {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "A" | "a" => Ok(Allele::A),
            "C" | "c" => Ok(Allele::C),
            "G" | "g" => Ok(Allele::G),
            "T" | "t" => Ok(Allele::T),
            _ => Err(Error::InvalidRecord("allele must be one of A, C, G, T")),
        }
    }
}

/// A/T and C/G pairs read the same on both strands.
pub fn is_palindromic(a: Allele, b: Allele) -> bool {
    a.complement() == b
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum GeneticModel {
    #[default]
    Additive,
    Dominant,
    Recessive,
}

impl GeneticModel {
    pub fn as_str(self) -> &'static str {
        match self {
            GeneticModel::Additive => "additive",
            GeneticModel::Dominant => "dominant",
            GeneticModel::Recessive => "recessive",
        }
    }
}

impl fmt::Display for GeneticModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GeneticModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "additive" | "add" => Ok(GeneticModel::Additive),
            "dominant" | "dom" => Ok(GeneticModel::Dominant),
            "recessive" | "rec" => Ok(GeneticModel::Recessive),
            _ => Err(Error::InvalidRecord("genetic model must be additive, dominant or recessive")),
        }
    }
}

/// One variant's summary statistic from one study.
#[derive(Debug, Clone, PartialEq)]
pub struct VariantRecord {
    pub study_id: String,
    pub variant_id: String,
    pub chromosome: String,
    pub position: u64,
    pub effect_allele: Allele,
    pub other_allele: Allele,
    pub effect_allele_freq: f64,
    pub beta: f64,
    pub se: f64,
    pub p_value: f64,
    /// 0 when the study did not report it.
    pub n_cases: u64,
    pub n_controls: u64,
    pub genetic_model: GeneticModel,
    /// Free-text phenotype label, compared across studies by the replication gate.
    pub phenotype: Option<String>,
}

impl VariantRecord {
    pub fn validate(&self) -> Result<()> {
        if self.effect_allele == self.other_allele {
            return Err(Error::InvalidRecord("effect allele equals other allele"));
        }
        if !(self.se > 0.0) || !self.se.is_finite() {
            return Err(Error::NonPositiveSe(self.se));
        }
        if !(self.p_value > 0.0 && self.p_value <= 1.0) {
            return Err(Error::OutOfRange { name: "p_value", value: self.p_value });
        }
        if !(0.0..=1.0).contains(&self.effect_allele_freq) {
            return Err(Error::OutOfRange { name: "effect_allele_freq", value: self.effect_allele_freq });
        }
        if !self.beta.is_finite() {
            return Err(Error::OutOfRange { name: "beta", value: self.beta });
        }
        Ok(())
    }

    pub fn total_n(&self) -> u64 {
        self.n_cases + self.n_controls
    }

    pub fn has_sample_size(&self) -> bool {
        self.total_n() > 0
    }

    /// Grouping key: `chr:pos:a1:a2` with the allele pair put in a strand- and
    /// order-independent canonical form, falling back to `variant_id` when
    /// the position is unknown.
    pub fn key(&self) -> String {
        let chrom = normalize_chromosome(&self.chromosome);
        if chrom.is_empty() || self.position == 0 {
            return self.variant_id.clone();
        }
        let (a, b) = canonical_pair(self.effect_allele, self.other_allele);
        format!("{chrom}:{}:{a}:{b}", self.position)
    }
}

pub fn normalize_chromosome(chrom: &str) -> &str {
    let c = chrom.trim();
    if c.len() > 3 && c[..3].eq_ignore_ascii_case("chr") {
        &c[3..]
    } else {
        c
    }
}

fn canonical_pair(a: Allele, b: Allele) -> (Allele, Allele) {
    let sorted = |x: Allele, y: Allele| if x <= y { (x, y) } else { (y, x) };
    let direct = sorted(a, b);
    let flipped = sorted(a.complement(), b.complement());
    direct.min(flipped)
}

bitflags! {
    #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
    pub struct HarmonizeFlags: u8 {
        const STRAND_FLIPPED = 1 << 0;
        const ALLELE_SWAPPED = 1 << 1;
        const AMBIGUOUS_PALINDROMIC = 1 << 2;
        const FREQUENCY_MISMATCH = 1 << 3;
        const DROPPED = 1 << 4;
    }
}

const FLAG_NAMES: [(HarmonizeFlags, &str); 5] = [
    (HarmonizeFlags::STRAND_FLIPPED, "strand_flipped"),
    (HarmonizeFlags::ALLELE_SWAPPED, "allele_swapped"),
    (HarmonizeFlags::AMBIGUOUS_PALINDROMIC, "ambiguous_palindromic"),
    (HarmonizeFlags::FREQUENCY_MISMATCH, "frequency_mismatch"),
    (HarmonizeFlags::DROPPED, "dropped"),
];

impl HarmonizeFlags {
    pub fn names(self) -> impl Iterator<Item = &'static str> {
        FLAG_NAMES
            .iter()
            .filter(move |(f, _)| self.contains(*f))
            .map(|(_, n)| *n)
    }

    /// Semicolon-separated names; empty string when no flag is set.
    pub fn to_field(self) -> String {
        let mut out = String::new();
        for (i, n) in self.names().enumerate() {
            if i > 0 {
                out.push(';');
            }
            out.push_str(n);
        }
        out
    }

    pub fn from_field(s: &str) -> Result<Self> {
        let mut flags = HarmonizeFlags::empty();
        for part in s.split(';').map(str::trim).filter(|p| !p.is_empty()) {
            let f = FLAG_NAMES
                .iter()
                .find(|(_, n)| *n == part)
                .map(|(f, _)| *f)
                .ok_or(Error::InvalidRecord("unknown harmonization flag"))?;
            flags |= f;
        }
        Ok(flags)
    }
}

/// Reference allele frame a record is mapped onto.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlleleFrame {
    pub effect: Allele,
    pub other: Allele,
    /// Reference effect-allele frequency, used to orient palindromic pairs.
    pub effect_freq: Option<f64>,
}

impl AlleleFrame {
    pub fn new(effect: Allele, other: Allele) -> Self {
        Self { effect, other, effect_freq: None }
    }

    pub fn of(record: &VariantRecord) -> Self {
        Self {
            effect: record.effect_allele,
            other: record.other_allele,
            effect_freq: Some(record.effect_allele_freq),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignConfig {
    /// Palindromic records with effect-allele frequency inside this closed
    /// band cannot be oriented and are dropped.
    pub ambiguous_band: (f64, f64),
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self { ambiguous_band: (0.4, 0.6) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aligned {
    pub record: VariantRecord,
    pub flags: HarmonizeFlags,
}

impl Aligned {
    pub fn is_dropped(&self) -> bool {
        self.flags.contains(HarmonizeFlags::DROPPED)
    }
}

pub fn align_alleles(record: &VariantRecord, frame: &AlleleFrame) -> Aligned {
    align_alleles_with(record, frame, &AlignConfig::default())
}

pub fn align_alleles_with(record: &VariantRecord, frame: &AlleleFrame, cfg: &AlignConfig) -> Aligned {
    let (e, o) = (record.effect_allele, record.other_allele);
    let drop = |extra: HarmonizeFlags| Aligned {
        record: record.clone(),
        flags: extra | HarmonizeFlags::DROPPED,
    };

    if e == o {
        return drop(HarmonizeFlags::empty());
    }
    // Ambiguity is a property of the record alone, so it is reported even
    // against an unusable frame.
    let f = record.effect_allele_freq;
    let (lo, hi) = cfg.ambiguous_band;
    if is_palindromic(e, o) && f >= lo && f <= hi {
        return drop(HarmonizeFlags::AMBIGUOUS_PALINDROMIC);
    }
    if frame.effect == frame.other {
        return drop(HarmonizeFlags::empty());
    }

    if is_palindromic(e, o) {
        if !is_palindromic(frame.effect, frame.other) || !same_pair(e, o, frame) {
            return drop(HarmonizeFlags::empty());
        }
        // The strand cannot be read from the letters, only from which side
        // of 0.5 the frequencies fall on.
        let literal_identity = e == frame.effect;
        let same_side = frame.effect_freq.map(|rf| (f - 0.5) * (rf - 0.5) > 0.0);
        return match (literal_identity, same_side) {
            (true, None) | (true, Some(true)) => Aligned {
                record: record.clone(),
                flags: HarmonizeFlags::empty(),
            },
            (true, Some(false)) => Aligned {
                record: swapped(record, frame),
                flags: HarmonizeFlags::STRAND_FLIPPED | HarmonizeFlags::ALLELE_SWAPPED,
            },
            (false, Some(true)) => Aligned {
                record: relabeled(record, frame),
                flags: HarmonizeFlags::STRAND_FLIPPED,
            },
            (false, None) | (false, Some(false)) => Aligned {
                record: swapped(record, frame),
                flags: HarmonizeFlags::ALLELE_SWAPPED,
            },
        };
    }

    let (ce, co) = (e.complement(), o.complement());
    if e == frame.effect && o == frame.other {
        Aligned { record: record.clone(), flags: HarmonizeFlags::empty() }
    } else if e == frame.other && o == frame.effect {
        Aligned { record: swapped(record, frame), flags: HarmonizeFlags::ALLELE_SWAPPED }
    } else if ce == frame.effect && co == frame.other {
        Aligned { record: relabeled(record, frame), flags: HarmonizeFlags::STRAND_FLIPPED }
    } else if ce == frame.other && co == frame.effect {
        Aligned {
            record: swapped(record, frame),
            flags: HarmonizeFlags::STRAND_FLIPPED | HarmonizeFlags::ALLELE_SWAPPED,
        }
    } else {
        drop(HarmonizeFlags::empty())
    }
}

fn same_pair(e: Allele, o: Allele, frame: &AlleleFrame) -> bool {
    (e == frame.effect && o == frame.other) || (e == frame.other && o == frame.effect)
}

fn relabeled(record: &VariantRecord, frame: &AlleleFrame) -> VariantRecord {
    VariantRecord {
        effect_allele: frame.effect,
        other_allele: frame.other,
        ..record.clone()
    }
}

fn swapped(record: &VariantRecord, frame: &AlleleFrame) -> VariantRecord {
    VariantRecord {
        effect_allele: frame.effect,
        other_allele: frame.other,
        beta: -record.beta,
        effect_allele_freq: 1.0 - record.effect_allele_freq,
        ..record.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReferencePolicy {
    #[default]
    FirstStudy,
    LargestStudy,
}

impl FromStr for ReferencePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "first_study" | "first" => Ok(ReferencePolicy::FirstStudy),
            "largest_study" | "largest" => Ok(ReferencePolicy::LargestStudy),
            _ => Err(Error::InvalidRecord("reference policy must be first_study or largest_study")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HarmonizeConfig {
    pub policy: ReferencePolicy,
    pub align: AlignConfig,
    /// Absolute distance from the median aligned frequency that flags a set.
    pub frequency_mismatch: f64,
}

impl Default for HarmonizeConfig {
    fn default() -> Self {
        Self {
            policy: ReferencePolicy::FirstStudy,
            align: AlignConfig::default(),
            frequency_mismatch: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HarmonizedVariantSet {
    pub variant_id: String,
    pub reference_alleles: (Allele, Allele),
    /// Retained records, all on the reference frame.
    pub records: Vec<Aligned>,
    pub dropped: Vec<Aligned>,
    /// Union of every record's flags.
    pub flags: HarmonizeFlags,
}

impl HarmonizedVariantSet {
    pub fn retained(&self) -> impl Iterator<Item = &VariantRecord> {
        self.records.iter().map(|a| &a.record)
    }

}

/// Groups records by [`VariantRecord::key`], keeping first-appearance order of
/// both variants and records within a variant.
pub fn group_by_variant<I>(records: I) -> Vec<Vec<VariantRecord>>
where
    I: IntoIterator<Item = VariantRecord>,
{
    let mut index: BTreeMap<String, usize> = BTreeMap::new();
    let mut groups: Vec<Vec<VariantRecord>> = Vec::new();
    for r in records {
        let key = r.key();
        match index.get(&key) {
            Some(&i) => groups[i].push(r),
            None => {
                index.insert(key, groups.len());
                groups.push(alloc::vec![r]);
            }
        }
    }
    groups
}

/// Harmonizes one variant's records. Returns `None` for an empty group.
pub fn harmonize_group(records: &[VariantRecord], cfg: &HarmonizeConfig) -> Option<HarmonizedVariantSet> {
    let reference = match cfg.policy {
        ReferencePolicy::FirstStudy => records.first()?,
        ReferencePolicy::LargestStudy => {
            // max_by_key keeps the last maximum; walk manually to keep the first.
            let mut best = records.first()?;
            for r in &records[1..] {
                if r.total_n() > best.total_n() {
                    best = r;
                }
            }
            best
        }
    };
    let frame = AlleleFrame::of(reference);

    let mut kept = Vec::with_capacity(records.len());
    let mut dropped = Vec::new();
    for r in records {
        let a = align_alleles_with(r, &frame, &cfg.align);
        if a.is_dropped() {
            dropped.push(a);
        } else {
            kept.push(a);
        }
    }

    if kept.len() > 1 {
        let mut freqs: Vec<f64> = kept.iter().map(|a| a.record.effect_allele_freq).collect();
        let med = median_in_place(&mut freqs);
        for a in kept.iter_mut() {
            if libm::fabs(a.record.effect_allele_freq - med) > cfg.frequency_mismatch {
                a.flags |= HarmonizeFlags::FREQUENCY_MISMATCH;
            }
        }
    }

    let mut flags = HarmonizeFlags::empty();
    for a in kept.iter().chain(dropped.iter()) {
        flags |= a.flags;
    }
    Some(HarmonizedVariantSet {
        variant_id: reference.variant_id.clone(),
        reference_alleles: (frame.effect, frame.other),
        records: kept,
        dropped,
        flags,
    })
}

pub fn harmonize(groups: &[Vec<VariantRecord>], cfg: &HarmonizeConfig) -> Vec<HarmonizedVariantSet> {
    groups.iter().filter_map(|g| harmonize_group(g, cfg)).collect()
}

fn median_in_place(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}
