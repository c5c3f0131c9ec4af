//! Tab-separated summary-statistics input and every TSV/JSON artifact the
//! pipeline writes.

use std::fmt::Write as _;
use std::io::{self, BufRead, Write};

use gwrep_core::gate::ReplicationVerdict;
use gwrep_core::inflation::QqPoint;
use gwrep_core::meta::MetaResult;
use gwrep_core::credibility::CredibilityResult;
use gwrep_core::sumstats::{HarmonizeFlags, HarmonizedVariantSet, VariantRecord};
use thiserror::Error;

pub const REQUIRED_COLUMNS: [&str; 9] =
    ["variant_id", "chr", "pos", "effect_allele", "other_allele", "eaf", "beta", "se", "pval"];

/// Column order used by every writer of study-schema files.
pub const STUDY_COLUMNS: [&str; 14] = [
    "study_id",
    "variant_id",
    "chr",
    "pos",
    "effect_allele",
    "other_allele",
    "eaf",
    "beta",
    "se",
    "pval",
    "n_cases",
    "n_controls",
    "genetic_model",
    "phenotype",
];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {message}")]
pub struct RowError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Error)]
pub enum ReadError {
    #[error("empty input: header row required")]
    MissingHeader,
    #[error("missing required column(s): {}", .0.join(", "))]
    MissingColumns(Vec<String>),
    #[error("duplicate column: {0}")]
    DuplicateColumn(String),
    #[error("io: {0}")]
    Io(#[from] io::Error),
}

/// Per-row outcome: a row error is reported and the row skipped, an IO
/// error ends the stream.
#[derive(Debug, Error)]
pub enum ParseError {
    #[error(transparent)]
    Row(#[from] RowError),
    #[error("io: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub record: VariantRecord,
    /// Harmonization flags when the file carries a `flags` column.
    pub flags: HarmonizeFlags,
}

#[derive(Debug, Clone, Default)]
struct Columns {
    study_id: Option<usize>,
    variant_id: usize,
    chr: usize,
    pos: usize,
    effect_allele: usize,
    other_allele: usize,
    eaf: usize,
    beta: usize,
    se: usize,
    pval: usize,
    n_cases: Option<usize>,
    n_controls: Option<usize>,
    genetic_model: Option<usize>,
    phenotype: Option<usize>,
    flags: Option<usize>,
}

/// Streaming reader: holds one line buffer regardless of file length.
pub struct StudyReader<R> {
    src: R,
    cols: Columns,
    study_override: Option<String>,
    line_no: usize,
    buf: String,
    width: usize,
}

impl<R: BufRead> StudyReader<R> {
    /// Reads the header. `study_id` overrides (or replaces a missing)
    /// `study_id` column.
    pub fn new(mut src: R, study_id: Option<&str>) -> Result<Self, ReadError> {
        let mut header = String::new();
        if src.read_line(&mut header)? == 0 {
            return Err(ReadError::MissingHeader);
        }
        let names: Vec<String> = header
            .trim_end_matches(['\n', '\r'])
            .split('\t')
            .map(|s| s.trim().to_ascii_lowercase())
            .collect();
        let find = |n: &str| names.iter().position(|c| c == n);
        for (i, n) in names.iter().enumerate() {
            if !n.is_empty() && names[..i].contains(n) {
                return Err(ReadError::DuplicateColumn(n.clone()));
            }
        }
        let mut missing: Vec<String> = REQUIRED_COLUMNS
            .iter()
            .filter(|c| find(c).is_none())
            .map(|c| c.to_string())
            .collect();
        if study_id.is_none() && find("study_id").is_none() {
            missing.insert(0, "study_id".into());
        }
        if !missing.is_empty() {
            return Err(ReadError::MissingColumns(missing));
        }
        let req = |n: &str| find(n).expect("checked above");
        let cols = Columns {
            study_id: find("study_id"),
            variant_id: req("variant_id"),
            chr: req("chr"),
            pos: req("pos"),
            effect_allele: req("effect_allele"),
            other_allele: req("other_allele"),
            eaf: req("eaf"),
            beta: req("beta"),
            se: req("se"),
            pval: req("pval"),
            n_cases: find("n_cases"),
            n_controls: find("n_controls"),
            genetic_model: find("genetic_model"),
            phenotype: find("phenotype"),
            flags: find("flags"),
        };
        Ok(Self {
            src,
            cols,
            study_override: study_id.map(str::to_string),
            line_no: 1,
            buf: String::new(),
            width: names.len(),
        })
    }

    /// Adapter over records alone. Row errors are handed to `on_error`.
    pub fn records<F>(self, on_error: F) -> Records<R, F>
    where
        F: FnMut(RowError),
    {
        Records { inner: self, on_error }
    }

    fn parse_line(&self) -> Result<Row, RowError> {
        let err = |message: String| RowError { line: self.line_no, message };
        let fields: Vec<&str> = self.buf.trim_end_matches(['\n', '\r']).split('\t').collect();
        if fields.len() < self.width {
            return Err(err(format!("expected {} fields, found {}", self.width, fields.len())));
        }
        let c = &self.cols;
        let f = |i: usize| fields[i].trim();
        let num = |i: usize, name: &str| -> Result<f64, RowError> {
            f(i).parse::<f64>().map_err(|_| err(format!("unparseable {name}: {:?}", f(i))))
        };
        let count = |i: Option<usize>, name: &str| -> Result<u64, RowError> {
            match i.map(f) {
                None | Some("") | Some("NA") => Ok(0),
                Some(s) => s.parse::<u64>().map_err(|_| err(format!("unparseable {name}: {s:?}"))),
            }
        };
        let allele = |i: usize, name: &str| {
            f(i).parse().map_err(|_| err(format!("invalid {name}: {:?}", f(i))))
        };
        let study_id = match (&self.study_override, c.study_id) {
            (Some(s), _) => s.clone(),
            (None, Some(i)) => f(i).to_string(),
            (None, None) => unreachable!("header check requires one of them"),
        };
        let record = VariantRecord {
            study_id,
            variant_id: f(c.variant_id).to_string(),
            chromosome: f(c.chr).to_string(),
            position: f(c.pos).parse().map_err(|_| err(format!("unparseable pos: {:?}", f(c.pos))))?,
            effect_allele: allele(c.effect_allele, "effect_allele")?,
            other_allele: allele(c.other_allele, "other_allele")?,
            effect_allele_freq: num(c.eaf, "eaf")?,
            beta: num(c.beta, "beta")?,
            se: num(c.se, "se")?,
            p_value: num(c.pval, "pval")?,
            n_cases: count(c.n_cases, "n_cases")?,
            n_controls: count(c.n_controls, "n_controls")?,
            genetic_model: match c.genetic_model.map(f) {
                None | Some("") => Default::default(),
                Some(s) => s.parse().map_err(|e: gwrep_core::Error| err(e.to_string()))?,
            },
            phenotype: c.phenotype.map(f).filter(|s| !s.is_empty() && *s != "NA").map(str::to_string),
        };
        record.validate().map_err(|e| err(e.to_string()))?;
        let flags = match c.flags.map(f) {
            None => HarmonizeFlags::empty(),
            Some(s) => HarmonizeFlags::from_field(s).map_err(|e| err(e.to_string()))?,
        };
        Ok(Row { record, flags })
    }
}

impl<R: BufRead> Iterator for StudyReader<R> {
    type Item = Result<Row, ParseError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            self.buf.clear();
            match self.src.read_line(&mut self.buf) {
                Ok(0) => return None,
                Ok(_) => {}
                Err(e) => return Some(Err(e.into())),
            }
            self.line_no += 1;
            if self.buf.trim().is_empty() {
                continue;
            }
            return Some(self.parse_line().map_err(ParseError::from));
        }
    }
}

pub struct Records<R, F> {
    inner: StudyReader<R>,
    on_error: F,
}

impl<R: BufRead, F: FnMut(RowError)> Iterator for Records<R, F> {
    type Item = io::Result<VariantRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            match self.inner.next()? {
                Ok(row) => return Some(Ok(row.record)),
                Err(ParseError::Row(e)) => (self.on_error)(e),
                Err(ParseError::Io(e)) => return Some(Err(e)),
            }
        }
    }
}

/// Parses a whole study file into records plus row errors.
pub fn parse_study<R: BufRead>(src: R, study_id: Option<&str>) -> Result<(Vec<VariantRecord>, Vec<RowError>), ReadError> {
    let mut errors = Vec::new();
    let mut out = Vec::new();
    for item in StudyReader::new(src, study_id)?.records(|e| errors.push(e)) {
        out.push(item?);
    }
    Ok((out, errors))
}

/// Shortest text that parses back to the same `f64`; exponent form outside
/// `[1e-4, 1e15)` so tiny p-values stay short.
pub fn fmt_f64(x: f64) -> String {
    let a = x.abs();
    if x == 0.0 || !x.is_finite() || (1e-4..1e15).contains(&a) {
        format!("{x}")
    } else {
        format!("{x:e}")
    }
}

fn push_f64(line: &mut String, x: f64) {
    line.push('\t');
    line.push_str(&fmt_f64(x));
}

fn push_opt(line: &mut String, x: Option<f64>) {
    match x {
        Some(v) => push_f64(line, v),
        None => line.push_str("\tNA"),
    }
}

fn record_fields(r: &VariantRecord) -> String {
    let mut s = String::with_capacity(128);
    let _ = write!(
        s,
        "{}\t{}\t{}\t{}\t{}\t{}",
        r.study_id, r.variant_id, r.chromosome, r.position, r.effect_allele, r.other_allele
    );
    push_f64(&mut s, r.effect_allele_freq);
    push_f64(&mut s, r.beta);
    push_f64(&mut s, r.se);
    push_f64(&mut s, r.p_value);
    let _ = write!(
        s,
        "\t{}\t{}\t{}\t{}",
        r.n_cases,
        r.n_controls,
        r.genetic_model,
        r.phenotype.as_deref().unwrap_or("")
    );
    s
}

pub fn study_header() -> String {
    STUDY_COLUMNS.join("\t")
}

pub fn write_record<W: Write>(w: &mut W, r: &VariantRecord) -> io::Result<()> {
    writeln!(w, "{}", record_fields(r))
}

pub fn write_study<W: Write>(w: &mut W, records: &[VariantRecord]) -> io::Result<()> {
    writeln!(w, "{}", study_header())?;
    for r in records {
        write_record(w, r)?;
    }
    Ok(())
}

pub fn harmonized_header() -> String {
    format!("{}\tflags", study_header())
}

/// Retained records first, then dropped ones, all with their flags.
pub fn write_harmonized_set<W: Write>(w: &mut W, set: &HarmonizedVariantSet) -> io::Result<usize> {
    let mut n = 0;
    for a in set.records.iter().chain(set.dropped.iter()) {
        writeln!(w, "{}\t{}", record_fields(&a.record), a.flags.to_field())?;
        n += 1;
    }
    Ok(n)
}

pub const META_COLUMNS: [&str; 17] = [
    "variant_id", "model", "pooled_beta", "pooled_se", "z", "p", "log10p", "k", "q", "q_p", "i2", "i2_lo",
    "i2_hi", "tau2", "h_ratio", "pi_lo", "pi_hi",
];

pub fn meta_header() -> String {
    META_COLUMNS.join("\t")
}

/// Heterogeneity columns are NA for single-study variants.
pub fn write_meta_row<W: Write>(w: &mut W, variant_id: &str, m: &MetaResult) -> io::Result<()> {
    let mut s = format!("{variant_id}\t{}", m.model);
    push_f64(&mut s, m.pooled_beta);
    push_f64(&mut s, m.pooled_se);
    push_f64(&mut s, m.z);
    push_f64(&mut s, m.p_value);
    push_f64(&mut s, m.log10_p);
    let _ = write!(s, "\t{}", m.k_studies);
    let h = &m.heterogeneity;
    let multi = m.k_studies >= 2;
    let het = |x: f64| multi.then_some(x);
    push_opt(&mut s, het(h.q));
    push_opt(&mut s, het(h.q_pvalue));
    push_opt(&mut s, het(h.i_squared));
    push_opt(&mut s, het(h.i_squared_ci.0));
    push_opt(&mut s, het(h.i_squared_ci.1));
    push_opt(&mut s, het(h.tau_squared));
    push_opt(&mut s, if multi { h.h_ratio } else { None });
    push_opt(&mut s, m.prediction_interval.map(|p| p.0));
    push_opt(&mut s, m.prediction_interval.map(|p| p.1));
    writeln!(w, "{s}")
}

pub const CREDIBILITY_COLUMNS: [&str; 9] = [
    "variant_id", "beta", "se", "p", "null_variance", "log10_bf", "log10_posterior_odds", "posterior_prob",
    "credible",
];

pub fn credibility_header() -> String {
    CREDIBILITY_COLUMNS.join("\t")
}

pub fn write_credibility_row<W: Write>(
    w: &mut W,
    variant_id: &str,
    m: &MetaResult,
    c: &CredibilityResult,
    bf_threshold: f64,
) -> io::Result<()> {
    let mut s = variant_id.to_string();
    push_f64(&mut s, m.pooled_beta);
    push_f64(&mut s, m.pooled_se);
    push_f64(&mut s, m.p_value);
    push_f64(&mut s, c.null_variance);
    push_f64(&mut s, c.log10_bf);
    push_f64(&mut s, c.log10_posterior_odds);
    push_f64(&mut s, c.posterior_prob);
    let _ = write!(s, "\t{}", c.log10_bf >= bf_threshold.log10());
    writeln!(w, "{s}")
}

pub const VERDICT_COLUMNS: [&str; 13] = [
    "variant_id", "status", "reason_codes", "combined_beta", "combined_se", "combined_p", "combined_k",
    "replication_beta", "replication_p", "corrected_discovery_beta", "power_at_observed_effect", "rule_trace",
    "n_replications",
];

pub fn verdict_header() -> String {
    VERDICT_COLUMNS.join("\t")
}

pub fn write_verdict_row<W: Write>(w: &mut W, v: &ReplicationVerdict, n_replications: usize) -> io::Result<()> {
    let mut s = format!("{}\t{}\t{}", v.variant_id, v.status, or_na(v.reason_codes.to_field()));
    push_opt(&mut s, v.combined.map(|m| m.pooled_beta));
    push_opt(&mut s, v.combined.map(|m| m.pooled_se));
    push_opt(&mut s, v.combined.map(|m| m.p_value));
    match v.combined {
        Some(m) => {
            let _ = write!(s, "\t{}", m.k_studies);
        }
        None => s.push_str("\tNA"),
    }
    push_opt(&mut s, v.replication.map(|m| m.pooled_beta));
    push_opt(&mut s, v.replication_p());
    push_opt(&mut s, v.corrected_discovery_beta);
    push_opt(&mut s, v.power_at_observed_effect);
    let _ = write!(s, "\t{}\t{}", v.trace_field(), n_replications);
    writeln!(w, "{s}")
}

fn or_na(s: String) -> String {
    if s.is_empty() {
        "NA".into()
    } else {
        s
    }
}

pub fn write_qq<W: Write>(w: &mut W, points: &[QqPoint]) -> io::Result<()> {
    writeln!(w, "expected_neg_log10_p\tobserved_neg_log10_p")?;
    for p in points {
        writeln!(w, "{}\t{}", fmt_f64(p.expected), fmt_f64(p.observed))?;
    }
    Ok(())
}

pub fn write_row_errors<W: Write>(w: &mut W, errors: &[(String, RowError)]) -> io::Result<()> {
    writeln!(w, "study_id\tline\tmessage")?;
    for (study, e) in errors {
        writeln!(w, "{study}\t{}\t{}", e.line, e.message.replace(['\t', '\n'], " "))?;
    }
    Ok(())
}

/// Reads a one-column p-value list. Takes the `pval` or `p` column when a
/// header is present, otherwise the first field of each line.
pub fn read_p_values<R: BufRead>(src: R) -> Result<Vec<f64>, ReadError> {
    let mut out = Vec::new();
    let mut col = 0usize;
    for (i, line) in src.lines().enumerate() {
        let line = line?;
        let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
        if fields.iter().all(|f| f.is_empty()) {
            continue;
        }
        if i == 0 {
            if let Some(j) = fields.iter().position(|f| f.eq_ignore_ascii_case("pval") || f.eq_ignore_ascii_case("p")) {
                col = j;
                continue;
            }
        }
        let p: f64 = fields
            .get(col)
            .and_then(|f| f.parse().ok())
            .ok_or_else(|| ReadError::MissingColumns(vec![format!("p-value on line {}", i + 1)]))?;
        out.push(p);
    }
    Ok(out)
}

/// Reads pairs `variant_a  variant_b  r2` from a TSV, header optional.
pub fn read_ld_table<R: BufRead>(src: R) -> Result<gwrep_core::gate::LdTable, ReadError> {
    let mut t = gwrep_core::gate::LdTable::new();
    for (i, line) in src.lines().enumerate() {
        let line = line?;
        let f: Vec<&str> = line.split('\t').map(str::trim).collect();
        if f.len() < 3 {
            continue;
        }
        match f[2].parse::<f64>() {
            Ok(r2) => t.insert(f[0], f[1], r2),
            Err(_) if i == 0 => {}
            Err(_) => return Err(ReadError::MissingColumns(vec![format!("r2 on line {}", i + 1)])),
        }
    }
    Ok(t)
}

/// One row of a selected-hits table for winner's-curse correction.
#[derive(Debug, Clone, PartialEq)]
pub struct HitRow {
    pub variant_id: String,
    pub beta: f64,
    pub se: f64,
    /// Two-sided significance level the hit was selected at.
    pub threshold: f64,
    pub raf: Option<f64>,
}

/// Reads `beta`, `se` and `threshold` columns, with optional `variant_id`
/// and `raf`. A missing or `NA` raf leaves the replication plan empty.
pub fn read_hits<R: BufRead>(src: R) -> Result<Vec<HitRow>, ReadError> {
    let mut lines = src.lines();
    let header = lines.next().ok_or(ReadError::MissingHeader)??;
    let cols: Vec<String> = header.split('\t').map(|c| c.trim().to_ascii_lowercase()).collect();
    let find = |n: &str| cols.iter().position(|c| c == n);
    let missing: Vec<String> =
        ["beta", "se", "threshold"].iter().filter(|n| find(n).is_none()).map(|n| n.to_string()).collect();
    if !missing.is_empty() {
        return Err(ReadError::MissingColumns(missing));
    }
    let (b, s, t) = (find("beta").unwrap_or(0), find("se").unwrap_or(0), find("threshold").unwrap_or(0));
    let (id, raf) = (find("variant_id"), find("raf"));
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').map(str::trim).collect();
        let num = |j: usize, name: &str| {
            f.get(j)
                .and_then(|x| x.parse::<f64>().ok())
                .ok_or_else(|| ReadError::MissingColumns(vec![format!("{name} on line {}", i + 2)]))
        };
        out.push(HitRow {
            variant_id: id.and_then(|j| f.get(j)).map_or_else(|| format!("hit{}", i + 1), |s| s.to_string()),
            beta: num(b, "beta")?,
            se: num(s, "se")?,
            threshold: num(t, "threshold")?,
            raf: raf.and_then(|j| f.get(j)).and_then(|x| x.parse().ok()),
        });
    }
    Ok(out)
}
