//! End-to-end run of every analysis stage in order, from raw study files to
//! the replication verdicts.
//!
//! Variants are processed in fixed-size batches. Within a batch the work is
//! spread over a rayon pool and collected in input order, so outputs do not
//! depend on the thread count. Artifacts are written into a staging
//! directory next to the output and moved into place only on success.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use gwrep_core::credibility::{approx_bayes_factor, bf_threshold_for_posterior, CredibilityResult, PriorSpec};
use gwrep_core::gate::{assess, GateConfig, LdTable, ReplicationVerdict};
use gwrep_core::inflation::{both_models, diagnostics, ScanDiagnostics, Thinning};
use gwrep_core::meta::{EffectEstimate, MetaModel, MetaResult};
use gwrep_core::sumstats::{group_by_variant, harmonize_group, HarmonizeConfig, HarmonizedVariantSet, VariantRecord};
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{hex, parent_of, ConfigError, ModelSelection, Resolved};
use crate::io::{self as tsv, ReadError, RowError, StudyReader};
use crate::merge::{MergeError, SortedMerge};

pub const DEFAULT_BATCH: usize = 4096;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("study {study}: {source}")]
    Read { study: String, source: ReadError },
    #[error(transparent)]
    Merge(#[from] MergeError),
    #[error("variant {variant}: {source}")]
    Analysis { variant: String, source: gwrep_core::Error },
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("thread pool: {0}")]
    ThreadPool(String),
}

#[derive(Debug, Clone)]
pub struct GateStage {
    pub cfg: GateConfig,
    pub ld: Option<LdTable>,
    pub discovery_study: String,
}

#[derive(Debug, Clone)]
pub struct AnalysisOptions {
    pub harmonize: HarmonizeConfig,
    pub models: ModelSelection,
    /// Credibility stage with the BF needed for the target posterior odds.
    pub credibility: Option<(PriorSpec, f64)>,
    pub gate: Option<GateStage>,
    /// Keep per-variant p-values for scan diagnostics.
    pub collect_p: bool,
    pub batch_size: usize,
}

impl AnalysisOptions {
    pub fn harmonize_meta(harmonize: HarmonizeConfig, models: ModelSelection) -> Self {
        Self { harmonize, models, credibility: None, gate: None, collect_p: false, batch_size: DEFAULT_BATCH }
    }
}

/// Destinations for each per-variant table; `None` skips that table.
#[derive(Default)]
pub struct Sinks<'a> {
    pub harmonized: Option<&'a mut dyn Write>,
    pub meta_fixed: Option<&'a mut dyn Write>,
    pub meta_random: Option<&'a mut dyn Write>,
    pub credibility: Option<&'a mut dyn Write>,
    pub verdicts: Option<&'a mut dyn Write>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RowCounts {
    pub variants: u64,
    pub harmonized_records: u64,
    pub retained_records: u64,
    pub dropped_records: u64,
    pub meta_fixed: u64,
    pub meta_random: u64,
    pub single_study_variants: u64,
    pub credibility: u64,
    pub verdicts: u64,
}

#[derive(Debug, Clone, Default)]
pub struct StreamSummary {
    pub rows: RowCounts,
    pub records_per_study: BTreeMap<String, u64>,
    pub p_fixed: Vec<f64>,
    pub p_random: Vec<f64>,
}

struct Outcome {
    set: HarmonizedVariantSet,
    fixed: Option<MetaResult>,
    random: Option<MetaResult>,
    credibility: Option<CredibilityResult>,
    verdict: Option<(ReplicationVerdict, usize)>,
}

fn analyze(group: &[VariantRecord], opts: &AnalysisOptions) -> Result<Option<Outcome>, PipelineError> {
    let Some(set) = harmonize_group(group, &opts.harmonize) else {
        return Ok(None);
    };
    let fail = |source| PipelineError::Analysis { variant: set.variant_id.clone(), source };
    let effects: Vec<EffectEstimate> = set.retained().map(EffectEstimate::from_record).collect::<Result<_, _>>().map_err(fail)?;
    let (fixed, random) = if effects.is_empty() {
        (None, None)
    } else {
        let (f, mut r) = both_models(&effects).map_err(fail)?;
        // One study: the random-effects model reduces to the fixed one.
        r.model = MetaModel::RandomDl;
        (Some(f), Some(r))
    };
    let credibility = match (&opts.credibility, fixed) {
        (Some((prior, _)), Some(f)) => {
            Some(approx_bayes_factor(f.pooled_beta, f.pooled_se * f.pooled_se, prior).map_err(fail)?)
        }
        _ => None,
    };
    let verdict = match &opts.gate {
        Some(g) => match set.retained().find(|r| r.study_id == g.discovery_study) {
            Some(disc) => {
                let reps: Vec<VariantRecord> =
                    set.retained().filter(|r| r.study_id != g.discovery_study).cloned().collect();
                let v = assess(disc, &reps, &g.cfg, g.ld.as_ref()).map_err(fail)?;
                Some((v, reps.len()))
            }
            None => None,
        },
        None => None,
    };
    Ok(Some(Outcome { set, fixed, random, credibility, verdict }))
}

fn write_headers(sinks: &mut Sinks<'_>) -> io::Result<()> {
    if let Some(w) = sinks.harmonized.as_mut() {
        writeln!(w, "{}", tsv::harmonized_header())?;
    }
    for w in [sinks.meta_fixed.as_mut(), sinks.meta_random.as_mut()].into_iter().flatten() {
        writeln!(w, "{}", tsv::meta_header())?;
    }
    if let Some(w) = sinks.credibility.as_mut() {
        writeln!(w, "{}", tsv::credibility_header())?;
    }
    if let Some(w) = sinks.verdicts.as_mut() {
        writeln!(w, "{}", tsv::verdict_header())?;
    }
    Ok(())
}

fn emit(o: &Outcome, opts: &AnalysisOptions, sinks: &mut Sinks<'_>, s: &mut StreamSummary) -> io::Result<()> {
    let rows = &mut s.rows;
    rows.variants += 1;
    rows.retained_records += o.set.records.len() as u64;
    rows.dropped_records += o.set.dropped.len() as u64;
    for a in o.set.records.iter().chain(o.set.dropped.iter()) {
        *s.records_per_study.entry(a.record.study_id.clone()).or_default() += 1;
    }
    if let Some(w) = sinks.harmonized.as_mut() {
        rows.harmonized_records += tsv::write_harmonized_set(w, &o.set)? as u64;
    }
    let id = &o.set.variant_id;
    if let Some(f) = &o.fixed {
        if f.k_studies < 2 {
            rows.single_study_variants += 1;
        }
        if opts.models.fixed() {
            if let Some(w) = sinks.meta_fixed.as_mut() {
                tsv::write_meta_row(w, id, f)?;
                rows.meta_fixed += 1;
            }
            if opts.collect_p {
                s.p_fixed.push(f.p_value);
            }
        }
    }
    if let Some(r) = &o.random {
        if opts.models.random() {
            if let Some(w) = sinks.meta_random.as_mut() {
                tsv::write_meta_row(w, id, r)?;
                rows.meta_random += 1;
            }
            if opts.collect_p {
                s.p_random.push(r.p_value);
            }
        }
    }
    if let (Some(c), Some(f), Some((_, bf))) = (&o.credibility, &o.fixed, &opts.credibility) {
        if let Some(w) = sinks.credibility.as_mut() {
            tsv::write_credibility_row(w, id, f, c, *bf)?;
            rows.credibility += 1;
        }
    }
    if let Some((v, n)) = &o.verdict {
        if let Some(w) = sinks.verdicts.as_mut() {
            tsv::write_verdict_row(w, v, *n)?;
            rows.verdicts += 1;
        }
    }
    Ok(())
}

/// Runs every variant group through the configured stages and streams rows
/// to the sinks. Memory is bounded by one batch unless `collect_p` is set.
pub fn process_groups<I>(groups: I, opts: &AnalysisOptions, sinks: &mut Sinks<'_>) -> Result<StreamSummary, PipelineError>
where
    I: Iterator<Item = Result<Vec<VariantRecord>, MergeError>>,
{
    write_headers(sinks)?;
    let mut summary = StreamSummary::default();
    let mut batch: Vec<Vec<VariantRecord>> = Vec::with_capacity(opts.batch_size);
    let mut groups = groups.peekable();
    while groups.peek().is_some() {
        batch.clear();
        while batch.len() < opts.batch_size.max(1) {
            match groups.next() {
                Some(g) => batch.push(g?),
                None => break,
            }
        }
        let outcomes: Vec<Option<Outcome>> =
            batch.par_iter().map(|g| analyze(g, opts)).collect::<Result<_, _>>()?;
        for o in outcomes.iter().flatten() {
            emit(o, opts, sinks, &mut summary)?;
        }
    }
    Ok(summary)
}

#[derive(Debug, Clone, Serialize)]
pub struct InputSummary {
    pub study_id: String,
    pub path: String,
    pub sha256: String,
    pub records: u64,
    pub row_errors: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct LambdaSummary {
    pub lambda_gc: f64,
    pub n_tests: usize,
    pub qq_points: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub core_version: String,
    pub config_sha256: String,
    /// `streaming` for position-sorted inputs, `in_memory` otherwise.
    pub grouping: String,
    pub inputs: Vec<InputSummary>,
    pub rows: RowCounts,
    pub row_errors: u64,
    pub lambda: BTreeMap<String, LambdaSummary>,
    pub artifacts: Vec<String>,
}

fn open_sources(r: &Resolved) -> Result<Vec<StudyReader<BufReader<File>>>, PipelineError> {
    r.studies
        .iter()
        .map(|(id, path)| {
            let f = File::open(path).map_err(|e| PipelineError::Read { study: id.clone(), source: e.into() })?;
            StudyReader::new(BufReader::with_capacity(1 << 16, f), Some(id))
                .map_err(|source| PipelineError::Read { study: id.clone(), source })
        })
        .collect()
}

fn file_sha256(path: &Path) -> io::Result<String> {
    let mut f = File::open(path)?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex(&h.finalize()))
}

struct Tables {
    harmonized: BufWriter<File>,
    meta_fixed: Option<BufWriter<File>>,
    meta_random: Option<BufWriter<File>>,
    credibility: BufWriter<File>,
    verdicts: BufWriter<File>,
}

impl Tables {
    fn create(dir: &Path, models: ModelSelection) -> io::Result<Self> {
        let open = |n: &str| File::create(dir.join(n)).map(BufWriter::new);
        Ok(Self {
            harmonized: open(HARMONIZED)?,
            meta_fixed: models.fixed().then(|| open(META_FIXED)).transpose()?,
            meta_random: models.random().then(|| open(META_RANDOM)).transpose()?,
            credibility: open(CREDIBILITY)?,
            verdicts: open(VERDICTS)?,
        })
    }

    fn sinks(&mut self) -> Sinks<'_> {
        Sinks {
            harmonized: Some(&mut self.harmonized),
            meta_fixed: self.meta_fixed.as_mut().map(|w| w as &mut dyn Write),
            meta_random: self.meta_random.as_mut().map(|w| w as &mut dyn Write),
            credibility: Some(&mut self.credibility),
            verdicts: Some(&mut self.verdicts),
        }
    }

    fn finish(mut self) -> io::Result<()> {
        self.harmonized.flush()?;
        for w in [self.meta_fixed.as_mut(), self.meta_random.as_mut()].into_iter().flatten() {
            w.flush()?;
        }
        self.credibility.flush()?;
        self.verdicts.flush()
    }
}

fn options(r: &Resolved) -> Result<AnalysisOptions, PipelineError> {
    let ld = match &r.ld_table {
        Some(p) => {
            let f = File::open(p)?;
            Some(tsv::read_ld_table(BufReader::new(f)).map_err(|source| PipelineError::Read { study: "ld_table".into(), source })?)
        }
        None => None,
    };
    let bf = bf_threshold_for_posterior(r.prior.prior_odds, r.target_posterior_odds)
        .map_err(|source| PipelineError::Analysis { variant: "-".into(), source })?;
    Ok(AnalysisOptions {
        harmonize: r.harmonize,
        models: r.models,
        credibility: Some((r.prior, bf)),
        gate: Some(GateStage { cfg: r.gate, ld, discovery_study: r.discovery_study.clone() }),
        collect_p: true,
        batch_size: DEFAULT_BATCH,
    })
}

const HARMONIZED: &str = "harmonized.tsv";
const META_FIXED: &str = "meta_fixed.tsv";
const META_RANDOM: &str = "meta_random.tsv";
const CREDIBILITY: &str = "credibility.tsv";
const VERDICTS: &str = "verdicts.tsv";

// One attempt at the per-variant tables. Streaming needs sorted inputs and
// reports `Unsorted` otherwise; the in-memory path accepts any order.
fn run_tables(
    stage: &Path,
    r: &Resolved,
    opts: &AnalysisOptions,
    streaming: bool,
) -> Result<(StreamSummary, Vec<Vec<RowError>>), PipelineError> {
    let readers = open_sources(r)?;
    let mut row_errors: Vec<Vec<RowError>> = vec![Vec::new(); readers.len()];
    let mut tables = Tables::create(stage, r.models)?;
    let summary = {
        let sources: Vec<_> = readers
            .into_iter()
            .zip(row_errors.iter_mut())
            .map(|(rd, errs)| rd.records(move |e| errs.push(e)))
            .collect();
        let mut sinks = tables.sinks();
        if streaming {
            process_groups(SortedMerge::new(sources)?, opts, &mut sinks)?
        } else {
            let mut all = Vec::new();
            for s in sources {
                for rec in s {
                    all.push(rec?);
                }
            }
            process_groups(group_by_variant(all).into_iter().map(Ok), opts, &mut sinks)?
        }
    };
    tables.finish()?;
    Ok((summary, row_errors))
}

fn write_diagnostics(
    stage: &Path,
    name: &str,
    p: &[f64],
    thinning: Option<Thinning>,
) -> Result<Option<ScanDiagnostics>, PipelineError> {
    if p.is_empty() {
        return Ok(None);
    }
    let d = diagnostics(p, thinning).map_err(|source| PipelineError::Analysis { variant: "-".into(), source })?;
    let mut w = BufWriter::new(File::create(stage.join(format!("qq_{name}.tsv")))?);
    tsv::write_qq(&mut w, &d.qq_points)?;
    w.flush()?;
    Ok(Some(d))
}

/// Validated config in, artifacts in `r.out` out.
pub fn run_pipeline(r: &Resolved) -> Result<Manifest, PipelineError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(r.threads)
        .build()
        .map_err(|e| PipelineError::ThreadPool(e.to_string()))?;
    let parent = parent_of(&r.out);
    let stage = tempfile::Builder::new().prefix(".gwrep-stage-").tempdir_in(&parent)?;
    let manifest = pool.install(|| build_artifacts(stage.path(), r))?;
    publish(stage.path(), &r.out)?;
    Ok(manifest)
}

fn build_artifacts(stage: &Path, r: &Resolved) -> Result<Manifest, PipelineError> {
    let opts = options(r)?;
    let (summary, row_errors, grouping) = match run_tables(stage, r, &opts, true) {
        Ok((s, e)) => (s, e, "streaming"),
        Err(PipelineError::Merge(MergeError::Unsorted { .. })) => {
            let (s, e) = run_tables(stage, r, &opts, false)?;
            (s, e, "in_memory")
        }
        Err(e) => return Err(e),
    };

    let mut lambda = BTreeMap::new();
    let mut lambda_json = serde_json::Map::new();
    for (name, p) in [("fixed", &summary.p_fixed), ("random", &summary.p_random)] {
        if let Some(d) = write_diagnostics(stage, name, p, r.thinning)? {
            lambda_json.insert(name.into(), serde_json::json!({ "lambda_gc": d.lambda_gc, "n_tests": d.n_tests }));
            lambda.insert(name.to_string(), LambdaSummary { lambda_gc: d.lambda_gc, n_tests: d.n_tests, qq_points: d.qq_points.len() });
        }
    }
    lambda_json.insert("single_study_variants".into(), summary.rows.single_study_variants.into());
    fs::write(stage.join("lambda.json"), serde_json::to_string_pretty(&lambda_json).expect("json") + "\n")?;

    let flat: Vec<(String, RowError)> = r
        .studies
        .iter()
        .zip(&row_errors)
        .flat_map(|((id, _), errs)| errs.iter().map(move |e| (id.clone(), e.clone())))
        .collect();
    let mut w = BufWriter::new(File::create(stage.join("row_errors.tsv"))?);
    tsv::write_row_errors(&mut w, &flat)?;
    w.flush()?;

    let mut inputs = Vec::new();
    for ((id, path), (orig, errs)) in r.studies.iter().zip(r.source.studies.iter().zip(&row_errors)) {
        inputs.push(InputSummary {
            study_id: id.clone(),
            path: orig.path.display().to_string(),
            sha256: file_sha256(path)?,
            records: summary.records_per_study.get(id).copied().unwrap_or(0),
            row_errors: errs.len() as u64,
        });
    }

    let mut artifacts: Vec<String> = fs::read_dir(stage)?
        .map(|e| e.map(|e| e.file_name().to_string_lossy().into_owned()))
        .collect::<io::Result<_>>()?;
    artifacts.push("manifest.json".into());
    artifacts.sort();

    let manifest = Manifest {
        tool: "gwrep".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        core_version: gwrep_core::VERSION.into(),
        config_sha256: r.config_sha256.clone(),
        grouping: grouping.into(),
        inputs,
        rows: summary.rows,
        row_errors: flat.len() as u64,
        lambda,
        artifacts,
    };
    fs::write(stage.join("manifest.json"), serde_json::to_string_pretty(&manifest).expect("json") + "\n")?;
    Ok(manifest)
}

// Moves staged files into the output directory.
fn publish(stage: &Path, out: &Path) -> io::Result<()> {
    fs::create_dir_all(out)?;
    let mut names: Vec<PathBuf> = fs::read_dir(stage)?.map(|e| e.map(|e| e.path())).collect::<io::Result<_>>()?;
    names.sort();
    for p in names {
        let dest = out.join(p.file_name().expect("file entry"));
        fs::rename(&p, &dest)?;
    }
    Ok(())
}
