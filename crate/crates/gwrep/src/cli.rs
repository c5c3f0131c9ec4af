//! Command-line interface. Each subcommand reads and writes TSV so stages
//! compose through files as well as inside `pipeline`.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use gwrep_core::credibility::{bf_curve, bf_threshold_for_posterior, CalibrationMode, PriorSpec};
use gwrep_core::gate::{assess, DirectionRule, GateConfig};
use gwrep_core::inflation::{diagnostics, Thinning};
use gwrep_core::power::{power_allelic, required_cases, PowerScenario};
use gwrep_core::sumstats::{group_by_variant, harmonize_group, HarmonizeConfig, HarmonizeFlags, VariantRecord};
use gwrep_core::winners_curse::{conditional_mle_correct, naive_replication_sample_size, replication_sample_size, SelectedEffect};

use crate::config::{ConfigError, ModelSelection, PipelineConfig, StudyInput};
use crate::io::{self as tsv, fmt_f64, parse_study, StudyReader};
use crate::merge::MergeError;
use crate::pipeline::{process_groups, run_pipeline, AnalysisOptions, Sinks};
use crate::sim::{perturb_for_harmonization, simulate_consortium, write_truth, SimConfig, StudyDesign};

#[derive(Debug, Parser)]
#[command(name = "gwrep", version, about = "Meta-analysis and replication assessment for GWAS summary statistics")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Default)]
pub struct Common {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output file, or directory for `pipeline` and `simulate`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Significance level; its role depends on the subcommand.
    #[arg(long, global = true)]
    pub alpha: Option<f64>,
    #[arg(long, global = true, value_enum)]
    pub model: Option<ModelSelection>,
    #[arg(long = "prior-or-av", global = true)]
    pub prior_or_av: Option<f64>,
    #[arg(long = "prior-mode", global = true, value_parser = ["mean_abs", "tail"])]
    pub prior_mode: Option<String>,
    #[arg(long = "prior-odds", global = true)]
    pub prior_odds: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Align study files onto a common effect-allele frame.
    Harmonize {
        /// `ID=PATH`, repeated once per study.
        #[arg(long = "study", value_parser = parse_study_arg, required = true)]
        studies: Vec<StudyInput>,
        #[arg(long, default_value = "first_study")]
        reference_policy: String,
    },
    /// Fixed and/or random-effects meta-analysis of a harmonized file.
    Meta { input: PathBuf },
    /// Bayes factor against p-value curve for one or more designs.
    Bf {
        /// `N_CASES:N_CONTROLS:RAF`, repeated.
        #[arg(long = "scenario", value_parser = parse_scenario, required = true)]
        scenarios: Vec<(u64, u64, f64)>,
        /// p-values to evaluate; defaults to 1e-2 .. 1e-12 in quarter decades.
        #[arg(long = "p")]
        p: Vec<f64>,
        #[arg(long, default_value_t = 3.0)]
        target_posterior_odds: f64,
    },
    /// Analytic power of the allelic test over a grid of designs, or the
    /// cases needed to reach a target power.
    Power {
        /// `N_CASES:N_CONTROLS:RAF:OR`, repeated.
        #[arg(long = "scenario", value_parser = parse_power_scenario)]
        scenarios: Vec<(u64, u64, f64, f64)>,
        /// With `--target-power`: `RAF:OR`, repeated.
        #[arg(long = "effect", value_parser = parse_effect)]
        effects: Vec<(f64, f64)>,
        #[arg(long)]
        target_power: Option<f64>,
        #[arg(long, default_value_t = 1.0)]
        controls_per_case: f64,
    },
    /// Genomic-control lambda and QQ data for a p-value list.
    Lambda {
        input: PathBuf,
        /// QQ points are written here when given.
        #[arg(long)]
        qq: Option<PathBuf>,
        #[arg(long)]
        no_thin: bool,
    },
    /// Winner's-curse corrected effects and replication plans for a TSV of
    /// selected hits (`beta`, `se`, `threshold`, optional `variant_id`, `raf`).
    Wc {
        input: PathBuf,
        /// Used for rows without their own raf column.
        #[arg(long)]
        raf: Option<f64>,
        #[arg(long, default_value_t = 1e-4)]
        replication_alpha: f64,
        #[arg(long, default_value_t = 0.8)]
        target_power: f64,
        #[arg(long, default_value_t = 1.0)]
        controls_per_case: f64,
    },
    /// Replication verdicts from a harmonized file.
    Gate {
        input: PathBuf,
        #[arg(long)]
        discovery: String,
        #[arg(long)]
        ld_table: Option<PathBuf>,
        #[arg(long, value_parser = ["must_match", "flag_only"], default_value = "must_match")]
        direction_rule: String,
    },
    /// Simulated multi-study summary statistics with a truth table.
    Simulate {
        /// `ID:N_CASES:N_CONTROLS`, repeated.
        #[arg(long = "study", value_parser = parse_design)]
        studies: Vec<StudyDesign>,
        #[arg(long)]
        n_variants: Option<u64>,
        #[arg(long)]
        raf: Option<f64>,
        #[arg(long = "or")]
        odds_ratio: Option<f64>,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        fraction_null: Option<f64>,
        #[arg(long)]
        genotype_level: bool,
        /// Also apply random strand flips and swaps to studies after the first.
        #[arg(long)]
        perturb: bool,
    },
    /// Full run from a configuration file.
    Pipeline {
        /// `ID=PATH`; replaces the configured studies when given.
        #[arg(long = "study", value_parser = parse_study_arg)]
        studies: Vec<StudyInput>,
    },
}

fn parse_study_arg(s: &str) -> std::result::Result<StudyInput, String> {
    let (id, path) = s.split_once('=').ok_or("expected ID=PATH")?;
    if id.is_empty() || path.is_empty() {
        return Err("expected ID=PATH".into());
    }
    Ok(StudyInput { id: id.into(), path: path.into() })
}

fn parse_scenario(s: &str) -> std::result::Result<(u64, u64, f64), String> {
    let f: Vec<&str> = s.split(':').collect();
    let [nc, nn, raf] = f[..] else { return Err("expected N_CASES:N_CONTROLS:RAF".into()) };
    Ok((
        nc.parse().map_err(|_| "bad case count")?,
        nn.parse().map_err(|_| "bad control count")?,
        raf.parse().map_err(|_| "bad raf")?,
    ))
}

fn parse_power_scenario(s: &str) -> std::result::Result<(u64, u64, f64, f64), String> {
    let f: Vec<&str> = s.split(':').collect();
    let [nc, nn, raf, or] = f[..] else { return Err("expected N_CASES:N_CONTROLS:RAF:OR".into()) };
    Ok((
        nc.parse().map_err(|_| "bad case count")?,
        nn.parse().map_err(|_| "bad control count")?,
        raf.parse().map_err(|_| "bad raf")?,
        or.parse().map_err(|_| "bad odds ratio")?,
    ))
}

fn parse_effect(s: &str) -> std::result::Result<(f64, f64), String> {
    let (raf, or) = s.split_once(':').ok_or("expected RAF:OR")?;
    Ok((raf.parse().map_err(|_| "bad raf")?, or.parse().map_err(|_| "bad odds ratio")?))
}

fn parse_design(s: &str) -> std::result::Result<StudyDesign, String> {
    let f: Vec<&str> = s.split(':').collect();
    let [id, nc, nn] = f[..] else { return Err("expected ID:N_CASES:N_CONTROLS".into()) };
    Ok(StudyDesign {
        id: id.into(),
        n_cases: nc.parse().map_err(|_| "bad case count")?,
        n_controls: nn.parse().map_err(|_| "bad control count")?,
    })
}

/// Exit code for an error returned by [`run`]: 2 for configuration
/// problems, 1 otherwise.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    let config = e.chain().any(|c| {
        c.downcast_ref::<ConfigError>().is_some()
            || matches!(c.downcast_ref::<crate::pipeline::PipelineError>(), Some(crate::pipeline::PipelineError::Config(_)))
    });
    if config {
        2
    } else {
        1
    }
}

fn output(path: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?))
}

fn prior_from(common: &Common) -> Result<PriorSpec> {
    let d = PriorSpec::default();
    let mode = match &common.prior_mode {
        Some(m) => m.parse::<CalibrationMode>().map_err(|e| ConfigError(vec![e.to_string()]))?,
        None => d.calibration_mode,
    };
    let p = PriorSpec::new(common.prior_or_av.unwrap_or(d.or_average), mode, common.prior_odds.unwrap_or(d.prior_odds))
        .map_err(|e| ConfigError(vec![format!("prior: {e}")]))?;
    Ok(p)
}

fn warn_row_errors(study: &str, errors: &[tsv::RowError]) {
    for e in errors.iter().take(5) {
        eprintln!("warning: {study}: {e}");
    }
    if errors.len() > 5 {
        eprintln!("warning: {study}: {} more row errors", errors.len() - 5);
    }
}

// Harmonized or study-schema file; rows flagged dropped are skipped.
fn read_harmonized(path: &Path) -> Result<Vec<VariantRecord>> {
    let reader = StudyReader::new(open(path)?, None).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    let mut errors = Vec::new();
    for row in reader {
        match row {
            Ok(r) if !r.flags.contains(HarmonizeFlags::DROPPED) => out.push(r.record),
            Ok(_) => {}
            Err(tsv::ParseError::Row(e)) => errors.push(e),
            Err(tsv::ParseError::Io(e)) => return Err(e.into()),
        }
    }
    warn_row_errors(&path.display().to_string(), &errors);
    Ok(out)
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.common.threads {
        if n == 0 {
            return Err(ConfigError(vec!["threads must be at least 1".into()]).into());
        }
        // A second build is harmless when called twice in one process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let c = &cli.common;
    match cli.command {
        Command::Harmonize { studies, reference_policy } => {
            let policy = reference_policy.parse().map_err(|e: gwrep_core::Error| ConfigError(vec![e.to_string()]))?;
            let cfg = HarmonizeConfig { policy, ..Default::default() };
            let mut all = Vec::new();
            for s in &studies {
                let (recs, errs) = parse_study(open(&s.path)?, Some(&s.id)).with_context(|| format!("study {}", s.id))?;
                warn_row_errors(&s.id, &errs);
                all.extend(recs);
            }
            let mut w = output(&c.out)?;
            writeln!(w, "{}", tsv::harmonized_header())?;
            for g in group_by_variant(all) {
                if let Some(set) = harmonize_group(&g, &cfg) {
                    tsv::write_harmonized_set(&mut w, &set)?;
                }
            }
            w.flush()?;
        }
        Command::Meta { input } => {
            let models = c.model.unwrap_or_default();
            let groups = group_by_variant(read_harmonized(&input)?);
            let opts = AnalysisOptions::harmonize_meta(HarmonizeConfig::default(), models);
            let mut w = output(&c.out)?;
            // Both models go to one table, told apart by the model column.
            writeln!(w, "{}", tsv::meta_header())?;
            let mut shared = Sinks::default();
            let mut fixed_buf = Vec::new();
            let mut random_buf = Vec::new();
            if models.fixed() {
                shared.meta_fixed = Some(&mut fixed_buf);
            }
            if models.random() {
                shared.meta_random = Some(&mut random_buf);
            }
            process_groups(groups.into_iter().map(Ok::<_, MergeError>), &opts, &mut shared)?;
            for buf in [&fixed_buf, &random_buf] {
                // Drop each buffer's own header line.
                if let Some(i) = buf.iter().position(|&b| b == b'\n') {
                    w.write_all(&buf[i + 1..])?;
                }
            }
            w.flush()?;
        }
        Command::Bf { scenarios, p, target_posterior_odds } => {
            let prior = prior_from(c)?;
            let grid: Vec<f64> = if p.is_empty() { (8..=48).map(|i| 10f64.powf(-(i as f64) / 4.0)).collect() } else { p };
            let threshold = bf_threshold_for_posterior(prior.prior_odds, target_posterior_odds)?;
            let mut w = output(&c.out)?;
            writeln!(w, "n_cases\tn_controls\traf\tp\tlog10_bf\tlog10_bf_threshold")?;
            for (nc, nn, raf) in scenarios {
                for pt in bf_curve(&grid, nc, nn, raf, &prior)? {
                    writeln!(w, "{nc}\t{nn}\t{raf}\t{}\t{}\t{}", fmt_f64(pt.p), fmt_f64(pt.log10_bf), fmt_f64(threshold.log10()))?;
                }
            }
            w.flush()?;
        }
        Command::Power { scenarios, effects, target_power, controls_per_case } => {
            let alpha = c.alpha.unwrap_or(5e-8);
            let mut w = output(&c.out)?;
            match target_power {
                Some(t) => {
                    if effects.is_empty() {
                        bail!(ConfigError(vec!["--target-power needs at least one --effect RAF:OR".into()]));
                    }
                    writeln!(w, "raf\tor\talpha\ttarget_power\tcontrols_per_case\tn_cases\tn_controls")?;
                    for (raf, or) in effects {
                        let n = required_cases(t, controls_per_case, raf, or, alpha)?;
                        let ctrl = (n as f64 * controls_per_case).ceil();
                        writeln!(w, "{raf}\t{or}\t{}\t{t}\t{controls_per_case}\t{n}\t{ctrl}", fmt_f64(alpha))?;
                    }
                }
                None => {
                    if scenarios.is_empty() {
                        bail!(ConfigError(vec!["power needs --scenario, or --target-power with --effect".into()]));
                    }
                    writeln!(w, "n_cases\tn_controls\traf\tor\talpha\tpower")?;
                    for (nc, nn, raf, or) in scenarios {
                        let pw = power_allelic(&PowerScenario::new(nc, nn, raf, or, alpha)?)?;
                        writeln!(w, "{nc}\t{nn}\t{raf}\t{or}\t{}\t{}", fmt_f64(alpha), fmt_f64(pw))?;
                    }
                }
            }
            w.flush()?;
        }
        Command::Lambda { input, qq, no_thin } => {
            let p = tsv::read_p_values(open(&input)?)?;
            let d = diagnostics(&p, (!no_thin).then(Thinning::default))?;
            if let Some(q) = qq {
                let mut w = BufWriter::new(File::create(&q)?);
                tsv::write_qq(&mut w, &d.qq_points)?;
                w.flush()?;
            }
            let mut w = output(&c.out)?;
            writeln!(w, "{}", serde_json::json!({ "lambda_gc": d.lambda_gc, "n_tests": d.n_tests }))?;
            w.flush()?;
        }
        Command::Wc { input, raf, replication_alpha, target_power, controls_per_case } => {
            let hits = tsv::read_hits(open(&input)?).with_context(|| format!("reading {}", input.display()))?;
            let mut w = output(&c.out)?;
            writeln!(
                w,
                "variant_id\tnaive_beta\tse\tthreshold\tcorrected_beta\traf\tnaive_n_cases\tcorrected_n_cases"
            )?;
            for h in hits {
                let e = SelectedEffect::at_alpha(h.beta, h.se, h.threshold).with_context(|| h.variant_id.clone())?;
                let corrected = conditional_mle_correct(&e)?;
                let (f, naive_n, corr_n) = match h.raf.or(raf) {
                    Some(f) => (
                        f.to_string(),
                        naive_replication_sample_size(&e, f, controls_per_case, replication_alpha, target_power)?.to_string(),
                        replication_sample_size(&e, f, controls_per_case, replication_alpha, target_power)?.to_string(),
                    ),
                    None => ("NA".into(), "NA".into(), "NA".into()),
                };
                writeln!(
                    w,
                    "{}\t{}\t{}\t{}\t{}\t{f}\t{naive_n}\t{corr_n}",
                    h.variant_id,
                    fmt_f64(h.beta),
                    fmt_f64(h.se),
                    fmt_f64(h.threshold),
                    fmt_f64(corrected)
                )?;
            }
            w.flush()?;
        }
        Command::Gate { input, discovery, ld_table, direction_rule } => {
            let cfg = GateConfig {
                replication_alpha: c.alpha.unwrap_or(GateConfig::default().replication_alpha),
                direction_rule: direction_rule.parse::<DirectionRule>()?,
                ..Default::default()
            };
            cfg.validate().map_err(|e| ConfigError(vec![format!("gate: {e}")]))?;
            let ld = match ld_table {
                Some(p) => Some(tsv::read_ld_table(open(&p)?)?),
                None => None,
            };
            let mut w = output(&c.out)?;
            writeln!(w, "{}", tsv::verdict_header())?;
            for g in group_by_variant(read_harmonized(&input)?) {
                let Some(disc) = g.iter().find(|r| r.study_id == discovery) else { continue };
                let reps: Vec<VariantRecord> = g.iter().filter(|r| r.study_id != discovery).cloned().collect();
                let v = assess(disc, &reps, &cfg, ld.as_ref())?;
                tsv::write_verdict_row(&mut w, &v, reps.len())?;
            }
            w.flush()?;
        }
        Command::Simulate { studies, n_variants, raf, odds_ratio, tau, fraction_null, genotype_level, perturb } => {
            let mut cfg: SimConfig = match &c.config {
                Some(p) => {
                    let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                    toml::from_str(&text).map_err(|e| ConfigError(vec![format!("parse error: {}", e.message())]))?
                }
                None => SimConfig::uniform(3, 1000, 1000),
            };
            if !studies.is_empty() {
                cfg.studies = studies;
            }
            cfg.n_variants = n_variants.unwrap_or(cfg.n_variants);
            cfg.raf = raf.unwrap_or(cfg.raf);
            cfg.true_or = odds_ratio.unwrap_or(cfg.true_or);
            cfg.tau = tau.unwrap_or(cfg.tau);
            cfg.fraction_null = fraction_null.unwrap_or(cfg.fraction_null);
            cfg.seed = c.seed.unwrap_or(cfg.seed);
            cfg.genotype_level |= genotype_level;
            cfg.validate().map_err(|e| ConfigError(vec![e.to_string()]))?;
            let Some(out) = &c.out else { bail!(ConfigError(vec!["simulate needs --out DIR".into()])) };
            std::fs::create_dir_all(out)?;
            let sim = simulate_consortium(&cfg)?;
            let (tables, log) = if perturb {
                perturb_for_harmonization(&sim.studies, cfg.seed ^ 0x5eed)
            } else {
                (sim.studies.clone(), Vec::new())
            };
            for (design, table) in cfg.studies.iter().zip(&tables) {
                let mut w = BufWriter::new(File::create(out.join(format!("{}.tsv", design.id)))?);
                tsv::write_study(&mut w, table)?;
                w.flush()?;
            }
            let mut w = BufWriter::new(File::create(out.join("truth.tsv"))?);
            write_truth(&mut w, &sim.truth)?;
            w.flush()?;
            if perturb {
                let mut w = BufWriter::new(File::create(out.join("perturbations.tsv"))?);
                writeln!(w, "study_id\tvariant_id\tperturbation")?;
                for p in &log {
                    let r = &tables[p.study_index][p.record_index];
                    writeln!(w, "{}\t{}\t{}", r.study_id, r.variant_id, p.kind.as_str())?;
                }
                w.flush()?;
            }
        }
        Command::Pipeline { studies } => {
            let mut cfg = match &c.config {
                Some(p) => PipelineConfig::from_file(p)?,
                None => PipelineConfig::default(),
            };
            apply_overrides(&mut cfg, c, studies);
            let resolved = cfg.validate()?;
            let m = run_pipeline(&resolved)?;
            let stderr = io::stderr();
            let mut e = stderr.lock();
            writeln!(
                e,
                "{} variants, {} verdicts, {} row errors -> {}",
                m.rows.variants,
                m.rows.verdicts,
                m.row_errors,
                resolved.out.display()
            )?;
        }
    }
    Ok(())
}

/// Flags take precedence over the configuration file.
pub fn apply_overrides(cfg: &mut PipelineConfig, c: &Common, studies: Vec<StudyInput>) {
    if let Some(o) = &c.out {
        // Flag paths are relative to the working directory, not the config.
        cfg.out = Some(std::path::absolute(o).unwrap_or_else(|_| o.clone()));
    }
    if c.threads.is_some() {
        cfg.threads = c.threads;
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(a) = c.alpha {
        cfg.gate.replication_alpha = a;
    }
    if let Some(m) = c.model {
        cfg.models = m;
    }
    if let Some(x) = c.prior_or_av {
        cfg.prior.or_average = x;
    }
    if let Some(m) = &c.prior_mode {
        cfg.prior.mode = m.clone();
    }
    if let Some(x) = c.prior_odds {
        cfg.prior.prior_odds = x;
    }
    if !studies.is_empty() {
        cfg.studies = studies
            .into_iter()
            .map(|s| StudyInput { path: std::path::absolute(&s.path).unwrap_or(s.path), id: s.id })
            .collect();
    }
}
