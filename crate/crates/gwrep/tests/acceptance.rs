//! Acceptance suite. Prints one `[PASS]`/`[FAIL]` line per criterion and
//! exits nonzero if any criterion fails.

use std::alloc::{GlobalAlloc, Layout, System};
use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use gwrep::config::{ModelSelection, PipelineConfig, StudyInput};
use gwrep::io::{write_record, write_study, study_header, StudyReader};
use gwrep::merge::SortedMerge;
use gwrep::pipeline::{process_groups, run_pipeline, AnalysisOptions, Sinks};
use gwrep::sim::{
    perturb_for_harmonization, simulate_consortium, simulate_discovery_replication, study_stream, SimConfig,
    StudyDesign,
};
use gwrep_core::credibility::{approx_bayes_factor, bf_curve, bf_threshold_for_posterior, CalibrationMode, PriorSpec};
use gwrep_core::inflation::compare_models_diagnostics;
use gwrep_core::meta::{fixed_effect, prediction_interval, random_effects, EffectEstimate};
use gwrep_core::power::{power_allelic, PowerScenario};
use gwrep_core::sumstats::{
    align_alleles, group_by_variant, harmonize_group, is_palindromic, Allele, AlleleFrame, GeneticModel,
    HarmonizeConfig, HarmonizeFlags, VariantRecord,
};
use gwrep_core::winners_curse::{conditional_mle_correct, SelectedEffect};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

struct Counting;

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);

unsafe impl GlobalAlloc for Counting {
    unsafe fn alloc(&self, l: Layout) -> *mut u8 {
        let p = unsafe { System.alloc(l) };
        if !p.is_null() {
            let now = CURRENT.fetch_add(l.size(), Ordering::Relaxed) + l.size();
            PEAK.fetch_max(now, Ordering::Relaxed);
        }
        p
    }

    unsafe fn dealloc(&self, p: *mut u8, l: Layout) {
        unsafe { System.dealloc(p, l) };
        CURRENT.fetch_sub(l.size(), Ordering::Relaxed);
    }
}

#[global_allocator]
static ALLOC: Counting = Counting;

// Tolerances and sizes pinned by the criteria.
const POWER_TOL: f64 = 0.002;
const QUADRATURE_REL_TOL: f64 = 1e-6;
const META_TOL: f64 = 1e-10;
const META_INSTANCES: usize = 1000;
const PI_INSTANCES: usize = 1000;
const NULL_STUDIES: usize = 13;
const NULL_VARIANTS: u64 = 100_000;
const WC_LOCI: usize = 10_000;
const ROUNDTRIP_RECORDS: usize = 100_000;
const THROUGHPUT_VARIANTS: u64 = 1_000_000;
const THROUGHPUT_STUDIES: usize = 5;
/// Wall-clock budget for the throughput stage, set from the first
/// benchmark on a single-core 5 GiB VM (about 2x the measured time).
const THROUGHPUT_BUDGET_SECS: f64 = 120.0;
/// Heap ceiling for the throughput stage.
const THROUGHPUT_HEAP_BYTES: usize = 64 << 20;

struct Outcome {
    pass: bool,
    detail: String,
}

// (id, name, check)
type Criterion = (&'static str, &'static str, fn() -> Outcome);

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

// Published cumulative power grid: (cases, controls, raf, OR, power).
const POWER_GRID: [(u64, u64, f64, f64, f64); 12] = [
    (1924, 2938, 0.20, 1.10, 0.0002),
    (3388, 4405, 0.20, 1.10, 0.0011),
    (4549, 5579, 0.20, 1.10, 0.0033),
    (1924, 2938, 0.40, 1.10, 0.0007),
    (3388, 4405, 0.40, 1.10, 0.0054),
    (4549, 5579, 0.40, 1.10, 0.0166),
    (1924, 2938, 0.20, 1.20, 0.0333),
    (3388, 4405, 0.20, 1.20, 0.2078),
    (4549, 5579, 0.20, 1.20, 0.4426),
    (1924, 2938, 0.40, 1.20, 0.1336),
    (3388, 4405, 0.40, 1.20, 0.5468),
    (4549, 5579, 0.40, 1.20, 0.8219),
];

fn ac1_power_grid() -> Outcome {
    let mut misses = Vec::new();
    let mut worst = 0.0f64;
    for &(nc, nn, raf, or, expected) in &POWER_GRID {
        let got = power_allelic(&PowerScenario::new(nc, nn, raf, or, 5e-8).unwrap()).unwrap();
        let err = (got - expected).abs();
        worst = worst.max(err);
        if err > POWER_TOL {
            misses.push(format!("({nc}, {nn}, {raf}, {or}) -> {got:.5} vs {expected}"));
        }
    }
    let n_ok = POWER_GRID.len() - misses.len();
    let mut d = format!("{n_ok}/12 rows within ±{POWER_TOL}, worst |err| {worst:.5}");
    if !misses.is_empty() {
        d.push_str(&format!("; outside: {}", misses.join(", ")));
    }
    outcome(misses.is_empty(), d)
}

fn ac2_threshold_and_curve() -> Outcome {
    let threshold = bf_threshold_for_posterior(1.0 / 99_999.0, 3.0).unwrap();
    let exact = threshold == 299_997.0;
    let prior = PriorSpec::default();
    // Quarter-decade grid over 1e-2 .. 1e-12.
    let grid: Vec<f64> = (8..=48).map(|i| 10f64.powf(-(i as f64) / 4.0)).collect();
    let curves: Vec<_> = [2000u64, 4000, 9128]
        .iter()
        .map(|&n| bf_curve(&grid, n / 2, n / 2, 0.40, &prior).unwrap())
        .collect();
    let bad: Vec<f64> = (0..grid.len())
        .filter(|&i| !(curves[0][i].log10_bf < curves[1][i].log10_bf && curves[1][i].log10_bf < curves[2][i].log10_bf))
        .map(|i| grid[i])
        .collect();
    let mut d = format!("threshold {threshold} (exact: {exact}); monotone in N at {}/{} p-values", grid.len() - bad.len(), grid.len());
    if let (Some(hi), Some(lo)) = (bad.first(), bad.last()) {
        d.push_str(&format!("; not monotone for p in [{lo:.3e}, {hi:.3e}]"));
    }
    outcome(exact && bad.is_empty(), d)
}

// BF by Simpson quadrature of the two marginal likelihoods, in the prior's
// standardized variable u = beta / sqrt(W), with r = W/V.
fn quadrature_ln_bf(z: f64, r: f64) -> f64 {
    let g = |u: f64| -0.5 * u * u * (1.0 + r) + z * r.sqrt() * u;
    let center = z * r.sqrt() / (1.0 + r);
    let width = 1.0 / (1.0 + r).sqrt();
    let (a, b) = (center - 16.0 * width, center + 16.0 * width);
    let n = 4000;
    let h = (b - a) / n as f64;
    let gmax = g(center);
    let mut s = 0.0;
    for i in 0..=n {
        let c = if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
        s += c * (g(a + i as f64 * h) - gmax).exp();
    }
    gmax + (s * h / 3.0).ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

fn ac3_abf_quadrature() -> Outcome {
    let start = Instant::now();
    let v = 1e-3;
    let mut worst = 0.0f64;
    let mut n = 0;
    for zi in 0..=80 {
        let z = zi as f64 * 0.1;
        for ri in 0..=40 {
            let r = 10f64.powf(-2.0 + ri as f64 * 0.1);
            let prior =
                PriorSpec { or_average: 1.15, prior_sd: (r * v).sqrt(), prior_odds: 1e-5, calibration_mode: CalibrationMode::ByMeanAbs };
            let closed = approx_bayes_factor(z * v.sqrt(), v, &prior).unwrap().log10_bf * std::f64::consts::LN_10;
            let rel = ((closed - quadrature_ln_bf(z, r)).exp() - 1.0).abs();
            worst = worst.max(rel);
            n += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst < QUADRATURE_REL_TOL && secs < 60.0,
        format!("{n} grid points over z in [0, 8], W/V in [0.01, 100]; max rel err {worst:.2e} in {secs:.2}s"),
    )
}

struct Brute {
    fixed_beta: f64,
    fixed_se: f64,
    q: f64,
    tau2: f64,
    i2: f64,
    random_beta: f64,
    random_se: f64,
}

// Straight-line textbook formulas with plain summation.
fn brute(b: &[f64], se: &[f64]) -> Brute {
    let w: Vec<f64> = se.iter().map(|s| 1.0 / (s * s)).collect();
    let sw: f64 = w.iter().sum();
    let fixed_beta = w.iter().zip(b).map(|(w, b)| w * b).sum::<f64>() / sw;
    let q: f64 = w.iter().zip(b).map(|(w, b)| w * (b - fixed_beta).powi(2)).sum();
    let df = (b.len() - 1) as f64;
    let c = sw - w.iter().map(|w| w * w).sum::<f64>() / sw;
    let tau2 = ((q - df) / c).max(0.0);
    let i2 = if q > 0.0 { ((q - df) / q).max(0.0) } else { 0.0 };
    let ws: Vec<f64> = se.iter().map(|s| 1.0 / (s * s + tau2)).collect();
    let sws: f64 = ws.iter().sum();
    Brute {
        fixed_beta,
        fixed_se: 1.0 / sw.sqrt(),
        q,
        tau2,
        i2,
        random_beta: ws.iter().zip(b).map(|(w, b)| w * b).sum::<f64>() / sws,
        random_se: 1.0 / sws.sqrt(),
    }
}

fn random_instance(rng: &mut ChaCha8Rng, k_min: usize) -> Vec<EffectEstimate> {
    let k = rng.random_range(k_min..=20);
    let mu = rng.random_range(-0.3..0.3);
    let tau: f64 = if rng.random_bool(0.5) { 0.0 } else { rng.random_range(0.0..0.2) };
    (0..k)
        .map(|i| {
            let se = rng.random_range(0.02..0.3);
            let theta = mu + tau * Normal::new(0.0, 1.0).unwrap().sample(rng);
            let b = theta + se * Normal::new(0.0, 1.0).unwrap().sample(rng);
            EffectEstimate::new(b, se, format!("s{i}")).unwrap()
        })
        .collect()
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= META_TOL * b.abs().max(1.0)
}

fn ac4_meta_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut failures = Vec::new();
    for inst in 0..META_INSTANCES {
        let e = random_instance(&mut rng, 2);
        let b: Vec<f64> = e.iter().map(|x| x.beta).collect();
        let s: Vec<f64> = e.iter().map(|x| x.se).collect();
        let o = brute(&b, &s);
        let f = fixed_effect(&e).unwrap();
        let r = random_effects(&e).unwrap();
        let h = &r.heterogeneity;
        let pairs = [
            ("fixed beta", f.pooled_beta, o.fixed_beta),
            ("fixed se", f.pooled_se, o.fixed_se),
            ("q", h.q, o.q),
            ("tau2", h.tau_squared, o.tau2),
            ("i2", h.i_squared, o.i2),
            ("random beta", r.pooled_beta, o.random_beta),
            ("random se", r.pooled_se, o.random_se),
        ];
        for (name, got, want) in pairs {
            if !close(got, want) {
                failures.push(format!("instance {inst} (k={}): {name} {got} vs {want}", e.len()));
            }
        }
    }
    let d = match failures.first() {
        None => format!("{META_INSTANCES} instances, k in [2, 20], all quantities within {META_TOL:e}"),
        Some(f) => format!("{} mismatches, first: {f}", failures.len()),
    };
    outcome(failures.is_empty(), d)
}

fn ac5_prediction_interval() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let z = 1.959_963_984_540_054;
    let mut bad = 0;
    for _ in 0..PI_INSTANCES {
        let e = random_instance(&mut rng, 3);
        let r = random_effects(&e).unwrap();
        let (lo, hi) = r.prediction_interval.expect("k >= 3 has a prediction interval");
        let (clo, chi) = (r.pooled_beta - z * r.pooled_se, r.pooled_beta + z * r.pooled_se);
        if !(lo <= clo && hi >= chi) {
            bad += 1;
        }
    }
    let k2 = prediction_interval(0.1, 0.05, 0.01, 2, 0.05);
    let k2_err = matches!(k2, Err(gwrep_core::Error::InsufficientStudiesForPrediction(2)));
    let two = [EffectEstimate::new(0.1, 0.05, "a").unwrap(), EffectEstimate::new(0.2, 0.05, "b").unwrap()];
    let k2_none = random_effects(&two).unwrap().prediction_interval.is_none();
    outcome(
        bad == 0 && k2_err && k2_none,
        format!(
            "{}/{PI_INSTANCES} intervals contain the z CI; k=2 error: {}",
            PI_INSTANCES - bad,
            k2.map(|_| "none".to_string()).unwrap_or_else(|e| e.to_string())
        ),
    )
}

fn ac6_null_consortium() -> Outcome {
    let start = Instant::now();
    let sizes = [2000u64, 1800, 1500, 1300, 1200, 1000, 900, 800, 700, 600, 500, 400, 300];
    let cfg = SimConfig {
        studies: sizes
            .iter()
            .enumerate()
            .map(|(i, &n)| StudyDesign { id: format!("s{i:02}"), n_cases: n, n_controls: n })
            .collect(),
        raf: 0.3,
        true_or: 1.0,
        tau: 0.0,
        n_variants: NULL_VARIANTS,
        fraction_null: 1.0,
        seed: 6,
        genotype_level: false,
    };
    assert_eq!(cfg.studies.len(), NULL_STUDIES);
    let sim = simulate_consortium(&cfg).unwrap();
    let scan: Vec<Vec<EffectEstimate>> = (0..NULL_VARIANTS as usize)
        .map(|v| sim.studies.iter().map(|t| EffectEstimate::from_record(&t[v]).unwrap()).collect())
        .collect();
    let m = compare_models_diagnostics(scan.iter().map(Vec::as_slice), None).unwrap();
    let (lf, lr) = (m.fixed.lambda_gc, m.random.lambda_gc);
    let secs = start.elapsed().as_secs_f64();
    outcome(
        lr < lf && lr < 0.95 && (0.97..=1.03).contains(&lf) && secs < 300.0,
        format!("{NULL_STUDIES} studies x {NULL_VARIANTS} null variants: lambda_fixed {lf:.4}, lambda_random {lr:.4} ({secs:.1}s)"),
    )
}

fn ac7_winners_curse() -> Outcome {
    let cfg = SimConfig {
        studies: vec![StudyDesign { id: "discovery".into(), n_cases: 5300, n_controls: 5300 }],
        raf: 0.4,
        true_or: 1.10,
        tau: 0.0,
        n_variants: 5_000_000,
        fraction_null: 0.0,
        seed: 7,
        genotype_level: false,
    };
    let scan = simulate_discovery_replication(&cfg, 5e-8, Some(WC_LOCI)).unwrap();
    let n = scan.selected.len();
    if n < WC_LOCI {
        return outcome(false, format!("only {n} loci selected from {} scanned", scan.n_scanned));
    }
    let truth = 1.10f64.ln();
    let mut naive = 0.0;
    let mut corrected = 0.0;
    for h in &scan.selected {
        let e = SelectedEffect::at_alpha(h.naive_beta, h.se, 5e-8).unwrap();
        naive += h.naive_beta.abs();
        corrected += conditional_mle_correct(&e).unwrap().abs();
    }
    let (naive, corrected) = (naive / n as f64, corrected / n as f64);
    let over = naive / truth - 1.0;
    let (dn, dc) = ((naive - truth).abs(), (corrected - truth).abs());
    outcome(
        over >= 0.20 && 2.0 * dc <= dn,
        format!(
            "{n} loci from {} scanned: true {truth:.4}, mean |naive| {naive:.4} (+{:.0}%), mean |corrected| {corrected:.4}; distance ratio naive/corrected {:.1}",
            scan.n_scanned,
            100.0 * over,
            dn / dc
        ),
    )
}

fn record(e: Allele, o: Allele, eaf: f64) -> VariantRecord {
    VariantRecord {
        study_id: "s".into(),
        variant_id: "v".into(),
        chromosome: "1".into(),
        position: 1,
        effect_allele: e,
        other_allele: o,
        effect_allele_freq: eaf,
        beta: 0.25,
        se: 0.1,
        p_value: 0.01,
        n_cases: 10,
        n_controls: 10,
        genetic_model: GeneticModel::Additive,
        phenotype: None,
    }
}

// Rule table for alignment, written independently of the implementation.
// Returns None when the record must be dropped, else (swapped, flipped).
fn expected_alignment(e: Allele, o: Allele, eaf: f64, fe: Allele, fo: Allele, ffreq: Option<f64>) -> Option<(bool, bool)> {
    if e == o || fe == fo {
        return None;
    }
    if is_palindromic(e, o) {
        if (0.4..=0.6).contains(&eaf) {
            return None;
        }
        if !is_palindromic(fe, fo) || !((e, o) == (fe, fo) || (e, o) == (fo, fe)) {
            return None;
        }
        // Frequencies on the same side of 0.5 mean the two effect alleles are
        // the same allele. Without a reference frequency the letters are
        // taken at face value.
        let same_allele = match ffreq {
            Some(f) => (eaf - 0.5) * (f - 0.5) > 0.0,
            None => e == fe,
        };
        return Some(match (e == fe, same_allele) {
            (true, true) => (false, false),
            (true, false) => (true, true),
            (false, true) => (false, true),
            (false, false) => (true, false),
        });
    }
    let c = |a: Allele| a.complement();
    [(false, false), (true, false), (false, true), (true, true)].into_iter().find(|&(swap, flip)| {
        let (a, b) = if flip { (c(e), c(o)) } else { (e, o) };
        let (a, b) = if swap { (b, a) } else { (a, b) };
        (a, b) == (fe, fo)
    })
}

fn exhaustive_alignment() -> (usize, Vec<String>) {
    let mut n = 0;
    let mut bad = Vec::new();
    for &e in &Allele::ALL {
        for &o in &Allele::ALL {
            for &fe in &Allele::ALL {
                for &fo in &Allele::ALL {
                    for eaf in [0.1, 0.45, 0.5, 0.55, 0.8] {
                        for ffreq in [None, Some(0.2), Some(0.7)] {
                            n += 1;
                            let r = record(e, o, eaf);
                            let frame = AlleleFrame { effect: fe, other: fo, effect_freq: ffreq };
                            let got = align_alleles(&r, &frame);
                            let want = expected_alignment(e, o, eaf, fe, fo, ffreq);
                            let case = format!("{e}/{o} eaf {eaf} vs {fe}/{fo} {ffreq:?}");
                            match want {
                                None => {
                                    if !got.is_dropped() {
                                        bad.push(format!("{case}: expected drop"));
                                    }
                                }
                                Some((swap, flip)) => {
                                    let ok = !got.is_dropped()
                                        && got.flags.contains(HarmonizeFlags::ALLELE_SWAPPED) == swap
                                        && got.flags.contains(HarmonizeFlags::STRAND_FLIPPED) == flip
                                        && (got.record.effect_allele, got.record.other_allele) == (fe, fo)
                                        && got.record.beta == if swap { -0.25 } else { 0.25 }
                                        && got.record.effect_allele_freq == if swap { 1.0 - eaf } else { eaf };
                                    // Aligning an aligned record changes nothing.
                                    let again = align_alleles(&got.record, &frame);
                                    let idem = again.record == got.record
                                        && !again.flags.intersects(HarmonizeFlags::ALLELE_SWAPPED | HarmonizeFlags::STRAND_FLIPPED);
                                    if !ok || !idem {
                                        bad.push(format!("{case}: got {:?}, want swap={swap} flip={flip}", got.flags));
                                    }
                                }
                            }
                            if is_palindromic(e, o) && (0.4..=0.6).contains(&eaf) && !got.flags.contains(HarmonizeFlags::AMBIGUOUS_PALINDROMIC) {
                                bad.push(format!("{case}: ambiguous flag missing"));
                            }
                        }
                    }
                }
            }
        }
    }
    (n, bad)
}

fn ac8_harmonization() -> Outcome {
    let mut cfg = SimConfig::uniform(5, 1000, 1000);
    cfg.n_variants = 40_000;
    cfg.fraction_null = 0.5;
    cfg.true_or = 1.2;
    cfg.seed = 8;
    let original = simulate_consortium(&cfg).unwrap().studies;
    let (perturbed, log) = perturb_for_harmonization(&original, 88);
    let groups = group_by_variant(perturbed.into_iter().flatten());
    let mut wrong = 0usize;
    for (v, g) in groups.iter().enumerate() {
        let set = harmonize_group(g, &HarmonizeConfig::default()).unwrap();
        if set.records.len() != original.len() {
            wrong += original.len();
            continue;
        }
        for (s, a) in set.records.iter().enumerate() {
            if a.record.beta != original[s][v].beta {
                wrong += 1;
            }
        }
    }
    let (n_align, bad_align) = exhaustive_alignment();
    let mut d = format!(
        "{} perturbed records, {wrong} betas not recovered; {n_align} alignment cases, {} rule violations",
        log.len(),
        bad_align.len()
    );
    if let Some(b) = bad_align.first() {
        d.push_str(&format!(" (first: {b})"));
    }
    outcome(log.len() >= ROUNDTRIP_RECORDS && wrong == 0 && bad_align.is_empty(), d)
}

fn write_studies(dir: &Path, cfg: &SimConfig) -> Vec<StudyInput> {
    let sim = simulate_consortium(cfg).unwrap();
    cfg.studies
        .iter()
        .zip(&sim.studies)
        .map(|(d, t)| {
            let path = dir.join(format!("{}.tsv", d.id));
            let mut w = BufWriter::new(File::create(&path).unwrap());
            write_study(&mut w, t).unwrap();
            w.flush().unwrap();
            StudyInput { id: d.id.clone(), path }
        })
        .collect()
}

fn ac9_determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = SimConfig::uniform(3, 2500, 2500);
    cfg.n_variants = 20_000;
    cfg.fraction_null = 0.98;
    cfg.true_or = 1.25;
    cfg.seed = 9;
    let studies = write_studies(tmp.path(), &cfg);
    let run = |name: &str, threads: usize| -> BTreeMap<String, Vec<u8>> {
        let out = tmp.path().join(name);
        let pc = PipelineConfig { out: Some(out.clone()), threads: Some(threads), studies: studies.clone(), ..Default::default() };
        run_pipeline(&pc.validate().unwrap()).unwrap();
        fs::read_dir(&out)
            .unwrap()
            .map(|e| {
                let e = e.unwrap();
                (e.file_name().into_string().unwrap(), fs::read(e.path()).unwrap())
            })
            .collect()
    };
    let base = run("a", 1);
    let rerun = run("b", 1);
    let threaded = run("c", 4);
    let differing: Vec<&String> =
        base.iter().filter(|(k, v)| rerun.get(*k) != Some(v) || threaded.get(*k) != Some(v)).map(|(k, _)| k).collect();
    let same_set = base.len() == rerun.len() && base.len() == threaded.len();
    outcome(
        differing.is_empty() && same_set,
        format!(
            "{} artifacts over {} variants compared across 2 reruns and 1 vs 4 threads; differing: {differing:?}",
            base.len(),
            cfg.n_variants
        ),
    )
}

fn ac10_throughput() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = SimConfig::uniform(THROUGHPUT_STUDIES, 1000, 1000);
    cfg.n_variants = THROUGHPUT_VARIANTS;
    cfg.fraction_null = 0.99;
    cfg.true_or = 1.2;
    cfg.seed = 10;
    // Inputs are written outside the timed section.
    let gen = Instant::now();
    let paths: Vec<_> = (0..THROUGHPUT_STUDIES)
        .map(|s| {
            let p = tmp.path().join(format!("s{s}.tsv"));
            let mut w = BufWriter::with_capacity(1 << 16, File::create(&p).unwrap());
            writeln!(w, "{}", study_header()).unwrap();
            for r in study_stream(&cfg, s) {
                write_record(&mut w, &r).unwrap();
            }
            w.flush().unwrap();
            p
        })
        .collect();
    let gen_secs = gen.elapsed().as_secs_f64();

    let base = CURRENT.load(Ordering::Relaxed);
    PEAK.store(base, Ordering::Relaxed);
    let start = Instant::now();
    let sources: Vec<_> = paths
        .iter()
        .map(|p| {
            let r = StudyReader::new(BufReader::with_capacity(1 << 16, File::open(p).unwrap()), None).unwrap();
            r.records(|e| panic!("{e}"))
        })
        .collect();
    let out = |n: &str| BufWriter::with_capacity(1 << 16, File::create(tmp.path().join(n)).unwrap());
    let (mut h, mut f, mut r) = (out("harmonized.tsv"), out("meta_fixed.tsv"), out("meta_random.tsv"));
    let opts = AnalysisOptions::harmonize_meta(HarmonizeConfig::default(), ModelSelection::Both);
    let summary = {
        let mut sinks =
            Sinks { harmonized: Some(&mut h), meta_fixed: Some(&mut f), meta_random: Some(&mut r), ..Default::default() };
        process_groups(SortedMerge::new(sources).unwrap(), &opts, &mut sinks).unwrap()
    };
    for w in [&mut h, &mut f, &mut r] {
        w.flush().unwrap();
    }
    let secs = start.elapsed().as_secs_f64();
    let peak = PEAK.load(Ordering::Relaxed).saturating_sub(base);
    let n_ok = summary.rows.variants == THROUGHPUT_VARIANTS && summary.rows.meta_random == THROUGHPUT_VARIANTS;
    outcome(
        n_ok && secs <= THROUGHPUT_BUDGET_SECS && peak <= THROUGHPUT_HEAP_BYTES,
        format!(
            "{} variants x {THROUGHPUT_STUDIES} studies harmonized and meta-analyzed in {secs:.1}s (budget {THROUGHPUT_BUDGET_SECS}s), peak heap {:.1} MiB (limit {} MiB); input generation {gen_secs:.1}s",
            summary.rows.variants,
            peak as f64 / (1 << 20) as f64,
            THROUGHPUT_HEAP_BYTES >> 20
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("AC1", "published power grid", ac1_power_grid),
        ("AC2", "posterior-odds threshold and BF monotone in N", ac2_threshold_and_curve),
        ("AC3", "closed-form ABF vs quadrature", ac3_abf_quadrature),
        ("AC4", "meta-analysis vs brute oracle", ac4_meta_oracle),
        ("AC5", "prediction interval contains CI", ac5_prediction_interval),
        ("AC6", "null consortium lambda by model", ac6_null_consortium),
        ("AC7", "winner's curse correction", ac7_winners_curse),
        ("AC8", "harmonization round trip", ac8_harmonization),
        ("AC9", "pipeline determinism", ac9_determinism),
        ("AC10", "throughput guard", ac10_throughput),
    ];
    let mut failed = 0;
    for (id, name, f) in criteria {
        let o = f();
        if !o.pass {
            failed += 1;
        }
        println!("[{}] {id} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
