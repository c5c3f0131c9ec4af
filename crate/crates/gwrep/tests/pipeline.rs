use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use gwrep::config::{PipelineConfig, StudyInput};
use gwrep::io::write_study;
use gwrep::pipeline::{run_pipeline, PipelineError};
use gwrep::sim::{simulate_consortium, SimConfig, StudyDesign};

fn scan(dir: &Path, n_variants: u64) -> Vec<StudyInput> {
    let mut cfg = SimConfig::uniform(3, 0, 0);
    cfg.studies = vec![
        StudyDesign { id: "disc".into(), n_cases: 4000, n_controls: 4000 },
        StudyDesign { id: "rep1".into(), n_cases: 3000, n_controls: 3000 },
        StudyDesign { id: "rep2".into(), n_cases: 2000, n_controls: 2500 },
    ];
    cfg.n_variants = n_variants;
    cfg.true_or = 1.25;
    cfg.fraction_null = 0.97;
    cfg.seed = 11;
    let sim = simulate_consortium(&cfg).unwrap();
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

fn config(studies: Vec<StudyInput>, out: PathBuf, threads: usize) -> PipelineConfig {
    PipelineConfig { out: Some(out), threads: Some(threads), studies, ..Default::default() }
}

fn read_dir(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().into_string().unwrap(), fs::read(e.path()).unwrap())
        })
        .collect()
}

fn data_lines(path: &Path) -> u64 {
    fs::read_to_string(path).unwrap().lines().count() as u64 - 1
}

#[test]
fn smoke_scan_writes_consistent_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let studies = scan(tmp.path(), 3000);
    let out = tmp.path().join("out");
    let m = run_pipeline(&config(studies, out.clone(), 2).validate().unwrap()).unwrap();

    for a in [
        "harmonized.tsv",
        "meta_fixed.tsv",
        "meta_random.tsv",
        "credibility.tsv",
        "verdicts.tsv",
        "lambda.json",
        "qq_fixed.tsv",
        "qq_random.tsv",
        "row_errors.tsv",
        "manifest.json",
    ] {
        assert!(out.join(a).is_file(), "{a} missing");
        assert!(m.artifacts.iter().any(|x| x == a), "{a} not listed in manifest");
    }
    assert_eq!(m.grouping, "streaming");
    let rows = &m.rows;
    assert_eq!(rows.variants, 3000);
    assert_eq!(rows.harmonized_records, rows.retained_records + rows.dropped_records);
    assert_eq!(rows.harmonized_records, 9000);
    assert_eq!(data_lines(&out.join("harmonized.tsv")), rows.harmonized_records);
    assert_eq!(data_lines(&out.join("meta_fixed.tsv")), rows.meta_fixed);
    assert_eq!(data_lines(&out.join("meta_random.tsv")), rows.meta_random);
    assert_eq!(data_lines(&out.join("credibility.tsv")), rows.credibility);
    assert_eq!(data_lines(&out.join("verdicts.tsv")), rows.verdicts);
    assert_eq!(rows.meta_fixed, rows.variants);
    assert_eq!(rows.verdicts, rows.variants);
    assert_eq!(m.inputs.iter().map(|i| i.records).sum::<u64>(), 9000);

    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["rows"]["variants"], 3000);
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);

    // With 3% true signals at OR 1.25 some variants must replicate.
    let verdicts = fs::read_to_string(out.join("verdicts.tsv")).unwrap();
    assert!(verdicts.lines().any(|l| l.split('\t').nth(1) == Some("replicated_exact")));
    assert!(m.lambda["fixed"].lambda_gc > 0.9 && m.lambda["fixed"].lambda_gc < 1.2);
}

#[test]
fn reruns_and_thread_counts_give_identical_bytes() {
    let tmp = tempfile::tempdir().unwrap();
    let studies = scan(tmp.path(), 2000);
    let run = |name: &str, threads: usize| {
        let out = tmp.path().join(name);
        run_pipeline(&config(studies.clone(), out.clone(), threads).validate().unwrap()).unwrap();
        read_dir(&out)
    };
    let a = run("a", 1);
    let b = run("b", 1);
    let c = run("c", 4);
    assert_eq!(a.keys().collect::<Vec<_>>(), c.keys().collect::<Vec<_>>());
    for (name, bytes) in &a {
        assert!(bytes == &b[name], "{name} differs between reruns");
        assert!(bytes == &c[name], "{name} differs between 1 and 4 threads");
    }
}

#[test]
fn missing_input_fails_without_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let mut studies = scan(tmp.path(), 50);
    studies[1].path = tmp.path().join("absent.tsv");
    let out = tmp.path().join("out");
    let err = config(studies, out.clone(), 1).validate().unwrap_err();
    assert!(err.to_string().contains("absent.tsv"), "{err}");
    assert!(!out.exists());
}

#[test]
fn fatal_error_mid_run_leaves_no_partial_output() {
    let tmp = tempfile::tempdir().unwrap();
    let studies = scan(tmp.path(), 50);
    let out = tmp.path().join("out");
    let r = config(studies.clone(), out.clone(), 1).validate().unwrap();
    // Removing an input after validation forces a failure inside the run.
    fs::remove_file(&studies[2].path).unwrap();
    let err = run_pipeline(&r).unwrap_err();
    assert!(matches!(err, PipelineError::Read { .. }), "{err}");
    assert!(!out.exists());
    let leftovers: Vec<_> = fs::read_dir(tmp.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(leftovers.len(), 2, "staging directory left behind: {leftovers:?}");
}

#[test]
fn unsorted_inputs_fall_back_to_in_memory_grouping() {
    let tmp = tempfile::tempdir().unwrap();
    let studies = scan(tmp.path(), 400);
    // Reverse the rows of one study so it is no longer position-sorted.
    let text = fs::read_to_string(&studies[1].path).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines[1..].reverse();
    fs::write(&studies[1].path, lines.join("\n") + "\n").unwrap();

    let out = tmp.path().join("out");
    let m = run_pipeline(&config(studies, out.clone(), 2).validate().unwrap()).unwrap();
    assert_eq!(m.grouping, "in_memory");
    assert_eq!(m.rows.variants, 400);
    assert_eq!(m.rows.harmonized_records, 1200);
}

#[test]
fn existing_output_directory_is_reused() {
    let tmp = tempfile::tempdir().unwrap();
    let studies = scan(tmp.path(), 100);
    let out = tmp.path().join("out");
    fs::create_dir(&out).unwrap();
    fs::write(out.join("stale.txt"), "old").unwrap();
    run_pipeline(&config(studies, out.clone(), 1).validate().unwrap()).unwrap();
    assert!(out.join("manifest.json").is_file());
}
