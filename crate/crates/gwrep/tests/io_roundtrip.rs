use gwrep::io::{parse_study, write_study, ReadError, StudyReader};
use gwrep_core::sumstats::{Allele, GeneticModel, HarmonizeFlags, VariantRecord};
use proptest::prelude::*;

fn allele() -> impl Strategy<Value = Allele> {
    prop_oneof![Just(Allele::A), Just(Allele::C), Just(Allele::G), Just(Allele::T)]
}

prop_compose! {
    fn record()(
        study in "[a-z]{1,6}",
        chr in 1u8..=22,
        pos in 1u64..250_000_000,
        (ea, oa) in (allele(), allele()).prop_filter("distinct", |(a, b)| a != b),
        eaf in 0.001f64..0.999,
        beta in -3.0f64..3.0,
        se in 1e-4f64..2.0,
        // Down to denormal-adjacent p so exponent formatting is exercised.
        log_p in -300.0f64..0.0,
        n_cases in 0u64..1_000_000,
        n_controls in 0u64..1_000_000,
        model in prop_oneof![Just(GeneticModel::Additive), Just(GeneticModel::Dominant), Just(GeneticModel::Recessive)],
        phenotype in proptest::option::of("[A-Za-z0-9_]{1,12}"),
    ) -> VariantRecord {
        VariantRecord {
            study_id: study,
            variant_id: format!("rs{pos}"),
            chromosome: chr.to_string(),
            position: pos,
            effect_allele: ea,
            other_allele: oa,
            effect_allele_freq: eaf,
            beta,
            se,
            p_value: 10f64.powf(log_p),
            n_cases,
            n_controls,
            genetic_model: model,
            phenotype,
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn write_then_parse_is_identity(recs in proptest::collection::vec(record(), 0..40)) {
        let mut buf = Vec::new();
        write_study(&mut buf, &recs).unwrap();
        let (back, errors) = parse_study(buf.as_slice(), None).unwrap();
        prop_assert!(errors.is_empty(), "{errors:?}");
        prop_assert_eq!(back, recs);
    }
}

#[test]
fn header_is_case_insensitive_and_order_free() {
    let text = "PVAL\tSE\tBeta\tEAF\tOther_Allele\tEffect_Allele\tPOS\tCHR\tVariant_ID\n\
                0.01\t0.1\t0.25\t0.3\tg\ta\t100\tchr2\trs1\n";
    let (recs, errors) = parse_study(text.as_bytes(), Some("s1")).unwrap();
    assert!(errors.is_empty());
    let r = &recs[0];
    assert_eq!(r.study_id, "s1");
    assert_eq!((r.effect_allele, r.other_allele), (Allele::A, Allele::G));
    assert_eq!(r.beta, 0.25);
    assert_eq!((r.n_cases, r.n_controls), (0, 0));
    assert_eq!(r.genetic_model, GeneticModel::Additive);
}

#[test]
fn every_missing_required_column_is_named() {
    let text = "variant_id\tchr\tpos\teffect_allele\n";
    match StudyReader::new(text.as_bytes(), None) {
        Err(ReadError::MissingColumns(cols)) => {
            for c in ["study_id", "other_allele", "eaf", "beta", "se", "pval"] {
                assert!(cols.iter().any(|x| x == c), "{c} not reported in {cols:?}");
            }
        }
        other => panic!("expected missing columns, got {other:?}", other = other.err()),
    }
}

#[test]
fn bad_rows_are_reported_and_skipped() {
    let text = "study_id\tvariant_id\tchr\tpos\teffect_allele\tother_allele\teaf\tbeta\tse\tpval\n\
                s\trs1\t1\t10\tA\tG\t0.3\t0.1\t0.05\t0.04\n\
                s\trs2\t1\t20\tA\tG\t0.3\tnot_a_number\t0.05\t0.04\n\
                s\trs3\t1\t30\tA\tG\t0.3\t0.1\t-1\t0.04\n\
                s\trs4\t1\t40\tA\tQ\t0.3\t0.1\t0.05\t0.04\n\
                s\trs5\t1\t50\tC\tT\t0.3\t0.1\t0.05\t0.04\n";
    let (recs, errors) = parse_study(text.as_bytes(), None).unwrap();
    let ids: Vec<_> = recs.iter().map(|r| r.variant_id.as_str()).collect();
    assert_eq!(ids, ["rs1", "rs5"]);
    let lines: Vec<_> = errors.iter().map(|e| e.line).collect();
    assert_eq!(lines, [3, 4, 5]);
}

#[test]
fn flags_column_is_read_back() {
    let text = "study_id\tvariant_id\tchr\tpos\teffect_allele\tother_allele\teaf\tbeta\tse\tpval\tflags\n\
                s\trs1\t1\t10\tA\tG\t0.3\t0.1\t0.05\t0.04\tallele_swapped;strand_flipped\n";
    let row = StudyReader::new(text.as_bytes(), None).unwrap().next().unwrap().unwrap();
    assert!(row.flags.contains(HarmonizeFlags::ALLELE_SWAPPED | HarmonizeFlags::STRAND_FLIPPED));
}
