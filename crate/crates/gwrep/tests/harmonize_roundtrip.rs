use gwrep::io::{parse_study, write_study};
use gwrep::sim::{perturb_for_harmonization, simulate_consortium, PerturbationKind, SimConfig};
use gwrep_core::sumstats::{group_by_variant, harmonize_group, HarmonizeConfig, HarmonizeFlags};

fn consortium(n: u64) -> Vec<Vec<gwrep_core::sumstats::VariantRecord>> {
    let mut cfg = SimConfig::uniform(4, 1000, 1200);
    cfg.n_variants = n;
    cfg.fraction_null = 0.5;
    cfg.true_or = 1.2;
    cfg.seed = 5;
    simulate_consortium(&cfg).unwrap().studies
}

#[test]
fn perturbed_records_come_back_on_the_original_frame() {
    let original = consortium(5000);
    let (perturbed, log) = perturb_for_harmonization(&original, 77);
    assert!(log.len() > 5000, "only {} records perturbed", log.len());
    for kind in [PerturbationKind::StrandFlip, PerturbationKind::AlleleSwap, PerturbationKind::StrandFlipAndSwap] {
        assert!(log.iter().any(|p| p.kind == kind));
    }

    let groups = group_by_variant(perturbed.into_iter().flatten());
    assert_eq!(groups.len(), 5000);
    let cfg = HarmonizeConfig::default();
    let mut checked = 0;
    for (v, g) in groups.iter().enumerate() {
        let set = harmonize_group(g, &cfg).unwrap();
        assert!(set.dropped.is_empty());
        for (s, a) in set.records.iter().enumerate() {
            let o = &original[s][v];
            assert_eq!(a.record.beta, o.beta, "{} in {}", o.variant_id, o.study_id);
            assert_eq!((a.record.effect_allele, a.record.other_allele), (o.effect_allele, o.other_allele));
            assert!((a.record.effect_allele_freq - o.effect_allele_freq).abs() < 1e-12);
            checked += 1;
        }
    }
    assert_eq!(checked, 20_000);
}

#[test]
fn flags_match_the_perturbation_log() {
    let original = consortium(500);
    let (perturbed, log) = perturb_for_harmonization(&original, 3);
    let groups = group_by_variant(perturbed.into_iter().flatten());
    let sets: Vec<_> = groups.iter().map(|g| harmonize_group(g, &HarmonizeConfig::default()).unwrap()).collect();
    for p in &log {
        let flags = sets[p.record_index].records[p.study_index].flags;
        let (flip, swap) = match p.kind {
            PerturbationKind::StrandFlip => (true, false),
            PerturbationKind::AlleleSwap => (false, true),
            PerturbationKind::StrandFlipAndSwap => (true, true),
        };
        assert_eq!(flags.contains(HarmonizeFlags::STRAND_FLIPPED), flip, "{p:?}");
        assert_eq!(flags.contains(HarmonizeFlags::ALLELE_SWAPPED), swap, "{p:?}");
    }
}

#[test]
fn round_trip_survives_tsv_serialization() {
    let original = consortium(300);
    let (perturbed, _) = perturb_for_harmonization(&original, 9);
    let mut all = Vec::new();
    for t in &perturbed {
        let mut buf = Vec::new();
        write_study(&mut buf, t).unwrap();
        let (recs, errors) = parse_study(buf.as_slice(), None).unwrap();
        assert!(errors.is_empty());
        all.extend(recs);
    }
    for (v, g) in group_by_variant(all).iter().enumerate() {
        let set = harmonize_group(g, &HarmonizeConfig::default()).unwrap();
        for (s, a) in set.records.iter().enumerate() {
            assert_eq!(a.record.beta, original[s][v].beta);
        }
    }
}
