mod common;

use std::collections::HashSet;

use proptest::prelude::*;
use rand::seq::IndexedRandom;
use rand::Rng;
use taxocap::taxa::{coverage_report, format_percent, rank_key, Rank};
use taxocap::TaxonRecord;

/// Random 7-rank paths over small name pools, so homonyms occur across
/// branches, with occasional gaps.
fn random_paths(n: usize, seed: u64, gap: f64) -> Vec<Vec<Option<String>>> {
    let mut rng = common::rng(seed);
    let pools: [&[&str]; 7] = [
        &["Animalia", "Plantae"],
        &["Chordata", "Arthropoda", "Tracheophyta"],
        &["Aves", "Mammalia", "Insecta"],
        &["Ord1", "Ord2", "Ord3", "Ord4"],
        &["Fam1", "Fam2", "Fam3", "Fam4", "Fam5"],
        &["Alpha", "Beta", "Gamma", "Delta", "Epsilon", "Zeta"],
        &["one", "two", "three", "four", "five", "six", "seven", "eight"],
    ];
    (0..n)
        .map(|_| {
            let mut path: Vec<Option<String>> = pools
                .iter()
                .map(|pool| (!rng.random_bool(gap)).then(|| pool.choose(&mut rng).unwrap().to_string()))
                .collect();
            if path[5].is_none() {
                path[6] = None;
            }
            if path.iter().all(Option::is_none) {
                path[0] = Some("Animalia".into());
            }
            path
        })
        .collect()
}

fn record(path: &[Option<String>]) -> TaxonRecord {
    let ranks: [&str; 7] = std::array::from_fn(|i| path[i].as_deref().unwrap_or(""));
    TaxonRecord::from_ranks(ranks, None).unwrap()
}

/// Picks covered species and genus paths from the manifest plus a few
/// paths that never occur in it.
fn random_covered(paths: &[Vec<Option<String>>], seed: u64, p: f64) -> Vec<Vec<String>> {
    let mut rng = common::rng(seed);
    let mut covered = Vec::new();
    for path in paths {
        if !rng.random_bool(p) {
            continue;
        }
        let depth = if rng.random_bool(0.7) { 7 } else { 6 };
        if let Some(full) = path[..depth].iter().cloned().collect::<Option<Vec<String>>>() {
            covered.push(full);
        }
    }
    covered.push(["Fungi", "X", "Y", "Z", "W", "Alpha", "one"].map(String::from).to_vec());
    covered
}

fn key_of(path: &[String]) -> String {
    path.join("/")
}

fn check_against_oracle(paths: &[Vec<Option<String>>], covered: &[Vec<String>]) {
    let manifest: Vec<TaxonRecord> = paths.iter().map(|p| record(p)).collect();
    let keys: HashSet<String> = covered.iter().map(|c| key_of(c)).collect();
    let report = coverage_report(&manifest, &keys);
    for (rank, idx) in [(Rank::Order, 3), (Rank::Family, 4), (Rank::Genus, 5), (Rank::Species, 6)] {
        let got = report.get(rank).unwrap();
        let want = common::coverage_oracle(paths, covered, idx);
        assert_eq!(
            (got.covered_taxa, got.total_taxa, got.covered_samples, got.total_samples),
            (want.covered_taxa, want.total_taxa, want.covered_samples, want.total_samples),
            "rank {rank}"
        );
        let expect_ratio = |c: u64, t: u64| if t == 0 { 0.0 } else { c as f64 / t as f64 };
        assert_eq!(got.taxa_ratio, expect_ratio(want.covered_taxa, want.total_taxa));
        assert_eq!(got.sample_ratio, expect_ratio(want.covered_samples, want.total_samples));
    }
}

fn sample_ratios(paths: &[Vec<Option<String>>], covered: &[Vec<String>]) -> Vec<f64> {
    let manifest: Vec<TaxonRecord> = paths.iter().map(|p| record(p)).collect();
    let keys: HashSet<String> = covered.iter().map(|c| key_of(c)).collect();
    let report = coverage_report(&manifest, &keys);
    Rank::COVERAGE.iter().map(|&r| report.get(r).unwrap().sample_ratio).collect()
}

#[test]
fn thousand_sample_manifest_matches_oracle() {
    for seed in 0..5 {
        let paths = random_paths(1_000, seed, 0.05);
        let covered = random_covered(&paths, seed + 100, 0.05);
        check_against_oracle(&paths, &covered);
        let r = sample_ratios(&paths, &covered);
        assert!(r.windows(2).all(|w| w[0] >= w[1]), "{r:?}");
    }
}

#[test]
fn three_species_two_genera() {
    let lines = [
        "Animalia|Chordata|Aves|Apodiformes|Trochilidae|Selasphorus|calliope",
        "Animalia|Chordata|Aves|Apodiformes|Trochilidae|Selasphorus|rufus",
        "Animalia|Chordata|Aves|Apodiformes|Trochilidae|Archilochus|colubris",
    ];
    let manifest: Vec<TaxonRecord> = lines.iter().map(|l| taxocap::taxa::parse_taxonomy(l, '|').unwrap()).collect();
    let covered: HashSet<String> = [rank_key(&manifest[0], Rank::Species).unwrap()].into();
    let report = coverage_report(&manifest, &covered);
    let species = report.get(Rank::Species).unwrap();
    assert_eq!((species.covered_taxa, species.total_taxa), (1, 3));
    let genus = report.get(Rank::Genus).unwrap();
    assert_eq!((genus.covered_taxa, genus.total_taxa), (1, 2));
    assert_eq!(genus.taxa_ratio, 0.5);
}

#[test]
fn empty_covered_set() {
    let paths = random_paths(50, 9, 0.0);
    let manifest: Vec<TaxonRecord> = paths.iter().map(|p| record(p)).collect();
    let report = coverage_report(&manifest, &HashSet::new());
    for rank in Rank::COVERAGE {
        let c = report.get(rank).unwrap();
        assert_eq!((c.covered_taxa, c.covered_samples, c.taxa_ratio, c.sample_ratio), (0, 0, 0.0, 0.0));
    }
}

#[test]
fn percent_formatting() {
    assert_eq!(format_percent(1137, 1486), "76.5%");
    assert_eq!(format_percent(0, 0), "0.0%");
    // Oracle: round-half-away on tenths of a percent in integer arithmetic.
    for (c, t) in [(1, 3), (2, 3), (5127, 7920), (32725, 73290), (9256964, 9533174), (1, 8)] {
        let tenths = (2000 * c + t) / (2 * t);
        assert_eq!(format_percent(c, t), format!("{}.{}%", tenths / 10, tenths % 10), "{c}/{t}");
    }
}

#[test]
fn rank_keys_are_injective() {
    let paths = random_paths(500, 3, 0.1);
    let mut seen = std::collections::HashMap::new();
    for p in &paths {
        let rec = record(p);
        for (rank, idx) in [(Rank::Order, 3), (Rank::Family, 4), (Rank::Genus, 5), (Rank::Species, 6)] {
            if let Some(k) = rank_key(&rec, rank) {
                let prefix: Vec<String> = p[..=idx].iter().map(|t| t.clone().unwrap()).collect();
                if let Some(prev) = seen.insert(k.clone(), prefix.clone()) {
                    assert_eq!(prev, prefix, "key {k} maps to two paths");
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn sample_ratio_is_monotone(seed in any::<u64>(), n in 1usize..200, gap in 0.0f64..0.4, p in 0.0f64..1.0) {
        let paths = random_paths(n, seed, gap);
        let covered = random_covered(&paths, seed ^ 0x5eed, p);
        check_against_oracle(&paths, &covered);
        let r = sample_ratios(&paths, &covered);
        prop_assert!(r.windows(2).all(|w| w[0] >= w[1]), "{:?}", r);
    }
}
