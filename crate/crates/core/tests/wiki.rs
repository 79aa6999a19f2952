mod common;

use taxocap::taxa::{parse_taxonomy, Rank};
use taxocap::wiki::{
    candidate_sections, fetch_page, resolve_description_source, resolve_many, validate_taxonomy_page, FixtureBackend,
    IngestOptions, RejectReason, Verdict,
};
use taxocap::DescriptionSource;

fn backend() -> FixtureBackend {
    FixtureBackend::new(common::fixtures().join("wiki"))
}

fn taxon(line: &str) -> taxocap::TaxonRecord {
    parse_taxonomy(line, '|').unwrap()
}

#[test]
fn species_page_has_description_section() {
    let page = fetch_page("Lycaon pictus", &backend()).unwrap().expect("fixture present");
    assert_eq!(page.title, "Lycaon pictus");
    assert!(page.sections.iter().any(|s| s.heading == "Description"));
    assert_eq!(page.taxobox_ranks.get(&Rank::Genus).map(String::as_str), Some("Lycaon"));
    let kept: Vec<String> = candidate_sections(&page).into_iter().map(|(h, _)| h).collect();
    assert_eq!(kept, ["Description"]);
}

#[test]
fn description_body_is_clean_text() {
    let page = fetch_page("Lycaon pictus", &backend()).unwrap().unwrap();
    let (_, body) = candidate_sections(&page).remove(0);
    assert!(body.starts_with("The fur of the African wild dog"));
    assert!(!body.contains("[[") && !body.contains("thumb"));
    assert_eq!(body.split("\n\n").count(), 2);
}

#[test]
fn missing_page_is_none() {
    assert!(fetch_page("Nonexistus fictus", &backend()).unwrap().is_none());
    assert!(fetch_page("Never recorded", &backend()).unwrap().is_none());
}

#[test]
fn one_redirect_hop_is_followed() {
    let page = fetch_page("Panthera leo", &backend()).unwrap().unwrap();
    assert_eq!(page.title, "Lion");
    assert_eq!(page.redirected_from.as_deref(), Some("Panthera leo"));
}

#[test]
fn redirect_loop_is_rejected() {
    assert!(fetch_page("Loop A", &backend()).unwrap().is_none());
}

#[test]
fn taxobox_validation() {
    let page = fetch_page("Lycaon pictus", &backend()).unwrap().unwrap();
    let good = taxon("Animalia|Chordata|Mammalia|Carnivora|Canidae|Lycaon|pictus");
    assert!(validate_taxonomy_page(&page, &good, 3).is_accept());
    let wrong = taxon("Animalia|Chordata|Mammalia|Carnivora|Canidae|Cuon|pictus");
    match validate_taxonomy_page(&page, &wrong, 3) {
        Verdict::Reject(RejectReason::Mismatch { rank, .. }) => assert_eq!(rank, Rank::Genus),
        other => panic!("expected genus mismatch, got {other:?}"),
    }
}

#[test]
fn old_style_taxobox_confirms_every_rank() {
    let page = fetch_page("Cuon", &backend()).unwrap().unwrap();
    let genus = taxon("Animalia|Chordata|Mammalia|Carnivora|Canidae|Cuon|");
    assert_eq!(
        validate_taxonomy_page(&page, &genus, 3),
        Verdict::Accept { matched: 6, text_scan: vec![] }
    );
}

#[test]
fn source_selection() {
    let opts = IngestOptions::default();
    let b = backend();
    let species = resolve_description_source(&taxon("Animalia|Chordata|Mammalia|Carnivora|Canidae|Lycaon|pictus"), &b, &opts)
        .unwrap()
        .unwrap();
    assert_eq!(species.source, DescriptionSource::SpeciesPage);
    assert_eq!(species.paragraphs.len(), 2);

    let fallback = resolve_description_source(&taxon("Animalia|Chordata|Mammalia|Carnivora|Canidae|Cuon|alpinus"), &b, &opts)
        .unwrap()
        .unwrap();
    assert_eq!(fallback.source, DescriptionSource::GenusFallback);
    assert_eq!(fallback.page_title, "Cuon");
    assert!(fallback.paragraphs[0].contains("rusty red coat"));

    let direct = resolve_description_source(&taxon("Animalia|Arthropoda|Insecta|Lepidoptera|Noctuidae|Bagada|"), &b, &opts)
        .unwrap()
        .unwrap();
    assert_eq!(direct.source, DescriptionSource::GenusDirect);

    let redirected = resolve_description_source(&taxon("Animalia|Chordata|Mammalia|Carnivora|Felidae|Panthera|leo"), &b, &opts)
        .unwrap()
        .unwrap();
    assert_eq!(redirected.page_title, "Lion");

    let none = resolve_description_source(&taxon("Animalia|Chordata|Aves|Passeriformes|Fictidae|Nonexistus|fictus"), &b, &opts)
        .unwrap();
    assert!(none.is_none());
}

#[test]
fn batch_resolution_is_ordered_and_deterministic() {
    let taxa: Vec<_> = [
        "Animalia|Chordata|Mammalia|Carnivora|Canidae|Lycaon|pictus",
        "Animalia|Chordata|Mammalia|Carnivora|Felidae|Panthera|leo",
        "Animalia|Chordata|Mammalia|Carnivora|Canidae|Cuon|alpinus",
        "Animalia|Arthropoda|Insecta|Lepidoptera|Noctuidae|Bagada|",
        "Animalia|Chordata|Aves|Apodiformes|Trochilidae|Selasphorus|calliope",
    ]
    .iter()
    .map(|l| taxon(l))
    .collect();
    let b = backend();
    let run = |window| {
        let opts = IngestOptions { window, ..IngestOptions::default() };
        resolve_many(&taxa, &b, &opts)
            .into_iter()
            .map(|r| r.unwrap().unwrap())
            .collect::<Vec<_>>()
    };
    let serial = run(1);
    let parallel = run(8);
    assert_eq!(serial, parallel);
    let names: Vec<&str> = serial.iter().map(|c| c.taxon.scientific_name()).collect();
    assert_eq!(names, ["Lycaon pictus", "Panthera leo", "Cuon alpinus", "Bagada", "Selasphorus calliope"]);
}
