//! Persistence and lookup for visual descriptions and per-class format
//! examples.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{extract_visual, verify_visual, Gateway, GatewayError, TaskConfig};
use crate::parallel::ordered_map;
use crate::taxa::{rank_key, Rank, TaxonRecord};
use crate::wiki::{DescriptionSource, ParagraphRecord};

/// Upper bound on words per format example.
pub const MAX_EXAMPLE_WORDS: usize = 35;
pub const MAX_EXAMPLES_PER_CLASS: usize = 3;

/// Placeholder captions for classes without curated examples. These are
/// synthetic and were not checked against images.
pub const GENERIC_FORMAT_EXAMPLES: [&str; 3] = [
    "A Danaus plexippus rests on a leaf, its orange wings crossed by thick black veins and edged with a black border dotted in two rows of white spots.",
    "The broad glossy leaves of Monstera deliciosa show deep marginal splits and scattered oval perforations between the pinnate lateral veins.",
    "Amanita muscaria displays a bright red convex cap scattered with raised white warts above white gills and a pale stem with a skirt-like ring.",
];

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DescriptionRank {
    Species,
    Genus,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VisualDescription {
    pub taxon_key: String,
    pub rank: DescriptionRank,
    pub source: DescriptionSource,
    pub text: String,
    pub page_title: String,
}

impl VisualDescription {
    /// Rank must agree with source, and text must be non-empty.
    pub fn check(&self) -> Result<(), String> {
        let species_source = matches!(self.source, DescriptionSource::SpeciesPage | DescriptionSource::GenusFallback);
        if (self.rank == DescriptionRank::Species) != species_source {
            return Err(format!("rank `{:?}` inconsistent with source `{}`", self.rank, self.source));
        }
        if self.text.trim().is_empty() {
            return Err("empty description text".into());
        }
        if self.taxon_key.is_empty() {
            return Err("empty taxon_key".into());
        }
        Ok(())
    }

    pub fn rank_for(source: DescriptionSource) -> DescriptionRank {
        match source {
            DescriptionSource::SpeciesPage | DescriptionSource::GenusFallback => DescriptionRank::Species,
            DescriptionSource::GenusDirect => DescriptionRank::Genus,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LineError {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for LineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

/// Result of loading a JSON Lines file: good records plus what was skipped.
#[derive(Debug, Clone, Default)]
pub struct Loaded<T> {
    pub records: Vec<T>,
    pub errors: Vec<LineError>,
    pub duplicates: usize,
}

fn write_jsonl<T: Serialize>(records: &[T], path: &Path) -> Result<usize, StoreError> {
    let file = std::fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| io_err(path)(e.into()))?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(records.len())
}

fn read_jsonl<T, K>(
    path: &Path,
    check: impl Fn(&T) -> Result<(), String>,
    key: impl Fn(&T) -> K,
) -> Result<Loaded<T>, StoreError>
where
    T: for<'de> Deserialize<'de>,
    K: std::hash::Hash + Eq,
{
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let mut loaded = Loaded {
        records: Vec::new(),
        errors: Vec::new(),
        duplicates: 0,
    };
    let mut seen = std::collections::HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: T = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                loaded.errors.push(LineError {
                    line: i + 1,
                    message: e.to_string(),
                });
                continue;
            }
        };
        if let Err(message) = check(&record) {
            loaded.errors.push(LineError { line: i + 1, message });
            continue;
        }
        if !seen.insert(key(&record)) {
            loaded.duplicates += 1;
            tracing::warn!(path = %path.display(), line = i + 1, "duplicate key; keeping the first record");
            continue;
        }
        loaded.records.push(record);
    }
    for e in &loaded.errors {
        tracing::warn!(path = %path.display(), "{e}");
    }
    Ok(loaded)
}

/// Writes descriptions as JSON Lines and returns the count written.
pub fn save_descriptions(records: &[VisualDescription], path: &Path) -> Result<usize, StoreError> {
    write_jsonl(records, path)
}

/// Loads descriptions, keeping the first record for each `taxon_key`.
pub fn load_descriptions(path: &Path) -> Result<Loaded<VisualDescription>, StoreError> {
    read_jsonl(path, VisualDescription::check, |r: &VisualDescription| r.taxon_key.clone())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FormatExampleSet {
    pub class_name: String,
    pub examples: Vec<String>,
}

pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

impl FormatExampleSet {
    pub fn check(&self) -> Result<(), String> {
        if self.class_name.trim().is_empty() {
            return Err("empty class_name".into());
        }
        if !(1..=MAX_EXAMPLES_PER_CLASS).contains(&self.examples.len()) {
            return Err(format!(
                "class `{}` has {} examples; 1 to {MAX_EXAMPLES_PER_CLASS} allowed",
                self.class_name,
                self.examples.len()
            ));
        }
        for (i, e) in self.examples.iter().enumerate() {
            let words = word_count(e);
            if words == 0 || words > MAX_EXAMPLE_WORDS {
                return Err(format!(
                    "class `{}` example {} has {words} words; 1 to {MAX_EXAMPLE_WORDS} allowed",
                    self.class_name,
                    i + 1
                ));
            }
        }
        Ok(())
    }
}

pub fn save_examples(sets: &[FormatExampleSet], path: &Path) -> Result<usize, StoreError> {
    write_jsonl(sets, path)
}

pub fn load_examples(path: &Path) -> Result<Loaded<FormatExampleSet>, StoreError> {
    read_jsonl(path, FormatExampleSet::check, |s: &FormatExampleSet| s.class_name.to_lowercase())
}

/// Exact counts per description source.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct SourceTally {
    pub species_page: u64,
    pub genus_fallback: u64,
    pub genus_direct: u64,
}

impl SourceTally {
    pub fn species_level(&self) -> u64 {
        self.species_page + self.genus_fallback
    }
    pub fn total(&self) -> u64 {
        self.species_level() + self.genus_direct
    }
}

/// Loaded descriptions indexed by taxon key. Immutable after construction.
#[derive(Debug, Clone, Default)]
pub struct DescriptionStore {
    records: Vec<VisualDescription>,
    index: HashMap<String, usize>,
}

impl DescriptionStore {
    /// Indexes records; later duplicates of a key are ignored.
    pub fn new(records: Vec<VisualDescription>) -> Self {
        let mut kept = Vec::with_capacity(records.len());
        let mut index = HashMap::with_capacity(records.len());
        for r in records {
            if !index.contains_key(&r.taxon_key) {
                index.insert(r.taxon_key.clone(), kept.len());
                kept.push(r);
            }
        }
        Self { records: kept, index }
    }

    pub fn load(path: &Path) -> Result<(Self, Loaded<()>), StoreError> {
        let loaded = load_descriptions(path)?;
        let report = Loaded {
            records: Vec::new(),
            errors: loaded.errors,
            duplicates: loaded.duplicates,
        };
        Ok((Self::new(loaded.records), report))
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[VisualDescription] {
        &self.records
    }

    pub fn get(&self, key: &str) -> Option<&VisualDescription> {
        self.index.get(key).map(|&i| &self.records[i])
    }

    /// Species-key match first, then the genus key; genus records come back
    /// unchanged with their genus rank.
    pub fn lookup_description(&self, taxon: &TaxonRecord) -> Option<&VisualDescription> {
        rank_key(taxon, Rank::Species)
            .and_then(|k| self.get(&k))
            .or_else(|| rank_key(taxon, Rank::Genus).and_then(|k| self.get(&k)))
    }

    pub fn source_tally(&self) -> SourceTally {
        let mut t = SourceTally::default();
        for r in &self.records {
            match r.source {
                DescriptionSource::SpeciesPage => t.species_page += 1,
                DescriptionSource::GenusFallback => t.genus_fallback += 1,
                DescriptionSource::GenusDirect => t.genus_direct += 1,
            }
        }
        t
    }

    /// Keys usable as the covered set of a coverage report.
    pub fn covered_keys(&self) -> std::collections::HashSet<String> {
        self.records.iter().map(|r| r.taxon_key.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExampleLookup<'a> {
    pub examples: &'a [String],
    /// True when the generic set stood in for an unknown class.
    pub fallback: bool,
}

/// Format examples per taxonomic class, with a generic fallback set.
#[derive(Debug, Clone)]
pub struct ExampleStore {
    by_class: HashMap<String, Vec<String>>,
    fallback: Vec<String>,
}

impl Default for ExampleStore {
    fn default() -> Self {
        Self::new(Vec::new())
    }
}

impl ExampleStore {
    /// Class names match case-insensitively.
    pub fn new(sets: Vec<FormatExampleSet>) -> Self {
        let mut by_class = HashMap::new();
        for s in sets {
            by_class.entry(s.class_name.trim().to_lowercase()).or_insert(s.examples);
        }
        Self {
            by_class,
            fallback: GENERIC_FORMAT_EXAMPLES.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn with_fallback(mut self, fallback: Vec<String>) -> Self {
        assert!(!fallback.is_empty(), "fallback examples must be non-empty");
        self.fallback = fallback;
        self
    }

    pub fn load(path: &Path) -> Result<(Self, Loaded<()>), StoreError> {
        let loaded = load_examples(path)?;
        let report = Loaded {
            records: Vec::new(),
            errors: loaded.errors,
            duplicates: loaded.duplicates,
        };
        Ok((Self::new(loaded.records), report))
    }

    pub fn len(&self) -> usize {
        self.by_class.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_class.is_empty()
    }

    pub fn lookup_examples(&self, class_name: Option<&str>) -> ExampleLookup<'_> {
        match class_name.and_then(|c| self.by_class.get(&c.trim().to_lowercase())) {
            Some(examples) => ExampleLookup { examples, fallback: false },
            None => ExampleLookup {
                examples: &self.fallback,
                fallback: true,
            },
        }
    }
}

/// Counts from an extraction run.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ExtractTally {
    pub records: usize,
    pub paragraphs: usize,
    pub verified: usize,
    pub not_visual: usize,
    pub descriptions: usize,
    /// `(taxon_key, error)` for records abandoned on a gateway error.
    pub failures: Vec<(String, String)>,
}

/// Verifies each paragraph, extracts the visual part of those that pass,
/// and joins the extractions with single spaces. Returns the description
/// (if any paragraph passed) and the verified and rejected counts.
pub fn describe_record(
    record: &ParagraphRecord,
    gateway: &Gateway,
    cfg: &TaskConfig,
) -> Result<(Option<VisualDescription>, usize, usize), GatewayError> {
    let mut parts = Vec::new();
    let mut rejected = 0;
    for paragraph in record.paragraphs.iter().filter(|p| !p.trim().is_empty()) {
        if verify_visual(paragraph, &record.subject, gateway, cfg)? {
            parts.push(extract_visual(&record.subject, paragraph, gateway, cfg)?);
        } else {
            rejected += 1;
        }
    }
    let verified = parts.len();
    let description = (!parts.is_empty()).then(|| VisualDescription {
        taxon_key: record.taxon_key.clone(),
        rank: VisualDescription::rank_for(record.source),
        source: record.source,
        text: parts.join(" "),
        page_title: record.page_title.clone(),
    });
    Ok((description, verified, rejected))
}

/// Runs [`describe_record`] over many records with at most `workers` in
/// flight. Descriptions come back in input order; failed records are
/// listed in the tally and skipped.
pub fn extract_descriptions(
    records: &[ParagraphRecord],
    gateway: &Gateway,
    cfg: &TaskConfig,
    workers: usize,
) -> (Vec<VisualDescription>, ExtractTally) {
    let mut out = Vec::new();
    let mut tally = ExtractTally {
        records: records.len(),
        ..Default::default()
    };
    let _ = ordered_map(
        records,
        workers,
        |_, r| describe_record(r, gateway, cfg),
        |i, result| -> Result<(), std::convert::Infallible> {
            let record = &records[i];
            match result {
                Ok((description, verified, rejected)) => {
                    tally.paragraphs += verified + rejected;
                    tally.verified += verified;
                    tally.not_visual += rejected;
                    if let Some(d) = description {
                        tally.descriptions += 1;
                        out.push(d);
                    }
                }
                Err(e) => {
                    tracing::warn!(taxon = %record.taxon_key, error = %e, "extraction failed");
                    tally.failures.push((record.taxon_key.clone(), e.to_string()));
                }
            }
            Ok(())
        },
    );
    (out, tally)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taxa::parse_taxonomy;
    use proptest::prelude::*;

    fn desc(key: &str, source: DescriptionSource, text: &str) -> VisualDescription {
        VisualDescription {
            taxon_key: key.into(),
            rank: VisualDescription::rank_for(source),
            source,
            text: text.into(),
            page_title: "P".into(),
        }
    }

    fn arb_description() -> impl Strategy<Value = VisualDescription> {
        (
            "[A-Za-z/ \\\\\"]{1,30}",
            prop_oneof![
                Just(DescriptionSource::SpeciesPage),
                Just(DescriptionSource::GenusFallback),
                Just(DescriptionSource::GenusDirect)
            ],
            "\\PC{1,60}",
            "\\PC{0,20}",
        )
            .prop_filter("text must be non-blank", |(_, _, t, _)| !t.trim().is_empty())
            .prop_map(|(key, source, text, page_title)| VisualDescription {
                taxon_key: key,
                rank: VisualDescription::rank_for(source),
                source,
                text,
                page_title,
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn save_load_round_trip(records in proptest::collection::vec(arb_description(), 0..100)) {
            let mut seen = std::collections::HashSet::new();
            let records: Vec<_> = records.into_iter().filter(|r| seen.insert(r.taxon_key.clone())).collect();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("d.jsonl");
            prop_assert_eq!(save_descriptions(&records, &path).unwrap(), records.len());
            let loaded = load_descriptions(&path).unwrap();
            prop_assert!(loaded.errors.is_empty());
            prop_assert_eq!(loaded.records, records);
        }
    }

    #[test]
    fn malformed_and_duplicate_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let mut lines: Vec<String> = (0..10)
            .map(|i| serde_json::to_string(&desc(&format!("k{i}"), DescriptionSource::SpeciesPage, "red")).unwrap())
            .collect();
        lines[4] = "{not json".into();
        std::fs::write(&path, lines.join("\n")).unwrap();
        let loaded = load_descriptions(&path).unwrap();
        assert_eq!(loaded.records.len(), 9);
        assert_eq!(loaded.errors.len(), 1);
        assert_eq!(loaded.errors[0].line, 5);

        let a = desc("k", DescriptionSource::SpeciesPage, "first");
        let b = desc("k", DescriptionSource::SpeciesPage, "second");
        save_descriptions(&[a.clone(), b], &path).unwrap();
        let loaded = load_descriptions(&path).unwrap();
        assert_eq!(loaded.records, [a]);
        assert_eq!(loaded.duplicates, 1);
    }

    #[test]
    fn inconsistent_rank_rejected() {
        let mut d = desc("k", DescriptionSource::GenusDirect, "x");
        d.rank = DescriptionRank::Species;
        assert!(d.check().is_err());
        assert!(desc("k", DescriptionSource::GenusFallback, " ").check().is_err());
    }

    #[test]
    fn lookup_prefers_species_then_genus() {
        let t = parse_taxonomy("K|P|C|O|F|G|s", '|').unwrap();
        let sk = rank_key(&t, Rank::Species).unwrap();
        let gk = rank_key(&t, Rank::Genus).unwrap();
        let store = DescriptionStore::new(vec![
            desc(&gk, DescriptionSource::GenusDirect, "genus text"),
            desc(&sk, DescriptionSource::SpeciesPage, "species text"),
        ]);
        assert_eq!(store.lookup_description(&t).unwrap().text, "species text");

        let only_genus = DescriptionStore::new(vec![desc(&gk, DescriptionSource::GenusDirect, "genus text")]);
        let hit = only_genus.lookup_description(&t).unwrap();
        assert_eq!(hit.rank, DescriptionRank::Genus);

        let other = parse_taxonomy("K|P|C|O|F|H|s", '|').unwrap();
        assert!(store.lookup_description(&other).is_none());
    }

    #[test]
    fn example_lookup_and_fallback() {
        let store = ExampleStore::new(vec![
            FormatExampleSet {
                class_name: "Aves".into(),
                examples: vec!["a bird".into(), "another bird".into()],
            },
            FormatExampleSet {
                class_name: "Insecta".into(),
                examples: vec!["one insect".into()],
            },
        ]);
        let aves = store.lookup_examples(Some("aves"));
        assert!(!aves.fallback);
        assert_eq!(aves.examples.len(), 2);
        assert_eq!(store.lookup_examples(Some("Insecta")).examples.len(), 1);
        let unknown = store.lookup_examples(Some("Reptilia"));
        assert!(unknown.fallback);
        assert_eq!(unknown.examples.len(), 3);
        assert!(store.lookup_examples(None).fallback);
    }

    #[test]
    fn example_sets_validated() {
        let ok = FormatExampleSet {
            class_name: "Aves".into(),
            examples: vec!["word ".repeat(35)],
        };
        assert!(ok.check().is_ok());
        let long = FormatExampleSet {
            class_name: "Aves".into(),
            examples: vec!["word ".repeat(36)],
        };
        assert!(long.check().is_err());
        let many = FormatExampleSet {
            class_name: "Aves".into(),
            examples: vec!["a".into(); 4],
        };
        assert!(many.check().is_err());
        let none = FormatExampleSet {
            class_name: "Aves".into(),
            examples: vec![],
        };
        assert!(none.check().is_err());
        for e in GENERIC_FORMAT_EXAMPLES {
            assert!(word_count(e) <= MAX_EXAMPLE_WORDS);
        }
    }

    #[test]
    fn tallies() {
        let store = DescriptionStore::new(vec![
            desc("a", DescriptionSource::SpeciesPage, "x"),
            desc("b", DescriptionSource::SpeciesPage, "x"),
            desc("c", DescriptionSource::GenusFallback, "x"),
            desc("d", DescriptionSource::GenusDirect, "x"),
        ]);
        let t = store.source_tally();
        assert_eq!((t.species_page, t.genus_fallback, t.genus_direct), (2, 1, 1));
        assert_eq!(t.species_level(), 3);
        assert_eq!(t.total(), 4);
        assert_eq!(DescriptionStore::default().source_tally(), SourceTally::default());
    }

    fn extraction_gateway() -> Gateway {
        use crate::gateway::{BackendConfig, BackendReply, MockBackend, ModelRoles};
        let backend = MockBackend::from_fn(|req| {
            let text = req.flat_text();
            let reply = if let Some((_, item)) = text.split_once("Now classify the following description:") {
                if item.contains("FAIL") {
                    "perhaps"
                } else if item.contains("fur") {
                    "Yes"
                } else {
                    "No"
                }
            } else if text.rsplit("<description>").next().unwrap_or_default().contains("thick fur") {
                "Lycaon | thick fur"
            } else {
                "Lycaon | mottled fur"
            };
            Ok(BackendReply::ok_text(reply))
        });
        Gateway::new(std::sync::Arc::new(backend), BackendConfig::default(), ModelRoles::single("m")).unwrap()
    }

    fn paragraphs(key: &str, source: DescriptionSource, paragraphs: &[&str]) -> ParagraphRecord {
        ParagraphRecord {
            taxon_key: key.into(),
            scientific_name: "Lycaon pictus".into(),
            subject: "Lycaon".into(),
            source,
            page_title: "Lycaon".into(),
            paragraphs: paragraphs.iter().map(|p| p.to_string()).collect(),
        }
    }

    #[test]
    fn extraction_joins_verified_paragraphs() {
        let records = vec![
            paragraphs("A/x", DescriptionSource::GenusFallback, &["It has thick fur.", "It lives in Africa.", "Coat of mottled fur."]),
            paragraphs("A/y", DescriptionSource::GenusDirect, &["Found in savanna."]),
            paragraphs("A/z", DescriptionSource::GenusDirect, &["FAIL fur"]),
        ];
        let (out, tally) = extract_descriptions(&records, &extraction_gateway(), &TaskConfig::default(), 2);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].text, "thick fur mottled fur");
        assert_eq!(out[0].rank, DescriptionRank::Species);
        assert_eq!((tally.records, tally.paragraphs, tally.verified, tally.not_visual, tally.descriptions), (3, 4, 2, 2, 1));
        assert_eq!(tally.failures.len(), 1);
        assert_eq!(tally.failures[0].0, "A/z");
    }
}
