//! Taxonomic records, full-path taxon keys, and coverage statistics over a
//! sample manifest.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default field delimiter for manifest lines. Scientific names contain
/// spaces and commas, so neither is usable.
pub const DEFAULT_DELIMITER: char = '|';

/// Separator between rank tokens inside a taxon key.
pub const KEY_SEPARATOR: char = '/';

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TaxonError {
    #[error("expected {expected} fields, found {found}")]
    FieldCount { expected: usize, found: usize },
    #[error("all rank fields are empty; no usable label")]
    NoLabel,
    #[error("species `{0}` is present but genus is empty")]
    SpeciesWithoutGenus(String),
    #[error("unknown rank `{0}`")]
    UnknownRank(String),
}

/// The seven Linnaean ranks, coarsest first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rank {
    Kingdom,
    Phylum,
    Class,
    Order,
    Family,
    Genus,
    Species,
}

impl Rank {
    pub const ALL: [Rank; 7] = [
        Rank::Kingdom,
        Rank::Phylum,
        Rank::Class,
        Rank::Order,
        Rank::Family,
        Rank::Genus,
        Rank::Species,
    ];

    /// Ranks reported in a coverage table.
    pub const COVERAGE: [Rank; 4] = [Rank::Order, Rank::Family, Rank::Genus, Rank::Species];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Rank::Kingdom => "kingdom",
            Rank::Phylum => "phylum",
            Rank::Class => "class",
            Rank::Order => "order",
            Rank::Family => "family",
            Rank::Genus => "genus",
            Rank::Species => "species",
        }
    }
}

impl fmt::Display for Rank {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Rank {
    type Err = TaxonError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "kingdom" | "regnum" => Ok(Rank::Kingdom),
            "phylum" | "division" | "divisio" => Ok(Rank::Phylum),
            "class" | "classis" | "class_name" => Ok(Rank::Class),
            "order" | "ordo" => Ok(Rank::Order),
            "family" | "familia" => Ok(Rank::Family),
            "genus" => Ok(Rank::Genus),
            "species" => Ok(Rank::Species),
            other => Err(TaxonError::UnknownRank(other.to_string())),
        }
    }
}

/// A sample label: up to seven rank tokens plus derived names.
///
/// Species holds the specific epithet only ("calliope"), never the binomial.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TaxonRecord {
    ranks: [Option<String>; 7],
    scientific_name: String,
    common_name: Option<String>,
}

fn clean_token(raw: &str) -> Option<String> {
    let t = raw.trim();
    (!t.is_empty()).then(|| t.to_string())
}

impl TaxonRecord {
    /// Builds a record from raw rank tokens, coarsest first. Empty or
    /// whitespace-only tokens mean the rank is absent.
    pub fn from_ranks<S: AsRef<str>>(ranks: [S; 7], common_name: Option<&str>) -> Result<Self, TaxonError> {
        let mut cleaned: [Option<String>; 7] = Default::default();
        for (slot, raw) in cleaned.iter_mut().zip(ranks.iter()) {
            *slot = clean_token(raw.as_ref());
        }
        if cleaned.iter().all(Option::is_none) {
            return Err(TaxonError::NoLabel);
        }
        let genus = cleaned[Rank::Genus.index()].clone();
        if let Some(species) = cleaned[Rank::Species.index()].take() {
            let Some(genus) = genus.as_deref() else {
                return Err(TaxonError::SpeciesWithoutGenus(species));
            };
            // Some manifests carry the full binomial in the species column.
            let epithet = match species.split_once(' ') {
                Some((head, tail)) if head.eq_ignore_ascii_case(genus) && !tail.trim().is_empty() => {
                    tail.trim().to_string()
                }
                _ => species,
            };
            cleaned[Rank::Species.index()] = Some(epithet);
        }
        let scientific_name = match (&cleaned[Rank::Genus.index()], &cleaned[Rank::Species.index()]) {
            (Some(g), Some(s)) => format!("{g} {s}"),
            (Some(g), None) => g.clone(),
            // No genus: the deepest present rank names the sample.
            _ => cleaned.iter().rev().flatten().next().cloned().unwrap_or_default(),
        };
        Ok(Self {
            ranks: cleaned,
            scientific_name,
            common_name: common_name.and_then(clean_token),
        })
    }

    pub fn get(&self, rank: Rank) -> Option<&str> {
        self.ranks[rank.index()].as_deref()
    }

    pub fn kingdom(&self) -> Option<&str> {
        self.get(Rank::Kingdom)
    }
    pub fn phylum(&self) -> Option<&str> {
        self.get(Rank::Phylum)
    }
    pub fn class_name(&self) -> Option<&str> {
        self.get(Rank::Class)
    }
    pub fn order(&self) -> Option<&str> {
        self.get(Rank::Order)
    }
    pub fn family(&self) -> Option<&str> {
        self.get(Rank::Family)
    }
    pub fn genus(&self) -> Option<&str> {
        self.get(Rank::Genus)
    }
    pub fn species(&self) -> Option<&str> {
        self.get(Rank::Species)
    }

    pub fn scientific_name(&self) -> &str {
        &self.scientific_name
    }

    pub fn common_name(&self) -> Option<&str> {
        self.common_name.as_deref()
    }

    /// The deepest rank this record carries.
    pub fn finest_rank(&self) -> Rank {
        Rank::ALL
            .iter()
            .rev()
            .copied()
            .find(|r| self.get(*r).is_some())
            .unwrap_or(Rank::Kingdom)
    }

    /// A copy truncated to `rank` and coarser, used to validate genus pages.
    /// `None` when nothing at or above `rank` is present.
    pub fn truncated(&self, rank: Rank) -> Option<TaxonRecord> {
        let ranks: [String; 7] = std::array::from_fn(|i| {
            if i <= rank.index() {
                self.ranks[i].clone().unwrap_or_default()
            } else {
                String::new()
            }
        });
        let common = if rank == Rank::Species { self.common_name.as_deref() } else { None };
        TaxonRecord::from_ranks(ranks, common).ok()
    }
}

/// Parses a 7-field rank line.
pub fn parse_taxonomy(line: &str, delimiter: char) -> Result<TaxonRecord, TaxonError> {
    let fields: Vec<&str> = line.trim_end_matches(['\r', '\n']).split(delimiter).collect();
    if fields.len() != 7 {
        return Err(TaxonError::FieldCount { expected: 7, found: fields.len() });
    }
    let ranks: [&str; 7] = fields.try_into().expect("length checked");
    TaxonRecord::from_ranks(ranks, None)
}

/// One manifest line: a label, its sample id, and where to find the image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub sample_id: String,
    pub taxon: TaxonRecord,
    pub image_ref: String,
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("reading manifest {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest line {line}: {message}")]
    Line { line: usize, message: String },
}

/// Parses one manifest line:
/// `kingdom|phylum|class|order|family|genus|species|sample_id[|image_ref[|common_name]]`.
///
/// The image reference defaults to the sample id.
pub fn parse_manifest_line(line: &str, delimiter: char) -> Result<Sample, String> {
    let fields: Vec<&str> = line.trim_end_matches(['\r', '\n']).split(delimiter).collect();
    if !(8..=10).contains(&fields.len()) {
        return Err(format!("expected 8 to 10 fields, found {}", fields.len()));
    }
    let sample_id = fields[7].trim();
    if sample_id.is_empty() {
        return Err("empty sample id".to_string());
    }
    let ranks: [&str; 7] = fields[..7].try_into().expect("length checked");
    let common = fields.get(9).copied();
    let taxon = TaxonRecord::from_ranks(ranks, common).map_err(|e| e.to_string())?;
    let image_ref = fields
        .get(8)
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .unwrap_or(sample_id);
    Ok(Sample {
        sample_id: sample_id.to_string(),
        taxon,
        image_ref: image_ref.to_string(),
    })
}

/// Parses manifest text. Blank lines and lines starting with `#` are skipped;
/// any malformed line fails the whole manifest.
pub fn parse_manifest(text: &str, delimiter: char) -> Result<Vec<Sample>, ManifestError> {
    let mut samples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let sample = parse_manifest_line(line, delimiter).map_err(|message| ManifestError::Line { line: i + 1, message })?;
        samples.push(sample);
    }
    Ok(samples)
}

pub fn read_manifest(path: &std::path::Path, delimiter: char) -> Result<Vec<Sample>, ManifestError> {
    let text = std::fs::read_to_string(path).map_err(|source| ManifestError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_manifest(&text, delimiter)
}

fn push_escaped(out: &mut String, token: &str) {
    for ch in token.chars() {
        if ch == '\\' || ch == KEY_SEPARATOR {
            out.push('\\');
        }
        out.push(ch);
    }
}

/// Full-path identifier from kingdom down to `rank`, or `None` when any
/// token on that path is absent. Separators inside tokens are escaped so
/// the key is injective.
pub fn rank_key(record: &TaxonRecord, rank: Rank) -> Option<String> {
    let mut key = String::new();
    for r in &Rank::ALL[..=rank.index()] {
        let token = record.get(*r)?;
        if !key.is_empty() {
            key.push(KEY_SEPARATOR);
        }
        push_escaped(&mut key, token);
    }
    Some(key)
}

/// Proper ancestors of a key: every prefix ending just before an unescaped
/// separator.
pub(crate) fn key_ancestors(key: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut escaped = false;
    for (i, ch) in key.char_indices() {
        if escaped {
            escaped = false;
        } else if ch == '\\' {
            escaped = true;
        } else if ch == KEY_SEPARATOR {
            out.push(&key[..i]);
        }
    }
    out
}

/// Number of rank tokens in a key.
pub fn key_depth(key: &str) -> usize {
    if key.is_empty() {
        0
    } else {
        key_ancestors(key).len() + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct RankCoverage {
    pub covered_taxa: u64,
    pub total_taxa: u64,
    pub taxa_ratio: f64,
    pub covered_samples: u64,
    pub total_samples: u64,
    pub sample_ratio: f64,
}

impl RankCoverage {
    pub fn new(covered_taxa: u64, total_taxa: u64, covered_samples: u64, total_samples: u64) -> Self {
        Self {
            covered_taxa,
            total_taxa,
            taxa_ratio: ratio(covered_taxa, total_taxa),
            covered_samples,
            total_samples,
            sample_ratio: ratio(covered_samples, total_samples),
        }
    }
}

pub fn ratio(covered: u64, total: u64) -> f64 {
    if total == 0 {
        0.0
    } else {
        covered as f64 / total as f64
    }
}

/// Per-rank coverage for order, family, genus and species.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct CoverageReport {
    pub order: RankCoverage,
    pub family: RankCoverage,
    pub genus: RankCoverage,
    pub species: RankCoverage,
}

impl CoverageReport {
    pub fn get(&self, rank: Rank) -> Option<&RankCoverage> {
        match rank {
            Rank::Order => Some(&self.order),
            Rank::Family => Some(&self.family),
            Rank::Genus => Some(&self.genus),
            Rank::Species => Some(&self.species),
            _ => None,
        }
    }

    fn slot(&mut self, rank: Rank) -> &mut RankCoverage {
        match rank {
            Rank::Order => &mut self.order,
            Rank::Family => &mut self.family,
            Rank::Genus => &mut self.genus,
            Rank::Species => &mut self.species,
            _ => unreachable!("coverage is only tracked for order..species"),
        }
    }

    /// Renders the report as a fixed-width text table with thousands
    /// separators and one-decimal percentages.
    pub fn to_table(&self) -> String {
        let mut rows = vec![[
            "Rank".to_string(),
            "Covered taxa / Total".to_string(),
            "Ratio".to_string(),
            "Covered samples / Total".to_string(),
            "Ratio".to_string(),
        ]];
        for rank in Rank::COVERAGE {
            let c = self.get(rank).expect("coverage rank");
            let mut label = rank.name().to_string();
            label[..1].make_ascii_uppercase();
            rows.push([
                label,
                format!("{} / {}", thousands(c.covered_taxa), thousands(c.total_taxa)),
                format_percent(c.covered_taxa, c.total_taxa),
                format!("{} / {}", thousands(c.covered_samples), thousands(c.total_samples)),
                format_percent(c.covered_samples, c.total_samples),
            ]);
        }
        let widths: Vec<usize> = (0..5)
            .map(|col| rows.iter().map(|r| r[col].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (i, row) in rows.iter().enumerate() {
            let cells: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(col, (cell, w))| if col == 0 { format!("{cell:<w$}") } else { format!("{cell:>w$}") })
                .collect();
            out.push_str(cells.join("  ").trim_end());
            out.push('\n');
            if i == 0 {
                let total: usize = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
                out.push_str(&"-".repeat(total));
                out.push('\n');
            }
        }
        out
    }
}

/// `covered / total` as a percentage rounded to one decimal, e.g. "76.5%".
pub fn format_percent(covered: u64, total: u64) -> String {
    format!("{:.1}%", 100.0 * ratio(covered, total))
}

/// Formats an integer with comma thousands separators.
pub fn thousands(n: u64) -> String {
    let digits = n.to_string();
    let mut out = String::with_capacity(digits.len() + digits.len() / 3);
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

/// Computes taxa and sample coverage at order, family, genus and species.
///
/// `covered` holds species-level and genus-level keys built with
/// [`rank_key`]. A taxon is covered when a covered key equals it or lies
/// beneath it. Taxa with an absent path are left out of the taxa counts;
/// every sample counts toward `total_samples` at every rank, and a sample
/// whose rank key is absent is uncovered at that rank.
pub fn coverage_report(manifest: &[TaxonRecord], covered: &HashSet<String>) -> CoverageReport {
    let mut covering: HashSet<&str> = HashSet::with_capacity(covered.len() * 4);
    for key in covered {
        covering.insert(key.as_str());
        covering.extend(key_ancestors(key));
    }

    let mut report = CoverageReport::default();
    let total_samples = manifest.len() as u64;
    for rank in Rank::COVERAGE {
        let mut taxa: HashSet<String> = HashSet::new();
        let mut covered_samples = 0u64;
        for record in manifest {
            if let Some(key) = rank_key(record, rank) {
                if covering.contains(key.as_str()) {
                    covered_samples += 1;
                }
                taxa.insert(key);
            }
        }
        let covered_taxa = taxa.iter().filter(|k| covering.contains(k.as_str())).count() as u64;
        *report.slot(rank) = RankCoverage::new(covered_taxa, taxa.len() as u64, covered_samples, total_samples);
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(line: &str) -> TaxonRecord {
        parse_taxonomy(line, '|').unwrap()
    }

    #[test]
    fn parses_full_line() {
        let r = rec("Animalia|Chordata|Aves|Apodiformes|Trochilidae|Selasphorus|calliope");
        assert_eq!(r.scientific_name(), "Selasphorus calliope");
        assert_eq!(r.class_name(), Some("Aves"));
        assert_eq!(r.species(), Some("calliope"));
    }

    #[test]
    fn binomial_in_species_column_is_reduced_to_epithet() {
        let r = rec("Animalia|Chordata|Aves|Apodiformes|Trochilidae|Selasphorus|Selasphorus calliope");
        assert_eq!(r.species(), Some("calliope"));
        assert_eq!(r.scientific_name(), "Selasphorus calliope");
    }

    #[test]
    fn rejects_bad_lines() {
        assert_eq!(parse_taxonomy("||||||", '|'), Err(TaxonError::NoLabel));
        assert_eq!(
            parse_taxonomy("Animalia|Chordata|Aves|Apodiformes|Trochilidae||calliope", '|'),
            Err(TaxonError::SpeciesWithoutGenus("calliope".into()))
        );
        assert_eq!(
            parse_taxonomy("Animalia|Chordata", '|'),
            Err(TaxonError::FieldCount { expected: 7, found: 2 })
        );
    }

    #[test]
    fn tokens_are_trimmed_and_blank_means_absent() {
        let r = rec(" Animalia | Chordata |  | Apodiformes |Trochilidae| Selasphorus |");
        assert_eq!(r.class_name(), None);
        assert_eq!(r.genus(), Some("Selasphorus"));
        assert_eq!(r.scientific_name(), "Selasphorus");
        assert_eq!(r.finest_rank(), Rank::Genus);
    }

    #[test]
    fn custom_delimiter() {
        let r = parse_taxonomy("Plantae,Tracheophyta,Magnoliopsida,Asterales,Asteraceae,Aetheolaena,rosana", ',').unwrap();
        assert_eq!(r.scientific_name(), "Aetheolaena rosana");
    }

    #[test]
    fn manifest_lines() {
        let text = "# header\nK|P|Aves|O|F|Selasphorus|calliope|s1|img/s1.jpg|Calliope Hummingbird\n\nK|P|C|O|F|G|sp|s2\n";
        let samples = parse_manifest(text, '|').unwrap();
        assert_eq!(samples.len(), 2);
        assert_eq!(samples[0].image_ref, "img/s1.jpg");
        assert_eq!(samples[0].taxon.common_name(), Some("Calliope Hummingbird"));
        assert_eq!(samples[1].image_ref, "s2");
        let err = parse_manifest("K|P|C|O|F|G|sp\n", '|').unwrap_err();
        assert!(matches!(err, ManifestError::Line { line: 1, .. }));
    }

    #[test]
    fn rank_keys() {
        let full = rec("Animalia|Chordata|Aves|Apodiformes|Trochilidae|Selasphorus|calliope");
        assert_eq!(
            rank_key(&full, Rank::Genus).as_deref(),
            Some("Animalia/Chordata/Aves/Apodiformes/Trochilidae/Selasphorus")
        );
        let no_family = rec("Animalia|Chordata|Aves|Apodiformes||Selasphorus|calliope");
        assert_eq!(rank_key(&no_family, Rank::Family), None);
        assert_eq!(rank_key(&no_family, Rank::Genus), None);
        let no_species = rec("Animalia|Chordata|Aves|Apodiformes|Trochilidae|Selasphorus|");
        assert_eq!(rank_key(&no_species, Rank::Order).as_deref(), Some("Animalia/Chordata/Aves/Apodiformes"));
        assert_eq!(rank_key(&no_species, Rank::Species), None);
    }

    #[test]
    fn separators_inside_tokens_are_escaped() {
        let a = rec("A|B|C|D|E/F|G|h");
        let b = rec("A|B|C|D/E|F|G|h");
        let ka = rank_key(&a, Rank::Species).unwrap();
        let kb = rank_key(&b, Rank::Species).unwrap();
        assert_ne!(ka, kb);
        assert_eq!(key_depth(&ka), 7);
        assert_eq!(key_ancestors(&ka)[4], "A/B/C/D/E\\/F");
    }

    #[test]
    fn three_species_two_genera() {
        // g1 = {s1, s2}, g2 = {s3}; covering s1 covers one of three species and one of two genera.
        let manifest = vec![
            rec("K|P|C|O|F|G1|s1"),
            rec("K|P|C|O|F|G1|s2"),
            rec("K|P|C|O|F|G2|s3"),
        ];
        let covered: HashSet<String> = [rank_key(&manifest[0], Rank::Species).unwrap()].into();
        let r = coverage_report(&manifest, &covered);
        assert_eq!((r.species.covered_taxa, r.species.total_taxa), (1, 3));
        assert_eq!((r.genus.covered_taxa, r.genus.total_taxa), (1, 2));
        assert!((r.species.taxa_ratio - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.genus.taxa_ratio, 0.5);
        assert_eq!((r.family.covered_taxa, r.family.total_taxa), (1, 1));
        assert_eq!(r.genus.covered_samples, 2);
        assert_eq!(r.species.covered_samples, 1);
    }

    #[test]
    fn genus_entry_covers_genus_and_coarser_but_not_species() {
        let manifest = vec![rec("K|P|C|O|F|G1|s1"), rec("K|P|C|O|F|G1|")];
        let covered: HashSet<String> = [rank_key(&manifest[1], Rank::Genus).unwrap()].into();
        let r = coverage_report(&manifest, &covered);
        assert_eq!(r.species.covered_taxa, 0);
        assert_eq!(r.species.total_taxa, 1);
        assert_eq!(r.genus.covered_taxa, 1);
        assert_eq!(r.genus.covered_samples, 2);
        assert_eq!(r.species.total_samples, 2);
    }

    #[test]
    fn empty_covered_set_gives_zero_ratios() {
        let manifest = vec![rec("K|P|C|O|F|G1|s1")];
        let r = coverage_report(&manifest, &HashSet::new());
        for rank in Rank::COVERAGE {
            let c = r.get(rank).unwrap();
            assert_eq!(c.taxa_ratio, 0.0);
            assert_eq!(c.sample_ratio, 0.0);
        }
        let empty = coverage_report(&[], &HashSet::new());
        assert_eq!(empty.order.total_samples, 0);
        assert_eq!(empty.order.sample_ratio, 0.0);
    }

    #[test]
    fn percent_formatting() {
        assert_eq!(format_percent(1137, 1486), "76.5%");
        assert_eq!(format_percent(32_725, 73_290), "44.7%");
        assert_eq!(format_percent(0, 0), "0.0%");
        assert_eq!(thousands(9_533_174), "9,533,174");
        assert_eq!(thousands(999), "999");
        assert_eq!(thousands(1000), "1,000");
    }

    #[test]
    fn table_has_four_rank_rows() {
        let manifest = vec![rec("K|P|C|O|F|G1|s1")];
        let covered: HashSet<String> = [rank_key(&manifest[0], Rank::Species).unwrap()].into();
        let table = coverage_report(&manifest, &covered).to_table();
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 6);
        assert!(lines[2].starts_with("Order"));
        assert!(lines[5].starts_with("Species"));
        assert!(lines[5].contains("1 / 1") && lines[5].contains("100.0%"));
    }
}
