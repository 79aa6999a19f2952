//! Encyclopedia ingestion: fetch pages by scientific name, check them
//! against the sample taxonomy, and isolate sections that may describe
//! appearance, falling back to the genus page when the species page has
//! nothing usable.

mod backend;
pub mod wikitext;

use std::collections::BTreeMap;
use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use backend::{fixture_dir_name, FixtureBackend, FixtureMeta, LiveConfig, MediaWikiBackend, PageBackend, RawResponse};

use crate::parallel::ordered_map;
use crate::taxa::{Rank, TaxonRecord};

/// Heading keywords that mark sections worth sending to verification.
pub const SECTION_KEYWORDS: [&str; 9] = [
    "description",
    "morphology",
    "appearance",
    "identification",
    "feature",
    "characteristics",
    "physical",
    "structure",
    "explanation of names",
];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WikiError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("empty page title")]
    EmptyTitle,
    #[error("taxon `{0}` has no genus")]
    NoGenus(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Section {
    pub heading: String,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawPage {
    pub title: String,
    pub sections: Vec<Section>,
    pub taxobox_ranks: BTreeMap<Rank, String>,
    pub fetched_at: DateTime<Utc>,
    pub source_url: String,
    /// The title originally requested when a redirect was followed.
    pub redirected_from: Option<String>,
}

impl RawPage {
    /// Builds a page from raw wikitext.
    pub fn from_wikitext(title: &str, wikitext: &str, source_url: &str, fetched_at: DateTime<Utc>) -> Self {
        let sections = wikitext::split_sections(wikitext)
            .into_iter()
            .map(|(heading, body)| Section { heading, body })
            .collect();
        Self {
            title: title.to_string(),
            sections,
            taxobox_ranks: wikitext::parse_taxobox(wikitext),
            fetched_at,
            source_url: source_url.to_string(),
            redirected_from: None,
        }
    }

    fn full_text(&self) -> String {
        let mut text = String::new();
        for s in &self.sections {
            text.push_str(&s.body);
            text.push('\n');
        }
        text
    }
}

enum Parsed {
    Missing,
    Redirect(String),
    Page(RawPage),
}

fn parse_body(requested: &str, body: &str, source_url: &str, fetched_at: DateTime<Utc>) -> Result<Parsed, WikiError> {
    let json: serde_json::Value =
        serde_json::from_str(body).map_err(|e| WikiError::Malformed(format!("`{requested}`: {e}")))?;
    if let Some(err) = json.get("error") {
        let code = err.get("code").and_then(|c| c.as_str()).unwrap_or_default();
        if code == "missingtitle" || code == "invalidtitle" {
            return Ok(Parsed::Missing);
        }
        return Err(WikiError::Malformed(format!("`{requested}`: API error `{code}`")));
    }
    let parse = json
        .get("parse")
        .ok_or_else(|| WikiError::Malformed(format!("`{requested}`: no `parse` object")))?;
    let title = parse.get("title").and_then(|t| t.as_str()).unwrap_or(requested);
    // formatversion=2 gives a string; the legacy format nests it under "*".
    let wikitext = match parse.get("wikitext") {
        Some(serde_json::Value::String(s)) => s.as_str(),
        Some(obj) => obj
            .get("*")
            .and_then(|s| s.as_str())
            .ok_or_else(|| WikiError::Malformed(format!("`{requested}`: unreadable wikitext")))?,
        None => return Err(WikiError::Malformed(format!("`{requested}`: no wikitext"))),
    };
    if let Some(target) = wikitext::redirect_target(wikitext) {
        return Ok(Parsed::Redirect(target));
    }
    Ok(Parsed::Page(RawPage::from_wikitext(title, wikitext, source_url, fetched_at)))
}

fn fetch_once(title: &str, backend: &dyn PageBackend) -> Result<Parsed, WikiError> {
    match backend.fetch_raw(title)? {
        RawResponse::Missing => Ok(Parsed::Missing),
        RawResponse::Redirect { target } => Ok(Parsed::Redirect(target)),
        RawResponse::Body { body, source_url, fetched_at } => parse_body(title, &body, &source_url, fetched_at),
    }
}

/// Fetches and parses one page. A single redirect hop is followed and
/// recorded in `redirected_from`; longer chains yield `None`.
pub fn fetch_page(title: &str, backend: &dyn PageBackend) -> Result<Option<RawPage>, WikiError> {
    let title = title.trim();
    if title.is_empty() {
        return Err(WikiError::EmptyTitle);
    }
    match fetch_once(title, backend)? {
        Parsed::Missing => Ok(None),
        Parsed::Page(page) => Ok(Some(page)),
        Parsed::Redirect(target) => match fetch_once(&target, backend)? {
            Parsed::Missing => Ok(None),
            Parsed::Page(mut page) => {
                page.redirected_from = Some(title.to_string());
                Ok(Some(page))
            }
            Parsed::Redirect(next) => {
                tracing::warn!(%title, %target, %next, "redirect chain longer than one hop");
                Ok(None)
            }
        },
    }
}

/// Sections whose heading contains a whitelist keyword (case-insensitive
/// substring), in page order, with empty bodies dropped.
pub fn candidate_sections(page: &RawPage) -> Vec<(String, String)> {
    page.sections
        .iter()
        .filter(|s| !s.body.trim().is_empty() && heading_matches(&s.heading))
        .map(|s| (s.heading.clone(), s.body.clone()))
        .collect()
}

pub fn heading_matches(heading: &str) -> bool {
    let lower = heading.to_lowercase();
    SECTION_KEYWORDS.iter().any(|k| lower.contains(k))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RejectReason {
    NoTaxobox,
    Mismatch { rank: Rank, page: String, record: String },
    TooFewMatches { matched: usize, required: usize },
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RejectReason::NoTaxobox => f.write_str("no taxobox"),
            RejectReason::Mismatch { rank, page, record } => {
                write!(f, "{rank} mismatch: page `{page}` vs record `{record}`")
            }
            RejectReason::TooFewMatches { matched, required } => {
                write!(f, "only {matched} matching ranks, {required} required")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Accept {
        matched: usize,
        /// Ranks confirmed by scanning page text because the taxobox lacked them.
        text_scan: Vec<Rank>,
    },
    Reject(RejectReason),
}

impl Verdict {
    pub fn is_accept(&self) -> bool {
        matches!(self, Verdict::Accept { .. })
    }
}

/// Strips a leading abbreviated genus ("L. pictus" → "pictus") and, when
/// the genus is known, a leading full genus.
fn normalize_species(token: &str, genus: Option<&str>) -> String {
    let mut words: Vec<&str> = token.split_whitespace().collect();
    if words.len() > 1 {
        let first = words[0];
        let abbreviated = first.len() == 2 && first.ends_with('.') && first.starts_with(|c: char| c.is_alphabetic());
        let full_genus = genus.is_some_and(|g| first.eq_ignore_ascii_case(g));
        if abbreviated || full_genus {
            words.remove(0);
        }
    }
    words.join(" ")
}

fn contains_word(haystack_lower: &str, needle: &str) -> bool {
    let needle = needle.to_lowercase();
    if needle.is_empty() {
        return false;
    }
    haystack_lower.match_indices(&needle).any(|(i, m)| {
        let before = haystack_lower[..i].chars().next_back();
        let after = haystack_lower[i + m.len()..].chars().next();
        !before.is_some_and(char::is_alphanumeric) && !after.is_some_and(char::is_alphanumeric)
    })
}

/// Checks a page's taxobox against the sample taxonomy.
///
/// Every rank present on both sides must agree (trimmed, case-insensitive)
/// and at least `min_matching_ranks` must match. Ranks the taxobox omits
/// may be confirmed by a whole-word scan of the page text; those are listed
/// in the verdict.
pub fn validate_taxonomy_page(page: &RawPage, taxon: &TaxonRecord, min_matching_ranks: usize) -> Verdict {
    if page.taxobox_ranks.is_empty() {
        return Verdict::Reject(RejectReason::NoTaxobox);
    }
    let mut matched = 0;
    let mut missing = Vec::new();
    for rank in Rank::ALL {
        let Some(record_token) = taxon.get(rank) else { continue };
        match page.taxobox_ranks.get(&rank) {
            Some(page_token) => {
                let page_norm = if rank == Rank::Species {
                    normalize_species(page_token, taxon.genus())
                } else {
                    page_token.trim().to_string()
                };
                if page_norm.to_lowercase() == record_token.trim().to_lowercase() {
                    matched += 1;
                } else {
                    return Verdict::Reject(RejectReason::Mismatch {
                        rank,
                        page: page_token.clone(),
                        record: record_token.to_string(),
                    });
                }
            }
            None => missing.push(rank),
        }
    }
    let mut text_scan = Vec::new();
    if matched < min_matching_ranks && !missing.is_empty() {
        let text = page.full_text().to_lowercase();
        for rank in missing {
            let token = taxon.get(rank).expect("listed as present");
            if contains_word(&text, token) {
                text_scan.push(rank);
            }
        }
    }
    let total = matched + text_scan.len();
    if total < min_matching_ranks {
        return Verdict::Reject(RejectReason::TooFewMatches {
            matched: total,
            required: min_matching_ranks,
        });
    }
    Verdict::Accept { matched: total, text_scan }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DescriptionSource {
    SpeciesPage,
    GenusFallback,
    GenusDirect,
}

impl DescriptionSource {
    pub fn as_str(self) -> &'static str {
        match self {
            DescriptionSource::SpeciesPage => "species_page",
            DescriptionSource::GenusFallback => "genus_fallback",
            DescriptionSource::GenusDirect => "genus_direct",
        }
    }
}

impl fmt::Display for DescriptionSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DescriptionCandidate {
    pub taxon: TaxonRecord,
    pub source: DescriptionSource,
    pub paragraphs: Vec<String>,
    pub page_title: String,
}

/// One line of the scrape output: the paragraphs found for a taxon.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParagraphRecord {
    /// Species key, or the genus key for `genus_direct`.
    pub taxon_key: String,
    pub scientific_name: String,
    /// Name the page is about: the species, or the genus for genus pages.
    pub subject: String,
    pub source: DescriptionSource,
    pub page_title: String,
    pub paragraphs: Vec<String>,
}

impl From<&DescriptionCandidate> for ParagraphRecord {
    fn from(c: &DescriptionCandidate) -> Self {
        let (rank, subject) = match c.source {
            DescriptionSource::SpeciesPage => (Rank::Species, c.taxon.scientific_name()),
            DescriptionSource::GenusFallback => (Rank::Species, c.taxon.genus().unwrap_or_default()),
            DescriptionSource::GenusDirect => (Rank::Genus, c.taxon.genus().unwrap_or_default()),
        };
        Self {
            taxon_key: crate::taxa::rank_key(&c.taxon, rank).unwrap_or_default(),
            scientific_name: c.taxon.scientific_name().to_string(),
            subject: subject.to_string(),
            source: c.source,
            page_title: c.page_title.clone(),
            paragraphs: c.paragraphs.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct IngestOptions {
    pub min_matching_ranks: usize,
    /// In-flight window for batch resolution.
    pub window: usize,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self {
            min_matching_ranks: 3,
            window: 8,
        }
    }
}

fn paragraphs_of(sections: &[(String, String)]) -> Vec<String> {
    sections
        .iter()
        .flat_map(|(_, body)| body.split("\n\n"))
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(str::to_string)
        .collect()
}

/// A validated page with at least one candidate paragraph.
fn usable_page(
    title: &str,
    taxon: &TaxonRecord,
    backend: &dyn PageBackend,
    opts: &IngestOptions,
) -> Result<Option<(String, Vec<String>)>, WikiError> {
    let Some(page) = fetch_page(title, backend)? else {
        return Ok(None);
    };
    let verdict = validate_taxonomy_page(&page, taxon, opts.min_matching_ranks);
    if let Verdict::Reject(reason) = verdict {
        tracing::debug!(%title, %reason, "page rejected");
        return Ok(None);
    }
    let paragraphs = paragraphs_of(&candidate_sections(&page));
    Ok((!paragraphs.is_empty()).then_some((page.title, paragraphs)))
}

/// Finds the best page for a taxon: its species page, else its genus page
/// (`genus_fallback`); taxa without a species go straight to the genus page
/// (`genus_direct`).
pub fn resolve_description_source(
    taxon: &TaxonRecord,
    backend: &dyn PageBackend,
    opts: &IngestOptions,
) -> Result<Option<DescriptionCandidate>, WikiError> {
    let genus = taxon
        .genus()
        .ok_or_else(|| WikiError::NoGenus(taxon.scientific_name().to_string()))?;
    let genus_taxon = taxon.truncated(Rank::Genus).expect("genus present");

    if taxon.species().is_some() {
        if let Some((page_title, paragraphs)) = usable_page(taxon.scientific_name(), taxon, backend, opts)? {
            return Ok(Some(DescriptionCandidate {
                taxon: taxon.clone(),
                source: DescriptionSource::SpeciesPage,
                paragraphs,
                page_title,
            }));
        }
        return Ok(usable_page(genus, &genus_taxon, backend, opts)?.map(|(page_title, paragraphs)| {
            DescriptionCandidate {
                taxon: taxon.clone(),
                source: DescriptionSource::GenusFallback,
                paragraphs,
                page_title,
            }
        }));
    }

    Ok(usable_page(genus, &genus_taxon, backend, opts)?.map(|(page_title, paragraphs)| DescriptionCandidate {
        taxon: taxon.clone(),
        source: DescriptionSource::GenusDirect,
        paragraphs,
        page_title,
    }))
}

/// Resolves many taxa with at most `opts.window` requests in flight.
/// Results come back in input order.
pub fn resolve_many(
    taxa: &[TaxonRecord],
    backend: &dyn PageBackend,
    opts: &IngestOptions,
) -> Vec<Result<Option<DescriptionCandidate>, WikiError>> {
    let mut out = Vec::with_capacity(taxa.len());
    let _ = ordered_map(
        taxa,
        opts.window,
        |_, taxon| resolve_description_source(taxon, backend, opts),
        |_, r| -> Result<(), ()> {
            out.push(r);
            Ok(())
        },
    );
    out
}
