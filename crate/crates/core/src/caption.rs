//! Per-sample caption generation: context assembly, the vision-model call,
//! output validation, and a resumable, order-preserving batch runner.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::gateway::prompts::{caption_correction, caption_prompt};
use crate::gateway::{ChatRequest, ContentPart, Gateway, Message, Role};
use crate::knowledge::{DescriptionStore, ExampleStore};
use crate::parallel::ordered_map;
use crate::taxa::{rank_key, read_manifest, ManifestError, Sample, DEFAULT_DELIMITER};

pub const DEFAULT_WORD_LIMIT: usize = 40;
/// Records between resume-file checkpoints.
pub const CHECKPOINT_EVERY: usize = 256;
pub const MIN_WORD_LIMIT: usize = 10;

#[derive(Debug, Error)]
pub enum CaptionError {
    #[error("sample `{0}` has neither a class nor a genus; cannot pick examples or a description")]
    Unroutable(String),
    #[error("word limit {0} is below the minimum of {MIN_WORD_LIMIT}")]
    WordLimit(usize),
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("resume state in {0} belongs to a different manifest; remove it or disable resume")]
    ResumeMismatch(String),
    #[error(transparent)]
    Caption(#[from] CaptionError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// The description and example stores a run reads from.
#[derive(Debug, Clone, Default)]
pub struct Stores {
    pub descriptions: DescriptionStore,
    pub examples: ExampleStore,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationContext {
    pub sample_id: String,
    pub taxon_key: String,
    pub species_name: String,
    /// Other names that satisfy the species-name check.
    pub aliases: Vec<String>,
    pub format_examples: Vec<String>,
    pub example_fallback: bool,
    pub wiki_excerpt: Option<String>,
    pub word_limit: usize,
    pub image_ref: String,
}

/// Gathers the excerpt and format examples for one sample.
pub fn build_context(sample: &Sample, stores: &Stores, word_limit: usize) -> Result<GenerationContext, CaptionError> {
    if word_limit < MIN_WORD_LIMIT {
        return Err(CaptionError::WordLimit(word_limit));
    }
    let taxon = &sample.taxon;
    if taxon.class_name().is_none() && taxon.genus().is_none() {
        return Err(CaptionError::Unroutable(sample.sample_id.clone()));
    }
    let examples = stores.examples.lookup_examples(taxon.class_name());
    let wiki_excerpt = stores.descriptions.lookup_description(taxon).map(|d| d.text.clone());
    let mut aliases = Vec::new();
    if let Some(g) = taxon.genus() {
        aliases.push(g.to_string());
    }
    if let Some(c) = taxon.common_name() {
        aliases.push(c.to_string());
    }
    Ok(GenerationContext {
        sample_id: sample.sample_id.clone(),
        taxon_key: sample_taxon_key(sample),
        species_name: taxon.scientific_name().to_string(),
        aliases,
        format_examples: examples.examples.to_vec(),
        example_fallback: examples.fallback,
        wiki_excerpt,
        word_limit,
        image_ref: sample.image_ref.clone(),
    })
}

fn sample_taxon_key(sample: &Sample) -> String {
    rank_key(&sample.taxon, sample.taxon.finest_rank()).unwrap_or_else(|| sample.taxon.scientific_name().to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptionFlag {
    OverWordLimit,
    MissingSpeciesName,
    Empty,
}

pub type FlagSet = BTreeSet<CaptionFlag>;

/// Checks word count (whitespace tokens) and that the species name, or its
/// genus alone, appears case-insensitively.
pub fn validate_caption(text: &str, species_name: &str, word_limit: usize) -> FlagSet {
    let genus = species_name.split_whitespace().next().unwrap_or_default();
    validate_caption_with(text, species_name, &[genus], word_limit)
}

/// Like [`validate_caption`], with extra accepted names.
pub fn validate_caption_with<S: AsRef<str>>(text: &str, species_name: &str, aliases: &[S], word_limit: usize) -> FlagSet {
    let mut flags = FlagSet::new();
    if text.trim().is_empty() {
        flags.insert(CaptionFlag::Empty);
    }
    if text.split_whitespace().count() > word_limit {
        flags.insert(CaptionFlag::OverWordLimit);
    }
    let lower = text.to_lowercase();
    let named = std::iter::once(species_name)
        .chain(aliases.iter().map(AsRef::as_ref))
        .map(str::trim)
        .filter(|n| !n.is_empty())
        .any(|n| lower.contains(&n.to_lowercase()));
    if !named {
        flags.insert(CaptionFlag::MissingSpeciesName);
    }
    flags
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptionRecord {
    pub sample_id: String,
    pub taxon_key: String,
    pub caption: String,
    pub used_wiki: bool,
    pub used_examples: bool,
    pub example_fallback: bool,
    pub flags: FlagSet,
    pub model: String,
    pub temperature: f64,
    pub top_p: f64,
    pub attempt_count: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationConfig {
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
    /// Re-ask once with a corrective instruction when validation fails.
    pub corrective_retry: bool,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            temperature: 0.6,
            top_p: 0.8,
            max_tokens: 256,
            corrective_retry: true,
        }
    }
}

fn caption_request(prompt: String, image_ref: &str, model: &str, cfg: &GenerationConfig) -> ChatRequest {
    ChatRequest {
        model: model.to_string(),
        messages: vec![Message {
            role: Role::User,
            content: vec![ContentPart::Image(image_ref.to_string()), ContentPart::Text(prompt)],
        }],
        temperature: cfg.temperature,
        top_p: cfg.top_p,
        max_tokens: cfg.max_tokens,
    }
}

/// Generates and validates one caption. Gateway failures produce a record
/// flagged `empty` with the error noted, never an `Err`.
pub fn generate_caption(ctx: &GenerationContext, gateway: &Gateway, cfg: &GenerationConfig) -> CaptionRecord {
    let model = gateway.models().caption().to_string();
    let prompt = caption_prompt(&ctx.species_name, &ctx.format_examples, ctx.wiki_excerpt.as_deref(), ctx.word_limit);
    let validate = |text: &str| validate_caption_with(text, &ctx.species_name, &ctx.aliases, ctx.word_limit);

    let mut record = CaptionRecord {
        sample_id: ctx.sample_id.clone(),
        taxon_key: ctx.taxon_key.clone(),
        caption: String::new(),
        used_wiki: ctx.wiki_excerpt.is_some(),
        used_examples: !ctx.format_examples.is_empty(),
        example_fallback: ctx.example_fallback,
        flags: FlagSet::new(),
        model: model.clone(),
        temperature: cfg.temperature,
        top_p: cfg.top_p,
        attempt_count: 1,
        error: None,
    };

    let first = match gateway.complete(&caption_request(prompt.clone(), &ctx.image_ref, &model, cfg)) {
        Ok(c) => c.text.trim().to_string(),
        Err(e) => {
            record.flags = validate("");
            record.error = Some(e.to_string());
            return record;
        }
    };
    record.flags = validate(&first);
    record.caption = first;
    if record.flags.is_empty() || !cfg.corrective_retry {
        return record;
    }

    record.attempt_count = 2;
    let fix = caption_correction(
        &record.caption,
        record.flags.contains(&CaptionFlag::OverWordLimit),
        record.flags.contains(&CaptionFlag::MissingSpeciesName),
        &ctx.species_name,
        ctx.word_limit,
    );
    match gateway.complete(&caption_request(prompt + &fix, &ctx.image_ref, &model, cfg)) {
        Ok(c) => {
            let second = c.text.trim().to_string();
            record.flags = validate(&second);
            record.caption = second;
        }
        Err(e) => record.error = Some(format!("corrective retry failed: {e}")),
    }
    record
}

/// Record for a sample that could not be routed to a context.
fn unroutable_record(sample: &Sample, err: &CaptionError, gateway: &Gateway, cfg: &GenerationConfig, word_limit: usize) -> CaptionRecord {
    CaptionRecord {
        sample_id: sample.sample_id.clone(),
        taxon_key: sample_taxon_key(sample),
        caption: String::new(),
        used_wiki: false,
        used_examples: false,
        example_fallback: false,
        flags: validate_caption("", sample.taxon.scientific_name(), word_limit),
        model: gateway.models().caption().to_string(),
        temperature: cfg.temperature,
        top_p: cfg.top_p,
        attempt_count: 0,
        error: Some(err.to_string()),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub output: PathBuf,
    pub word_limit: usize,
    pub concurrency: usize,
    pub resume: bool,
    pub generation: GenerationConfig,
    pub delimiter: char,
    /// Stop after this many new records (the run can be resumed later).
    pub max_new_samples: Option<usize>,
}

impl PipelineConfig {
    pub fn new(output: impl Into<PathBuf>) -> Self {
        Self {
            output: output.into(),
            word_limit: DEFAULT_WORD_LIMIT,
            concurrency: 8,
            resume: false,
            generation: GenerationConfig::default(),
            delimiter: DEFAULT_DELIMITER,
            max_new_samples: None,
        }
    }

    pub fn resume_path(&self) -> PathBuf {
        let mut s = self.output.as_os_str().to_owned();
        s.push(".resume.json");
        PathBuf::from(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ResumeState {
    manifest_sha256: String,
    completed: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct RunStats {
    /// Samples in the manifest.
    pub manifest_samples: usize,
    /// Records present in the output after this run.
    pub total: usize,
    pub resumed_from: usize,
    pub generated_this_run: usize,
    pub complete: bool,
    pub flag_counts: BTreeMap<CaptionFlag, usize>,
    pub flagged_records: usize,
    pub errors: usize,
    pub wiki_context_rate: f64,
    pub fallback_rate: f64,
    pub retried: usize,
    pub wall_time_secs: f64,
}

impl RunStats {
    /// Statistics over a set of records; run-level fields are left at zero.
    pub fn from_records(records: &[CaptionRecord]) -> Self {
        let mut s = RunStats {
            total: records.len(),
            ..Default::default()
        };
        let mut wiki = 0usize;
        let mut fallback = 0usize;
        for r in records {
            for f in &r.flags {
                *s.flag_counts.entry(*f).or_default() += 1;
            }
            s.flagged_records += usize::from(!r.flags.is_empty());
            s.errors += usize::from(r.error.is_some());
            s.retried += usize::from(r.attempt_count > 1);
            wiki += usize::from(r.used_wiki);
            fallback += usize::from(r.example_fallback);
        }
        if !records.is_empty() {
            s.wiki_context_rate = wiki as f64 / records.len() as f64;
            s.fallback_rate = fallback as f64 / records.len() as f64;
        }
        s
    }
}

fn manifest_digest(path: &Path) -> Result<String, PipelineError> {
    let mut file = File::open(path).map_err(io_err(path))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = file.read(&mut buf).map_err(io_err(path))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

/// Byte length and count of the leading output lines that are complete,
/// parse as records, and carry the sample ids of the manifest prefix.
fn valid_prefix(path: &Path, samples: &[Sample]) -> Result<(u64, usize), PipelineError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok((0, 0)),
        Err(e) => return Err(io_err(path)(e)),
    };
    let mut reader = BufReader::new(file);
    let mut bytes = 0u64;
    let mut lines = 0usize;
    let mut line = Vec::new();
    while lines < samples.len() {
        line.clear();
        let read = reader.read_until(b'\n', &mut line).map_err(io_err(path))?;
        if read == 0 || line.last() != Some(&b'\n') {
            break;
        }
        match serde_json::from_slice::<CaptionRecord>(&line) {
            Ok(rec) if rec.sample_id == samples[lines].sample_id => {}
            _ => break,
        }
        bytes += read as u64;
        lines += 1;
    }
    Ok((bytes, lines))
}

fn write_resume(path: &Path, state: &ResumeState) -> Result<(), PipelineError> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, serde_json::to_vec(state).expect("serializable")).map_err(io_err(&tmp))?;
    std::fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn read_captions(path: &Path) -> Result<Vec<CaptionRecord>, PipelineError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| PipelineError::Io {
            path: format!("{} line {}", path.display(), i + 1),
            source: std::io::Error::new(std::io::ErrorKind::InvalidData, e),
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Captions every manifest sample into `config.output` (JSON Lines, in
/// manifest order).
///
/// `<output>.resume.json` ties the output to the manifest digest and is
/// checkpointed every [`CHECKPOINT_EVERY`] records. With `resume` set, a run
/// keeps the leading output lines that are complete records for the
/// manifest prefix, leaves them untouched, and continues after them.
pub fn run_pipeline(
    manifest_path: &Path,
    stores: &Stores,
    gateway: &Gateway,
    config: &PipelineConfig,
) -> Result<(PathBuf, RunStats), PipelineError> {
    let started = Instant::now();
    if config.word_limit < MIN_WORD_LIMIT {
        return Err(CaptionError::WordLimit(config.word_limit).into());
    }
    let samples = read_manifest(manifest_path, config.delimiter)?;
    let digest = manifest_digest(manifest_path)?;
    let resume_path = config.resume_path();

    let mut start = 0usize;
    let mut keep_bytes = 0u64;
    if config.resume {
        if let Ok(bytes) = std::fs::read(&resume_path) {
            let state: ResumeState = serde_json::from_slice(&bytes).map_err(|e| PipelineError::Io {
                path: resume_path.display().to_string(),
                source: std::io::Error::new(std::io::ErrorKind::InvalidData, e),
            })?;
            if state.manifest_sha256 != digest {
                return Err(PipelineError::ResumeMismatch(resume_path.display().to_string()));
            }
            let (bytes, lines) = valid_prefix(&config.output, &samples)?;
            if lines < state.completed {
                tracing::warn!(checkpoint = state.completed, lines, "output shorter than checkpoint");
            }
            keep_bytes = bytes;
            start = lines;
        }
    }

    let out = OpenOptions::new()
        .create(true)
        .write(true)
        .truncate(false)
        .open(&config.output)
        .map_err(io_err(&config.output))?;
    out.set_len(keep_bytes).map_err(io_err(&config.output))?;
    drop(out);
    let mut out = OpenOptions::new()
        .append(true)
        .open(&config.output)
        .map_err(io_err(&config.output))?;
    let mut state = ResumeState {
        manifest_sha256: digest,
        completed: start,
    };
    write_resume(&resume_path, &state)?;

    let end = match config.max_new_samples {
        Some(n) => (start + n).min(samples.len()),
        None => samples.len(),
    };
    if start > 0 {
        tracing::info!(start, total = samples.len(), "resuming caption run");
    }

    let pending = &samples[start..end];
    ordered_map(
        pending,
        config.concurrency,
        |_, sample| match build_context(sample, stores, config.word_limit) {
            Ok(ctx) => generate_caption(&ctx, gateway, &config.generation),
            Err(e) => unroutable_record(sample, &e, gateway, &config.generation, config.word_limit),
        },
        |_, record| -> Result<(), PipelineError> {
            let mut line = serde_json::to_vec(&record).expect("serializable");
            line.push(b'\n');
            out.write_all(&line).map_err(io_err(&config.output))?;
            out.flush().map_err(io_err(&config.output))?;
            state.completed += 1;
            if state.completed.is_multiple_of(CHECKPOINT_EVERY) {
                write_resume(&resume_path, &state)?;
            }
            Ok(())
        },
    )?;
    write_resume(&resume_path, &state)?;

    let records = read_captions(&config.output)?;
    let mut stats = RunStats::from_records(&records);
    stats.manifest_samples = samples.len();
    stats.resumed_from = start;
    stats.generated_this_run = end - start;
    stats.complete = records.len() == samples.len();
    stats.wall_time_secs = started.elapsed().as_secs_f64();
    Ok((config.output.clone(), stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{BackendConfig, BackendReply, MockBackend, ModelRoles, VirtualClock};
    use crate::knowledge::{FormatExampleSet, VisualDescription};
    use crate::taxa::{parse_manifest_line, Rank};
    use crate::wiki::DescriptionSource;
    use std::sync::{Arc, Mutex};

    fn sample(line: &str) -> Sample {
        parse_manifest_line(line, '|').unwrap()
    }

    fn stores_for(s: &Sample) -> Stores {
        Stores {
            descriptions: DescriptionStore::new(vec![VisualDescription {
                taxon_key: rank_key(&s.taxon, Rank::Species).unwrap(),
                rank: crate::knowledge::DescriptionRank::Species,
                source: DescriptionSource::SpeciesPage,
                text: "Males have a magenta gorget of streaked feathers.".into(),
                page_title: "Calliope hummingbird".into(),
            }]),
            examples: ExampleStore::new(vec![FormatExampleSet {
                class_name: "Aves".into(),
                examples: vec!["A perched bird with a red crown.".into()],
            }]),
        }
    }

    fn gw_fn(f: impl Fn(&ChatRequest) -> Result<BackendReply, String> + Send + Sync + 'static) -> Gateway {
        Gateway::with_clock(
            Arc::new(MockBackend::from_fn(f)),
            BackendConfig::default(),
            ModelRoles::single("vlm"),
            Arc::new(VirtualClock::new()),
        )
        .unwrap()
    }

    const HUMMER: &str = "Animalia|Chordata|Aves|Apodiformes|Trochilidae|Selasphorus|calliope|s1|img/s1.jpg";

    #[test]
    fn validation_rules() {
        let forty_one = vec!["w"; 40].join(" ") + " Selasphorus";
        assert_eq!(
            validate_caption(&forty_one, "Selasphorus calliope", 40),
            FlagSet::from([CaptionFlag::OverWordLimit])
        );
        let ok = "The Selasphorus calliope shows magenta streaks on a white throat above a green back and buff flanks today";
        assert_eq!(ok.split_whitespace().count(), 18);
        assert!(validate_caption(ok, "Selasphorus calliope", 40).is_empty());
        assert_eq!(
            validate_caption("", "Selasphorus calliope", 40),
            FlagSet::from([CaptionFlag::Empty, CaptionFlag::MissingSpeciesName])
        );
        assert!(validate_caption("a selasphorus hummingbird", "Selasphorus calliope", 40).is_empty());
        assert_eq!(
            validate_caption("a hummingbird", "Selasphorus calliope", 40),
            FlagSet::from([CaptionFlag::MissingSpeciesName])
        );
        assert!(validate_caption_with("a Calliope Hummingbird", "Selasphorus calliope", &["Calliope Hummingbird"], 40).is_empty());
    }

    #[test]
    fn context_assembly() {
        let s = sample(HUMMER);
        let ctx = build_context(&s, &stores_for(&s), 40).unwrap();
        assert!(ctx.wiki_excerpt.is_some());
        assert!(!ctx.example_fallback);
        assert_eq!(ctx.species_name, "Selasphorus calliope");

        let other = sample("Animalia|Chordata|Aves|Apodiformes|Trochilidae|Archilochus|colubris|s2");
        let ctx = build_context(&other, &stores_for(&s), 40).unwrap();
        assert!(ctx.wiki_excerpt.is_none());
        assert_eq!(ctx.format_examples.len(), 1);

        let reptile = sample("Animalia|Chordata|Reptilia|Squamata|Iguanidae|Iguana|iguana|s3");
        let ctx = build_context(&reptile, &stores_for(&s), 40).unwrap();
        assert!(ctx.example_fallback);
        assert_eq!(ctx.format_examples.len(), 3);

        let unroutable = sample("Animalia|Chordata||||||s4");
        assert!(matches!(
            build_context(&unroutable, &stores_for(&s), 40),
            Err(CaptionError::Unroutable(_))
        ));
        assert!(matches!(build_context(&s, &stores_for(&s), 5), Err(CaptionError::WordLimit(5))));
    }

    #[test]
    fn clean_reply_has_no_flags() {
        let s = sample(HUMMER);
        let ctx = build_context(&s, &stores_for(&s), 40).unwrap();
        let seen = Arc::new(Mutex::new(Vec::new()));
        let s2 = seen.clone();
        let gw = gw_fn(move |r| {
            s2.lock().unwrap().push(r.clone());
            Ok(BackendReply::ok_text(
                "The Calliope Hummingbird Selasphorus calliope shows magenta gorget streaks over a white throat.",
            ))
        });
        let rec = generate_caption(&ctx, &gw, &GenerationConfig::default());
        assert!(rec.flags.is_empty());
        assert_eq!(rec.attempt_count, 1);
        assert!(rec.used_wiki && rec.used_examples && !rec.example_fallback);
        let reqs = seen.lock().unwrap();
        assert_eq!(reqs[0].temperature, 0.6);
        assert_eq!(reqs[0].top_p, 0.8);
        assert_eq!(reqs[0].messages[0].content[0], ContentPart::Image("img/s1.jpg".into()));
    }

    #[test]
    fn long_reply_retried_then_flagged() {
        let s = sample(HUMMER);
        let ctx = build_context(&s, &stores_for(&s), 40).unwrap();
        let calls = Arc::new(Mutex::new(Vec::<String>::new()));
        let c2 = calls.clone();
        let long = format!("Selasphorus calliope {}", vec!["word"; 58].join(" "));
        let gw = gw_fn(move |r| {
            c2.lock().unwrap().push(r.flat_text());
            Ok(BackendReply::ok_text(&long))
        });
        let rec = generate_caption(&ctx, &gw, &GenerationConfig::default());
        assert_eq!(rec.flags, FlagSet::from([CaptionFlag::OverWordLimit]));
        assert_eq!(rec.attempt_count, 2);
        let calls = calls.lock().unwrap();
        assert_eq!(calls.len(), 2);
        assert!(calls[1].contains("Your previous caption was rejected because it is longer than 40 words"));
    }

    #[test]
    fn retry_can_fix_missing_name() {
        let s = sample(HUMMER);
        let ctx = build_context(&s, &stores_for(&s), 40).unwrap();
        let n = Arc::new(Mutex::new(0));
        let gw = gw_fn(move |_| {
            let mut n = n.lock().unwrap();
            *n += 1;
            let text = if *n == 1 { "A small hummingbird." } else { "A small Selasphorus calliope hummingbird." };
            Ok(BackendReply::ok_text(text))
        });
        let rec = generate_caption(&ctx, &gw, &GenerationConfig::default());
        assert!(rec.flags.is_empty());
        assert_eq!(rec.caption, "A small Selasphorus calliope hummingbird.");
    }

    #[test]
    fn gateway_failure_yields_flagged_record() {
        let s = sample(HUMMER);
        let ctx = build_context(&s, &stores_for(&s), 40).unwrap();
        let gw = gw_fn(|_| Ok(BackendReply { status: 400, body: "bad".into() }));
        let rec = generate_caption(&ctx, &gw, &GenerationConfig::default());
        assert!(rec.flags.contains(&CaptionFlag::Empty));
        assert!(rec.error.as_deref().unwrap().contains("HTTP 400"));
        assert!(rec.caption.is_empty());
    }

    #[test]
    fn record_json_shape() {
        let rec = CaptionRecord {
            sample_id: "s".into(),
            taxon_key: "k".into(),
            caption: "c".into(),
            used_wiki: true,
            used_examples: true,
            example_fallback: false,
            flags: FlagSet::from([CaptionFlag::MissingSpeciesName, CaptionFlag::OverWordLimit]),
            model: "m".into(),
            temperature: 0.6,
            top_p: 0.8,
            attempt_count: 2,
            error: None,
        };
        let json = serde_json::to_string(&rec).unwrap();
        assert!(json.contains("\"flags\":[\"over_word_limit\",\"missing_species_name\"]"));
        assert!(!json.contains("error"));
        let back: CaptionRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(back, rec);
    }

    #[test]
    fn empty_manifest_gives_empty_output() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = dir.path().join("m.txt");
        std::fs::write(&manifest, "").unwrap();
        let cfg = PipelineConfig::new(dir.path().join("captions.jsonl"));
        let gw = gw_fn(|_| Ok(BackendReply::ok_text("x")));
        let (path, stats) = run_pipeline(&manifest, &Stores::default(), &gw, &cfg).unwrap();
        assert_eq!(std::fs::read_to_string(path).unwrap(), "");
        assert_eq!(stats.total, 0);
        assert!(stats.complete);
        assert_eq!(stats.wiki_context_rate, 0.0);
    }

    #[test]
    fn unreadable_manifest_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = PipelineConfig::new(dir.path().join("captions.jsonl"));
        let gw = gw_fn(|_| Ok(BackendReply::ok_text("x")));
        assert!(matches!(
            run_pipeline(&dir.path().join("missing.txt"), &Stores::default(), &gw, &cfg),
            Err(PipelineError::Manifest(_))
        ));
    }
}
