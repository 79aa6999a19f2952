use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use taxocap::caption::{read_captions, run_pipeline, GenerationConfig, PipelineConfig, PipelineError, Stores};
use taxocap::contrastive::{run_caption_experiment, ExperimentConfig, TrainError};
use taxocap::eval::{
    cosine_scores, mean_ap_at_k, read_embeddings, recall_at_k, reports_to_csv, top1_accuracy, MetricError, MetricReport,
};
use taxocap::gateway::{
    BackendConfig, ChatBackend, Gateway, HttpBackend, MockBackend, ModelRoles, RetryPolicy, TaskConfig,
};
use taxocap::knowledge::{extract_descriptions, save_descriptions, DescriptionStore, ExampleStore};
use taxocap::taxa::{coverage_report, rank_key, read_manifest, DEFAULT_DELIMITER};
use taxocap::wiki::{resolve_many, FixtureBackend, IngestOptions, LiveConfig, MediaWikiBackend, PageBackend};
use taxocap::{EmbeddingMatrix, ParagraphRecord, RelevanceSet, TaxonRecord};

use crate::config::{required, ConfigError, GatewaySection, RunConfig, WikiSection};

#[derive(Debug)]
pub enum Failure {
    /// Bad or missing settings or inputs; nothing was done. Exit 2.
    Config(String),
    /// The command finished but some items failed. Exit 3.
    Partial(Vec<String>),
    /// The command could not finish. Exit 1.
    Runtime(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.0)
    }
}

fn config_err(e: impl std::fmt::Display) -> Failure {
    Failure::Config(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

fn ms(v: Option<u64>, default: Duration) -> Duration {
    v.map(Duration::from_millis).unwrap_or(default)
}

fn ensure_file(path: &Path, what: &str) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::Config(format!("{what} `{}` does not exist", path.display())))
    }
}

fn write_lines<T: serde::Serialize>(path: &Path, records: &[T]) -> Result<(), Failure> {
    let io = |e: std::io::Error| runtime_err(format!("{}: {e}", path.display()));
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(runtime_err)?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

fn page_backend(w: &WikiSection) -> Result<Box<dyn PageBackend>, Failure> {
    match w.backend.as_deref().unwrap_or("fixture") {
        "fixture" => {
            let dir = required(&w.fixture_dir, "wiki", "fixture_dir")?;
            if !dir.is_dir() {
                return Err(Failure::Config(format!("fixture directory `{}` does not exist", dir.display())));
            }
            Ok(Box::new(FixtureBackend::new(dir)))
        }
        "live" => {
            let d = LiveConfig::default();
            Ok(Box::new(MediaWikiBackend::new(LiveConfig {
                api_url: w.api_url.clone().unwrap_or(d.api_url),
                user_agent: w.user_agent.clone().unwrap_or(d.user_agent),
                requests_per_second: w.requests_per_second.unwrap_or(d.requests_per_second),
                max_attempts: w.max_attempts.unwrap_or(d.max_attempts),
                base_backoff: ms(w.base_backoff_ms, d.base_backoff),
                timeout: ms(w.timeout_ms, d.timeout),
            })))
        }
        other => Err(Failure::Config(format!("wiki.backend must be `fixture` or `live`, got `{other}`"))),
    }
}

fn gateway(g: &GatewaySection) -> Result<Gateway, Failure> {
    let d = BackendConfig::default();
    let r = RetryPolicy::default();
    let config = BackendConfig {
        endpoint_url: g.endpoint_url.clone().unwrap_or(d.endpoint_url),
        api_key_env: g.api_key_env.clone().unwrap_or(d.api_key_env),
        max_concurrency: g.max_concurrency.unwrap_or(d.max_concurrency),
        requests_per_minute: g.requests_per_minute.unwrap_or(d.requests_per_minute),
        retry: RetryPolicy {
            max_attempts: g.max_attempts.unwrap_or(r.max_attempts),
            base_backoff: ms(g.base_backoff_ms, r.base_backoff),
            jitter: g.jitter.unwrap_or(r.jitter),
        },
        timeout: ms(g.timeout_ms, d.timeout),
    };
    config.validate().map_err(config_err)?;
    let models = ModelRoles {
        default: required(&g.model, "gateway", "model")?,
        verify: g.verify_model.clone(),
        extract: g.extract_model.clone(),
        caption: g.caption_model.clone(),
    };
    let backend: Arc<dyn ChatBackend> = match g.backend.as_deref().unwrap_or("http") {
        "http" => Arc::new(HttpBackend::new(&config).map_err(config_err)?),
        "mock" => match (&g.mock_script, &g.mock_dir) {
            (Some(script), None) => Arc::new(MockBackend::script_file(script).map_err(config_err)?),
            (None, Some(dir)) => Arc::new(MockBackend::hash_dir(dir)),
            _ => {
                return Err(Failure::Config(
                    "the mock backend needs exactly one of gateway.mock_script and gateway.mock_dir".into(),
                ))
            }
        },
        other => return Err(Failure::Config(format!("gateway.backend must be `http` or `mock`, got `{other}`"))),
    };
    Gateway::new(backend, config, models).map_err(config_err)
}

/// Taxa in first-seen order, one per finest-rank key.
fn distinct_taxa(samples: impl IntoIterator<Item = TaxonRecord>) -> Vec<TaxonRecord> {
    let mut seen = HashSet::new();
    samples
        .into_iter()
        .filter(|t| seen.insert(rank_key(t, t.finest_rank())))
        .collect()
}

pub fn scrape(cfg: &RunConfig) -> Result<(), Failure> {
    let s = &cfg.scrape;
    let manifest = required(&s.manifest, "scrape", "manifest")?;
    let out = required(&s.out, "scrape", "out")?;
    let d = IngestOptions::default();
    let opts = IngestOptions {
        min_matching_ranks: cfg.wiki.min_matching_ranks.unwrap_or(d.min_matching_ranks),
        window: cfg.wiki.window.unwrap_or(d.window).max(1),
    };
    let backend = page_backend(&cfg.wiki)?;
    let samples = read_manifest(&manifest, s.delimiter.unwrap_or(DEFAULT_DELIMITER)).map_err(config_err)?;
    let taxa = distinct_taxa(samples.into_iter().map(|s| s.taxon));
    tracing::info!(taxa = taxa.len(), "resolving description pages");

    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (taxon, result) in taxa.iter().zip(resolve_many(&taxa, backend.as_ref(), &opts)) {
        match result {
            Ok(Some(candidate)) => records.push(ParagraphRecord::from(&candidate)),
            Ok(None) => tracing::info!(taxon = taxon.scientific_name(), "no usable page"),
            Err(e) => failures.push(format!("{}: {e}", taxon.scientific_name())),
        }
    }
    write_lines(&out, &records)?;
    tracing::info!(written = records.len(), failed = failures.len(), out = %out.display(), "scrape done");
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Failure::Partial(failures))
    }
}

fn read_paragraphs(path: &Path) -> Result<Vec<ParagraphRecord>, Failure> {
    let file = File::open(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line)
            .map_err(|e| Failure::Config(format!("{} line {}: {e}", path.display(), i + 1)))?;
        out.push(record);
    }
    Ok(out)
}

pub fn extract(cfg: &RunConfig) -> Result<(), Failure> {
    let s = &cfg.extract;
    let paragraphs = required(&s.paragraphs, "extract", "paragraphs")?;
    let out = required(&s.out, "extract", "out")?;
    let d = TaskConfig::default();
    let task = TaskConfig {
        max_paragraph_chars: s.max_paragraph_chars.unwrap_or(d.max_paragraph_chars),
        verify_attempts: s.verify_attempts.unwrap_or(d.verify_attempts),
        extract_attempts: s.extract_attempts.unwrap_or(d.extract_attempts),
        max_tokens: s.max_tokens.unwrap_or(d.max_tokens),
        ..d
    };
    if task.verify_attempts == 0 || task.extract_attempts == 0 {
        return Err(Failure::Config("extract.verify_attempts and extract.extract_attempts must be positive".into()));
    }
    let records = read_paragraphs(&paragraphs)?;
    let gateway = gateway(&cfg.gateway)?;

    let (descriptions, tally) = extract_descriptions(&records, &gateway, &task, s.workers.unwrap_or(8).max(1));
    save_descriptions(&descriptions, &out).map_err(runtime_err)?;
    tracing::info!(
        records = tally.records,
        paragraphs = tally.paragraphs,
        verified = tally.verified,
        not_visual = tally.not_visual,
        descriptions = tally.descriptions,
        failed = tally.failures.len(),
        "extract done"
    );
    if tally.failures.is_empty() {
        Ok(())
    } else {
        Err(Failure::Partial(tally.failures.into_iter().map(|(k, e)| format!("{k}: {e}")).collect()))
    }
}

fn load_stores(descriptions: &Path, examples: &Path) -> Result<Stores, Failure> {
    ensure_file(descriptions, "description store")?;
    ensure_file(examples, "example store")?;
    let (descriptions, _) = DescriptionStore::load(descriptions).map_err(config_err)?;
    let (examples, _) = ExampleStore::load(examples).map_err(config_err)?;
    Ok(Stores { descriptions, examples })
}

pub fn caption(cfg: &RunConfig) -> Result<(), Failure> {
    let s = &cfg.caption;
    let manifest = required(&s.manifest, "caption", "manifest")?;
    let out = required(&s.out, "caption", "out")?;
    let descriptions = required(&s.descriptions, "caption", "descriptions")?;
    let examples = required(&s.examples, "caption", "examples")?;
    ensure_file(&manifest, "manifest")?;
    let stores = load_stores(&descriptions, &examples)?;
    let gateway = gateway(&cfg.gateway)?;

    let g = GenerationConfig::default();
    let mut pipeline = PipelineConfig::new(&out);
    pipeline.word_limit = s.word_limit.unwrap_or(pipeline.word_limit);
    pipeline.concurrency = s.concurrency.unwrap_or(pipeline.concurrency).max(1);
    pipeline.resume = s.resume.unwrap_or(false);
    pipeline.delimiter = s.delimiter.unwrap_or(pipeline.delimiter);
    pipeline.max_new_samples = s.max_samples;
    pipeline.generation = GenerationConfig {
        temperature: s.temperature.unwrap_or(g.temperature),
        top_p: s.top_p.unwrap_or(g.top_p),
        max_tokens: s.max_tokens.unwrap_or(g.max_tokens),
        corrective_retry: s.corrective_retry.unwrap_or(g.corrective_retry),
    };

    let (path, stats) = run_pipeline(&manifest, &stores, &gateway, &pipeline).map_err(|e| match e {
        PipelineError::Io { .. } => runtime_err(e),
        _ => config_err(e),
    })?;
    if let Some(stats_path) = &s.stats {
        let json = serde_json::to_string_pretty(&stats).map_err(runtime_err)?;
        std::fs::write(stats_path, json + "\n").map_err(|e| runtime_err(format!("{}: {e}", stats_path.display())))?;
    }
    tracing::info!(
        total = stats.total,
        resumed_from = stats.resumed_from,
        generated = stats.generated_this_run,
        complete = stats.complete,
        flagged = stats.flagged_records,
        errors = stats.errors,
        out = %path.display(),
        "caption done"
    );
    if stats.errors == 0 {
        return Ok(());
    }
    let failed = read_captions(&path)
        .map_err(runtime_err)?
        .into_iter()
        .filter_map(|r| r.error.map(|e| format!("{}: {e}", r.sample_id)))
        .collect();
    Err(Failure::Partial(failed))
}

pub fn coverage(cfg: &RunConfig) -> Result<(), Failure> {
    let s = &cfg.coverage;
    let manifest = required(&s.manifest, "coverage", "manifest")?;
    let descriptions = required(&s.descriptions, "coverage", "descriptions")?;
    ensure_file(&descriptions, "description store")?;
    let samples = read_manifest(&manifest, s.delimiter.unwrap_or(DEFAULT_DELIMITER)).map_err(config_err)?;
    let (store, _) = DescriptionStore::load(&descriptions).map_err(config_err)?;

    let taxa: Vec<TaxonRecord> = samples.into_iter().map(|s| s.taxon).collect();
    let table = coverage_report(&taxa, &store.covered_keys()).to_table();
    if let Some(out) = &s.out {
        std::fs::write(out, &table).map_err(|e| runtime_err(format!("{}: {e}", out.display())))?;
    }
    print!("{table}");
    Ok(())
}

pub fn sim(cfg: &RunConfig) -> Result<(), Failure> {
    let s = &cfg.sim;
    let out = required(&s.out, "sim", "out")?;
    let seed = cfg.seed.unwrap_or(0);
    let n_seeds = s.n_seeds.unwrap_or(5);
    if n_seeds == 0 {
        return Err(Failure::Config("sim.n_seeds must be positive".into()));
    }

    let mut e = ExperimentConfig {
        seeds: (seed..seed + n_seeds).collect(),
        ..Default::default()
    };
    macro_rules! set {
        ($($dst:expr => $src:ident),* $(,)?) => { $( if let Some(v) = s.$src { $dst = v; } )* };
    }
    set!(
        e.world.d_z => d_z, e.world.d_eps => d_eps, e.world.d_x => d_x, e.world.d_c => d_c,
        e.world.n_classes => n_classes, e.world.sigma_x => sigma_x, e.world.sigma_c => sigma_c,
        e.world.jitter => jitter, e.d_h => d_h, e.d_e => d_e, e.n_train => n_train, e.n_test => n_test,
        e.noisy_ratio => noisy_ratio, e.train.epochs => epochs, e.train.batch_size => batch_size,
        e.train.metric_rows => metric_rows, e.train.loss.tau => tau, e.train.loss.symmetric => symmetric,
        e.train.loss.w_tax => w_tax, e.train.loss.w_cap => w_cap, e.train.optimizer.lr => lr,
        e.train.optimizer.weight_decay => weight_decay,
    );
    e.train.loss.validate().map_err(config_err)?;

    let summary = run_caption_experiment(&e).map_err(|err| match err {
        TrainError::Config(_) | TrainError::Model(_) => config_err(err),
        TrainError::Diverged { .. } => runtime_err(err),
    })?;

    std::fs::create_dir_all(&out).map_err(|err| runtime_err(format!("{}: {err}", out.display())))?;
    let write = |name: String, body: &str| -> Result<(), Failure> {
        let path = out.join(name);
        std::fs::write(&path, body).map_err(|err| runtime_err(format!("{}: {err}", path.display())))
    };
    for arm in [&summary.taxonomy_only, &summary.faithful, &summary.noisy] {
        for run in &arm.runs {
            write(format!("history_{}_seed{}.csv", run.arm, run.seed), &run.history.to_csv())?;
        }
    }
    write("summary.txt".into(), &summary.to_text())?;
    write("summary.json".into(), &(serde_json::to_string_pretty(&summary).map_err(runtime_err)? + "\n"))?;
    for line in summary.to_text().lines() {
        tracing::info!("{line}");
    }
    tracing::info!(out = %out.display(), "sim done");
    Ok(())
}

fn read_lines(path: &Path) -> Result<Vec<String>, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    Ok(text.lines().map(str::to_string).collect())
}

fn read_labels(path: &Path) -> Result<Vec<usize>, Failure> {
    read_lines(path)?
        .iter()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim()
                .parse()
                .map_err(|e| Failure::Config(format!("{} line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

fn read_relevance(path: &Path, candidates: usize) -> Result<RelevanceSet, Failure> {
    let mut sets = Vec::new();
    for (i, line) in read_lines(path)?.iter().enumerate() {
        let set = line
            .split_whitespace()
            .map(|t| t.parse().map_err(|e| Failure::Config(format!("{} line {}: {e}", path.display(), i + 1))))
            .collect::<Result<_, _>>()?;
        sets.push(set);
    }
    RelevanceSet::new(sets, candidates).map_err(config_err)
}

fn read_matrix(path: &Path) -> Result<EmbeddingMatrix, Failure> {
    read_embeddings(path).map(|(m, _)| m).map_err(config_err)
}

fn metric_err(e: MetricError) -> Failure {
    config_err(e)
}

pub fn eval(cfg: &RunConfig) -> Result<(), Failure> {
    let s = &cfg.eval;
    let kind = required(&s.kind, "eval", "kind")?;
    if !matches!(kind.as_str(), "cls" | "retrieval" | "rerank") {
        return Err(Failure::Config(format!("eval.kind must be cls, retrieval or rerank, got `{kind}`")));
    }
    let queries = read_matrix(&required(&s.queries, "eval", "queries")?)?;
    let candidates = read_matrix(&required(&s.candidates, "eval", "candidates")?)?;
    let out: PathBuf = required(&s.out, "eval", "out")?;

    let relevance = |need: bool| -> Result<Option<RelevanceSet>, Failure> {
        match (&s.relevance, &s.labels, &s.candidate_labels) {
            (Some(path), _, _) => read_relevance(path, candidates.rows()).map(Some),
            (None, Some(q), Some(c)) => Ok(Some(RelevanceSet::from_labels(&read_labels(q)?, &read_labels(c)?))),
            _ if need => Err(Failure::Config(
                "rerank needs eval.relevance, or eval.labels with eval.candidate_labels".into(),
            )),
            _ => Ok(None),
        }
    };
    let check_k = |k: usize, n: usize| {
        if k == 0 || k > n {
            Err(metric_err(MetricError::KOutOfRange { k, candidates: n }))
        } else {
            Ok(k)
        }
    };

    let reports = match kind.as_str() {
        "cls" => {
            let labels = read_labels(&required(&s.labels, "eval", "labels")?)?;
            let value = top1_accuracy(&queries, &candidates, &labels).map_err(metric_err)?;
            vec![MetricReport {
                metric: "top1".into(),
                value,
                n_queries: labels.len(),
                n_skipped: 0,
            }]
        }
        "retrieval" => {
            let k = check_k(s.k.unwrap_or(10), candidates.rows())?;
            let rel = match relevance(false)? {
                Some(rel) => rel,
                None if queries.rows() == candidates.rows() => RelevanceSet::identity(queries.rows()),
                None => {
                    return Err(Failure::Config(format!(
                        "identity pairing needs equal row counts, got {} queries and {} candidates",
                        queries.rows(),
                        candidates.rows()
                    )))
                }
            };
            let scores = cosine_scores(&queries, &candidates).map_err(metric_err)?;
            let forward = recall_at_k(&scores, &rel, k).map_err(metric_err)?;
            let kr = check_k(k, queries.rows())?;
            let mut reverse =
                recall_at_k(&scores.transpose(), &rel.transpose(candidates.rows()), kr).map_err(metric_err)?;
            reverse.metric = format!("reverse_{}", reverse.metric);
            vec![forward, reverse]
        }
        _ => {
            let k = check_k(s.k.unwrap_or(50), candidates.rows())?;
            let rel = relevance(true)?.expect("required above");
            let scores = cosine_scores(&queries, &candidates).map_err(metric_err)?;
            vec![mean_ap_at_k(&scores, &rel, k).map_err(metric_err)?]
        }
    };
    std::fs::write(&out, reports_to_csv(&reports)).map_err(|e| runtime_err(format!("{}: {e}", out.display())))?;
    for r in &reports {
        tracing::info!(metric = %r.metric, value = r.value, queries = r.n_queries, skipped = r.n_skipped, "eval");
    }
    Ok(())
}
