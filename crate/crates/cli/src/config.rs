//! Run configuration: one TOML file, `--set` overrides, then per-command
//! flags. Every flag is a field of a config section with the same name, so
//! `caption.word_limit` in the file and `--word-limit` on the command line
//! are the same setting.

use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

fn err(msg: impl Into<String>) -> ConfigError {
    ConfigError(msg.into())
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScrapeSection {
    /// Taxonomy manifest (one sample per line).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Output JSON Lines file of raw paragraphs.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Field delimiter of the manifest [default: |].
    #[arg(long)]
    pub delimiter: Option<char>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WikiSection {
    /// Page source: `fixture` (recorded responses) or `live` [default: fixture].
    #[arg(long)]
    pub backend: Option<String>,
    /// Directory of recorded responses (fixture backend).
    #[arg(long)]
    pub fixture_dir: Option<PathBuf>,
    /// MediaWiki api.php endpoint (live backend).
    #[arg(long)]
    pub api_url: Option<String>,
    /// User-Agent header sent to the live endpoint.
    #[arg(long)]
    pub user_agent: Option<String>,
    /// Request rate cap for the live endpoint [default: 5].
    #[arg(long)]
    pub requests_per_second: Option<f64>,
    /// Attempts per page on transient failures [default: 3].
    #[arg(long)]
    pub max_attempts: Option<u32>,
    /// Initial retry delay in milliseconds [default: 500].
    #[arg(long)]
    pub base_backoff_ms: Option<u64>,
    /// Per-request timeout in milliseconds [default: 30000].
    #[arg(long)]
    pub timeout_ms: Option<u64>,
    /// Taxobox ranks that must agree with the manifest [default: 3].
    #[arg(long)]
    pub min_matching_ranks: Option<usize>,
    /// Taxa resolved concurrently [default: 8].
    #[arg(long)]
    pub window: Option<usize>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GatewaySection {
    /// Chat backend: `http` or `mock` [default: http].
    #[arg(long)]
    pub backend: Option<String>,
    /// Chat-completions endpoint (http backend).
    #[arg(long)]
    pub endpoint_url: Option<String>,
    /// Environment variable holding the API key [default: TAXOCAP_API_KEY].
    #[arg(long)]
    pub api_key_env: Option<String>,
    /// Model name for every role unless overridden.
    #[arg(long)]
    pub model: Option<String>,
    /// Model for paragraph verification.
    #[arg(long)]
    pub verify_model: Option<String>,
    /// Model for visual extraction.
    #[arg(long)]
    pub extract_model: Option<String>,
    /// Model for caption generation.
    #[arg(long)]
    pub caption_model: Option<String>,
    /// Requests in flight at once [default: 8].
    #[arg(long)]
    pub max_concurrency: Option<usize>,
    /// Request rate cap [default: 600].
    #[arg(long)]
    pub requests_per_minute: Option<usize>,
    /// Attempts per request on retryable failures [default: 4].
    #[arg(long)]
    pub max_attempts: Option<u32>,
    /// Initial retry delay in milliseconds [default: 500].
    #[arg(long)]
    pub base_backoff_ms: Option<u64>,
    /// Relative retry jitter in [0, 1) [default: 0.1].
    #[arg(long)]
    pub jitter: Option<f64>,
    /// Per-request timeout in milliseconds [default: 120000].
    #[arg(long)]
    pub timeout_ms: Option<u64>,
    /// Scripted replies, one JSON object per line (mock backend).
    #[arg(long)]
    pub mock_script: Option<PathBuf>,
    /// Directory of replies keyed by request hash (mock backend).
    #[arg(long)]
    pub mock_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractSection {
    /// Paragraphs file written by `scrape`.
    #[arg(long)]
    pub paragraphs: Option<PathBuf>,
    /// Output descriptions JSON Lines file.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Records processed concurrently [default: 8].
    #[arg(long)]
    pub workers: Option<usize>,
    /// Longer paragraphs are verified in chunks [default: 8000].
    #[arg(long)]
    pub max_paragraph_chars: Option<usize>,
    /// Asks for a yes/no verdict before giving up [default: 3].
    #[arg(long)]
    pub verify_attempts: Option<u32>,
    /// Asks for a well-formed extraction before giving up [default: 2].
    #[arg(long)]
    pub extract_attempts: Option<u32>,
    /// Completion token cap for extraction [default: 1024].
    #[arg(long)]
    pub max_tokens: Option<u32>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptionSection {
    /// Sample manifest.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Output captions JSON Lines file; progress goes to `<out>.resume.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Description store.
    #[arg(long)]
    pub descriptions: Option<PathBuf>,
    /// Format-example store.
    #[arg(long)]
    pub examples: Option<PathBuf>,
    /// Run statistics JSON file.
    #[arg(long)]
    pub stats: Option<PathBuf>,
    /// Caption word limit [default: 40].
    #[arg(long)]
    pub word_limit: Option<usize>,
    /// Samples in flight at once [default: 8].
    #[arg(long)]
    pub concurrency: Option<usize>,
    /// Continue an interrupted run [default: false].
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub resume: Option<bool>,
    /// Field delimiter of the manifest [default: |].
    #[arg(long)]
    pub delimiter: Option<char>,
    /// Stop after this many new records.
    #[arg(long)]
    pub max_samples: Option<usize>,
    /// Sampling temperature [default: 0.6].
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Nucleus sampling mass [default: 0.8].
    #[arg(long)]
    pub top_p: Option<f64>,
    /// Completion token cap [default: 256].
    #[arg(long)]
    pub max_tokens: Option<u32>,
    /// Re-ask once when a caption fails validation [default: true].
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub corrective_retry: Option<bool>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoverageSection {
    /// Sample manifest.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Description store.
    #[arg(long)]
    pub descriptions: Option<PathBuf>,
    /// Also write the table to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Field delimiter of the manifest [default: |].
    #[arg(long)]
    pub delimiter: Option<char>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    /// Output directory for history CSVs and the summary.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Number of seeds, starting at `--seed` [default: 5].
    #[arg(long)]
    pub n_seeds: Option<u64>,
    /// Latent trait dimension [default: 4].
    #[arg(long)]
    pub d_z: Option<usize>,
    /// Caption nuisance dimension [default: 4].
    #[arg(long)]
    pub d_eps: Option<usize>,
    /// Image feature dimension [default: 32].
    #[arg(long)]
    pub d_x: Option<usize>,
    /// Caption feature dimension [default: 32].
    #[arg(long)]
    pub d_c: Option<usize>,
    /// Number of classes [default: 20].
    #[arg(long)]
    pub n_classes: Option<usize>,
    /// Image noise scale [default: 0.1].
    #[arg(long)]
    pub sigma_x: Option<f64>,
    /// Caption noise scale [default: 0.1].
    #[arg(long)]
    pub sigma_c: Option<f64>,
    /// Within-class trait spread [default: 0.3].
    #[arg(long)]
    pub jitter: Option<f64>,
    /// Shared encoder width [default: 8].
    #[arg(long)]
    pub d_h: Option<usize>,
    /// Embedding dimension [default: 16].
    #[arg(long)]
    pub d_e: Option<usize>,
    /// Training samples per run [default: 2000].
    #[arg(long)]
    pub n_train: Option<usize>,
    /// Held-out samples per run [default: 500].
    #[arg(long)]
    pub n_test: Option<usize>,
    /// Nuisance-to-trait energy ratio of the noisy arm [default: 1.0].
    #[arg(long)]
    pub noisy_ratio: Option<f64>,
    /// Training epochs [default: 100].
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Batch size [default: 20].
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Training rows used for per-epoch diagnostics [default: 256].
    #[arg(long)]
    pub metric_rows: Option<usize>,
    /// Softmax temperature [default: 0.07].
    #[arg(long)]
    pub tau: Option<f64>,
    /// Average both contrastive directions [default: true].
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub symmetric: Option<bool>,
    /// Weight of the taxonomy term [default: 1.0].
    #[arg(long)]
    pub w_tax: Option<f64>,
    /// Weight of the caption term [default: 1.0].
    #[arg(long)]
    pub w_cap: Option<f64>,
    /// Adam learning rate [default: 0.001].
    #[arg(long)]
    pub lr: Option<f64>,
    /// Decoupled weight decay [default: 0.2].
    #[arg(long)]
    pub weight_decay: Option<f64>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Protocol: `cls`, `retrieval` or `rerank`.
    #[arg(long)]
    pub kind: Option<String>,
    /// Query embeddings (images).
    #[arg(long)]
    pub queries: Option<PathBuf>,
    /// Candidate embeddings (class texts or documents).
    #[arg(long)]
    pub candidates: Option<PathBuf>,
    /// Query labels, one class index per line.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Candidate labels, one class index per line (retrieval by label).
    #[arg(long)]
    pub candidate_labels: Option<PathBuf>,
    /// Relevant candidate indices per query, one whitespace-separated line per query.
    #[arg(long)]
    pub relevance: Option<PathBuf>,
    /// Cutoff rank [default: 10 for retrieval, 50 for rerank].
    #[arg(long)]
    pub k: Option<usize>,
    /// Output metric report CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub scrape: ScrapeSection,
    pub wiki: WikiSection,
    pub extract: ExtractSection,
    pub gateway: GatewaySection,
    pub caption: CaptionSection,
    pub coverage: CoverageSection,
    pub sim: SimSection,
    pub eval: EvalSection,
}

/// Parses `section.key=value`. The value is read as a TOML value when it
/// parses as one and as a bare string otherwise.
fn apply_set(table: &mut toml::Table, assignment: &str) -> Result<(), ConfigError> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| err(format!("--set expects key=value, got `{assignment}`")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(err(format!("bad key `{path}` in --set")));
    }
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let (last, parents) = keys.split_last().expect("non-empty key");
    let mut cur = table;
    for k in parents {
        cur = cur
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| err(format!("`{k}` in `{path}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Flags given on the command line for one section.
pub fn overlay<T: Serialize>(section: &'static str, flags: &T) -> Result<(&'static str, toml::Table), ConfigError> {
    let table = toml::Table::try_from(flags).map_err(|e| err(format!("[{section}] flags: {e}")))?;
    Ok((section, table))
}

/// Merges file, `--set` assignments, `--seed` and flag overlays, in that
/// order of increasing precedence, and rejects unknown keys anywhere.
pub fn load(
    file: Option<&Path>,
    sets: &[String],
    seed: Option<u64>,
    overlays: Vec<(&'static str, toml::Table)>,
) -> Result<RunConfig, ConfigError> {
    let mut table = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| err(format!("{}: {e}", path.display())))?;
            toml::from_str::<toml::Table>(&text).map_err(|e| err(format!("{}: {e}", path.display())))?
        }
        None => toml::Table::new(),
    };
    for s in sets {
        apply_set(&mut table, s)?;
    }
    if let Some(seed) = seed {
        table.insert("seed".into(), toml::Value::Integer(seed as i64));
    }
    for (section, flags) in overlays {
        let target = table
            .entry(section.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| err(format!("`{section}` must be a table")))?;
        target.extend(flags);
    }
    toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| err(format!("config: {}", e.message())))
}

/// A setting that must be present, named by its config key and flag.
pub fn required<T: Clone>(value: &Option<T>, section: &str, key: &str) -> Result<T, ConfigError> {
    value.clone().ok_or_else(|| {
        err(format!(
            "missing required setting `{section}.{key}` (flag --{})",
            key.replace('_', "-")
        ))
    })
}
