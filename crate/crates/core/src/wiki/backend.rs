//! Page sources: a recorded-fixture directory and the live MediaWiki API.

use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::WikiError;

/// What a backend returns for one title.
#[derive(Debug, Clone, PartialEq)]
pub enum RawResponse {
    Missing,
    Redirect { target: String },
    /// An `action=parse` JSON body.
    Body {
        body: String,
        source_url: String,
        fetched_at: DateTime<Utc>,
    },
}

/// A source of encyclopedia pages. Implementations must tolerate
/// concurrent calls.
pub trait PageBackend: Send + Sync {
    fn fetch_raw(&self, title: &str) -> Result<RawResponse, WikiError>;
}

/// Sidecar metadata stored next to each recorded response.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixtureMeta {
    pub status: u16,
    #[serde(default)]
    pub redirect: Option<String>,
    #[serde(default)]
    pub fetched_at: Option<DateTime<Utc>>,
    #[serde(default)]
    pub source_url: Option<String>,
}

/// Reads recorded responses from `<root>/<fixture_dir_name(title)>/`,
/// which holds `meta.json` and, for status 200, `response.json`.
#[derive(Debug, Clone)]
pub struct FixtureBackend {
    root: PathBuf,
}

/// Directory name for a page title: spaces become underscores and path
/// separators are percent-encoded.
pub fn fixture_dir_name(title: &str) -> String {
    title
        .trim()
        .replace('%', "%25")
        .replace('/', "%2F")
        .replace('\\', "%5C")
        .replace(' ', "_")
}

fn page_url(api_base: &str, title: &str) -> String {
    let wiki_base = api_base.trim_end_matches("api.php").trim_end_matches("w/");
    format!("{}wiki/{}", wiki_base, title.replace(' ', "_"))
}

impl FixtureBackend {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }
}

impl PageBackend for FixtureBackend {
    fn fetch_raw(&self, title: &str) -> Result<RawResponse, WikiError> {
        let dir = self.root.join(fixture_dir_name(title));
        let meta_path = dir.join("meta.json");
        if !meta_path.exists() {
            return Ok(RawResponse::Missing);
        }
        let meta_text = std::fs::read_to_string(&meta_path).map_err(|e| WikiError::Transport(format!("{}: {e}", meta_path.display())))?;
        let meta: FixtureMeta = serde_json::from_str(&meta_text)
            .map_err(|e| WikiError::Malformed(format!("{}: {e}", meta_path.display())))?;
        match meta.status {
            200 => {
                let body_path = dir.join("response.json");
                let body = std::fs::read_to_string(&body_path)
                    .map_err(|e| WikiError::Transport(format!("{}: {e}", body_path.display())))?;
                Ok(RawResponse::Body {
                    body,
                    source_url: meta
                        .source_url
                        .unwrap_or_else(|| page_url("https://en.wikipedia.org/w/api.php", title)),
                    fetched_at: meta.fetched_at.unwrap_or(DateTime::<Utc>::UNIX_EPOCH),
                })
            }
            301 | 302 | 303 | 307 | 308 => match meta.redirect {
                Some(target) => Ok(RawResponse::Redirect { target }),
                None => Err(WikiError::Malformed(format!("{}: redirect without target", meta_path.display()))),
            },
            404 => Ok(RawResponse::Missing),
            status => Err(WikiError::Transport(format!("recorded HTTP status {status} for `{title}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LiveConfig {
    /// MediaWiki `api.php` endpoint.
    pub api_url: String,
    pub user_agent: String,
    pub requests_per_second: f64,
    pub max_attempts: u32,
    pub base_backoff: Duration,
    pub timeout: Duration,
}

impl Default for LiveConfig {
    fn default() -> Self {
        Self {
            api_url: "https://en.wikipedia.org/w/api.php".to_string(),
            user_agent: concat!("taxocap/", env!("CARGO_PKG_VERSION"), " (caption curation research tool)").to_string(),
            requests_per_second: 5.0,
            max_attempts: 3,
            base_backoff: Duration::from_millis(500),
            timeout: Duration::from_secs(30),
        }
    }
}

/// Live MediaWiki backend using `action=parse&prop=wikitext`. Redirects are
/// not resolved server-side so the caller can bound the chain.
pub struct MediaWikiBackend {
    config: LiveConfig,
    agent: ureq::Agent,
    next_slot: Mutex<Instant>,
}

impl MediaWikiBackend {
    pub fn new(config: LiveConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .http_status_as_error(false)
            .user_agent(config.user_agent.as_str())
            .build()
            .into();
        Self {
            config,
            agent,
            next_slot: Mutex::new(Instant::now()),
        }
    }

    fn throttle(&self) {
        let interval = Duration::from_secs_f64(1.0 / self.config.requests_per_second.max(1e-3));
        let wait = {
            let mut slot = self.next_slot.lock().expect("throttle poisoned");
            let now = Instant::now();
            let start = (*slot).max(now);
            *slot = start + interval;
            start - now
        };
        if !wait.is_zero() {
            std::thread::sleep(wait);
        }
    }

    fn request(&self, title: &str) -> Result<(u16, String), String> {
        self.throttle();
        let mut resp = self
            .agent
            .get(&self.config.api_url)
            .query("action", "parse")
            .query("page", title)
            .query("prop", "wikitext")
            .query("format", "json")
            .query("formatversion", "2")
            .call()
            .map_err(|e| e.to_string())?;
        let status = resp.status().as_u16();
        let body = resp.body_mut().read_to_string().map_err(|e| e.to_string())?;
        Ok((status, body))
    }
}

impl PageBackend for MediaWikiBackend {
    fn fetch_raw(&self, title: &str) -> Result<RawResponse, WikiError> {
        let mut last_err = String::new();
        for attempt in 0..self.config.max_attempts.max(1) {
            if attempt > 0 {
                std::thread::sleep(self.config.base_backoff * 2u32.pow(attempt - 1));
            }
            match self.request(title) {
                Ok((200, body)) => {
                    return Ok(RawResponse::Body {
                        body,
                        source_url: page_url(&self.config.api_url, title),
                        fetched_at: Utc::now(),
                    })
                }
                Ok((404, _)) => return Ok(RawResponse::Missing),
                Ok((status, _)) if status == 429 || status >= 500 => last_err = format!("HTTP {status}"),
                Ok((status, _)) => return Err(WikiError::Transport(format!("HTTP {status} for `{title}`"))),
                Err(e) => last_err = e,
            }
        }
        Err(WikiError::Transport(format!(
            "`{title}` failed after {} attempts: {last_err}",
            self.config.max_attempts
        )))
    }
}
