use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{BackendReply, ChatBackend, ChatRequest, GatewayError};

/// One scripted response. Entries are consumed in file order; an entry with
/// `match` set is only used for requests whose text parts or image
/// references contain that substring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptEntry {
    #[serde(default, rename = "match", skip_serializing_if = "Option::is_none")]
    pub matches: Option<String>,
    #[serde(default = "default_status")]
    pub status: u16,
    pub reply: String,
}

fn default_status() -> u16 {
    200
}

impl ScriptEntry {
    pub fn reply(text: &str) -> Self {
        Self {
            matches: None,
            status: 200,
            reply: text.to_string(),
        }
    }

    pub fn status(status: u16, body: &str) -> Self {
        Self {
            matches: None,
            status,
            reply: body.to_string(),
        }
    }

    pub fn matching(mut self, needle: &str) -> Self {
        self.matches = Some(needle.to_string());
        self
    }
}

type ReplyFn = dyn Fn(&ChatRequest) -> Result<BackendReply, String> + Send + Sync;

enum Mode {
    /// `<dir>/<request hash>.txt` holds the reply text.
    HashDir(PathBuf),
    Script(Mutex<Vec<Option<ScriptEntry>>>),
    Func(Box<ReplyFn>),
}

/// A network-free backend for tests and offline runs.
pub struct MockBackend {
    mode: Mode,
}

impl MockBackend {
    pub fn hash_dir(dir: impl Into<PathBuf>) -> Self {
        Self { mode: Mode::HashDir(dir.into()) }
    }

    pub fn scripted(entries: Vec<ScriptEntry>) -> Self {
        Self {
            mode: Mode::Script(Mutex::new(entries.into_iter().map(Some).collect())),
        }
    }

    /// Loads a JSON Lines script file.
    pub fn script_file(path: &Path) -> Result<Self, GatewayError> {
        let text = std::fs::read_to_string(path).map_err(|e| GatewayError::Config(format!("{}: {e}", path.display())))?;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: ScriptEntry = serde_json::from_str(line)
                .map_err(|e| GatewayError::Config(format!("{} line {}: {e}", path.display(), i + 1)))?;
            entries.push(entry);
        }
        Ok(Self::scripted(entries))
    }

    pub fn from_fn(f: impl Fn(&ChatRequest) -> Result<BackendReply, String> + Send + Sync + 'static) -> Self {
        Self { mode: Mode::Func(Box::new(f)) }
    }

    /// Script entries not yet consumed.
    pub fn remaining(&self) -> usize {
        match &self.mode {
            Mode::Script(entries) => entries.lock().expect("script poisoned").iter().flatten().count(),
            _ => 0,
        }
    }
}

fn reply_for(entry: ScriptEntry) -> BackendReply {
    if entry.status == 200 {
        BackendReply::ok_text(&entry.reply)
    } else {
        BackendReply {
            status: entry.status,
            body: entry.reply,
        }
    }
}

impl ChatBackend for MockBackend {
    fn send(&self, request: &ChatRequest) -> Result<BackendReply, String> {
        match &self.mode {
            Mode::HashDir(dir) => {
                let hash = request.hash();
                let path = dir.join(format!("{hash}.txt"));
                match std::fs::read_to_string(&path) {
                    Ok(text) => Ok(BackendReply::ok_text(text.trim_end_matches('\n'))),
                    Err(_) => Ok(BackendReply {
                        status: 404,
                        body: format!("no canned reply for request {hash}"),
                    }),
                }
            }
            Mode::Script(entries) => {
                let flat = request.flat_text();
                let mut entries = entries.lock().expect("script poisoned");
                let slot = entries.iter_mut().find(|e| match e {
                    Some(ScriptEntry { matches: Some(m), .. }) => flat.contains(m.as_str()),
                    Some(_) => true,
                    None => false,
                });
                match slot.and_then(Option::take) {
                    Some(entry) => Ok(reply_for(entry)),
                    None => Ok(BackendReply {
                        status: 404,
                        body: "mock script exhausted".to_string(),
                    }),
                }
            }
            Mode::Func(f) => f(request),
        }
    }
}
