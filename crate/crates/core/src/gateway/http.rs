use std::path::Path;

use base64::Engine;

use super::{BackendConfig, BackendReply, ChatBackend, ChatRequest, GatewayError};

/// Chat-completions over HTTP. The bearer token is read from the configured
/// environment variable when the backend is built.
pub struct HttpBackend {
    endpoint: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl HttpBackend {
    pub fn new(config: &BackendConfig) -> Result<Self, GatewayError> {
        let api_key = std::env::var(&config.api_key_env).ok().filter(|k| !k.is_empty());
        if api_key.is_none() {
            tracing::warn!(var = %config.api_key_env, "API key variable unset; sending unauthenticated requests");
        }
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self {
            endpoint: config.endpoint_url.clone(),
            api_key,
            agent,
        })
    }
}

fn mime_for(path: &str) -> &'static str {
    match Path::new(path)
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .as_deref()
    {
        Some("png") => "image/png",
        Some("gif") => "image/gif",
        Some("webp") => "image/webp",
        _ => "image/jpeg",
    }
}

/// URLs pass through; local files become base64 data URLs.
fn image_url(reference: &str) -> String {
    if reference.starts_with("http://") || reference.starts_with("https://") || reference.starts_with("data:") {
        return reference.to_string();
    }
    match std::fs::read(reference) {
        Ok(bytes) => format!(
            "data:{};base64,{}",
            mime_for(reference),
            base64::engine::general_purpose::STANDARD.encode(bytes)
        ),
        Err(e) => {
            tracing::warn!(%reference, error = %e, "image not readable; sending reference as-is");
            reference.to_string()
        }
    }
}

impl ChatBackend for HttpBackend {
    fn send(&self, request: &ChatRequest) -> Result<BackendReply, String> {
        let body = request.wire_body_with(image_url).to_string();
        let mut call = self.agent.post(&self.endpoint).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            call = call.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = call.send(body.as_bytes()).map_err(|e| e.to_string())?;
        let status = resp.status().as_u16();
        let body = resp.body_mut().read_to_string().map_err(|e| e.to_string())?;
        Ok(BackendReply { status, body })
    }
}
