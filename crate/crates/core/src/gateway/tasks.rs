use super::prompts::{extraction_prompt, verification_prompt};
use super::{ChatRequest, Gateway, GatewayError, Message};

#[derive(Debug, Clone, PartialEq)]
pub struct TaskConfig {
    /// Paragraphs longer than this are verified in sentence-aligned chunks.
    pub max_paragraph_chars: usize,
    /// Total asks for a yes/no verdict before giving up.
    pub verify_attempts: u32,
    /// Total asks for a well-formed extraction before giving up.
    pub extract_attempts: u32,
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            max_paragraph_chars: 8_000,
            verify_attempts: 3,
            extract_attempts: 2,
            temperature: 0.0,
            top_p: 1.0,
            max_tokens: 1024,
        }
    }
}

fn request(model: &str, prompt: String, cfg: &TaskConfig, max_tokens: u32) -> ChatRequest {
    ChatRequest {
        model: model.to_string(),
        messages: vec![Message::user_text(prompt)],
        temperature: cfg.temperature,
        top_p: cfg.top_p,
        max_tokens,
    }
}

fn parse_yes_no(reply: &str) -> Option<bool> {
    let t = reply
        .trim()
        .trim_matches(|c: char| c == '"' || c == '\'' || c == '`' || c == '*' || c == '.' || c.is_whitespace())
        .to_ascii_lowercase();
    match t.as_str() {
        "yes" => Some(true),
        "no" => Some(false),
        _ => None,
    }
}

/// Splits text into chunks of at most `max_chars` characters, breaking after
/// sentence-ending punctuation where possible and at whitespace otherwise.
pub fn split_sentences_bounded(text: &str, max_chars: usize) -> Vec<String> {
    let max_chars = max_chars.max(1);
    let mut sentences: Vec<&str> = Vec::new();
    let mut start = 0;
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    for w in chars.windows(2) {
        let ((_, c), (j, next)) = (w[0], w[1]);
        if matches!(c, '.' | '!' | '?') && next.is_whitespace() {
            sentences.push(&text[start..j]);
            start = j;
        }
    }
    sentences.push(&text[start..]);

    let mut chunks: Vec<String> = Vec::new();
    let mut current = String::new();
    let push_piece = |piece: &str, current: &mut String, chunks: &mut Vec<String>| {
        if current.chars().count() + piece.chars().count() > max_chars && !current.trim().is_empty() {
            chunks.push(current.trim().to_string());
            current.clear();
        }
        current.push_str(piece);
    };
    for sentence in sentences {
        if sentence.chars().count() <= max_chars {
            push_piece(sentence, &mut current, &mut chunks);
            continue;
        }
        // Oversized sentence: pack whitespace-delimited words.
        for word in sentence.split_inclusive(char::is_whitespace) {
            if word.chars().count() > max_chars {
                let cs: Vec<char> = word.chars().collect();
                for piece in cs.chunks(max_chars) {
                    push_piece(&piece.iter().collect::<String>(), &mut current, &mut chunks);
                }
            } else {
                push_piece(word, &mut current, &mut chunks);
            }
        }
    }
    if !current.trim().is_empty() {
        chunks.push(current.trim().to_string());
    }
    chunks
}

/// Asks whether a paragraph describes visible appearance.
///
/// Over-length paragraphs are verified per chunk and the verdicts OR-ed.
/// `species` only labels log lines; the prompt itself names no species.
pub fn verify_visual(paragraph: &str, species: &str, gateway: &Gateway, cfg: &TaskConfig) -> Result<bool, GatewayError> {
    let paragraph = paragraph.trim();
    if paragraph.is_empty() {
        return Err(GatewayError::InvalidRequest("paragraph is empty".into()));
    }
    let chunks = if paragraph.chars().count() > cfg.max_paragraph_chars {
        split_sentences_bounded(paragraph, cfg.max_paragraph_chars)
    } else {
        vec![paragraph.to_string()]
    };
    for chunk in &chunks {
        if verify_chunk(chunk, gateway, cfg)? {
            return Ok(true);
        }
    }
    tracing::debug!(%species, chunks = chunks.len(), "no visual content");
    Ok(false)
}

fn verify_chunk(chunk: &str, gateway: &Gateway, cfg: &TaskConfig) -> Result<bool, GatewayError> {
    let req = request(gateway.models().verify(), verification_prompt(chunk), cfg, 8);
    let attempts = cfg.verify_attempts.max(1);
    let mut last = String::new();
    for _ in 0..attempts {
        let reply = gateway.complete(&req)?.text;
        if let Some(v) = parse_yes_no(&reply) {
            return Ok(v);
        }
        last = reply;
    }
    Err(GatewayError::Undecided { attempts, last })
}

/// Extracts the appearance-only text from a paragraph. The reply must read
/// `<species> | <caption>` with the requested species; the caption is
/// everything after the first `|`.
pub fn extract_visual(species: &str, paragraph: &str, gateway: &Gateway, cfg: &TaskConfig) -> Result<String, GatewayError> {
    let req = request(
        gateway.models().extract(),
        extraction_prompt(species, paragraph.trim()),
        cfg,
        cfg.max_tokens,
    );
    let attempts = cfg.extract_attempts.max(1);
    let mut last_err = GatewayError::FormatMismatch {
        attempts,
        last: String::new(),
    };
    for _ in 0..attempts {
        let reply = gateway.complete(&req)?.text;
        let trimmed = reply.trim();
        let Some((name, caption)) = trimmed.split_once('|') else {
            last_err = GatewayError::FormatMismatch {
                attempts,
                last: trimmed.to_string(),
            };
            continue;
        };
        let name = name.trim().trim_start_matches("<species>:").trim();
        if !name.eq_ignore_ascii_case(species.trim()) {
            last_err = GatewayError::SpeciesMismatch {
                expected: species.trim().to_string(),
                got: name.to_string(),
            };
            continue;
        }
        let caption = caption.trim();
        if caption.is_empty() {
            return Err(GatewayError::EmptyCaption);
        }
        return Ok(caption.to_string());
    }
    Err(last_err)
}
