//! Just enough wikitext handling to split a page into headed sections,
//! read its taxobox, and reduce markup to plain prose.

use std::collections::BTreeMap;

use crate::taxa::Rank;

/// Heading given to the text before the first section heading.
pub const LEAD_HEADING: &str = "(lead)";

/// Infobox templates that carry taxonomy.
const TAXOBOX_TEMPLATES: [&str; 5] = [
    "taxobox",
    "speciesbox",
    "automatic taxobox",
    "subspeciesbox",
    "infraspeciesbox",
];

/// Returns the redirect target when the wikitext is a redirect stub.
pub fn redirect_target(wikitext: &str) -> Option<String> {
    let head = wikitext.trim_start();
    if !head.get(..9)?.eq_ignore_ascii_case("#redirect") {
        return None;
    }
    let open = head.find("[[")?;
    let close = head[open..].find("]]")? + open;
    let target = head[open + 2..close].split(['|', '#']).next()?.trim();
    (!target.is_empty()).then(|| target.to_string())
}

/// Splits wikitext into `(heading, cleaned body)` pairs in page order.
pub fn split_sections(wikitext: &str) -> Vec<(String, String)> {
    let mut sections = Vec::new();
    let mut heading = LEAD_HEADING.to_string();
    let mut buf = String::new();
    for line in wikitext.lines() {
        if let Some(h) = parse_heading(line) {
            sections.push((heading, clean_markup(&buf)));
            heading = h;
            buf.clear();
        } else {
            buf.push_str(line);
            buf.push('\n');
        }
    }
    sections.push((heading, clean_markup(&buf)));
    sections
}

fn parse_heading(line: &str) -> Option<String> {
    let t = line.trim();
    let level = t.chars().take_while(|&c| c == '=').count();
    if level < 2 || t.len() < 2 * level + 1 {
        return None;
    }
    let trailing = t.chars().rev().take_while(|&c| c == '=').count();
    if trailing != level {
        return None;
    }
    let inner = clean_markup(&t[level..t.len() - level]);
    let inner = inner.trim();
    (!inner.is_empty()).then(|| inner.to_string())
}

/// Finds the first taxobox-style template and maps its rank parameters.
pub fn parse_taxobox(wikitext: &str) -> BTreeMap<Rank, String> {
    let mut ranks = BTreeMap::new();
    let Some((name, body)) = find_taxobox(wikitext) else {
        return ranks;
    };
    for param in split_top_level(body, '|').into_iter().skip(1) {
        let Some((key, value)) = param.split_once('=') else { continue };
        let key = key.trim().to_ascii_lowercase();
        let value = clean_markup(value).trim().to_string();
        if value.is_empty() {
            continue;
        }
        match key.as_str() {
            "taxon" => {
                let mut words = value.split_whitespace();
                match (words.next(), words.next()) {
                    (Some(g), Some(s)) => {
                        ranks.insert(Rank::Genus, g.to_string());
                        ranks.insert(Rank::Species, s.to_string());
                    }
                    // A one-word automatic taxobox is a genus article.
                    (Some(g), None) if name == "automatic taxobox" => {
                        ranks.insert(Rank::Genus, g.to_string());
                    }
                    _ => {}
                }
            }
            other => {
                if let Ok(rank) = other.parse::<Rank>() {
                    if other != "class_name" {
                        ranks.entry(rank).or_insert(value);
                    }
                }
            }
        }
    }
    ranks
}

fn find_taxobox(wikitext: &str) -> Option<(&'static str, &str)> {
    let lower = wikitext.to_ascii_lowercase();
    let mut search = 0;
    while let Some(pos) = lower[search..].find("{{") {
        let start = search + pos;
        let after = lower[start + 2..].trim_start();
        for name in TAXOBOX_TEMPLATES {
            if let Some(rest) = after.strip_prefix(name) {
                if rest.starts_with(|c: char| c == '|' || c == '}' || c.is_whitespace()) {
                    let end = matching_close(wikitext, start, "{{", "}}")?;
                    return Some((name, &wikitext[start + 2..end - 2]));
                }
            }
        }
        search = start + 2;
    }
    None
}

/// Byte index just past the delimiter that closes the one opening at `start`.
fn matching_close(text: &str, start: usize, open: &str, close: &str) -> Option<usize> {
    let mut depth = 0usize;
    let mut i = start;
    let bytes = text.as_bytes();
    while i < bytes.len() {
        if text[i..].starts_with(open) {
            depth += 1;
            i += open.len();
        } else if text[i..].starts_with(close) {
            depth -= 1;
            i += close.len();
            if depth == 0 {
                return Some(i);
            }
        } else {
            i += 1;
        }
    }
    None
}

/// Splits on `sep` outside of `{{ }}` and `[[ ]]` nesting.
fn split_top_level(text: &str, sep: char) -> Vec<&str> {
    let mut parts = Vec::new();
    let mut depth = 0i32;
    let mut last = 0;
    let bytes = text.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        let two = &text.as_bytes()[i..(i + 2).min(bytes.len())];
        if two == b"{{" || two == b"[[" {
            depth += 1;
            i += 2;
            continue;
        }
        if two == b"}}" || two == b"]]" {
            depth -= 1;
            i += 2;
            continue;
        }
        if depth == 0 && bytes[i] == sep as u8 {
            parts.push(&text[last..i]);
            last = i + 1;
        }
        i += 1;
    }
    parts.push(&text[last..]);
    parts
}

fn remove_balanced(text: &str, open: &str, close: &str, keep: impl Fn(&str) -> Option<String>) -> String {
    let mut out = String::with_capacity(text.len());
    let mut i = 0;
    while i < text.len() {
        if text[i..].starts_with(open) {
            match matching_close(text, i, open, close) {
                Some(end) => {
                    if let Some(kept) = keep(&text[i + open.len()..end - close.len()]) {
                        out.push_str(&kept);
                    }
                    i = end;
                }
                None => {
                    // Unbalanced: drop the rest of the line.
                    let eol = text[i..].find('\n').map_or(text.len(), |p| i + p);
                    i = eol;
                }
            }
        } else {
            let ch = text[i..].chars().next().expect("in bounds");
            out.push(ch);
            i += ch.len_utf8();
        }
    }
    out
}

fn strip_between(text: &str, open: &str, close: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(start) = rest.find(open) {
        out.push_str(&rest[..start]);
        match rest[start..].find(close) {
            Some(end) => rest = &rest[start + end + close.len()..],
            None => {
                rest = "";
                break;
            }
        }
    }
    out.push_str(rest);
    out
}

fn strip_refs(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(start) = rest.find("<ref") {
        out.push_str(&rest[..start]);
        let tail = &rest[start..];
        let Some(tag_end) = tail.find('>') else {
            rest = "";
            break;
        };
        if tail[..tag_end].ends_with('/') {
            rest = &tail[tag_end + 1..];
        } else {
            match tail.find("</ref>") {
                Some(close) => rest = &tail[close + "</ref>".len()..],
                None => rest = &tail[tag_end + 1..],
            }
        }
    }
    out.push_str(rest);
    out
}

fn strip_tags(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(start) = rest.find('<') {
        out.push_str(&rest[..start]);
        let tail = &rest[start..];
        let is_tag = tail[1..].starts_with(|c: char| c.is_ascii_alphabetic() || c == '/');
        match (is_tag, tail.find('>')) {
            (true, Some(end)) => rest = &tail[end + 1..],
            _ => {
                out.push('<');
                rest = &tail[1..];
            }
        }
    }
    out.push_str(rest);
    out
}

fn link_text(inner: &str) -> Option<String> {
    let lower = inner.trim_start().to_ascii_lowercase();
    if ["file:", "image:", "category:", "media:"].iter().any(|p| lower.starts_with(p)) {
        return None;
    }
    let shown = split_top_level(inner, '|').last().copied().unwrap_or(inner);
    Some(shown.to_string())
}

fn external_links(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(start) = rest.find("[http") {
        out.push_str(&rest[..start]);
        let tail = &rest[start + 1..];
        match tail.find(']') {
            Some(end) => {
                let inner = &tail[..end];
                if let Some((_, label)) = inner.split_once(' ') {
                    out.push_str(label.trim());
                }
                rest = &tail[end + 1..];
            }
            None => {
                out.push('[');
                rest = tail;
            }
        }
    }
    out.push_str(rest);
    out
}

/// Reduces wikitext to prose: templates, refs, comments, tables, files and
/// tags are dropped, links keep their label, and paragraphs are separated
/// by a single blank line.
/// Stands in for dropped markup until paragraphs are split.
const REMOVED: char = '\u{1}';

pub fn clean_markup(text: &str) -> String {
    let text = strip_between(text, "<!--", "-->");
    let text = strip_refs(&text);
    let text = remove_balanced(&text, "{|", "|}", |_| Some(REMOVED.to_string()));
    let text = remove_balanced(&text, "{{", "}}", |_| Some(REMOVED.to_string()));
    let text = remove_balanced(&text, "[[", "]]", |inner| {
        Some(link_text(inner).unwrap_or_else(|| REMOVED.to_string()))
    });
    let text = external_links(&text);
    let text = strip_tags(&text);
    let text = text.replace("'''", "").replace("''", "").replace("&nbsp;", " ");

    let mut paragraphs: Vec<String> = Vec::new();
    let mut current: Vec<String> = Vec::new();
    for raw in text.lines() {
        let line = raw.replace(REMOVED, "");
        let line = line.trim().trim_start_matches(['*', '#', ':', ';']).trim();
        if line.is_empty() && raw.contains(REMOVED) {
            // A line that held only removed markup does not end a paragraph.
            continue;
        }
        if line.is_empty() {
            if !current.is_empty() {
                paragraphs.push(current.join(" "));
                current.clear();
            }
        } else {
            current.push(line.split_whitespace().collect::<Vec<_>>().join(" "));
        }
    }
    if !current.is_empty() {
        paragraphs.push(current.join(" "));
    }
    paragraphs
        .into_iter()
        .map(|p| tidy_punctuation(&p))
        .filter(|p| !p.is_empty())
        .collect::<Vec<_>>()
        .join("\n\n")
}

fn tidy_punctuation(p: &str) -> String {
    let mut s = p.to_string();
    for (from, to) in [(" ,", ","), (" .", "."), (" ;", ";"), (" :", ":"), ("( ", "("), (" )", ")"), ("()", "")] {
        while s.contains(from) {
            s = s.replace(from, to);
        }
    }
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}
