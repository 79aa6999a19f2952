//! Zero-shot classification, Recall@K, truncated mean AP, and the binary
//! embedding file format.
//!
//! Every ranking breaks ties by the lowest candidate index.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::linalg::{unit_normalize, Matrix, MatrixError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricError {
    #[error(transparent)]
    Matrix(#[from] MatrixError),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("k = {k} is outside 1..={candidates}")]
    KOutOfRange { k: usize, candidates: usize },
    #[error("label {label} at row {row} has no class row (only {classes})")]
    LabelOutOfRange { row: usize, label: usize, classes: usize },
    #[error("relevance lists {got} queries, scores have {expected}")]
    QueryCount { expected: usize, got: usize },
    #[error("query {query} lists candidate {candidate}, but there are only {candidates}")]
    CandidateOutOfRange {
        query: usize,
        candidate: usize,
        candidates: usize,
    },
    #[error("no query has any relevant candidate")]
    NoRelevance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    queries: usize,
    candidates: usize,
    scores: Vec<f64>,
}

impl ScoreMatrix {
    pub fn new(queries: usize, candidates: usize, scores: Vec<f64>) -> Result<Self, MetricError> {
        if queries == 0 || candidates == 0 {
            return Err(MetricError::Empty("score matrix"));
        }
        if scores.len() != queries * candidates {
            return Err(MatrixError::BadLength {
                rows: queries,
                cols: candidates,
                len: scores.len(),
            }
            .into());
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(MatrixError::NonFinite("scores").into());
        }
        Ok(Self {
            queries,
            candidates,
            scores,
        })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self, MetricError> {
        let m = Matrix::from_rows(rows)?;
        Self::new(m.rows(), m.cols(), m.into_data())
    }

    pub fn queries(&self) -> usize {
        self.queries
    }

    pub fn candidates(&self) -> usize {
        self.candidates
    }

    pub fn row(&self, q: usize) -> &[f64] {
        &self.scores[q * self.candidates..(q + 1) * self.candidates]
    }

    /// Transposed view: candidates become queries.
    pub fn transpose(&self) -> Self {
        let mut scores = Vec::with_capacity(self.scores.len());
        for j in 0..self.candidates {
            for i in 0..self.queries {
                scores.push(self.scores[i * self.candidates + j]);
            }
        }
        Self {
            queries: self.candidates,
            candidates: self.queries,
            scores,
        }
    }
}

/// Cosine similarity of every query row against every candidate row.
pub fn cosine_scores(queries: &Matrix, candidates: &Matrix) -> Result<ScoreMatrix, MetricError> {
    if queries.cols() != candidates.cols() {
        return Err(MatrixError::DimensionMismatch {
            op: "cosine_scores",
            left: queries.shape(),
            right: candidates.shape(),
        }
        .into());
    }
    let q = unit_normalize(queries)?;
    let d = unit_normalize(candidates)?;
    let s = q.matmul_t(&d)?;
    ScoreMatrix::new(s.rows(), s.cols(), s.into_data())
}

/// Candidate indices by descending score, lowest index first among ties.
pub fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (j, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = j;
        }
    }
    best
}

/// Fraction of images whose highest-scoring class row is their label.
pub fn top1_accuracy(image_embs: &Matrix, class_embs: &Matrix, labels: &[usize]) -> Result<f64, MetricError> {
    if image_embs.rows() == 0 || class_embs.rows() == 0 {
        return Err(MetricError::Empty("top1 inputs"));
    }
    if labels.len() != image_embs.rows() {
        return Err(MetricError::QueryCount {
            expected: image_embs.rows(),
            got: labels.len(),
        });
    }
    if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= class_embs.rows()) {
        return Err(MetricError::LabelOutOfRange {
            row,
            label,
            classes: class_embs.rows(),
        });
    }
    let s = cosine_scores(image_embs, class_embs)?;
    let correct = (0..s.queries()).filter(|&i| argmax(s.row(i)) == labels[i]).count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Relevant candidate indices for each query.
#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceSet {
    sets: Vec<BTreeSet<usize>>,
}

impl RelevanceSet {
    pub fn new(sets: Vec<BTreeSet<usize>>, candidates: usize) -> Result<Self, MetricError> {
        for (query, s) in sets.iter().enumerate() {
            if let Some(&candidate) = s.iter().find(|&&c| c >= candidates) {
                return Err(MetricError::CandidateOutOfRange {
                    query,
                    candidate,
                    candidates,
                });
            }
        }
        Ok(Self { sets })
    }

    /// Query `i` is paired with candidate `i`.
    pub fn identity(n: usize) -> Self {
        Self {
            sets: (0..n).map(|i| BTreeSet::from([i])).collect(),
        }
    }

    /// Query `i` is relevant to every candidate sharing its label.
    pub fn from_labels(query_labels: &[usize], candidate_labels: &[usize]) -> Self {
        Self {
            sets: query_labels
                .iter()
                .map(|q| {
                    candidate_labels
                        .iter()
                        .enumerate()
                        .filter(|(_, c)| *c == q)
                        .map(|(j, _)| j)
                        .collect()
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    pub fn get(&self, q: usize) -> &BTreeSet<usize> {
        &self.sets[q]
    }

    /// The inverse relation, for scoring in the other direction.
    pub fn transpose(&self, candidates: usize) -> Self {
        let mut sets = vec![BTreeSet::new(); candidates];
        for (q, s) in self.sets.iter().enumerate() {
            for &c in s {
                sets[c].insert(q);
            }
        }
        Self { sets }
    }
}

/// One row of a metric report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub metric: String,
    pub value: f64,
    pub n_queries: usize,
    pub n_skipped: usize,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "metric,value,n_queries,n_skipped";

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{}", self.metric, self.value, self.n_queries, self.n_skipped)
    }
}

pub fn reports_to_csv(reports: &[MetricReport]) -> String {
    let mut out = String::from(MetricReport::CSV_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

fn check_inputs(s: &ScoreMatrix, rel: &RelevanceSet, k: usize) -> Result<(), MetricError> {
    if k == 0 || k > s.candidates() {
        return Err(MetricError::KOutOfRange {
            k,
            candidates: s.candidates(),
        });
    }
    if rel.len() != s.queries() {
        return Err(MetricError::QueryCount {
            expected: s.queries(),
            got: rel.len(),
        });
    }
    RelevanceSet::new(rel.sets.clone(), s.candidates()).map(|_| ())
}

/// Fraction of queries with a relevant candidate in the top `k`. Queries
/// with no relevant candidates are skipped and counted.
pub fn recall_at_k(s: &ScoreMatrix, rel: &RelevanceSet, k: usize) -> Result<MetricReport, MetricError> {
    check_inputs(s, rel, k)?;
    let mut hits = 0usize;
    let mut scored = 0usize;
    for q in 0..s.queries() {
        let relevant = rel.get(q);
        if relevant.is_empty() {
            continue;
        }
        scored += 1;
        if ranking(s.row(q))[..k].iter().any(|c| relevant.contains(c)) {
            hits += 1;
        }
    }
    Ok(MetricReport {
        metric: format!("recall@{k}"),
        value: if scored == 0 { 0.0 } else { hits as f64 / scored as f64 },
        n_queries: scored,
        n_skipped: s.queries() - scored,
    })
}

/// Average precision truncated at rank `k`, normalized by `min(|rel|, k)`.
/// `k` is clamped to the row length.
pub fn ap_at_k(scores: &[f64], relevant: &BTreeSet<usize>, k: usize) -> f64 {
    if relevant.is_empty() || k == 0 {
        return 0.0;
    }
    let order = ranking(scores);
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (r, c) in order.iter().take(k).enumerate() {
        if relevant.contains(c) {
            hits += 1;
            sum += hits as f64 / (r + 1) as f64;
        }
    }
    sum / relevant.len().min(k) as f64
}

pub fn mean_ap_at_k(s: &ScoreMatrix, rel: &RelevanceSet, k: usize) -> Result<MetricReport, MetricError> {
    check_inputs(s, rel, k)?;
    let mut total = 0.0;
    let mut scored = 0usize;
    for q in 0..s.queries() {
        if rel.get(q).is_empty() {
            continue;
        }
        scored += 1;
        total += ap_at_k(s.row(q), rel.get(q), k);
    }
    if scored == 0 {
        return Err(MetricError::NoRelevance);
    }
    Ok(MetricReport {
        metric: format!("map@{k}"),
        value: total / scored as f64,
        n_queries: scored,
        n_skipped: s.queries() - scored,
    })
}

pub const EMBEDDING_MAGIC: &[u8; 4] = b"BCEM";
pub const EMBEDDING_VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 8 + 4;

#[derive(Debug, Error)]
pub enum EmbeddingIoError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic {found:?}, expected \"BCEM\"")]
    BadMagic { found: Vec<u8> },
    #[error("unsupported format version {0}")]
    BadVersion(u16),
    #[error("file truncated at byte offset {offset}: expected {expected} bytes")]
    Truncated { offset: usize, expected: usize },
    #[error("{extra} unexpected trailing bytes after the payload")]
    TrailingBytes { extra: usize },
    #[error("{ids} ids for {rows} rows")]
    IdCountMismatch { rows: usize, ids: usize },
    #[error("ids may not contain line breaks: {0:?}")]
    BadId(String),
    #[error("matrix shape {rows}x{dims} is too large")]
    TooLarge { rows: u64, dims: u32 },
}

pub fn ids_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".ids");
    PathBuf::from(s)
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> EmbeddingIoError + '_ {
    move |source| EmbeddingIoError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes `m` as little-endian f32 with a `.ids` sidecar. Values are
/// narrowed to f32, so only f32-representable values round-trip exactly.
pub fn write_embeddings(m: &Matrix, ids: &[String], path: &Path) -> Result<(), EmbeddingIoError> {
    if ids.len() != m.rows() {
        return Err(EmbeddingIoError::IdCountMismatch {
            rows: m.rows(),
            ids: ids.len(),
        });
    }
    if let Some(bad) = ids.iter().find(|id| id.contains(['\n', '\r'])) {
        return Err(EmbeddingIoError::BadId(bad.clone()));
    }
    let dims = u32::try_from(m.cols()).map_err(|_| EmbeddingIoError::TooLarge {
        rows: m.rows() as u64,
        dims: u32::MAX,
    })?;
    let mut w = BufWriter::new(File::create(path).map_err(io(path))?);
    w.write_all(EMBEDDING_MAGIC).map_err(io(path))?;
    w.write_all(&EMBEDDING_VERSION.to_le_bytes()).map_err(io(path))?;
    w.write_all(&(m.rows() as u64).to_le_bytes()).map_err(io(path))?;
    w.write_all(&dims.to_le_bytes()).map_err(io(path))?;
    for &v in m.data() {
        w.write_all(&(v as f32).to_le_bytes()).map_err(io(path))?;
    }
    w.flush().map_err(io(path))?;

    let sidecar = ids_path(path);
    let mut text = String::new();
    for id in ids {
        text.push_str(id);
        text.push('\n');
    }
    std::fs::write(&sidecar, text).map_err(io(&sidecar))
}

/// Parses the binary layout from memory (the sidecar is not involved).
pub fn decode_embeddings(bytes: &[u8]) -> Result<Matrix, EmbeddingIoError> {
    if bytes.len() < 4 {
        return Err(EmbeddingIoError::Truncated {
            offset: bytes.len(),
            expected: HEADER_LEN,
        });
    }
    if &bytes[..4] != EMBEDDING_MAGIC {
        return Err(EmbeddingIoError::BadMagic {
            found: bytes[..4].to_vec(),
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(EmbeddingIoError::Truncated {
            offset: bytes.len(),
            expected: HEADER_LEN,
        });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != EMBEDDING_VERSION {
        return Err(EmbeddingIoError::BadVersion(version));
    }
    let rows = u64::from_le_bytes(bytes[6..14].try_into().expect("8 bytes"));
    let dims = u32::from_le_bytes(bytes[14..18].try_into().expect("4 bytes"));
    let expected = usize::try_from(rows)
        .ok()
        .and_then(|r| r.checked_mul(dims as usize))
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or(EmbeddingIoError::TooLarge { rows, dims })?;
    if bytes.len() < expected {
        return Err(EmbeddingIoError::Truncated {
            offset: bytes.len(),
            expected,
        });
    }
    if bytes.len() > expected {
        return Err(EmbeddingIoError::TrailingBytes {
            extra: bytes.len() - expected,
        });
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
        .collect();
    Ok(Matrix::new(rows as usize, dims as usize, data).expect("length checked"))
}

pub fn read_embeddings(path: &Path) -> Result<(Matrix, Vec<String>), EmbeddingIoError> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(io(path))?;
    let m = decode_embeddings(&bytes)?;
    let sidecar = ids_path(path);
    let text = std::fs::read_to_string(&sidecar).map_err(io(&sidecar))?;
    let ids: Vec<String> = text.lines().map(str::to_string).collect();
    if ids.len() != m.rows() {
        return Err(EmbeddingIoError::IdCountMismatch {
            rows: m.rows(),
            ids: ids.len(),
        });
    }
    Ok((m, ids))
}
