//! Persona and memory vector banks with hybrid retrieval and reranking.
//!
//! Retrieval is two-stage. Every entry gets a hybrid score
//! `lambda * cos(q, desc) + (1 - lambda) * cos(q, keywords)`; the top `K`
//! survive and a reranker keeps the best `rerank_keep` of them.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashSet};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{cosine, tokenize, EmbeddingError, EmbeddingVector, TextEncoder};
use crate::model::{ConceptId, MemoryEntry, PersonaEntry, Taxonomy};

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error("lambda must lie in [0, 1], got {0}")]
    InvalidLambda(f64),
    #[error("invalid retrieval config: {0}")]
    InvalidConfig(String),
    #[error("reranker unavailable: {0}")]
    RerankerUnavailable(String),
    #[error("bank encoded with {found}, active encoder is {expected}")]
    EncoderMismatch { expected: String, found: String },
    #[error("duplicate entry id {0}")]
    DuplicateEntry(String),
    #[error("malformed bank file: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    pub lambda: f64,
    pub top_k: usize,
    pub rerank_keep: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self { lambda: 0.5, top_k: 10, rerank_keep: 3 }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<(), RetrievalError> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(RetrievalError::InvalidLambda(self.lambda));
        }
        if self.top_k == 0 || self.rerank_keep == 0 {
            return Err(RetrievalError::InvalidConfig("top_k and rerank_keep must be positive".into()));
        }
        if self.rerank_keep > self.top_k {
            return Err(RetrievalError::InvalidConfig("rerank_keep exceeds top_k".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BankKind {
    Persona,
    Memory,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BankSource {
    Persona(PersonaEntry),
    Memory(MemoryEntry),
}

impl BankSource {
    pub fn description(&self) -> &str {
        match self {
            BankSource::Persona(p) => &p.description,
            BankSource::Memory(m) => &m.description,
        }
    }

    pub fn concepts(&self) -> &BTreeSet<ConceptId> {
        match self {
            BankSource::Persona(p) => &p.concepts,
            BankSource::Memory(m) => &m.concepts,
        }
    }
}

/// Serializes with base64 vectors, as in bank files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "BankFileEntry", try_from = "BankFileEntry")]
pub struct BankEntry {
    pub entry_id: String,
    pub source: BankSource,
    pub desc_vec: EmbeddingVector,
    pub kc_vec: EmbeddingVector,
}

/// Text encoded for the keyword vector: the concept labels joined by spaces.
pub fn keyword_text(concepts: &BTreeSet<ConceptId>, taxonomy: &Taxonomy) -> String {
    concepts.iter().map(|c| taxonomy.display(c)).collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorBank {
    pub kind: BankKind,
    pub encoder_version: String,
    entries: Vec<BankEntry>,
}

impl VectorBank {
    pub fn empty(kind: BankKind, encoder_version: impl Into<String>) -> Self {
        Self { kind, encoder_version: encoder_version.into(), entries: Vec::new() }
    }

    pub fn from_entries(
        kind: BankKind,
        encoder_version: impl Into<String>,
        entries: Vec<BankEntry>,
    ) -> Result<Self, RetrievalError> {
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(e.entry_id.as_str()) {
                return Err(RetrievalError::DuplicateEntry(e.entry_id.clone()));
            }
        }
        Ok(Self { kind, encoder_version: encoder_version.into(), entries })
    }

    /// Encodes sources into a bank, assigning ids `p-0000`/`m-0000` in order.
    pub fn build(
        kind: BankKind,
        sources: Vec<BankSource>,
        encoder: &dyn TextEncoder,
        taxonomy: &Taxonomy,
    ) -> Result<Self, RetrievalError> {
        let prefix = match kind {
            BankKind::Persona => "p",
            BankKind::Memory => "m",
        };
        let entries = sources
            .into_iter()
            .enumerate()
            .map(|(i, source)| {
                Ok(BankEntry {
                    entry_id: format!("{prefix}-{i:04}"),
                    desc_vec: encoder.encode(source.description())?,
                    kc_vec: encoder.encode(&keyword_text(source.concepts(), taxonomy))?,
                    source,
                })
            })
            .collect::<Result<Vec<_>, RetrievalError>>()?;
        Self::from_entries(kind, encoder.version(), entries)
    }

    pub fn entries(&self) -> &[BankEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&BankFile::from(self)).expect("bank serializes")
    }

    /// Loads a serialized bank, refusing one built by a different encoder.
    pub fn from_json(json: &str, active_encoder_version: &str) -> Result<Self, RetrievalError> {
        let file: BankFile = serde_json::from_str(json).map_err(|e| RetrievalError::Malformed(e.to_string()))?;
        if file.encoder_version != active_encoder_version {
            return Err(RetrievalError::EncoderMismatch {
                expected: active_encoder_version.to_string(),
                found: file.encoder_version,
            });
        }
        let entries = file
            .entries
            .into_iter()
            .map(|e| {
                Ok(BankEntry {
                    entry_id: e.entry_id,
                    source: e.source,
                    desc_vec: decode_vector(&e.desc_vec)?,
                    kc_vec: decode_vector(&e.kc_vec)?,
                })
            })
            .collect::<Result<Vec<_>, RetrievalError>>()?;
        Self::from_entries(file.kind, file.encoder_version, entries)
    }
}

#[derive(Serialize, Deserialize)]
struct BankFile {
    kind: BankKind,
    encoder_version: String,
    entries: Vec<BankFileEntry>,
}

#[derive(Clone, Serialize, Deserialize)]
struct BankFileEntry {
    entry_id: String,
    source: BankSource,
    desc_vec: String,
    kc_vec: String,
}

impl From<BankEntry> for BankFileEntry {
    fn from(e: BankEntry) -> Self {
        BankFileEntry { desc_vec: encode_vector(&e.desc_vec), kc_vec: encode_vector(&e.kc_vec), entry_id: e.entry_id, source: e.source }
    }
}

impl TryFrom<BankFileEntry> for BankEntry {
    type Error = RetrievalError;

    fn try_from(e: BankFileEntry) -> Result<Self, RetrievalError> {
        Ok(BankEntry { entry_id: e.entry_id, source: e.source, desc_vec: decode_vector(&e.desc_vec)?, kc_vec: decode_vector(&e.kc_vec)? })
    }
}

impl From<&VectorBank> for BankFile {
    fn from(bank: &VectorBank) -> Self {
        BankFile {
            kind: bank.kind,
            encoder_version: bank.encoder_version.clone(),
            entries: bank
                .entries
                .iter()
                .map(|e| BankFileEntry {
                    entry_id: e.entry_id.clone(),
                    source: e.source.clone(),
                    desc_vec: encode_vector(&e.desc_vec),
                    kc_vec: encode_vector(&e.kc_vec),
                })
                .collect(),
        }
    }
}

/// Little-endian float64 payload, base64 encoded.
pub fn encode_f64s(values: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    B64.encode(bytes)
}

pub fn decode_f64s(text: &str) -> Result<Vec<f64>, String> {
    let bytes = B64.decode(text).map_err(|e| e.to_string())?;
    if bytes.len() % 8 != 0 {
        return Err(format!("payload length {} is not a multiple of 8", bytes.len()));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

fn encode_vector(v: &EmbeddingVector) -> String {
    encode_f64s(&v.values)
}

fn decode_vector(text: &str) -> Result<EmbeddingVector, RetrievalError> {
    let values = decode_f64s(text).map_err(RetrievalError::Malformed)?;
    Ok(EmbeddingVector::new(values)?)
}

pub fn hybrid_score(
    query: &EmbeddingVector,
    desc: &EmbeddingVector,
    kc: &EmbeddingVector,
    lambda: f64,
) -> Result<f64, RetrievalError> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(RetrievalError::InvalidLambda(lambda));
    }
    let d = cosine(query, desc)?;
    let k = cosine(query, kc)?;
    // Endpoints are returned untouched so that lambda in {0, 1} is exact.
    if lambda == 1.0 {
        return Ok(d);
    }
    if lambda == 0.0 {
        return Ok(k);
    }
    Ok(lambda * d + (1.0 - lambda) * k)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredEntry {
    pub entry: BankEntry,
    pub hybrid: f64,
    /// Reranker score once reranked.
    pub rerank: Option<f64>,
}

fn by_score_then_id(a: &ScoredEntry, b: &ScoredEntry) -> Ordering {
    b.hybrid.total_cmp(&a.hybrid).then_with(|| a.entry.entry_id.cmp(&b.entry.entry_id))
}

/// Scores every entry and returns the best `top_k`, ties broken by entry id.
pub fn retrieve_topk(
    bank: &VectorBank,
    query: &str,
    encoder: &dyn TextEncoder,
    config: &RetrievalConfig,
) -> Result<Vec<ScoredEntry>, RetrievalError> {
    if bank.is_empty() {
        return Ok(Vec::new());
    }
    let q = encoder.encode(query)?;
    retrieve_topk_vec(bank, &q, config)
}

pub fn retrieve_topk_vec(
    bank: &VectorBank,
    query: &EmbeddingVector,
    config: &RetrievalConfig,
) -> Result<Vec<ScoredEntry>, RetrievalError> {
    let mut scored = bank
        .entries()
        .iter()
        .map(|e| {
            Ok(ScoredEntry {
                hybrid: hybrid_score(query, &e.desc_vec, &e.kc_vec, config.lambda)?,
                entry: e.clone(),
                rerank: None,
            })
        })
        .collect::<Result<Vec<_>, RetrievalError>>()?;
    scored.sort_by(by_score_then_id);
    scored.truncate(config.top_k);
    Ok(scored)
}

pub trait Reranker: Send + Sync {
    fn name(&self) -> &str;
    /// Scores `(query, description)` pairs; higher is more relevant.
    fn score(&self, query: &str, descriptions: &[&str]) -> Result<Vec<f64>, RetrievalError>;
}

/// Token-set Jaccard overlap between query and description.
#[derive(Debug, Clone, Copy, Default)]
pub struct JaccardReranker;

pub fn jaccard(a: &str, b: &str) -> f64 {
    let a: HashSet<String> = tokenize(a).into_iter().collect();
    let b: HashSet<String> = tokenize(b).into_iter().collect();
    let union = a.union(&b).count();
    if union == 0 {
        return 0.0;
    }
    a.intersection(&b).count() as f64 / union as f64
}

impl Reranker for JaccardReranker {
    fn name(&self) -> &str {
        "jaccard-v1"
    }

    fn score(&self, query: &str, descriptions: &[&str]) -> Result<Vec<f64>, RetrievalError> {
        Ok(descriptions.iter().map(|d| jaccard(query, d)).collect())
    }
}

/// Keeps the best `rerank_keep` candidates by reranker score, tie-broken by
/// hybrid score and then entry id.
pub fn rerank_top(
    candidates: Vec<ScoredEntry>,
    query: &str,
    reranker: &dyn Reranker,
    config: &RetrievalConfig,
) -> Result<Vec<ScoredEntry>, RetrievalError> {
    if candidates.is_empty() {
        return Ok(candidates);
    }
    let descriptions: Vec<&str> = candidates.iter().map(|c| c.entry.source.description()).collect();
    let scores = reranker.score(query, &descriptions)?;
    if scores.len() != candidates.len() {
        return Err(RetrievalError::RerankerUnavailable(format!(
            "{} returned {} scores for {} candidates",
            reranker.name(),
            scores.len(),
            candidates.len()
        )));
    }
    let mut out: Vec<ScoredEntry> = candidates
        .into_iter()
        .zip(scores)
        .map(|(c, s)| ScoredEntry { rerank: Some(s), ..c })
        .collect();
    out.sort_by(|a, b| {
        b.rerank
            .unwrap_or(f64::NEG_INFINITY)
            .total_cmp(&a.rerank.unwrap_or(f64::NEG_INFINITY))
            .then_with(|| by_score_then_id(a, b))
    });
    out.truncate(config.rerank_keep);
    Ok(out)
}

/// Reranking with a fallback to hybrid order when the reranker fails.
pub fn rerank_or_fallback(
    candidates: Vec<ScoredEntry>,
    query: &str,
    reranker: &dyn Reranker,
    config: &RetrievalConfig,
) -> Vec<ScoredEntry> {
    match rerank_top(candidates.clone(), query, reranker, config) {
        Ok(out) => out,
        Err(e) => {
            log::warn!("reranker failed, keeping hybrid order: {e}");
            let mut c = candidates;
            c.truncate(config.rerank_keep);
            c
        }
    }
}
