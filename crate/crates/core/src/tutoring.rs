//! The per-turn tutoring pipeline: retrieve persona and memory evidence,
//! score forgetting, rewrite the evidence, generate the next turn and append
//! both turns to the session.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::embedding::{cosine, EmbeddingVector, TextEncoder};
use crate::eval::QuestionPoolItem;
use crate::extraction::{build_banks, extract_memory, extract_persona, ExtractionConfig, ExtractionError};
use crate::forgetting::{forgetting_report, report_rows, ForgettingConfig, ForgettingError, ForgettingReport, ForgettingRow};
use crate::gateway::{prompts, Gateway, GatewayError, LlmRole};
use crate::kt::MasteryModel;
use crate::model::{ConceptId, InteractionRecord, ModelError, Role, SessionState, SessionTurn, StudentProfile, Taxonomy, Timestamp};
use crate::retrieval::{
    keyword_text, rerank_or_fallback, retrieve_topk, BankEntry, BankKind, BankSource, Reranker, RetrievalConfig, RetrievalError, VectorBank,
};

/// Below this forgetting score a concept counts as intact.
pub const INTACT_BELOW: f64 = 0.33;
/// Above this forgetting score a concept counts as likely forgotten.
pub const FORGOTTEN_ABOVE: f64 = 0.66;
/// Mastery needed on every query concept before challenge questions.
pub const CHALLENGE_MASTERY: f64 = 0.8;

#[derive(Debug, Error)]
pub enum TutorError {
    #[error("session {0} is closed")]
    SessionClosed(String),
    #[error("invalid turn: {0}")]
    InvalidTurn(String),
    #[error("question {0} was never posed in this session")]
    UnknownQuestion(String),
    #[error("question {0} is already answered")]
    AlreadyAnswered(String),
    #[error("session reached its limit of {0} turns")]
    TurnLimit(usize),
    #[error("malformed generation: {0}")]
    Malformed(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Forgetting(#[from] ForgettingError),
    #[error(transparent)]
    Extraction(#[from] ExtractionError),
}

impl From<ModelError> for TutorError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::SessionClosed(id) => TutorError::SessionClosed(id),
            other => TutorError::InvalidTurn(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DifficultyTag {
    Review,
    Standard,
    Challenge,
}

impl DifficultyTag {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "review" => Some(Self::Review),
            "standard" => Some(Self::Standard),
            "challenge" => Some(Self::Challenge),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bucket {
    Intact,
    #[serde(rename = "partially forgotten")]
    PartiallyForgotten,
    #[serde(rename = "likely forgotten")]
    LikelyForgotten,
}

impl Bucket {
    pub fn of(forgetting: f64) -> Self {
        if forgetting < INTACT_BELOW {
            Bucket::Intact
        } else if forgetting <= FORGOTTEN_ABOVE {
            Bucket::PartiallyForgotten
        } else {
            Bucket::LikelyForgotten
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Bucket::Intact => "intact",
            Bucket::PartiallyForgotten => "partially forgotten",
            Bucket::LikelyForgotten => "likely forgotten",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptScore {
    pub concept: ConceptId,
    pub mastery: f64,
    /// `None` when the concept was never practiced.
    pub elapsed_days: Option<f64>,
    pub forgetting: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewrittenEntry {
    /// The bank entry this came from; vectors are left behind in the bank.
    pub entry_id: String,
    pub source: BankSource,
    pub rewritten_text: String,
    pub scores: Vec<ConceptScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NextQuestion {
    pub text: String,
    pub question_ref: String,
    pub concepts: BTreeSet<ConceptId>,
    pub difficulty_tag: DifficultyTag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TutorTurnOutput {
    pub explanation: String,
    pub next_question: NextQuestion,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewriteMode {
    Llm,
    Deterministic,
}

/// Which parts of the pipeline run. `NoRewrite` keeps retrieval but hands
/// the generator raw entries and no time signal; `Vanilla` conditions on
/// raw recent history only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PipelineMode {
    Tasa,
    NoRewrite,
    Vanilla,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TutorConfig {
    pub retrieval: RetrievalConfig,
    pub forgetting: ForgettingConfig,
    pub rewrite_mode: RewriteMode,
    pub mode: PipelineMode,
    /// Maximum turns per session, student and tutor combined.
    pub session_turn_limit: usize,
    /// Concepts tagged from free text need at least this label cosine.
    pub tag_threshold: f64,
    pub tag_max: usize,
    /// Raw records shown to the vanilla pipeline.
    pub history_window: usize,
}

impl Default for TutorConfig {
    fn default() -> Self {
        Self {
            retrieval: RetrievalConfig::default(),
            forgetting: ForgettingConfig::default(),
            rewrite_mode: RewriteMode::Deterministic,
            mode: PipelineMode::Tasa,
            session_turn_limit: 20,
            tag_threshold: 0.3,
            tag_max: 2,
            history_window: 20,
        }
    }
}

/// Persona and memory banks of one student.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileBanks {
    pub persona: VectorBank,
    pub memory: VectorBank,
}

impl ProfileBanks {
    pub fn empty(encoder_version: &str) -> Self {
        Self { persona: VectorBank::empty(BankKind::Persona, encoder_version), memory: VectorBank::empty(BankKind::Memory, encoder_version) }
    }
}

/// What the generator saw for one turn; served alongside the turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnEvidence {
    pub query_concepts: BTreeSet<ConceptId>,
    pub persona: Vec<RewrittenEntry>,
    pub memory: Vec<RewrittenEntry>,
    pub forgetting: Vec<ForgettingRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TurnResult {
    pub session: SessionState,
    pub output: TutorTurnOutput,
    pub evidence: TurnEvidence,
}

pub struct GenerationInput<'a> {
    /// Session including the new student turn.
    pub session: &'a SessionState,
    pub persona: &'a [RewrittenEntry],
    pub memory: &'a [RewrittenEntry],
    pub query_concepts: &'a BTreeSet<ConceptId>,
    /// Every concept the student raised this session.
    pub session_concepts: &'a BTreeSet<ConceptId>,
    pub report: &'a ForgettingReport,
    pub taxonomy: &'a Taxonomy,
    pub mode: PipelineMode,
    pub recent_history: &'a [InteractionRecord],
}

impl GenerationInput<'_> {
    fn need(&self, concept: &ConceptId) -> f64 {
        match (self.mode, self.report.get(concept)) {
            (PipelineMode::Tasa, Some(s)) => s.value,
            (_, Some(s)) => 1.0 - s.mastery,
            (_, None) => 0.5,
        }
    }

    fn candidate_concepts(&self) -> BTreeSet<ConceptId> {
        let mut c: BTreeSet<ConceptId> = self.session_concepts.union(self.query_concepts).cloned().collect();
        if c.is_empty() {
            c = self.taxonomy.concepts().iter().map(|c| c.id.clone()).collect();
        }
        c
    }

    fn times_posed(&self, concept: &ConceptId) -> usize {
        self.session.turns.iter().filter(|t| t.role == Role::Tutor && t.concepts.contains(concept)).count()
    }

    fn next_question_ref(&self) -> String {
        let n = self.session.turns.iter().filter(|t| t.role == Role::Tutor).count() + 1;
        format!("{}-q{n}", self.session.session_id)
    }

    fn last_student(&self) -> Option<&SessionTurn> {
        self.session.turns.iter().rev().find(|t| t.role == Role::Student)
    }

    fn posed_refs(&self) -> BTreeSet<&str> {
        self.session.turns.iter().filter(|t| t.role == Role::Tutor).filter_map(|t| t.question_ref.as_deref()).collect()
    }
}

pub trait TurnGenerator: Send + Sync {
    fn generate(&self, input: &GenerationInput<'_>, gateway: Option<&Gateway>) -> Result<TutorTurnOutput, TutorError>;
}

/// Difficulty the policy requires for the query concepts.
pub fn required_difficulty(query_concepts: &BTreeSet<ConceptId>, report: &ForgettingReport) -> DifficultyTag {
    let scores: Vec<_> = query_concepts.iter().filter_map(|c| report.get(c)).collect();
    if scores.is_empty() {
        return DifficultyTag::Standard;
    }
    if scores.iter().any(|s| s.value > FORGOTTEN_ABOVE) {
        DifficultyTag::Review
    } else if scores.iter().all(|s| s.mastery > CHALLENGE_MASTERY && s.value < INTACT_BELOW) {
        DifficultyTag::Challenge
    } else {
        DifficultyTag::Standard
    }
}

fn explanation_for(input: &GenerationInput<'_>) -> String {
    match input.last_student() {
        Some(t) if t.is_answer() => {
            let verdict = if t.correctness == Some(true) { "Correct" } else { "Not quite" };
            let labels: Vec<String> = t.concepts.iter().map(|c| input.taxonomy.display(c)).collect();
            if labels.is_empty() {
                format!("{verdict}.")
            } else {
                format!("{verdict}. That question was about {}.", labels.join(" and "))
            }
        }
        _ => "Let's get started.".to_string(),
    }
}

fn pick_item<'p>(items: &[&'p QuestionPoolItem], tag: DifficultyTag) -> Option<&'p QuestionPoolItem> {
    let key = |q: &QuestionPoolItem| match tag {
        DifficultyTag::Review => q.difficulty,
        DifficultyTag::Challenge => -q.difficulty,
        DifficultyTag::Standard => (q.difficulty - 0.5).abs(),
    };
    items
        .iter()
        .copied()
        .min_by(|a, b| key(a).total_cmp(&key(b)).then_with(|| a.question_ref.cmp(&b.question_ref)))
}

fn question_from_pool(
    pool: &[QuestionPoolItem],
    target: &ConceptId,
    tag: DifficultyTag,
    input: &GenerationInput<'_>,
) -> NextQuestion {
    let posed = input.posed_refs();
    let on_target: Vec<&QuestionPoolItem> = pool.iter().filter(|q| q.concepts.contains(target)).collect();
    let fresh: Vec<&QuestionPoolItem> = on_target.iter().copied().filter(|q| !posed.contains(q.question_ref.as_str())).collect();
    match pick_item(if fresh.is_empty() { &on_target } else { &fresh }, tag) {
        Some(item) => NextQuestion {
            text: item.text.clone(),
            question_ref: item.question_ref.clone(),
            concepts: item.concepts.clone(),
            difficulty_tag: tag,
        },
        None => NextQuestion {
            text: format!("Explain the key idea of {} in your own words and work one example.", input.taxonomy.display(target)),
            question_ref: input.next_question_ref(),
            concepts: [target.clone()].into(),
            difficulty_tag: tag,
        },
    }
}

/// Offline generator: targets the least-practiced candidate concept this
/// session, breaking ties by need (forgetting score when forgetting-aware,
/// else one minus mastery), and poses a pool item for it.
pub struct TemplatedGenerator {
    pub pool: Arc<Vec<QuestionPoolItem>>,
}

impl TemplatedGenerator {
    pub fn new(pool: Vec<QuestionPoolItem>) -> Self {
        Self { pool: Arc::new(pool) }
    }

    pub fn target(&self, input: &GenerationInput<'_>) -> ConceptId {
        let candidates = input.candidate_concepts();
        candidates
            .into_iter()
            .min_by(|a, b| {
                input
                    .times_posed(a)
                    .cmp(&input.times_posed(b))
                    .then_with(|| input.need(b).total_cmp(&input.need(a)))
                    .then_with(|| a.cmp(b))
            })
            .expect("candidate set is non-empty")
    }

    fn turn_at(&self, input: &GenerationInput<'_>, tag: DifficultyTag) -> TutorTurnOutput {
        let target = self.target(input);
        let mut explanation = explanation_for(input);
        if input.mode == PipelineMode::Tasa {
            if let Some(s) = input.report.get(&target) {
                let since = if s.never_practiced() {
                    "has not been practiced yet".to_string()
                } else {
                    format!("was last practiced {:.1} days ago", s.elapsed_days)
                };
                explanation.push_str(&format!(
                    " Next, {} ({since}, currently {}).",
                    input.taxonomy.display(&target),
                    Bucket::of(s.value).as_str()
                ));
            }
        }
        TutorTurnOutput { explanation, next_question: question_from_pool(&self.pool, &target, tag, input) }
    }
}

impl TurnGenerator for TemplatedGenerator {
    fn generate(&self, input: &GenerationInput<'_>, _gateway: Option<&Gateway>) -> Result<TutorTurnOutput, TutorError> {
        Ok(self.turn_at(input, required_difficulty(input.query_concepts, input.report)))
    }
}

/// Baseline generator: picks the next concept uniformly over the concepts
/// the student raised, seeded per session and turn.
pub struct VanillaGenerator {
    pub pool: Arc<Vec<QuestionPoolItem>>,
    pub seed: u64,
}

impl VanillaGenerator {
    pub fn new(pool: Vec<QuestionPoolItem>, seed: u64) -> Self {
        Self { pool: Arc::new(pool), seed }
    }
}

pub(crate) fn derive_seed(seed: u64, parts: &[&str]) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for p in parts {
        h.update(p.as_bytes());
        h.update([0]);
    }
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

impl TurnGenerator for VanillaGenerator {
    fn generate(&self, input: &GenerationInput<'_>, _gateway: Option<&Gateway>) -> Result<TutorTurnOutput, TutorError> {
        let candidates: Vec<ConceptId> = input.candidate_concepts().into_iter().collect();
        let turn = input.session.turns.len().to_string();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &[&input.session.session_id, &turn]));
        let target = candidates.choose(&mut rng).expect("candidate set is non-empty").clone();
        let posed = input.posed_refs();
        let items: Vec<&QuestionPoolItem> =
            self.pool.iter().filter(|q| q.concepts.contains(&target) && !posed.contains(q.question_ref.as_str())).collect();
        let next_question = match items.choose(&mut rng) {
            Some(item) => NextQuestion {
                text: item.text.clone(),
                question_ref: item.question_ref.clone(),
                concepts: item.concepts.clone(),
                difficulty_tag: DifficultyTag::Standard,
            },
            None => question_from_pool(&self.pool, &target, DifficultyTag::Standard, input),
        };
        Ok(TutorTurnOutput { explanation: explanation_for(input), next_question })
    }
}

/// Generator backed by the tutor prompt. Unparseable replies get one repair
/// round-trip, then a templated review turn.
pub struct LlmGenerator {
    pub fallback: TemplatedGenerator,
}

impl LlmGenerator {
    pub fn new(pool: Vec<QuestionPoolItem>) -> Self {
        Self { fallback: TemplatedGenerator::new(pool) }
    }
}

fn render_entries(entries: &[RewrittenEntry], empty: &str) -> String {
    if entries.is_empty() {
        return empty.to_string();
    }
    entries.iter().map(|e| format!("- {}", e.rewritten_text)).collect::<Vec<_>>().join("\n")
}

fn render_history(records: &[InteractionRecord], taxonomy: &Taxonomy) -> String {
    if records.is_empty() {
        return "(no prior profile)".to_string();
    }
    records
        .iter()
        .map(|r| {
            let labels: Vec<String> = r.concepts.iter().map(|c| taxonomy.display(c)).collect();
            format!("- {} on {}: {}", r.question_id, labels.join(", "), if r.correct { "correct" } else { "incorrect" })
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn render_dialogue(session: &SessionState) -> String {
    session
        .turns
        .iter()
        .map(|t| match t.role {
            Role::Student => format!("Student: {}", t.text),
            Role::Tutor => format!("Tutor: {}", t.text),
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Parses the tagged-block reply. Unknown concepts are dropped; a question
/// with no known concept is malformed.
pub fn parse_tutor_reply(reply: &str, taxonomy: &Taxonomy) -> Result<(String, String, BTreeSet<ConceptId>, Option<DifficultyTag>), String> {
    let e = reply.find("EXPLANATION:").ok_or("missing EXPLANATION block")?;
    let q = reply.find("NEXT_QUESTION:").ok_or("missing NEXT_QUESTION block")?;
    if q < e {
        return Err("NEXT_QUESTION precedes EXPLANATION".into());
    }
    let explanation = reply[e + "EXPLANATION:".len()..q].trim().to_string();
    let rest = &reply[q + "NEXT_QUESTION:".len()..];
    let mut question = Vec::new();
    let mut concepts = None;
    let mut difficulty = None;
    for line in rest.lines() {
        let trimmed = line.trim();
        if let Some(v) = trimmed.strip_prefix("CONCEPTS:") {
            concepts = Some(v.split(',').filter_map(|k| taxonomy.resolve(k.trim())).collect::<BTreeSet<_>>());
        } else if let Some(v) = trimmed.strip_prefix("DIFFICULTY:") {
            difficulty = DifficultyTag::parse(v);
        } else if concepts.is_none() && difficulty.is_none() {
            question.push(line);
        }
    }
    let question = question.join("\n").trim().to_string();
    if question.is_empty() {
        return Err("empty question".into());
    }
    if explanation.is_empty() {
        return Err("empty explanation".into());
    }
    let concepts = concepts.ok_or("missing CONCEPTS line")?;
    if concepts.is_empty() {
        return Err("no known concept on the CONCEPTS line".into());
    }
    Ok((explanation, question, concepts, difficulty))
}

impl TurnGenerator for LlmGenerator {
    fn generate(&self, input: &GenerationInput<'_>, gateway: Option<&Gateway>) -> Result<TutorTurnOutput, TutorError> {
        let Some(gateway) = gateway else {
            return self.fallback.generate(input, None);
        };
        let (profile, events) = match input.mode {
            PipelineMode::Vanilla => (render_history(input.recent_history, input.taxonomy), "(no prior events)".to_string()),
            _ => (render_entries(input.persona, "(no prior profile)"), render_entries(input.memory, "(no prior events)")),
        };
        let concept_ids: Vec<&str> = input.taxonomy.concepts().iter().map(|c| c.id.as_str()).collect();
        let concept_ids = concept_ids.join(", ");
        let messages = prompts::render_prompt(
            prompts::TUTOR.id,
            [
                ("profile", profile),
                ("events", events),
                ("dialogue", render_dialogue(input.session)),
                ("concept_ids", concept_ids.clone()),
            ],
        )?;
        let reply = gateway.complete(LlmRole::Tutor, messages)?;
        let parsed = match parse_tutor_reply(&reply, input.taxonomy) {
            Ok(p) => Ok(p),
            Err(error) => {
                let repair =
                    prompts::render_prompt(prompts::TUTOR_REPAIR.id, [("error", error), ("reply", reply), ("concept_ids", concept_ids)])?;
                let second = gateway.complete(LlmRole::Tutor, repair)?;
                parse_tutor_reply(&second, input.taxonomy)
            }
        };
        match parsed {
            Ok((explanation, text, concepts, difficulty)) => Ok(TutorTurnOutput {
                explanation,
                next_question: NextQuestion {
                    text,
                    question_ref: input.next_question_ref(),
                    concepts,
                    difficulty_tag: difficulty.unwrap_or(DifficultyTag::Standard),
                },
            }),
            Err(e) => {
                log::warn!("tutor reply unparseable after repair ({e}), using a templated review turn");
                Ok(self.fallback.turn_at(input, DifficultyTag::Review))
            }
        }
    }
}

fn scores_for(entry: &BankEntry, report: &ForgettingReport) -> Vec<ConceptScore> {
    entry
        .source
        .concepts()
        .iter()
        .filter_map(|c| report.get(c))
        .map(|s| ConceptScore {
            concept: s.concept.clone(),
            mastery: s.mastery,
            elapsed_days: s.elapsed_days.is_finite().then_some(s.elapsed_days),
            forgetting: s.value,
        })
        .collect()
}

fn annotation(score: &ConceptScore, label: Option<&str>) -> String {
    let since = match score.elapsed_days {
        Some(d) => format!("last practiced {d:.1} days ago"),
        None => "never practiced".to_string(),
    };
    let head = match label {
        Some(l) => format!("retention update for {l}"),
        None => "retention update".to_string(),
    };
    format!(
        "[{head}: mastery {:.2}, {since}, forgetting {:.2}; treat as {}]",
        score.mastery,
        score.forgetting,
        Bucket::of(score.forgetting).as_str()
    )
}

fn deterministic_rewrite(description: &str, scores: &[ConceptScore], taxonomy: &Taxonomy) -> String {
    let multi = scores.len() > 1;
    let notes: Vec<String> = scores
        .iter()
        .map(|s| annotation(s, multi.then(|| taxonomy.display(&s.concept)).as_deref()))
        .collect();
    if notes.is_empty() {
        description.to_string()
    } else {
        format!("{description} {}", notes.join(" "))
    }
}

fn llm_rewrite(description: &str, scores: &[ConceptScore], taxonomy: &Taxonomy, gateway: &Gateway) -> Result<String, GatewayError> {
    let mut parts = Vec::new();
    for s in scores {
        let elapsed = match s.elapsed_days {
            Some(d) => format!("{d:.1}"),
            None => "never (not yet practiced)".to_string(),
        };
        let messages = prompts::render_prompt(
            prompts::REWRITER.id,
            [
                ("description", description.to_string()),
                ("concept", taxonomy.display(&s.concept)),
                ("mastery", format!("{:.2}", s.mastery)),
                ("elapsed_days", elapsed),
                ("forgetting", format!("{:.2}", s.forgetting)),
            ],
        )?;
        let reply = gateway.complete(LlmRole::Rewriter, messages)?;
        let reply = reply.trim();
        parts.push(if reply.is_empty() { deterministic_rewrite(description, std::slice::from_ref(s), taxonomy) } else { reply.to_string() });
    }
    Ok(parts.join(" "))
}

/// Rewrites one retrieved entry against the forgetting report. Gateway
/// failures fall back to the deterministic annotation.
pub fn rewrite_entry(
    entry: &BankEntry,
    report: &ForgettingReport,
    taxonomy: &Taxonomy,
    gateway: Option<&Gateway>,
    mode: RewriteMode,
) -> RewrittenEntry {
    let scores = scores_for(entry, report);
    let description = entry.source.description();
    let rewritten_text = match (mode, gateway) {
        (RewriteMode::Llm, Some(g)) if !scores.is_empty() => match llm_rewrite(description, &scores, taxonomy, g) {
            Ok(text) => text,
            Err(e) => {
                log::warn!("rewriter call failed ({e}), using deterministic annotation");
                deterministic_rewrite(description, &scores, taxonomy)
            }
        },
        _ => deterministic_rewrite(description, &scores, taxonomy),
    };
    RewrittenEntry { entry_id: entry.entry_id.clone(), source: entry.source.clone(), rewritten_text, scores }
}

/// The tutoring engine: shared, read-only collaborators plus configuration.
#[derive(Clone)]
pub struct Tutor {
    pub taxonomy: Taxonomy,
    pub encoder: Arc<dyn TextEncoder>,
    pub reranker: Arc<dyn Reranker>,
    pub kt: Arc<dyn MasteryModel>,
    pub generator: Arc<dyn TurnGenerator>,
    pub gateway: Option<Gateway>,
    pub config: TutorConfig,
    label_vectors: Arc<Vec<(ConceptId, EmbeddingVector)>>,
}

impl Tutor {
    pub fn new(
        taxonomy: Taxonomy,
        encoder: Arc<dyn TextEncoder>,
        reranker: Arc<dyn Reranker>,
        kt: Arc<dyn MasteryModel>,
        generator: Arc<dyn TurnGenerator>,
        gateway: Option<Gateway>,
        config: TutorConfig,
    ) -> Result<Self, TutorError> {
        config.retrieval.validate()?;
        config.forgetting.validate()?;
        let label_vectors = taxonomy
            .concepts()
            .iter()
            .map(|c| Ok((c.id.clone(), encoder.encode(&c.label)?)))
            .collect::<Result<Vec<_>, crate::embedding::EmbeddingError>>()
            .map_err(RetrievalError::from)?;
        Ok(Self { taxonomy, encoder, reranker, kt, generator, gateway, config, label_vectors: Arc::new(label_vectors) })
    }

    /// Concepts whose label is close to the text, best first.
    pub fn tag_concepts(&self, text: &str) -> Result<Vec<ConceptId>, TutorError> {
        let q = self.encoder.encode(text).map_err(RetrievalError::from)?;
        let mut scored: Vec<(f64, &ConceptId)> = self
            .label_vectors
            .iter()
            .map(|(id, v)| Ok((cosine(&q, v)?, id)))
            .collect::<Result<Vec<_>, crate::embedding::EmbeddingError>>()
            .map_err(RetrievalError::from)?;
        scored.retain(|(s, _)| *s >= self.config.tag_threshold);
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
        Ok(scored.into_iter().take(self.config.tag_max).map(|(_, id)| id.clone()).collect())
    }

    /// Validates the student turn against the session and fills answer
    /// concepts from the posed question.
    fn admit(&self, session: &SessionState, mut turn: SessionTurn) -> Result<(SessionTurn, BTreeSet<ConceptId>), TutorError> {
        if session.closed {
            return Err(TutorError::SessionClosed(session.session_id.clone()));
        }
        if turn.role != Role::Student {
            return Err(TutorError::InvalidTurn("step_session takes a student turn".into()));
        }
        if session.expected_role() != Role::Student {
            return Err(TutorError::InvalidTurn("a tutor turn is pending".into()));
        }
        if session.turns.len() + 2 > self.config.session_turn_limit {
            return Err(TutorError::TurnLimit(self.config.session_turn_limit));
        }
        let floor = session.turns.last().map_or(session.started_at, |t| t.timestamp);
        if turn.timestamp < floor {
            return Err(TutorError::InvalidTurn(format!("timestamp {} precedes {floor}", turn.timestamp)));
        }
        turn.validate()?;
        let tagged = self.tag_concepts(&turn.text)?;
        turn.concepts.retain(|c| self.taxonomy.contains(c));
        if let Some(qref) = turn.question_ref.clone() {
            let posed = session.posed_question(&qref).ok_or_else(|| TutorError::UnknownQuestion(qref.clone()))?;
            if session.is_answered(&qref) {
                return Err(TutorError::AlreadyAnswered(qref));
            }
            turn.concepts = posed.concepts.clone();
        } else {
            turn.concepts.extend(tagged.iter().cloned());
        }
        let mut query: BTreeSet<ConceptId> = turn.concepts.clone();
        query.extend(tagged);
        Ok((turn, query))
    }

    fn retrieve(&self, bank: &VectorBank, query: &str) -> Result<Vec<BankEntry>, TutorError> {
        let candidates = retrieve_topk(bank, query, self.encoder.as_ref(), &self.config.retrieval)?;
        Ok(rerank_or_fallback(candidates, query, self.reranker.as_ref(), &self.config.retrieval).into_iter().map(|s| s.entry).collect())
    }

    /// Runs one turn. On error the caller's session is untouched.
    pub fn step_session(
        &self,
        profile: &StudentProfile,
        banks: &ProfileBanks,
        session: &SessionState,
        student_turn: SessionTurn,
    ) -> Result<TurnResult, TutorError> {
        let (turn, query_concepts) = self.admit(session, student_turn)?;
        let now = turn.timestamp;
        let with_student = session.push_turn(turn.clone())?;
        let session_concepts: BTreeSet<ConceptId> =
            with_student.turns.iter().filter(|t| t.role == Role::Student).flat_map(|t| t.concepts.iter().cloned()).collect();

        let (persona_raw, memory_raw) = if self.config.mode == PipelineMode::Vanilla {
            (Vec::new(), Vec::new())
        } else {
            let query = format!("{} {}", turn.text, keyword_text(&query_concepts, &self.taxonomy));
            (self.retrieve(&banks.persona, &query)?, self.retrieve(&banks.memory, &query)?)
        };

        let mut report_concepts: BTreeSet<ConceptId> = query_concepts.union(&session_concepts).cloned().collect();
        for e in persona_raw.iter().chain(&memory_raw) {
            report_concepts.extend(e.source.concepts().iter().filter(|c| self.taxonomy.contains(c)).cloned());
        }
        let report = forgetting_report(&profile.trajectory, self.kt.as_ref(), &report_concepts, now, &self.config.forgetting)?;

        let rewrite = |e: &BankEntry| match self.config.mode {
            PipelineMode::Tasa => rewrite_entry(e, &report, &self.taxonomy, self.gateway.as_ref(), self.config.rewrite_mode),
            _ => RewrittenEntry {
                entry_id: e.entry_id.clone(),
                source: e.source.clone(),
                rewritten_text: e.source.description().to_string(),
                scores: scores_for(e, &report),
            },
        };
        let persona: Vec<RewrittenEntry> = persona_raw.iter().map(rewrite).collect();
        let memory: Vec<RewrittenEntry> = memory_raw.iter().map(rewrite).collect();

        let records = profile.trajectory.records_until(now);
        let recent = &records[records.len().saturating_sub(self.config.history_window)..];
        let input = GenerationInput {
            session: &with_student,
            persona: &persona,
            memory: &memory,
            query_concepts: &query_concepts,
            session_concepts: &session_concepts,
            report: &report,
            taxonomy: &self.taxonomy,
            mode: self.config.mode,
            recent_history: recent,
        };
        let mut output = self.generator.generate(&input, self.gateway.as_ref())?;
        output.next_question.concepts.retain(|c| self.taxonomy.contains(c));
        if output.next_question.concepts.is_empty() {
            return Err(TutorError::Malformed("next question has no known concept".into()));
        }
        if self.config.mode != PipelineMode::Vanilla {
            output.next_question.difficulty_tag = required_difficulty(&query_concepts, &report);
        }
        if with_student.posed_question(&output.next_question.question_ref).is_some() {
            output.next_question.question_ref = format!("{}#{}", output.next_question.question_ref, with_student.turns.len() + 1);
        }

        let tutor_turn = SessionTurn {
            role: Role::Tutor,
            text: format!("{}\n\n{}", output.explanation, output.next_question.text),
            timestamp: now,
            concepts: output.next_question.concepts.clone(),
            question_ref: Some(output.next_question.question_ref.clone()),
            correctness: None,
        };
        let session = with_student.push_turn(tutor_turn)?;
        let evidence = TurnEvidence { query_concepts, persona, memory, forgetting: report_rows(&report, &self.taxonomy) };
        Ok(TurnResult { session, output, evidence })
    }

    /// Closes the session, merges its answers into the trajectory and
    /// rebuilds persona, memory and banks.
    pub fn end_session(
        &self,
        profile: &StudentProfile,
        session: &SessionState,
        at: Timestamp,
        extraction: &ExtractionConfig,
    ) -> Result<(StudentProfile, SessionState, ProfileBanks), TutorError> {
        let closed = session.close(at)?;
        let trajectory = profile.trajectory.merge_session(&closed)?;
        let mut next = profile.clone();
        next.trajectory = trajectory;
        let banks = self.rebuild_profile(&mut next, extraction)?;
        Ok((next, closed, banks))
    }

    /// Re-extracts persona and memory from the trajectory and builds banks.
    pub fn rebuild_profile(&self, profile: &mut StudentProfile, extraction: &ExtractionConfig) -> Result<ProfileBanks, TutorError> {
        if profile.trajectory.is_empty() {
            profile.persona_entries.clear();
            profile.memory_entries.clear();
        } else {
            let gateway = self.gateway.as_ref();
            profile.persona_entries = extract_persona(&profile.trajectory, &self.taxonomy, gateway, extraction)?;
            profile.memory_entries = extract_memory(&profile.trajectory, &self.taxonomy, gateway, extraction)?;
        }
        let (persona, memory) = build_banks(&profile.persona_entries, &profile.memory_entries, self.encoder.as_ref(), &self.taxonomy)?;
        Ok(ProfileBanks { persona, memory })
    }
}

/// Per-concept counts of how often the tutor posed each concept.
pub fn posed_counts(session: &SessionState) -> BTreeMap<ConceptId, usize> {
    let mut m = BTreeMap::new();
    for t in session.turns.iter().filter(|t| t.role == Role::Tutor) {
        for c in &t.concepts {
            *m.entry(c.clone()).or_insert(0) += 1;
        }
    }
    m
}
