//! The engine behind both the HTTP API and the CLI: loads configuration,
//! owns the store and the tutor, and serializes writers per student.
//!
//! A session runs against the profile and banks captured when it opened
//! (`sessions/<id>.context.json`). History appended or sessions closed in
//! the meantime take effect from the next session on, and a stored session
//! can always be re-run from its context.

use std::collections::{BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::broadcast;
use tutor_core::embedding::HashingEncoder;
use tutor_core::eval::{load_pool_jsonl, QuestionPoolItem};
use tutor_core::extraction::ExtractionError;
use tutor_core::forgetting::{forgetting_report, report_rows, ForgettingError, ForgettingRow};
use tutor_core::gateway::{ChatProvider, Gateway, GatewayError, HttpProvider, LlmRole, RecordingProvider, ReplayProvider, Transcript};
use tutor_core::kt::{train, DktModel, DktParams, HistoryModel, MasteryModel, TrainError, DKT_MODEL_ID};
use tutor_core::model::{ConceptId, InteractionRecord, ModelError, SessionState, SessionTurn, StudentProfile, Taxonomy, Timestamp};
use tutor_core::retrieval::{JaccardReranker, VectorBank};
use tutor_core::tutoring::{
    LlmGenerator, PipelineMode, ProfileBanks, TemplatedGenerator, TurnEvidence, TurnGenerator, Tutor, TutorConfig, TutorError,
    TutorTurnOutput, VanillaGenerator,
};

use crate::config::{EngineConfig, GatewayMode, GeneratorKind, KtKind};
use crate::ingest::{self, IngestError, IngestSummary};
use crate::storage::{self, SessionContext, Store, StoreError, StoredSession, TurnRecord};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    BadRequest(String),
    /// A model provider failed or had no recorded answer.
    #[error("{0}")]
    Upstream(String),
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Internal(String),
}

impl EngineError {
    pub fn status(&self) -> u16 {
        match self {
            EngineError::NotFound(_) => 404,
            EngineError::Conflict(_) => 409,
            EngineError::BadRequest(_) => 400,
            EngineError::Upstream(_) => 502,
            EngineError::Config(_) | EngineError::Internal(_) => 500,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            EngineError::NotFound(_) => "not_found",
            EngineError::Conflict(_) => "conflict",
            EngineError::BadRequest(_) => "bad_request",
            EngineError::Upstream(_) => "upstream",
            EngineError::Config(_) => "config",
            EngineError::Internal(_) => "internal",
        }
    }
}

impl From<StoreError> for EngineError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::NotFound(_) => EngineError::NotFound(e.to_string()),
            StoreError::InvalidId(_) => EngineError::BadRequest(e.to_string()),
            _ => EngineError::Internal(e.to_string()),
        }
    }
}

impl From<ModelError> for EngineError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::SessionClosed(_) | ModelError::SessionOpen(_) | ModelError::DuplicateMerge(_) => {
                EngineError::Conflict(e.to_string())
            }
            _ => EngineError::BadRequest(e.to_string()),
        }
    }
}

impl From<GatewayError> for EngineError {
    fn from(e: GatewayError) -> Self {
        EngineError::Upstream(e.to_string())
    }
}

impl From<TutorError> for EngineError {
    fn from(e: TutorError) -> Self {
        let msg = e.to_string();
        match e {
            TutorError::SessionClosed(_) | TutorError::AlreadyAnswered(_) | TutorError::TurnLimit(_) => EngineError::Conflict(msg),
            TutorError::InvalidTurn(_) | TutorError::UnknownQuestion(_) => EngineError::BadRequest(msg),
            TutorError::Gateway(_) | TutorError::Malformed(_) | TutorError::Extraction(ExtractionError::Gateway(_)) => {
                EngineError::Upstream(msg)
            }
            TutorError::Forgetting(ForgettingError::Kt(_)) => EngineError::BadRequest(msg),
            _ => EngineError::Internal(msg),
        }
    }
}

impl From<IngestError> for EngineError {
    fn from(e: IngestError) -> Self {
        EngineError::BadRequest(e.to_string())
    }
}

impl From<TrainError> for EngineError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::EmptyDataset | TrainError::InvalidConfig(_) => EngineError::BadRequest(e.to_string()),
            _ => EngineError::Internal(e.to_string()),
        }
    }
}

pub fn now() -> Timestamp {
    chrono::Utc::now().timestamp()
}

/// Pushed to live subscribers after each persisted change.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SessionEvent {
    Turn {
        session_id: String,
        index: usize,
        turn: SessionTurn,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        evidence: Option<TurnEvidence>,
    },
    Closed {
        session_id: String,
        index: usize,
        ended_at: Timestamp,
    },
    /// The server is stopping; streams end.
    Shutdown,
}

impl SessionEvent {
    pub fn session_id(&self) -> Option<&str> {
        match self {
            SessionEvent::Turn { session_id, .. } | SessionEvent::Closed { session_id, .. } => Some(session_id),
            SessionEvent::Shutdown => None,
        }
    }

    pub fn index(&self) -> usize {
        match self {
            SessionEvent::Turn { index, .. } | SessionEvent::Closed { index, .. } => *index,
            SessionEvent::Shutdown => usize::MAX,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SessionEvent::Turn { .. } => "turn",
            SessionEvent::Closed { .. } => "closed",
            SessionEvent::Shutdown => "shutdown",
        }
    }
}

/// Everything a stored session has produced, in order; what a subscriber
/// joining late gets before live events.
pub fn stored_events(stored: &StoredSession) -> Vec<SessionEvent> {
    let id = &stored.session.session_id;
    let mut events: Vec<SessionEvent> = stored
        .session
        .turns
        .iter()
        .enumerate()
        .map(|(index, turn)| SessionEvent::Turn {
            session_id: id.clone(),
            index,
            turn: turn.clone(),
            evidence: stored.tutor_turns.iter().find(|r| r.turn_index == index).map(|r| r.evidence.clone()),
        })
        .collect();
    if let (true, Some(ended_at)) = (stored.session.closed, stored.session.ended_at) {
        events.push(SessionEvent::Closed { session_id: id.clone(), index: stored.session.turns.len(), ended_at });
    }
    events
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateStudent {
    pub student_id: String,
    #[serde(default)]
    pub history: Vec<InteractionRecord>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppendHistory {
    pub records: Vec<InteractionRecord>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct At {
    #[serde(default)]
    pub timestamp: Option<Timestamp>,
}

/// A student message. `correct` marks it as the answer to `question_ref`,
/// or to the pending question when no ref is given.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PostMessage {
    pub text: String,
    #[serde(default)]
    pub question_ref: Option<String>,
    #[serde(default)]
    pub correct: Option<bool>,
    #[serde(default)]
    pub timestamp: Option<Timestamp>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentView {
    pub profile: StudentProfile,
    pub persona_bank_size: usize,
    pub memory_bank_size: usize,
    pub sessions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnResponse {
    pub session_id: String,
    /// Index of the tutor turn; the student turn is the one before it.
    pub turn_index: usize,
    pub student_turn: SessionTurn,
    pub tutor_turn: SessionTurn,
    pub output: TutorTurnOutput,
    pub evidence: TurnEvidence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndResponse {
    pub session: SessionState,
    pub student: StudentView,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub path: PathBuf,
    pub sequences: usize,
    pub epochs: usize,
    pub best_epoch: usize,
    pub final_train_loss: Option<f64>,
    pub final_validation_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub session_id: String,
    pub turns_replayed: usize,
    pub mismatches: Vec<String>,
}

impl ReplayReport {
    pub fn identical(&self) -> bool {
        self.mismatches.is_empty()
    }
}

fn load_taxonomy(path: &Path) -> Result<Taxonomy, EngineError> {
    let text = std::fs::read_to_string(path).map_err(|e| EngineError::Config(format!("taxonomy {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| EngineError::Config(format!("taxonomy {}: {e}", path.display())))
}

fn load_pool(path: Option<&Path>, taxonomy: &Taxonomy) -> Result<Vec<QuestionPoolItem>, EngineError> {
    let Some(path) = path else { return Ok(Vec::new()) };
    let text = std::fs::read_to_string(path).map_err(|e| EngineError::Config(format!("question pool {}: {e}", path.display())))?;
    load_pool_jsonl(&text, taxonomy).map_err(|e| EngineError::Config(format!("question pool {}: {e}", path.display())))
}

fn load_transcript(path: &Path) -> Result<Transcript, EngineError> {
    match std::fs::read_to_string(path) {
        Ok(text) => Transcript::from_jsonl(&text).map_err(|e| EngineError::Config(format!("transcript {}: {e}", path.display()))),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Transcript::default()),
        Err(e) => Err(EngineError::Config(format!("transcript {}: {e}", path.display()))),
    }
}

/// Builds the gateway the config asks for. In record mode the returned
/// handle collects every exchange.
pub fn gateway_from_config(config: &EngineConfig) -> Result<(Option<Gateway>, Option<Arc<Mutex<Transcript>>>), EngineError> {
    let g = &config.gateway;
    let mut gateway = Gateway::new();
    let mut handle = None;
    let replay: Option<Arc<dyn ChatProvider>> = match g.mode {
        GatewayMode::Offline => return Ok((None, None)),
        GatewayMode::Replay => {
            let path = g.transcript.as_deref().ok_or_else(|| EngineError::Config("replay needs gateway.transcript".into()))?;
            if !path.exists() {
                return Err(EngineError::Config(format!("transcript {} does not exist", path.display())));
            }
            Some(Arc::new(ReplayProvider::new(&load_transcript(path)?)))
        }
        GatewayMode::Record => {
            let path = g.transcript.as_deref().ok_or_else(|| EngineError::Config("record needs gateway.transcript".into()))?;
            handle = Some(Arc::new(Mutex::new(load_transcript(path)?)));
            None
        }
        GatewayMode::Live => None,
    };
    for (role, route) in &g.routes {
        let provider: Arc<dyn ChatProvider> = match &replay {
            Some(p) => p.clone(),
            None => {
                let http: Arc<dyn ChatProvider> = Arc::new(HttpProvider::new(route.clone())?);
                match &handle {
                    Some(h) => Arc::new(RecordingProvider::sharing(http, h.clone(), false)),
                    None => http,
                }
            }
        };
        let temperature = route.temperature.unwrap_or_else(|| role.default_temperature());
        gateway = gateway.route(*role, provider, route.model.clone(), temperature);
    }
    if let Some(budget) = g.budget {
        gateway = gateway.with_budget(budget);
    }
    Ok((Some(gateway), handle))
}

fn tutor_config(config: &EngineConfig) -> TutorConfig {
    let s = &config.session;
    TutorConfig {
        retrieval: config.retrieval.clone(),
        forgetting: config.forgetting.clone(),
        rewrite_mode: s.rewrite_mode,
        mode: s.pipeline,
        session_turn_limit: s.turn_limit,
        tag_threshold: s.tag_threshold,
        tag_max: s.tag_max,
        history_window: s.history_window,
    }
}

pub struct Engine {
    config: EngineConfig,
    store: Store,
    tutor: Tutor,
    transcript: Option<(PathBuf, Arc<Mutex<Transcript>>)>,
    locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
    /// Decoded opening contexts of open sessions; they never change.
    contexts: Mutex<HashMap<String, Arc<(StudentProfile, ProfileBanks)>>>,
    events: broadcast::Sender<SessionEvent>,
}

impl Engine {
    /// Builds an engine with the gateway the config describes.
    pub fn open(config: EngineConfig) -> Result<Self, EngineError> {
        config.validate().map_err(|e| EngineError::Config(e.to_string()))?;
        let (gateway, handle) = gateway_from_config(&config)?;
        let transcript = match (handle, &config.gateway.transcript) {
            (Some(h), Some(p)) => Some((p.clone(), h)),
            _ => None,
        };
        Self::build(config, gateway, transcript)
    }

    /// Builds an engine around a caller-supplied gateway, ignoring the
    /// config's gateway section.
    pub fn with_gateway(config: EngineConfig, gateway: Option<Gateway>) -> Result<Self, EngineError> {
        Self::build(config, gateway, None)
    }

    /// Caller-supplied gateway whose exchanges land in `transcript`; the
    /// transcript is written to `path` after every operation.
    pub fn with_recording(config: EngineConfig, gateway: Gateway, path: PathBuf, transcript: Arc<Mutex<Transcript>>) -> Result<Self, EngineError> {
        Self::build(config, Some(gateway), Some((path, transcript)))
    }

    fn build(config: EngineConfig, gateway: Option<Gateway>, transcript: Option<(PathBuf, Arc<Mutex<Transcript>>)>) -> Result<Self, EngineError> {
        let taxonomy = load_taxonomy(&config.taxonomy_path())?;
        let pool = load_pool(config.question_pool.as_deref(), &taxonomy)?;
        let kt: Arc<dyn MasteryModel> = match config.kt.model {
            KtKind::History => Arc::new(HistoryModel::with_alpha(taxonomy.clone(), config.kt.alpha)),
            KtKind::Dkt => {
                let path = config.kt_params_path();
                let text = std::fs::read_to_string(&path)
                    .map_err(|e| EngineError::Config(format!("DKT params {}: {e}; run train-kt first", path.display())))?;
                let (params, _) = DktParams::from_json(&text, &taxonomy.hash()).map_err(|e| EngineError::Config(e.to_string()))?;
                Arc::new(DktModel::new(params, taxonomy.clone()).map_err(|e| EngineError::Config(e.to_string()))?)
            }
        };
        let generator: Arc<dyn TurnGenerator> = match (config.session.generator, config.session.pipeline) {
            (GeneratorKind::Llm, _) => Arc::new(LlmGenerator::new(pool)),
            (GeneratorKind::Templated, PipelineMode::Vanilla) => Arc::new(VanillaGenerator::new(pool, config.session.seed)),
            (GeneratorKind::Templated, _) => Arc::new(TemplatedGenerator::new(pool)),
        };
        let tutor = Tutor::new(
            taxonomy,
            Arc::new(HashingEncoder::default()),
            Arc::new(JaccardReranker),
            kt,
            generator,
            gateway,
            tutor_config(&config),
        )?;
        let store = Store::new(config.data_dir.clone());
        let (events, _) = broadcast::channel(256);
        Ok(Self { config, store, tutor, transcript, locks: Mutex::new(HashMap::new()), contexts: Mutex::new(HashMap::new()), events })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn tutor(&self) -> &Tutor {
        &self.tutor
    }

    pub fn taxonomy(&self) -> &Taxonomy {
        &self.tutor.taxonomy
    }

    fn encoder_version(&self) -> String {
        self.tutor.encoder.version().to_string()
    }

    pub fn subscribe(&self) -> broadcast::Receiver<SessionEvent> {
        self.events.subscribe()
    }

    /// Ends every open event stream.
    pub fn shutdown_streams(&self) {
        let _ = self.events.send(SessionEvent::Shutdown);
    }

    fn lock(&self, student_id: &str) -> Arc<Mutex<()>> {
        self.locks.lock().expect("lock table poisoned").entry(student_id.to_string()).or_default().clone()
    }

    /// Persists the recorded transcript, if recording.
    fn flush_transcript(&self) -> Result<(), EngineError> {
        if let Some((path, handle)) = &self.transcript {
            let text = handle.lock().expect("transcript poisoned").to_jsonl();
            storage::write_atomic(path, text.as_bytes())?;
        }
        Ok(())
    }

    fn view(&self, profile: StudentProfile, banks: &ProfileBanks) -> Result<StudentView, EngineError> {
        let sessions = self.store.sessions_of(&profile.student_id)?;
        Ok(StudentView { persona_bank_size: banks.persona.len(), memory_bank_size: banks.memory.len(), sessions, profile })
    }

    fn banks_or_empty(&self, student_id: &str) -> Result<ProfileBanks, EngineError> {
        match self.store.load_banks(student_id, &self.encoder_version()) {
            Ok(b) => Ok(b),
            Err(StoreError::NotFound(_)) => Ok(ProfileBanks::empty(&self.encoder_version())),
            Err(e) => Err(e.into()),
        }
    }

    fn rebuild_and_save(&self, profile: &mut StudentProfile) -> Result<ProfileBanks, EngineError> {
        let result = self.tutor.rebuild_profile(profile, &self.config.extraction);
        self.flush_transcript()?;
        let banks = result?;
        self.store.save_profile(profile)?;
        self.store.save_banks(&profile.student_id, &banks)?;
        Ok(banks)
    }

    pub fn create_student(&self, req: CreateStudent) -> Result<StudentView, EngineError> {
        storage::validate_id(&req.student_id)?;
        let lock = self.lock(&req.student_id);
        let _guard = lock.lock().expect("student lock poisoned");
        if self.store.profile_exists(&req.student_id)? {
            return Err(EngineError::Conflict(format!("student {} already exists", req.student_id)));
        }
        let mut profile = StudentProfile::new(req.student_id.clone(), self.tutor.kt.model_id());
        for r in req.history {
            profile.trajectory = profile.trajectory.append_interaction(r)?;
        }
        self.check_concepts(profile.trajectory.records.iter())?;
        let banks = self.rebuild_and_save(&mut profile)?;
        self.view(profile, &banks)
    }

    fn check_concepts<'a>(&self, records: impl Iterator<Item = &'a InteractionRecord>) -> Result<(), EngineError> {
        for r in records {
            if let Some(c) = r.concepts.iter().find(|c| !self.taxonomy().contains(c)) {
                return Err(EngineError::BadRequest(format!("record {}: unknown concept {c}", r.question_id)));
            }
        }
        Ok(())
    }

    pub fn get_student(&self, student_id: &str) -> Result<StudentView, EngineError> {
        let profile = self.store.load_profile(student_id)?;
        let banks = self.banks_or_empty(student_id)?;
        self.view(profile, &banks)
    }

    /// Appends records in order. Persona and memory are not re-extracted;
    /// that is what `rebuild_profile` is for.
    pub fn append_history(&self, student_id: &str, req: AppendHistory) -> Result<StudentView, EngineError> {
        let lock = self.lock(student_id);
        let _guard = lock.lock().expect("student lock poisoned");
        let mut profile = self.store.load_profile(student_id)?;
        self.check_concepts(req.records.iter())?;
        for r in req.records {
            profile.trajectory = profile.trajectory.append_interaction(r)?;
        }
        self.store.save_profile(&profile)?;
        let banks = self.banks_or_empty(student_id)?;
        self.view(profile, &banks)
    }

    pub fn rebuild_profile(&self, student_id: &str) -> Result<StudentView, EngineError> {
        let lock = self.lock(student_id);
        let _guard = lock.lock().expect("student lock poisoned");
        let mut profile = self.store.load_profile(student_id)?;
        let banks = self.rebuild_and_save(&mut profile)?;
        self.view(profile, &banks)
    }

    pub fn start_session(&self, student_id: &str, at: At) -> Result<SessionState, EngineError> {
        let lock = self.lock(student_id);
        let _guard = lock.lock().expect("student lock poisoned");
        let profile = self.store.load_profile(student_id)?;
        let banks = self.banks_or_empty(student_id)?;
        let n = self.store.sessions_of(student_id)?.len() + 1;
        let session_id = format!("{student_id}-s{n:03}");
        let session = SessionState::new(session_id.clone(), student_id, at.timestamp.unwrap_or_else(now));
        let context = SessionContext {
            profile,
            persona_bank: serde_json::from_str(&banks.persona.to_json()).expect("bank json"),
            memory_bank: serde_json::from_str(&banks.memory.to_json()).expect("bank json"),
        };
        self.store.save_session_context(&session_id, &context)?;
        self.store.save_session(&StoredSession { session: session.clone(), tutor_turns: Vec::new() })?;
        Ok(session)
    }

    fn context_banks(&self, context: &SessionContext) -> Result<ProfileBanks, EngineError> {
        let version = self.encoder_version();
        let load = |v: &serde_json::Value| {
            VectorBank::from_json(&v.to_string(), &version).map_err(|e| EngineError::Internal(format!("session context bank: {e}")))
        };
        Ok(ProfileBanks { persona: load(&context.persona_bank)?, memory: load(&context.memory_bank)? })
    }

    fn session_context(&self, session_id: &str) -> Result<Arc<(StudentProfile, ProfileBanks)>, EngineError> {
        if let Some(c) = self.contexts.lock().expect("context cache poisoned").get(session_id) {
            return Ok(c.clone());
        }
        let context = self.store.load_session_context(session_id)?;
        let banks = self.context_banks(&context)?;
        let entry = Arc::new((context.profile, banks));
        self.contexts.lock().expect("context cache poisoned").insert(session_id.to_string(), entry.clone());
        Ok(entry)
    }

    fn student_of_session(&self, session_id: &str) -> Result<String, EngineError> {
        Ok(self.store.load_session(session_id)?.session.student_id)
    }

    /// Turns a request into the student turn the tutor expects.
    pub fn student_turn(session: &SessionState, req: &PostMessage) -> Result<SessionTurn, EngineError> {
        if req.text.trim().is_empty() {
            return Err(EngineError::BadRequest("message text is empty".into()));
        }
        let timestamp = req.timestamp.unwrap_or_else(|| now().max(session.turns.last().map_or(session.started_at, |t| t.timestamp)));
        match (&req.question_ref, req.correct) {
            (qref, Some(correct)) => {
                let qref = match qref {
                    Some(q) => q.clone(),
                    None => session
                        .pending_question()
                        .and_then(|t| t.question_ref.clone())
                        .ok_or_else(|| EngineError::BadRequest("no pending question to answer".into()))?,
                };
                Ok(SessionTurn::answer(req.text.clone(), timestamp, qref, correct))
            }
            (Some(_), None) => Err(EngineError::BadRequest("an answer needs `correct`".into())),
            (None, None) => Ok(SessionTurn::student(req.text.clone(), timestamp)),
        }
    }

    pub fn post_message(&self, session_id: &str, req: PostMessage) -> Result<TurnResponse, EngineError> {
        let student_id = self.student_of_session(session_id)?;
        let lock = self.lock(&student_id);
        let _guard = lock.lock().expect("student lock poisoned");
        let mut stored = self.store.load_session(session_id)?;
        if stored.session.closed {
            return Err(EngineError::Conflict(format!("session {session_id} is closed")));
        }
        let turn = Self::student_turn(&stored.session, &req)?;
        let context = self.session_context(session_id)?;
        let (profile, banks) = &*context;
        let result = self.tutor.step_session(profile, banks, &stored.session, turn);
        self.flush_transcript()?;
        let result = result?;

        let turn_index = result.session.turns.len() - 1;
        stored.session = result.session;
        stored.tutor_turns.push(TurnRecord { turn_index, output: result.output.clone(), evidence: result.evidence.clone() });
        self.store.save_session(&stored)?;

        let student_turn = stored.session.turns[turn_index - 1].clone();
        let tutor_turn = stored.session.turns[turn_index].clone();
        let _ = self.events.send(SessionEvent::Turn {
            session_id: session_id.to_string(),
            index: turn_index - 1,
            turn: student_turn.clone(),
            evidence: None,
        });
        let _ = self.events.send(SessionEvent::Turn {
            session_id: session_id.to_string(),
            index: turn_index,
            turn: tutor_turn.clone(),
            evidence: Some(result.evidence.clone()),
        });
        Ok(TurnResponse { session_id: session_id.to_string(), turn_index, student_turn, tutor_turn, output: result.output, evidence: result.evidence })
    }

    /// Closes the session, merges its answers into the current profile and
    /// rebuilds persona, memory and banks.
    pub fn end_session(&self, session_id: &str, at: At) -> Result<EndResponse, EngineError> {
        let student_id = self.student_of_session(session_id)?;
        let lock = self.lock(&student_id);
        let _guard = lock.lock().expect("student lock poisoned");
        let mut stored = self.store.load_session(session_id)?;
        let floor = stored.session.turns.last().map_or(stored.session.started_at, |t| t.timestamp);
        let at = at.timestamp.unwrap_or_else(|| now().max(floor));
        if at < floor {
            return Err(EngineError::BadRequest(format!("end time {at} precedes the last turn at {floor}")));
        }
        let profile = self.store.load_profile(&student_id)?;
        let result = self.tutor.end_session(&profile, &stored.session, at, &self.config.extraction);
        self.flush_transcript()?;
        let (profile, closed, banks) = result?;
        self.store.save_profile(&profile)?;
        self.store.save_banks(&student_id, &banks)?;
        stored.session = closed;
        self.store.save_session(&stored)?;
        self.contexts.lock().expect("context cache poisoned").remove(session_id);
        let _ = self.events.send(SessionEvent::Closed { session_id: session_id.to_string(), index: stored.session.turns.len(), ended_at: at });
        Ok(EndResponse { session: stored.session, student: self.view(profile, &banks)? })
    }

    pub fn get_session(&self, session_id: &str) -> Result<StoredSession, EngineError> {
        Ok(self.store.load_session(session_id)?)
    }

    /// Forgetting rows for `concepts` (ids or labels; all when empty) at `at`.
    pub fn forgetting(&self, student_id: &str, concepts: &[String], at: Option<Timestamp>) -> Result<Vec<ForgettingRow>, EngineError> {
        let profile = self.store.load_profile(student_id)?;
        let ids: BTreeSet<ConceptId> = if concepts.is_empty() {
            self.taxonomy().concepts().iter().map(|c| c.id.clone()).collect()
        } else {
            concepts
                .iter()
                .map(|k| self.taxonomy().resolve(k).ok_or_else(|| EngineError::BadRequest(format!("unknown concept {k:?}"))))
                .collect::<Result<_, _>>()?
        };
        let at = at.unwrap_or_else(now);
        let report = forgetting_report(&profile.trajectory, self.tutor.kt.as_ref(), &ids, at, &self.config.forgetting)
            .map_err(|e| EngineError::BadRequest(e.to_string()))?;
        Ok(report_rows(&report, self.taxonomy()))
    }

    /// Ingests a CSV (or canonical `.jsonl`) file, merging into existing
    /// profiles. Rejected rows go to `<data_dir>/ingest/rejects.jsonl`.
    pub fn ingest(&self, path: &Path) -> Result<IngestSummary, EngineError> {
        let text = ingest::read_file(path)?;
        let parsed = if path.extension().is_some_and(|e| e == "jsonl") {
            ingest::parse_jsonl(&text, self.taxonomy())
        } else {
            ingest::parse_csv(&text, &self.config.ingest, self.taxonomy())?
        };
        for (student_id, records) in &parsed.students {
            let lock = self.lock(student_id);
            let _guard = lock.lock().expect("student lock poisoned");
            let mut profile = match self.store.load_profile(student_id) {
                Ok(p) => p,
                Err(StoreError::NotFound(_)) => StudentProfile::new(student_id.clone(), self.tutor.kt.model_id()),
                Err(e) => return Err(e.into()),
            };
            profile.trajectory = ingest::merge_records(&profile.trajectory, records.clone());
            self.store.save_profile(&profile)?;
        }
        storage::write_atomic(&self.store.ingest_dir().join("rejects.jsonl"), ingest::rejects_to_jsonl(&parsed.rejects).as_bytes())?;
        Ok(parsed.summary())
    }

    /// Trains DKT on every stored trajectory and writes the params file.
    /// Zero epochs writes freshly initialized weights.
    pub fn train_kt(&self, epochs: Option<usize>, seed: Option<u64>) -> Result<TrainSummary, EngineError> {
        let mut cfg = self.config.training.clone();
        if let Some(e) = epochs {
            cfg.epochs = e;
        }
        if let Some(s) = seed {
            cfg.seed = s;
        }
        let taxonomy = self.taxonomy();
        let dataset = self
            .store
            .list_students()?
            .iter()
            .map(|id| Ok(self.store.load_profile(id)?.trajectory))
            .collect::<Result<Vec<_>, EngineError>>()?;
        let sequences = dataset.iter().filter(|t| !t.is_empty()).count();
        let summary_of = |params: DktParams, train_loss: &[f64], val_loss: &[f64], best_epoch| -> Result<TrainSummary, EngineError> {
            let path = self.config.kt_params_path();
            storage::write_atomic(&path, params.to_json(DKT_MODEL_ID).as_bytes())?;
            Ok(TrainSummary {
                path,
                sequences,
                epochs: cfg.epochs,
                best_epoch,
                final_train_loss: train_loss.last().copied(),
                final_validation_loss: val_loss.last().copied(),
            })
        };
        if cfg.epochs == 0 {
            return summary_of(DktParams::init(taxonomy.len(), cfg.hidden_size, cfg.seed, taxonomy.hash()), &[], &[], 0);
        }
        let report = train(&dataset, taxonomy, &cfg)?;
        summary_of(report.params, &report.train_loss, &report.validation_loss, report.best_epoch)
    }

    /// Re-runs a stored session from its opening context and compares every
    /// tutor turn with what was stored. `gateway` overrides the engine's.
    pub fn replay_session(&self, session_id: &str, gateway: Option<Gateway>) -> Result<ReplayReport, EngineError> {
        let stored = self.store.load_session(session_id)?;
        let context = self.store.load_session_context(session_id)?;
        let banks = self.context_banks(&context)?;
        let mut tutor = self.tutor.clone();
        if gateway.is_some() {
            tutor.gateway = gateway;
        }
        let original = &stored.session;
        let mut session = SessionState::new(original.session_id.clone(), original.student_id.clone(), original.started_at);
        let mut mismatches = Vec::new();
        let mut replayed = 0;
        for (i, turn) in original.turns.iter().enumerate().step_by(2) {
            let Some(expected) = original.turns.get(i + 1) else { break };
            let result = match tutor.step_session(&context.profile, &banks, &session, turn.clone()) {
                Ok(r) => r,
                Err(e) => {
                    mismatches.push(format!("turn {}: {e}", i + 1));
                    break;
                }
            };
            replayed += 1;
            if &result.session.turns[i + 1] != expected {
                mismatches.push(format!("turn {}: tutor turn differs", i + 1));
            }
            match stored.tutor_turns.iter().find(|r| r.turn_index == i + 1) {
                Some(r) if r.output == result.output && r.evidence == result.evidence => {}
                Some(_) => mismatches.push(format!("turn {}: output or evidence differs", i + 1)),
                None => mismatches.push(format!("turn {}: no stored output", i + 1)),
            }
            session = result.session;
        }
        Ok(ReplayReport { session_id: session_id.to_string(), turns_replayed: replayed, mismatches })
    }

    /// Gateway for judging, if a judge route is configured.
    pub fn judge_gateway(&self) -> Option<&Gateway> {
        self.tutor.gateway.as_ref().filter(|g| g.is_routed(LlmRole::Judge))
    }
}
