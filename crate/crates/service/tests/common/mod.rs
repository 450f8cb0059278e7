#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use tutor_core::gateway::{ChatProvider, CompletionRequest, FnProvider, Gateway, LlmRole, ProviderConfig, RecordingProvider, Transcript};
use tutor_service::config::{EngineConfig, GatewayMode, GeneratorKind};
use tutor_service::engine::{At, Engine, EndResponse, PostMessage, TurnResponse};

pub const T0: i64 = 1_700_000_000;
pub const SCRIPTED_MODEL: &str = "scripted-tutor";

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join("fixtures")
}

/// Offline config over the fixture taxonomy and pool, storing under `dir`.
pub fn config_in(dir: &Path) -> EngineConfig {
    EngineConfig {
        data_dir: dir.join("data"),
        taxonomy: Some(fixtures().join("taxonomy.json")),
        question_pool: Some(fixtures().join("pool.jsonl")),
        ..EngineConfig::default()
    }
}

/// LLM-generated turns; the tutor route answers from `transcript`.
pub fn replay_config_in(dir: &Path, transcript: &Path) -> EngineConfig {
    let mut c = config_in(dir);
    c.session.generator = GeneratorKind::Llm;
    c.gateway.mode = GatewayMode::Replay;
    c.gateway.transcript = Some(transcript.to_path_buf());
    c.gateway.routes.insert(
        LlmRole::Tutor,
        ProviderConfig {
            endpoint: "http://127.0.0.1:9/v1/chat/completions".into(),
            model: SCRIPTED_MODEL.into(),
            timeout_secs: 5,
            max_retries: 0,
            temperature: None,
            api_key_env: None,
        },
    );
    c
}

/// Stands in for a tutor model: rotates through the taxonomy by turn count
/// and always asks for a challenge, which the engine must override.
pub fn scripted_tutor() -> Arc<dyn ChatProvider> {
    const CONCEPTS: [&str; 4] = ["frac-add", "dec-round", "lin-eq", "ratio"];
    Arc::new(FnProvider::new(|req: &CompletionRequest| {
        let user = req.messages.last().map(|m| m.content.as_str()).unwrap_or("");
        let n = user.matches("Tutor:").count();
        let concept = CONCEPTS[n % CONCEPTS.len()];
        Ok(format!(
            "EXPLANATION:\nTurn {n}: let us look at your last answer step by step.\nNEXT_QUESTION:\nQuestion {n} on {concept}: work the example and show each step.\nCONCEPTS: {concept}\nDIFFICULTY: challenge\n"
        ))
    }))
}

/// Engine whose tutor calls go through the scripted model and are recorded
/// (untimed) to `transcript`.
pub fn recording_engine(dir: &Path, transcript: &Path) -> Engine {
    let mut config = replay_config_in(dir, transcript);
    config.gateway.mode = GatewayMode::Live;
    let handle = Arc::new(Mutex::new(Transcript::default()));
    let provider = Arc::new(RecordingProvider::sharing(scripted_tutor(), handle.clone(), false));
    let gateway = Gateway::new().route(LlmRole::Tutor, provider, SCRIPTED_MODEL, LlmRole::Tutor.default_temperature());
    Engine::with_recording(config, gateway, transcript.to_path_buf(), handle).expect("engine")
}

pub struct SessionRun {
    pub turns: Vec<TurnResponse>,
    pub end: EndResponse,
}

/// Ingests the fixture history, builds ana's profile and plays a full
/// 20-turn session: an opening request, then nine answers.
pub fn play_session(engine: &Engine) -> SessionRun {
    engine.ingest(&fixtures().join("history.csv")).expect("ingest");
    engine.rebuild_profile("ana").expect("rebuild");
    let session = engine.start_session("ana", At { timestamp: Some(T0) }).expect("start");
    let mut turns = Vec::new();
    let opening = PostMessage {
        text: "Can we work on fraction addition and decimal rounding?".into(),
        timestamp: Some(T0 + 10),
        ..PostMessage::default()
    };
    turns.push(engine.post_message(&session.session_id, opening).expect("opening"));
    for i in 0..9 {
        let msg = PostMessage {
            text: format!("My answer to question {}", i + 1),
            correct: Some(i % 3 != 0),
            timestamp: Some(T0 + 60 * (i + 1)),
            ..PostMessage::default()
        };
        turns.push(engine.post_message(&session.session_id, msg).expect("answer"));
    }
    let end = engine.end_session(&session.session_id, At { timestamp: Some(T0 + 700) }).expect("end");
    SessionRun { turns, end }
}

/// Every file under `root`, keyed by relative path.
pub fn snapshot(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        let mut entries: Vec<_> = std::fs::read_dir(dir).expect("read dir").filter_map(Result::ok).collect();
        entries.sort_by_key(|e| e.path());
        for e in entries {
            let path = e.path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).expect("prefix").to_string_lossy().replace('\\', "/");
                out.insert(rel, std::fs::read(&path).expect("read file"));
            }
        }
    }
    let mut out = BTreeMap::new();
    if root.exists() {
        walk(root, root, &mut out);
    }
    out
}
