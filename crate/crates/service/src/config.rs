//! Engine configuration, read from a TOML file. Unknown keys are rejected
//! and relative paths resolve against the file's directory.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tutor_core::eval::ExperimentConfig;
use tutor_core::extraction::{ExtractionConfig, ExtractionMode};
use tutor_core::forgetting::ForgettingConfig;
use tutor_core::gateway::{LlmRole, ProviderConfig};
use tutor_core::kt::TrainingConfig;
use tutor_core::retrieval::RetrievalConfig;
use tutor_core::tutoring::{PipelineMode, RewriteMode};

use crate::ingest::CsvMapping;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeneratorKind {
    Templated,
    Llm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionConfig {
    /// Student plus tutor turns per session.
    pub turn_limit: usize,
    pub generator: GeneratorKind,
    pub rewrite_mode: RewriteMode,
    pub pipeline: PipelineMode,
    pub tag_threshold: f64,
    pub tag_max: usize,
    pub history_window: usize,
    /// Seeds the vanilla generator's concept choice.
    pub seed: u64,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            turn_limit: 20,
            generator: GeneratorKind::Templated,
            rewrite_mode: RewriteMode::Deterministic,
            pipeline: PipelineMode::Tasa,
            tag_threshold: 0.3,
            tag_max: 2,
            history_window: 20,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KtKind {
    History,
    Dkt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KtConfig {
    pub model: KtKind,
    /// DKT parameter file; defaults to `<data_dir>/kt/params.json`.
    pub params: Option<PathBuf>,
    pub alpha: f64,
}

impl Default for KtConfig {
    fn default() -> Self {
        Self { model: KtKind::History, params: None, alpha: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GatewayMode {
    /// No model calls: deterministic extraction, templated turns.
    Offline,
    Live,
    /// Live calls, appended to the transcript file.
    Record,
    /// Answers only from the transcript file.
    Replay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewayConfig {
    pub mode: GatewayMode,
    pub transcript: Option<PathBuf>,
    pub budget: Option<usize>,
    pub routes: BTreeMap<LlmRole, ProviderConfig>,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self { mode: GatewayMode::Offline, transcript: None, budget: None, routes: BTreeMap::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub data_dir: PathBuf,
    pub listen: String,
    /// Taxonomy JSON (a list of `{id, label}`); defaults to
    /// `<data_dir>/taxonomy.json`.
    pub taxonomy: Option<PathBuf>,
    /// Question pool JSONL used for templated questions.
    pub question_pool: Option<PathBuf>,
    pub retrieval: RetrievalConfig,
    pub forgetting: ForgettingConfig,
    pub extraction: ExtractionConfig,
    pub session: SessionConfig,
    pub kt: KtConfig,
    pub training: TrainingConfig,
    pub gateway: GatewayConfig,
    pub ingest: CsvMapping,
    /// Defaults for `simulate`; command-line flags override.
    pub simulation: ExperimentConfig,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("data"),
            listen: "127.0.0.1:8080".into(),
            taxonomy: None,
            question_pool: None,
            retrieval: RetrievalConfig::default(),
            forgetting: ForgettingConfig::default(),
            extraction: ExtractionConfig::default(),
            session: SessionConfig::default(),
            kt: KtConfig::default(),
            training: TrainingConfig::default(),
            gateway: GatewayConfig::default(),
            ingest: CsvMapping::default(),
            simulation: ExperimentConfig::default(),
        }
    }
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl EngineConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    /// Reads, resolves and validates a config file.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        let mut config = Self::parse(&text)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        config.resolve_paths(&base);
        config.validate()?;
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        resolve(base, &mut self.data_dir);
        for p in [&mut self.taxonomy, &mut self.question_pool, &mut self.kt.params, &mut self.gateway.transcript].into_iter().flatten() {
            resolve(base, p);
        }
    }

    pub fn taxonomy_path(&self) -> PathBuf {
        self.taxonomy.clone().unwrap_or_else(|| self.data_dir.join("taxonomy.json"))
    }

    pub fn kt_params_path(&self) -> PathBuf {
        self.kt.params.clone().unwrap_or_else(|| self.data_dir.join("kt").join("params.json"))
    }

    /// Roles the configured pipeline will call.
    pub fn roles_in_use(&self) -> Vec<LlmRole> {
        let mut roles = Vec::new();
        if self.extraction.mode == ExtractionMode::Llm {
            roles.extend([LlmRole::PersonaGen, LlmRole::MemoryGen]);
        }
        if self.session.rewrite_mode == RewriteMode::Llm {
            roles.push(LlmRole::Rewriter);
        }
        if self.session.generator == GeneratorKind::Llm {
            roles.push(LlmRole::Tutor);
        }
        roles
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.listen.parse::<SocketAddr>().map_err(|e| ConfigError::Invalid(format!("listen address {:?}: {e}", self.listen)))?;
        self.retrieval.validate().map_err(|e| invalid(&e))?;
        self.forgetting.validate().map_err(|e| invalid(&e))?;
        self.extraction.validate().map_err(|e| invalid(&e))?;
        self.ingest.validate().map_err(|e| invalid(&e))?;
        if self.session.turn_limit < 2 || self.session.turn_limit % 2 != 0 {
            return Err(ConfigError::Invalid("session.turn_limit must be a positive even number".into()));
        }
        if self.session.tag_max == 0 || !(0.0..=1.0).contains(&self.session.tag_threshold) {
            return Err(ConfigError::Invalid("session.tag_threshold must lie in [0, 1] and tag_max be positive".into()));
        }
        if !(self.kt.alpha > 0.0) {
            return Err(ConfigError::Invalid("kt.alpha must be positive".into()));
        }
        self.simulation.validate().map_err(|e| invalid(&e))?;
        for route in self.gateway.routes.values() {
            route.validate().map_err(|e| invalid(&e))?;
        }
        match self.gateway.mode {
            GatewayMode::Offline => {
                if !self.roles_in_use().is_empty() {
                    return Err(ConfigError::Invalid("LLM extraction, rewriting or generation needs a gateway mode other than offline".into()));
                }
            }
            mode => {
                if matches!(mode, GatewayMode::Record | GatewayMode::Replay) && self.gateway.transcript.is_none() {
                    return Err(ConfigError::Invalid("record and replay modes need gateway.transcript".into()));
                }
                if let Some(role) = self.roles_in_use().into_iter().find(|r| !self.gateway.routes.contains_key(r)) {
                    return Err(ConfigError::Invalid(format!("no gateway route for role {role}")));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        EngineConfig::default().validate().unwrap();
        let c = EngineConfig::parse("").unwrap();
        assert_eq!(c, EngineConfig::default());
    }

    #[test]
    fn partial_sections_and_routes() {
        let c = EngineConfig::parse(
            r#"
data_dir = "store"
[retrieval]
lambda = 0.7
[session]
generator = "llm"
[gateway]
mode = "replay"
transcript = "t.jsonl"
[gateway.routes.tutor]
endpoint = "http://localhost:1/v1/chat/completions"
model = "m"
"#,
        )
        .unwrap();
        assert_eq!(c.retrieval.lambda, 0.7);
        assert_eq!(c.retrieval.top_k, 10);
        assert_eq!(c.gateway.routes[&LlmRole::Tutor].timeout_secs, 60);
        c.validate().unwrap();
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(EngineConfig::parse("colour = 3").is_err());
        assert!(EngineConfig::parse("[retrieval]\nlamda = 0.2").is_err());
    }

    #[test]
    fn semantic_errors() {
        let mut c = EngineConfig::default();
        c.session.generator = GeneratorKind::Llm;
        assert!(c.validate().is_err());
        c.gateway.mode = GatewayMode::Live;
        assert!(matches!(c.validate(), Err(ConfigError::Invalid(m)) if m.contains("tutor")));
        let mut c = EngineConfig::default();
        c.retrieval.lambda = 2.0;
        assert!(c.validate().is_err());
        let mut c = EngineConfig::default();
        c.listen = "nowhere".into();
        assert!(c.validate().is_err());
    }
}
