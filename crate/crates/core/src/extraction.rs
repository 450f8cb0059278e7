//! Persona and memory generation from a trajectory, via LLM prompts or a
//! deterministic rule-based fallback, and construction of the vector banks.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::TextEncoder;
use crate::gateway::{prompts, ChatMessage, Gateway, GatewayError, LlmRole};
use crate::model::{concept_stats, ConceptId, InteractionRecord, MemoryEntry, PersonaEntry, Taxonomy, Timestamp, Trajectory};
use crate::retrieval::{BankKind, BankSource, RetrievalError, VectorBank};

#[derive(Debug, Error)]
pub enum ExtractionError {
    #[error("trajectory is empty")]
    EmptyTrajectory,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error("invalid extraction config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExtractionMode {
    Llm,
    Deterministic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractionConfig {
    pub memory_window: usize,
    pub max_persona_entries: usize,
    pub max_memory_entries: usize,
    pub mode: ExtractionMode,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        Self { memory_window: 100, max_persona_entries: 12, max_memory_entries: 30, mode: ExtractionMode::Deterministic }
    }
}

impl ExtractionConfig {
    pub fn validate(&self) -> Result<(), ExtractionError> {
        if self.memory_window == 0 || self.max_persona_entries == 0 || self.max_memory_entries == 0 {
            return Err(ExtractionError::InvalidConfig("window and caps must be positive".into()));
        }
        Ok(())
    }
}

/// Minimum attempts on a concept before a persona trait is stated.
pub const PERSONA_MIN_ATTEMPTS: u32 = 3;

fn percent(x: f64) -> u32 {
    (x * 100.0).round() as u32
}

fn labels(concepts: &BTreeSet<ConceptId>, taxonomy: &Taxonomy) -> String {
    concepts.iter().map(|c| taxonomy.display(c)).collect::<Vec<_>>().join(" and ")
}

/// Accuracy-tercile traits over concepts with enough attempts, in taxonomy
/// order.
pub fn deterministic_persona(trajectory: &Trajectory, taxonomy: &Taxonomy) -> Vec<PersonaEntry> {
    taxonomy
        .concepts()
        .iter()
        .filter_map(|c| {
            let stats = concept_stats(&trajectory.records, &c.id);
            if stats.attempts < PERSONA_MIN_ATTEMPTS {
                return None;
            }
            let acc = stats.accuracy().unwrap_or(0.0);
            let evidence = format!("(accuracy {}% over {} attempts)", percent(acc), stats.attempts);
            let description = if acc >= 2.0 / 3.0 {
                format!("Student shows strong mastery of {} {evidence}", c.label)
            } else if acc < 1.0 / 3.0 {
                format!("Student struggles with {} {evidence}", c.label)
            } else {
                format!("Student has a partial grasp of {} {evidence}", c.label)
            };
            Some(PersonaEntry { description, concepts: [c.id.clone()].into() })
        })
        .collect()
}

fn window(trajectory: &Trajectory, size: usize) -> &[InteractionRecord] {
    let n = trajectory.records.len();
    &trajectory.records[n.saturating_sub(size)..]
}

/// One entry per incorrect answer in the window, plus one per recovery (a
/// correct answer that ends a run of incorrect answers on a concept).
pub fn deterministic_memory(trajectory: &Trajectory, taxonomy: &Taxonomy, memory_window: usize) -> Vec<MemoryEntry> {
    let mut wrong_run: BTreeMap<ConceptId, u32> = BTreeMap::new();
    let mut out = Vec::new();
    for r in window(trajectory, memory_window) {
        let question = match &r.question_text {
            Some(text) => format!("{} (\"{}\")", r.question_id, text),
            None => r.question_id.clone(),
        };
        if r.correct {
            let recovered: BTreeSet<ConceptId> =
                r.concepts.iter().filter(|c| wrong_run.get(*c).copied().unwrap_or(0) > 0).cloned().collect();
            if !recovered.is_empty() {
                let misses = recovered.iter().map(|c| wrong_run[c]).max().unwrap_or(1);
                out.push(MemoryEntry {
                    timestamp: r.timestamp,
                    description: format!(
                        "Recovered on {}: answered {question} correctly after {misses} incorrect attempt{}",
                        labels(&recovered, taxonomy),
                        if misses == 1 { "" } else { "s" }
                    ),
                    concepts: recovered,
                });
            }
            for c in &r.concepts {
                wrong_run.insert(c.clone(), 0);
            }
        } else {
            out.push(MemoryEntry {
                timestamp: r.timestamp,
                description: format!("Incorrectly answered {question} on {}", labels(&r.concepts, taxonomy)),
                concepts: r.concepts.clone(),
            });
            for c in &r.concepts {
                *wrong_run.entry(c.clone()).or_insert(0) += 1;
            }
        }
    }
    out
}

fn cap_persona(mut entries: Vec<PersonaEntry>, trajectory: &Trajectory, cap: usize) -> Vec<PersonaEntry> {
    if entries.len() <= cap {
        return entries;
    }
    // Keep the best-evidenced traits, preserving their original order.
    let weight = |e: &PersonaEntry| e.concepts.iter().map(|c| trajectory.concept_stats(c).attempts).sum::<u32>();
    let mut order: Vec<usize> = (0..entries.len()).collect();
    order.sort_by(|a, b| weight(&entries[*b]).cmp(&weight(&entries[*a])).then(a.cmp(b)));
    let keep: BTreeSet<usize> = order.into_iter().take(cap).collect();
    let mut i = 0;
    entries.retain(|_| {
        let k = keep.contains(&i);
        i += 1;
        k
    });
    entries
}

fn cap_memory(mut entries: Vec<MemoryEntry>, cap: usize) -> Vec<MemoryEntry> {
    entries.sort_by_key(|e| e.timestamp);
    let n = entries.len();
    entries.split_off(n.saturating_sub(cap))
}

fn serialize_records(records: &[InteractionRecord]) -> String {
    records
        .iter()
        .map(|r| {
            let ids: Vec<&str> = r.concepts.iter().map(ConceptId::as_str).collect();
            let q = match &r.question_text {
                Some(t) => format!("{} {}", r.question_id, t),
                None => r.question_id.clone(),
            };
            format!("{} | {} | {} | {}", r.timestamp, q, ids.join(","), u8::from(r.correct))
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn serialize_taxonomy(taxonomy: &Taxonomy) -> String {
    taxonomy.concepts().iter().map(|c| format!("{}: {}", c.id, c.label)).collect::<Vec<_>>().join("\n")
}

#[derive(Deserialize)]
struct RawEntry {
    #[serde(default)]
    timestamp: Option<Timestamp>,
    description: String,
    #[serde(default)]
    concepts: Vec<String>,
}

fn parse_array(reply: &str) -> Result<Vec<RawEntry>, String> {
    let start = reply.find('[').ok_or("no JSON array found")?;
    let end = reply.rfind(']').ok_or("unterminated JSON array")?;
    if end < start {
        return Err("unterminated JSON array".into());
    }
    serde_json::from_str(&reply[start..=end]).map_err(|e| e.to_string())
}

/// Keeps known concepts (by id or label); `None` when none are known.
fn validate_concepts(raw: &[String], taxonomy: &Taxonomy) -> Option<BTreeSet<ConceptId>> {
    let set: BTreeSet<ConceptId> = raw.iter().filter_map(|k| taxonomy.resolve(k)).collect();
    (!set.is_empty()).then_some(set)
}

/// Calls the generator, with one repair round-trip on unparseable output.
/// `Ok(None)` means the reply stayed unparseable.
fn generate_entries(
    gateway: &Gateway,
    role: LlmRole,
    messages: Vec<ChatMessage>,
) -> Result<Option<Vec<RawEntry>>, GatewayError> {
    let reply = gateway.complete(role, messages)?;
    match parse_array(&reply) {
        Ok(entries) => Ok(Some(entries)),
        Err(err) => {
            let repair = prompts::JSON_REPAIR.render(
                &[("error".to_string(), err), ("reply".to_string(), reply)].into_iter().collect(),
            )?;
            let second = gateway.complete(role, repair)?;
            Ok(parse_array(&second).ok())
        }
    }
}

pub fn extract_persona(
    trajectory: &Trajectory,
    taxonomy: &Taxonomy,
    gateway: Option<&Gateway>,
    config: &ExtractionConfig,
) -> Result<Vec<PersonaEntry>, ExtractionError> {
    if trajectory.is_empty() {
        return Err(ExtractionError::EmptyTrajectory);
    }
    let entries = match (config.mode, gateway) {
        (ExtractionMode::Llm, Some(gateway)) => {
            let messages = prompts::PERSONA_GENERATOR.render(
                &[
                    ("taxonomy".to_string(), serialize_taxonomy(taxonomy)),
                    ("trajectory".to_string(), serialize_records(&trajectory.records)),
                ]
                .into_iter()
                .collect(),
            )?;
            match generate_entries(gateway, LlmRole::PersonaGen, messages)? {
                Some(raw) => raw
                    .into_iter()
                    .filter(|r| !r.description.trim().is_empty())
                    .filter_map(|r| {
                        validate_concepts(&r.concepts, taxonomy)
                            .map(|concepts| PersonaEntry { description: r.description.trim().to_string(), concepts })
                    })
                    .collect(),
                None => {
                    log::warn!("persona generator output unparseable after repair, using deterministic persona");
                    deterministic_persona(trajectory, taxonomy)
                }
            }
        }
        _ => deterministic_persona(trajectory, taxonomy),
    };
    Ok(cap_persona(entries, trajectory, config.max_persona_entries))
}

pub fn extract_memory(
    trajectory: &Trajectory,
    taxonomy: &Taxonomy,
    gateway: Option<&Gateway>,
    config: &ExtractionConfig,
) -> Result<Vec<MemoryEntry>, ExtractionError> {
    if trajectory.is_empty() {
        return Err(ExtractionError::EmptyTrajectory);
    }
    let recent = window(trajectory, config.memory_window);
    let entries = match (config.mode, gateway) {
        (ExtractionMode::Llm, Some(gateway)) => {
            let messages = prompts::MEMORY_GENERATOR.render(
                &[
                    ("taxonomy".to_string(), serialize_taxonomy(taxonomy)),
                    ("trajectory".to_string(), serialize_records(recent)),
                ]
                .into_iter()
                .collect(),
            )?;
            let first = trajectory.first_timestamp().unwrap_or(0);
            let last = trajectory.last_timestamp().unwrap_or(0);
            match generate_entries(gateway, LlmRole::MemoryGen, messages)? {
                Some(raw) => raw
                    .into_iter()
                    .filter(|r| !r.description.trim().is_empty())
                    .filter_map(|r| {
                        let timestamp = r.timestamp.unwrap_or(last);
                        if timestamp < first || timestamp > last {
                            return None;
                        }
                        validate_concepts(&r.concepts, taxonomy).map(|concepts| MemoryEntry {
                            timestamp,
                            description: r.description.trim().to_string(),
                            concepts,
                        })
                    })
                    .collect(),
                None => {
                    log::warn!("memory generator output unparseable after repair, using deterministic memory");
                    deterministic_memory(trajectory, taxonomy, config.memory_window)
                }
            }
        }
        _ => deterministic_memory(trajectory, taxonomy, config.memory_window),
    };
    Ok(cap_memory(entries, config.max_memory_entries))
}

/// Encodes persona and memory entries into their two banks.
pub fn build_banks(
    persona: &[PersonaEntry],
    memory: &[MemoryEntry],
    encoder: &dyn TextEncoder,
    taxonomy: &Taxonomy,
) -> Result<(VectorBank, VectorBank), ExtractionError> {
    let p = VectorBank::build(
        BankKind::Persona,
        persona.iter().cloned().map(BankSource::Persona).collect(),
        encoder,
        taxonomy,
    )?;
    let m = VectorBank::build(BankKind::Memory, memory.iter().cloned().map(BankSource::Memory).collect(), encoder, taxonomy)?;
    Ok((p, m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::HashingEncoder;
    use crate::gateway::{CompletionRequest, FnProvider};
    use std::sync::Arc;

    fn taxonomy() -> Taxonomy {
        Taxonomy::from_pairs([("frac", "fraction addition"), ("geo", "geometry"), ("alg", "algebra")]).unwrap()
    }

    fn traj(rows: &[(&str, bool)]) -> Trajectory {
        let mut t = Trajectory::new("s");
        for (i, (c, ok)) in rows.iter().enumerate() {
            t = t.append_interaction(InteractionRecord::new(format!("Q{i}"), [*c], *ok, 100 + i as i64)).unwrap();
        }
        t
    }

    #[test]
    fn persona_templates() {
        let mut rows = vec![("frac", true); 9];
        rows.push(("frac", false));
        rows.extend([("geo", false), ("geo", false), ("geo", false), ("geo", false), ("geo", true)]);
        rows.extend([("alg", true), ("alg", false)]);
        let p = deterministic_persona(&traj(&rows), &taxonomy());
        assert_eq!(p.len(), 2);
        assert_eq!(p[0].description, "Student shows strong mastery of fraction addition (accuracy 90% over 10 attempts)");
        assert_eq!(p[0].concepts, ["frac".into()].into());
        assert_eq!(p[1].description, "Student struggles with geometry (accuracy 20% over 5 attempts)");
        assert!(deterministic_persona(&Trajectory::new("s"), &taxonomy()).is_empty());
    }

    #[test]
    fn persona_middle_tercile() {
        let p = deterministic_persona(&traj(&[("alg", true), ("alg", false), ("alg", true), ("alg", false)]), &taxonomy());
        assert_eq!(p[0].description, "Student has a partial grasp of algebra (accuracy 50% over 4 attempts)");
    }

    #[test]
    fn memory_error_events() {
        let t = traj(&[("frac", true), ("frac", false), ("geo", true), ("geo", false), ("alg", false), ("alg", false)]);
        let m = deterministic_memory(&t, &taxonomy(), 100);
        assert_eq!(m.len(), 4);
        let errors: Vec<_> = m.iter().filter(|e| e.description.starts_with("Incorrectly")).collect();
        assert_eq!(errors.len(), 4);
        assert_eq!(errors.iter().map(|e| e.timestamp).collect::<Vec<_>>(), [101, 103, 104, 105]);
        assert_eq!(m[0].description, "Incorrectly answered Q1 on fraction addition");
    }

    #[test]
    fn memory_three_errors_and_recovery() {
        let t = traj(&[("frac", false), ("frac", false), ("frac", true), ("geo", false), ("geo", true)]);
        let m = deterministic_memory(&t, &taxonomy(), 100);
        let errors = m.iter().filter(|e| e.description.starts_with("Incorrectly")).count();
        assert_eq!(errors, 3);
        assert_eq!(m[2].description, "Recovered on fraction addition: answered Q2 correctly after 2 incorrect attempts");
        assert_eq!(m[2].timestamp, 102);
    }

    #[test]
    fn memory_all_correct_is_empty() {
        assert!(deterministic_memory(&traj(&[("frac", true); 6]), &taxonomy(), 100).is_empty());
    }

    #[test]
    fn memory_window_and_cap() {
        let rows: Vec<(&str, bool)> = (0..50).map(|i| ("geo", i % 2 == 0)).collect();
        let t = traj(&rows);
        let m = deterministic_memory(&t, &taxonomy(), 10);
        assert!(m.iter().all(|e| e.timestamp >= 140));
        let cfg = ExtractionConfig { max_memory_entries: 3, ..Default::default() };
        let capped = extract_memory(&t, &taxonomy(), None, &cfg).unwrap();
        assert_eq!(capped.len(), 3);
        assert_eq!(capped.last().unwrap().timestamp, 149);
    }

    #[test]
    fn empty_trajectory_rejected() {
        assert!(matches!(
            extract_persona(&Trajectory::new("s"), &taxonomy(), None, &ExtractionConfig::default()),
            Err(ExtractionError::EmptyTrajectory)
        ));
    }

    fn scripted(replies: Vec<&'static str>) -> Gateway {
        let counter = std::sync::atomic::AtomicUsize::new(0);
        let provider = FnProvider::new(move |_: &CompletionRequest| {
            let i = counter.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
            Ok(replies[i.min(replies.len() - 1)].to_string())
        });
        Gateway::uniform(Arc::new(provider), "test")
    }

    #[test]
    fn llm_persona_parsed_and_validated() {
        let g = scripted(vec![
            r#"```json
[{"description": "Student excels at basic arithmetic but struggles with multi-step word problems", "concepts": ["frac", "Geometry"]},
 {"description": "Unknown stuff", "concepts": ["calculus"]}]
```"#,
        ]);
        let cfg = ExtractionConfig { mode: ExtractionMode::Llm, ..Default::default() };
        let p = extract_persona(&traj(&[("frac", true)]), &taxonomy(), Some(&g), &cfg).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].description, "Student excels at basic arithmetic but struggles with multi-step word problems");
        assert_eq!(p[0].concepts, ["frac".into(), "geo".into()].into());
    }

    #[test]
    fn llm_memory_repair_then_fallback() {
        let cfg = ExtractionConfig { mode: ExtractionMode::Llm, ..Default::default() };
        let t = traj(&[("frac", false), ("frac", true)]);
        // first reply broken, repair succeeds
        let g = scripted(vec![
            "not json",
            r#"[{"timestamp": 100, "description": "Incorrectly added 1/4 + 1/4 as 2/8 in Q15", "concepts": ["frac"]},
                {"timestamp": 5, "description": "before history", "concepts": ["frac"]}]"#,
        ]);
        let m = extract_memory(&t, &taxonomy(), Some(&g), &cfg).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(m[0].description, "Incorrectly added 1/4 + 1/4 as 2/8 in Q15");
        assert_eq!(g.calls_made(), 2);
        // both broken -> deterministic
        let g = scripted(vec!["nope", "still nope"]);
        let m = extract_memory(&t, &taxonomy(), Some(&g), &cfg).unwrap();
        assert_eq!(m, deterministic_memory(&t, &taxonomy(), 100));
    }

    #[test]
    fn banks_have_matching_sizes_and_are_deterministic() {
        let persona: Vec<PersonaEntry> = (0..5)
            .map(|i| PersonaEntry { description: format!("trait {i}"), concepts: ["frac".into()].into() })
            .collect();
        let memory: Vec<MemoryEntry> = (0..8)
            .map(|i| MemoryEntry { timestamp: i, description: format!("event {i}"), concepts: ["geo".into()].into() })
            .collect();
        let enc = HashingEncoder::default();
        let (p, m) = build_banks(&persona, &memory, &enc, &taxonomy()).unwrap();
        assert_eq!((p.len(), m.len()), (5, 8));
        let (p2, m2) = build_banks(&persona, &memory, &enc, &taxonomy()).unwrap();
        assert_eq!(p.to_json(), p2.to_json());
        assert_eq!(m.to_json(), m2.to_json());
    }
}
