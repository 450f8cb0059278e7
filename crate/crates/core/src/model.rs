//! Domain types shared by every part of the engine: concepts, interaction
//! trajectories, persona/memory entries, dialogue sessions and profiles.
//!
//! Values are treated as immutable snapshots. Operations that "modify" a
//! trajectory or session return a new value and leave the input untouched.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub type Timestamp = i64;

pub const SECONDS_PER_DAY: f64 = 86_400.0;

/// Converts a span in seconds to fractional days.
pub fn seconds_to_days(seconds: i64) -> f64 {
    seconds as f64 / SECONDS_PER_DAY
}

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("record timestamp {got} precedes last trajectory timestamp {last}")]
    OutOfOrderTimestamp { last: Timestamp, got: Timestamp },
    #[error("session {0} is still open")]
    SessionOpen(String),
    #[error("session {0} was already merged into the trajectory")]
    DuplicateMerge(String),
    #[error("session {0} is closed")]
    SessionClosed(String),
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("invalid session turn: {0}")]
    InvalidTurn(String),
    #[error("invalid taxonomy: {0}")]
    InvalidTaxonomy(String),
}

/// Opaque knowledge-concept identifier.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConceptId(pub String);

impl ConceptId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ConceptId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ConceptId {
    fn from(s: &str) -> Self {
        Self(s.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Concept {
    pub id: ConceptId,
    pub label: String,
}

/// The predefined skill taxonomy. Concept order is significant: it fixes the
/// one-hot layout of the recurrent tracing model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Concept>", into = "Vec<Concept>")]
pub struct Taxonomy {
    concepts: Vec<Concept>,
    #[serde(skip)]
    index: HashMap<ConceptId, usize>,
}

impl TryFrom<Vec<Concept>> for Taxonomy {
    type Error = ModelError;

    fn try_from(concepts: Vec<Concept>) -> Result<Self, Self::Error> {
        Taxonomy::new(concepts)
    }
}

impl From<Taxonomy> for Vec<Concept> {
    fn from(t: Taxonomy) -> Self {
        t.concepts
    }
}

impl Taxonomy {
    pub fn new(concepts: Vec<Concept>) -> Result<Self, ModelError> {
        let mut index = HashMap::with_capacity(concepts.len());
        for (i, c) in concepts.iter().enumerate() {
            if c.id.0.is_empty() {
                return Err(ModelError::InvalidTaxonomy("empty concept id".into()));
            }
            if index.insert(c.id.clone(), i).is_some() {
                return Err(ModelError::InvalidTaxonomy(format!("duplicate concept id {}", c.id)));
            }
        }
        Ok(Self { concepts, index })
    }

    /// Builds a taxonomy from `(id, label)` pairs.
    pub fn from_pairs<I, A, B>(pairs: I) -> Result<Self, ModelError>
    where
        I: IntoIterator<Item = (A, B)>,
        A: Into<String>,
        B: Into<String>,
    {
        Self::new(
            pairs
                .into_iter()
                .map(|(id, label)| Concept { id: ConceptId(id.into()), label: label.into() })
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }

    pub fn concepts(&self) -> &[Concept] {
        &self.concepts
    }

    pub fn index_of(&self, id: &ConceptId) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn contains(&self, id: &ConceptId) -> bool {
        self.index.contains_key(id)
    }

    pub fn label(&self, id: &ConceptId) -> Option<&str> {
        self.index_of(id).map(|i| self.concepts[i].label.as_str())
    }

    /// Label if known, otherwise the raw id.
    pub fn display(&self, id: &ConceptId) -> String {
        self.label(id).map(str::to_string).unwrap_or_else(|| id.0.clone())
    }

    /// Resolves either an id or a (case-insensitive) label to a concept id.
    pub fn resolve(&self, key: &str) -> Option<ConceptId> {
        let key = key.trim();
        if let Some(i) = self.index.get(&ConceptId(key.to_string())) {
            return Some(self.concepts[*i].id.clone());
        }
        self.concepts
            .iter()
            .find(|c| c.label.eq_ignore_ascii_case(key))
            .map(|c| c.id.clone())
    }

    /// Stable digest of the ordered concept ids.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for c in &self.concepts {
            h.update(c.id.0.as_bytes());
            h.update([0u8]);
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// One question-response tuple of the learning trajectory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionRecord {
    pub question_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question_text: Option<String>,
    pub concepts: BTreeSet<ConceptId>,
    pub correct: bool,
    pub timestamp: Timestamp,
}

impl InteractionRecord {
    pub fn new<I, C>(question_id: impl Into<String>, concepts: I, correct: bool, timestamp: Timestamp) -> Self
    where
        I: IntoIterator<Item = C>,
        C: Into<ConceptId>,
    {
        Self {
            question_id: question_id.into(),
            question_text: None,
            concepts: concepts.into_iter().map(Into::into).collect(),
            correct,
            timestamp,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.concepts.is_empty() {
            return Err(ModelError::InvalidRecord(format!("{}: empty concept set", self.question_id)));
        }
        if self.timestamp < 0 {
            return Err(ModelError::InvalidRecord(format!("{}: negative timestamp", self.question_id)));
        }
        Ok(())
    }
}

/// Ordered interaction history of one student.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Trajectory {
    pub student_id: String,
    pub records: Vec<InteractionRecord>,
    /// Ids of sessions already merged, for idempotent merging.
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub merged_sessions: BTreeSet<String>,
}

/// Flat JSONL export row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordRow {
    pub student_id: String,
    pub question_id: String,
    pub concept_ids: Vec<ConceptId>,
    pub correct: u8,
    pub timestamp: Timestamp,
}

impl Trajectory {
    pub fn new(student_id: impl Into<String>) -> Self {
        Self { student_id: student_id.into(), ..Default::default() }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn first_timestamp(&self) -> Option<Timestamp> {
        self.records.first().map(|r| r.timestamp)
    }

    pub fn last_timestamp(&self) -> Option<Timestamp> {
        self.records.last().map(|r| r.timestamp)
    }

    /// Appends a record, rejecting timestamps earlier than the current tail.
    /// Equal timestamps are allowed and keep insertion order.
    pub fn append_interaction(&self, record: InteractionRecord) -> Result<Trajectory, ModelError> {
        let mut next = self.clone();
        next.push(record)?;
        Ok(next)
    }

    fn push(&mut self, record: InteractionRecord) -> Result<(), ModelError> {
        record.validate()?;
        if let Some(last) = self.last_timestamp() {
            if record.timestamp < last {
                return Err(ModelError::OutOfOrderTimestamp { last, got: record.timestamp });
            }
        }
        self.records.push(record);
        Ok(())
    }

    /// Converts the answered questions of a closed session into records and
    /// appends them. Chat-only turns are not converted.
    pub fn merge_session(&self, session: &SessionState) -> Result<Trajectory, ModelError> {
        if !session.closed {
            return Err(ModelError::SessionOpen(session.session_id.clone()));
        }
        if self.merged_sessions.contains(&session.session_id) {
            return Err(ModelError::DuplicateMerge(session.session_id.clone()));
        }
        let mut next = self.clone();
        for record in session.answer_records() {
            next.push(record)?;
        }
        next.merged_sessions.insert(session.session_id.clone());
        Ok(next)
    }

    /// Records visible at `as_of` (inclusive).
    pub fn records_until(&self, as_of: Timestamp) -> &[InteractionRecord] {
        let end = self.records.partition_point(|r| r.timestamp <= as_of);
        &self.records[..end]
    }

    pub fn last_practice_time(&self, concept: &ConceptId) -> Option<Timestamp> {
        self.records.iter().rev().find(|r| r.concepts.contains(concept)).map(|r| r.timestamp)
    }

    pub fn practice_times(&self, concept: &ConceptId) -> Vec<Timestamp> {
        self.records.iter().filter(|r| r.concepts.contains(concept)).map(|r| r.timestamp).collect()
    }

    pub fn concept_stats(&self, concept: &ConceptId) -> ConceptStats {
        concept_stats(&self.records, concept)
    }

    pub fn to_rows(&self) -> Vec<RecordRow> {
        self.records
            .iter()
            .map(|r| RecordRow {
                student_id: self.student_id.clone(),
                question_id: r.question_id.clone(),
                concept_ids: r.concepts.iter().cloned().collect(),
                correct: u8::from(r.correct),
                timestamp: r.timestamp,
            })
            .collect()
    }

    /// JSONL export, one record per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for row in self.to_rows() {
            out.push_str(&serde_json::to_string(&row).expect("row serializes"));
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConceptStats {
    pub attempts: u32,
    pub correct: u32,
}

impl ConceptStats {
    pub fn accuracy(&self) -> Option<f64> {
        (self.attempts > 0).then(|| f64::from(self.correct) / f64::from(self.attempts))
    }
}

pub fn concept_stats(records: &[InteractionRecord], concept: &ConceptId) -> ConceptStats {
    records.iter().filter(|r| r.concepts.contains(concept)).fold(ConceptStats::default(), |mut s, r| {
        s.attempts += 1;
        s.correct += u32::from(r.correct);
        s
    })
}

/// Natural-language proficiency trait.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PersonaEntry {
    pub description: String,
    pub concepts: BTreeSet<ConceptId>,
}

/// Timestamped learning episode.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryEntry {
    pub timestamp: Timestamp,
    pub description: String,
    pub concepts: BTreeSet<ConceptId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Student,
    Tutor,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionTurn {
    pub role: Role,
    pub text: String,
    pub timestamp: Timestamp,
    #[serde(default)]
    pub concepts: BTreeSet<ConceptId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question_ref: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correctness: Option<bool>,
}

impl SessionTurn {
    pub fn student(text: impl Into<String>, timestamp: Timestamp) -> Self {
        Self {
            role: Role::Student,
            text: text.into(),
            timestamp,
            concepts: BTreeSet::new(),
            question_ref: None,
            correctness: None,
        }
    }

    /// A student turn that answers a previously posed question.
    pub fn answer(text: impl Into<String>, timestamp: Timestamp, question_ref: impl Into<String>, correct: bool) -> Self {
        Self {
            question_ref: Some(question_ref.into()),
            correctness: Some(correct),
            ..Self::student(text, timestamp)
        }
    }

    pub fn is_answer(&self) -> bool {
        self.role == Role::Student && self.question_ref.is_some() && self.correctness.is_some()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        match self.role {
            Role::Tutor if self.correctness.is_some() => {
                Err(ModelError::InvalidTurn("tutor turns never carry correctness".into()))
            }
            Role::Student if self.question_ref.is_some() && self.correctness.is_none() => {
                Err(ModelError::InvalidTurn("answer turn without correctness".into()))
            }
            Role::Student if self.correctness.is_some() && self.question_ref.is_none() => {
                Err(ModelError::InvalidTurn("correctness without a question reference".into()))
            }
            _ => Ok(()),
        }
    }
}

/// The live dialogue: alternating student and tutor turns.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionState {
    pub session_id: String,
    pub student_id: String,
    pub turns: Vec<SessionTurn>,
    pub started_at: Timestamp,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ended_at: Option<Timestamp>,
    pub closed: bool,
}

impl SessionState {
    pub fn new(session_id: impl Into<String>, student_id: impl Into<String>, started_at: Timestamp) -> Self {
        Self {
            session_id: session_id.into(),
            student_id: student_id.into(),
            turns: Vec::new(),
            started_at,
            ended_at: None,
            closed: false,
        }
    }

    /// Number of student turns.
    pub fn student_turns(&self) -> usize {
        self.turns.iter().filter(|t| t.role == Role::Student).count()
    }

    pub fn expected_role(&self) -> Role {
        match self.turns.last() {
            None | Some(SessionTurn { role: Role::Tutor, .. }) => Role::Student,
            Some(_) => Role::Tutor,
        }
    }

    /// Appends a turn, enforcing alternation starting with the student.
    pub fn push_turn(&self, turn: SessionTurn) -> Result<SessionState, ModelError> {
        if self.closed {
            return Err(ModelError::SessionClosed(self.session_id.clone()));
        }
        turn.validate()?;
        if turn.role != self.expected_role() {
            return Err(ModelError::InvalidTurn(format!(
                "expected a {:?} turn, got {:?}",
                self.expected_role(),
                turn.role
            )));
        }
        let mut next = self.clone();
        next.turns.push(turn);
        Ok(next)
    }

    pub fn close(&self, at: Timestamp) -> Result<SessionState, ModelError> {
        if self.closed {
            return Err(ModelError::SessionClosed(self.session_id.clone()));
        }
        let mut next = self.clone();
        next.closed = true;
        next.ended_at = Some(at);
        Ok(next)
    }

    /// Tutor turn that posed `question_ref`, if any.
    pub fn posed_question(&self, question_ref: &str) -> Option<&SessionTurn> {
        self.turns
            .iter()
            .find(|t| t.role == Role::Tutor && t.question_ref.as_deref() == Some(question_ref))
    }

    pub fn is_answered(&self, question_ref: &str) -> bool {
        self.turns
            .iter()
            .any(|t| t.role == Role::Student && t.question_ref.as_deref() == Some(question_ref))
    }

    /// The most recent question posed by the tutor.
    pub fn pending_question(&self) -> Option<&SessionTurn> {
        self.turns
            .iter()
            .rev()
            .find(|t| t.role == Role::Tutor && t.question_ref.is_some())
            .filter(|t| !self.is_answered(t.question_ref.as_deref().unwrap_or_default()))
    }

    /// Interaction records for every answered question, in turn order.
    pub fn answer_records(&self) -> Vec<InteractionRecord> {
        self.turns
            .iter()
            .filter(|t| t.is_answer() && !t.concepts.is_empty())
            .map(|t| {
                let qref = t.question_ref.clone().unwrap_or_default();
                let question_text = self.posed_question(&qref).map(|q| q.text.clone());
                InteractionRecord {
                    question_id: qref,
                    question_text,
                    concepts: t.concepts.clone(),
                    correct: t.correctness.unwrap_or(false),
                    timestamp: t.timestamp,
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentProfile {
    pub student_id: String,
    pub trajectory: Trajectory,
    #[serde(default)]
    pub persona_entries: Vec<PersonaEntry>,
    #[serde(default)]
    pub memory_entries: Vec<MemoryEntry>,
    pub kt_model_ref: String,
}

impl StudentProfile {
    pub fn new(student_id: impl Into<String>, kt_model_ref: impl Into<String>) -> Self {
        let student_id = student_id.into();
        Self {
            trajectory: Trajectory::new(student_id.clone()),
            student_id,
            persona_entries: Vec::new(),
            memory_entries: Vec::new(),
            kt_model_ref: kt_model_ref.into(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(t: Timestamp, concepts: &[&str], correct: bool) -> InteractionRecord {
        InteractionRecord::new(format!("q{t}"), concepts.iter().copied(), correct, t)
    }

    #[test]
    fn append_to_empty() {
        let t = Trajectory::new("s").append_interaction(rec(100, &["c"], true)).unwrap();
        assert_eq!(t.len(), 1);
    }

    #[test]
    fn append_allows_ties() {
        let t = Trajectory::new("s").append_interaction(rec(100, &["c"], true)).unwrap();
        let t = t.append_interaction(rec(100, &["c"], false)).unwrap();
        assert_eq!(t.len(), 2);
        assert!(!t.records[1].correct);
    }

    #[test]
    fn append_rejects_out_of_order() {
        let t = Trajectory::new("s").append_interaction(rec(100, &["c"], true)).unwrap();
        assert_eq!(
            t.append_interaction(rec(50, &["c"], true)),
            Err(ModelError::OutOfOrderTimestamp { last: 100, got: 50 })
        );
    }

    #[test]
    fn append_rejects_empty_concepts() {
        let r = InteractionRecord::new("q", Vec::<&str>::new(), true, 1);
        assert!(matches!(Trajectory::new("s").append_interaction(r), Err(ModelError::InvalidRecord(_))));
    }

    #[test]
    fn last_practice() {
        let mut t = Trajectory::new("s");
        assert_eq!(t.last_practice_time(&"c".into()), None);
        t = t.append_interaction(rec(5, &["c1", "c2"], true)).unwrap();
        t = t.append_interaction(rec(10, &["c"], true)).unwrap();
        t = t.append_interaction(rec(20, &["c"], false)).unwrap();
        assert_eq!(t.last_practice_time(&"c".into()), Some(20));
        assert_eq!(t.last_practice_time(&"c2".into()), Some(5));
    }

    #[test]
    fn stats() {
        let mut t = Trajectory::new("s");
        assert_eq!(t.concept_stats(&"c".into()), ConceptStats { attempts: 0, correct: 0 });
        for (i, ok) in [true, true, false, true].into_iter().enumerate() {
            t = t.append_interaction(rec(i as i64, &["c"], ok)).unwrap();
        }
        t = t.append_interaction(rec(9, &["other"], true)).unwrap();
        assert_eq!(t.concept_stats(&"c".into()), ConceptStats { attempts: 4, correct: 3 });
        assert_eq!(t.concept_stats(&"zzz".into()), ConceptStats::default());
    }

    fn session_with_answers(n: usize) -> SessionState {
        let mut s = SessionState::new("sess", "s", 1000);
        let mut ts = 1000;
        s = s.push_turn(SessionTurn::student("hello, help with fractions", ts)).unwrap();
        for i in 0..n {
            let mut tutor = SessionTurn {
                role: Role::Tutor,
                text: format!("question {i}"),
                timestamp: ts,
                concepts: ["c".into()].into(),
                question_ref: Some(format!("q{i}")),
                correctness: None,
            };
            tutor.concepts.insert("c".into());
            s = s.push_turn(tutor).unwrap();
            ts += 10;
            let mut ans = SessionTurn::answer("my answer", ts, format!("q{i}"), i % 2 == 0);
            ans.concepts.insert("c".into());
            s = s.push_turn(ans).unwrap();
        }
        s
    }

    #[test]
    fn merge_counts_answers() {
        let s = session_with_answers(10).close(5000).unwrap();
        let t = Trajectory::new("s").merge_session(&s).unwrap();
        assert_eq!(t.len(), 10);
        assert_eq!(t.records[0].question_text.as_deref(), Some("question 0"));
    }

    #[test]
    fn merge_pure_chat_is_noop() {
        let s = SessionState::new("chat", "s", 0)
            .push_turn(SessionTurn::student("what is a fraction?", 0))
            .unwrap()
            .push_turn(SessionTurn {
                role: Role::Tutor,
                text: "a part of a whole".into(),
                timestamp: 1,
                concepts: BTreeSet::new(),
                question_ref: None,
                correctness: None,
            })
            .unwrap()
            .close(2)
            .unwrap();
        let t = Trajectory::new("s").merge_session(&s).unwrap();
        assert!(t.is_empty());
        assert!(t.merged_sessions.contains("chat"));
    }

    #[test]
    fn merge_twice_rejected() {
        let s = session_with_answers(2).close(5000).unwrap();
        let t = Trajectory::new("s").merge_session(&s).unwrap();
        assert_eq!(t.merge_session(&s), Err(ModelError::DuplicateMerge("sess".into())));
    }

    #[test]
    fn merge_open_rejected() {
        let s = session_with_answers(1);
        assert_eq!(Trajectory::new("s").merge_session(&s), Err(ModelError::SessionOpen("sess".into())));
    }

    #[test]
    fn turns_alternate() {
        let s = SessionState::new("x", "s", 0);
        let tutor = SessionTurn { role: Role::Tutor, ..SessionTurn::student("hi", 0) };
        assert!(matches!(s.push_turn(tutor), Err(ModelError::InvalidTurn(_))));
        let s = s.push_turn(SessionTurn::student("hi", 0)).unwrap();
        assert!(s.push_turn(SessionTurn::student("again", 0)).is_err());
    }

    #[test]
    fn tutor_turn_with_correctness_invalid() {
        let t = SessionTurn { role: Role::Tutor, correctness: Some(true), ..SessionTurn::student("x", 0) };
        assert!(t.validate().is_err());
    }

    #[test]
    fn closed_session_immutable() {
        let s = session_with_answers(1).close(10).unwrap();
        assert!(matches!(s.push_turn(SessionTurn::student("x", 20)), Err(ModelError::SessionClosed(_))));
        assert!(s.close(11).is_err());
    }

    #[test]
    fn jsonl_field_names() {
        let t = Trajectory::new("stu").append_interaction(rec(7, &["a", "b"], true)).unwrap();
        let line = t.to_jsonl();
        let v: serde_json::Value = serde_json::from_str(line.trim()).unwrap();
        assert_eq!(v["student_id"], "stu");
        assert_eq!(v["question_id"], "q7");
        assert_eq!(v["concept_ids"], serde_json::json!(["a", "b"]));
        assert_eq!(v["correct"], 1);
        assert_eq!(v["timestamp"], 7);
    }

    #[test]
    fn taxonomy_rejects_duplicates() {
        assert!(Taxonomy::from_pairs([("a", "A"), ("a", "B")]).is_err());
        let t = Taxonomy::from_pairs([("a", "Fraction addition")]).unwrap();
        assert_eq!(t.resolve("fraction ADDITION"), Some("a".into()));
        let json = serde_json::to_string(&t).unwrap();
        let back: Taxonomy = serde_json::from_str(&json).unwrap();
        assert_eq!(back.index_of(&"a".into()), Some(0));
    }
}
