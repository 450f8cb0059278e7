//! Dataset ingestion. A configurable CSV adapter and the canonical JSONL row
//! format both parse into per-student trajectories. Ingest is the one place
//! records get sorted; everywhere else order is an invariant.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tutor_core::model::{ConceptId, InteractionRecord, RecordRow, Taxonomy, Timestamp, Trajectory};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot read {path}: {message}")]
    UnreadableFile { path: PathBuf, message: String },
    #[error("column mapping: {0}")]
    MappingError(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TimestampFormat {
    EpochSeconds,
    /// RFC 3339, or `YYYY-MM-DD HH:MM:SS` read as UTC.
    #[serde(rename = "iso-8601")]
    Iso8601,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CsvMapping {
    pub student_id: String,
    pub question_id: String,
    pub concept_ids: String,
    pub concept_separator: String,
    pub correct: String,
    pub timestamp: String,
    pub timestamp_format: TimestampFormat,
    /// Optional column with the question wording.
    pub question_text: Option<String>,
}

impl Default for CsvMapping {
    fn default() -> Self {
        Self {
            student_id: "student_id".into(),
            question_id: "question_id".into(),
            concept_ids: "concept_ids".into(),
            concept_separator: ";".into(),
            correct: "correct".into(),
            timestamp: "timestamp".into(),
            timestamp_format: TimestampFormat::EpochSeconds,
            question_text: None,
        }
    }
}

impl CsvMapping {
    pub fn validate(&self) -> Result<(), IngestError> {
        let cols = [&self.student_id, &self.question_id, &self.concept_ids, &self.correct, &self.timestamp];
        if cols.iter().any(|c| c.trim().is_empty()) {
            return Err(IngestError::MappingError("all five columns must be mapped".into()));
        }
        if self.concept_separator.is_empty() {
            return Err(IngestError::MappingError("concept separator is empty".into()));
        }
        Ok(())
    }
}

/// A row that did not make it in. `line` is 1-based and counts the header.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reject {
    pub line: u64,
    pub reason: String,
    pub raw: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub students: usize,
    pub records: usize,
    pub rejects: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parsed {
    /// Sorted records per student, in student-id order.
    pub students: BTreeMap<String, Vec<InteractionRecord>>,
    pub rejects: Vec<Reject>,
}

impl Parsed {
    pub fn summary(&self) -> IngestSummary {
        IngestSummary {
            students: self.students.len(),
            records: self.students.values().map(Vec::len).sum(),
            rejects: self.rejects.len(),
        }
    }
}

pub fn parse_correct(s: &str) -> Result<bool, String> {
    match s.trim().to_ascii_lowercase().as_str() {
        "1" | "true" => Ok(true),
        "0" | "false" => Ok(false),
        other => Err(format!("correct must be 0 or 1, got {other:?}")),
    }
}

pub fn parse_timestamp(s: &str, format: TimestampFormat) -> Result<Timestamp, String> {
    let s = s.trim();
    let t = match format {
        TimestampFormat::EpochSeconds => s.parse::<i64>().map_err(|_| format!("timestamp {s:?} is not integer epoch seconds"))?,
        TimestampFormat::Iso8601 => match chrono::DateTime::parse_from_rfc3339(s) {
            Ok(t) => t.timestamp(),
            Err(_) => chrono::NaiveDateTime::parse_from_str(s, "%Y-%m-%d %H:%M:%S")
                .or_else(|_| chrono::NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S"))
                .map_err(|_| format!("timestamp {s:?} is not ISO-8601"))?
                .and_utc()
                .timestamp(),
        },
    };
    if t < 0 {
        return Err(format!("timestamp {s:?} is before 1970"));
    }
    Ok(t)
}

fn resolve_concepts<'a>(keys: impl Iterator<Item = &'a str>, taxonomy: &Taxonomy) -> Result<BTreeSet<ConceptId>, String> {
    let mut out = BTreeSet::new();
    for k in keys.map(str::trim).filter(|k| !k.is_empty()) {
        out.insert(taxonomy.resolve(k).ok_or_else(|| format!("unknown concept {k:?}"))?);
    }
    if out.is_empty() {
        return Err("no concepts".into());
    }
    Ok(out)
}

fn finish(mut students: BTreeMap<String, Vec<InteractionRecord>>, rejects: Vec<Reject>) -> Parsed {
    for records in students.values_mut() {
        // Stable: ties keep file order.
        records.sort_by_key(|r| r.timestamp);
    }
    Parsed { students, rejects }
}

fn non_empty(field: &str, value: &str) -> Result<String, String> {
    let v = value.trim();
    if v.is_empty() {
        Err(format!("empty {field}"))
    } else {
        Ok(v.to_string())
    }
}

pub fn parse_csv(text: &str, mapping: &CsvMapping, taxonomy: &Taxonomy) -> Result<Parsed, IngestError> {
    mapping.validate()?;
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| IngestError::MappingError(e.to_string()))?.clone();
    let col = |name: &str| {
        headers.iter().position(|h| h.trim() == name).ok_or_else(|| IngestError::MappingError(format!("column {name:?} not in header")))
    };
    let (c_student, c_question, c_concepts, c_correct, c_time) = (
        col(&mapping.student_id)?,
        col(&mapping.question_id)?,
        col(&mapping.concept_ids)?,
        col(&mapping.correct)?,
        col(&mapping.timestamp)?,
    );
    let c_text = mapping.question_text.as_deref().map(col).transpose()?;

    let mut students: BTreeMap<String, Vec<InteractionRecord>> = BTreeMap::new();
    let mut rejects = Vec::new();
    for row in reader.records() {
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line());
                rejects.push(Reject { line, reason: e.to_string(), raw: String::new() });
                continue;
            }
        };
        let line = row.position().map_or(0, |p| p.line());
        let raw = row.iter().collect::<Vec<_>>().join(",");
        let get = |i: usize| row.get(i).unwrap_or("");
        let parsed = (|| -> Result<(String, InteractionRecord), String> {
            let student = non_empty("student id", get(c_student))?;
            if crate::storage::validate_id(&student).is_err() {
                return Err(format!("student id {student:?} has characters outside [A-Za-z0-9._-]"));
            }
            let question = non_empty("question id", get(c_question))?;
            let concepts = resolve_concepts(get(c_concepts).split(mapping.concept_separator.as_str()), taxonomy)?;
            let correct = parse_correct(get(c_correct))?;
            let timestamp = parse_timestamp(get(c_time), mapping.timestamp_format)?;
            let mut record = InteractionRecord { question_id: question, question_text: None, concepts, correct, timestamp };
            if let Some(i) = c_text {
                record.question_text = Some(get(i).trim().to_string()).filter(|t| !t.is_empty());
            }
            Ok((student, record))
        })();
        match parsed {
            Ok((student, record)) => students.entry(student).or_default().push(record),
            Err(reason) => rejects.push(Reject { line, reason, raw }),
        }
    }
    Ok(finish(students, rejects))
}

/// Canonical rows: one `{student_id, question_id, concept_ids, correct,
/// timestamp}` object per line, as written by trajectory export.
pub fn parse_jsonl(text: &str, taxonomy: &Taxonomy) -> Parsed {
    let mut students: BTreeMap<String, Vec<InteractionRecord>> = BTreeMap::new();
    let mut rejects = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let line = i as u64 + 1;
        let parsed = (|| -> Result<(String, InteractionRecord), String> {
            let row: RecordRow = serde_json::from_str(raw).map_err(|e| e.to_string())?;
            if crate::storage::validate_id(&row.student_id).is_err() {
                return Err(format!("student id {:?} has characters outside [A-Za-z0-9._-]", row.student_id));
            }
            let correct = match row.correct {
                0 => false,
                1 => true,
                n => return Err(format!("correct must be 0 or 1, got {n}")),
            };
            if row.timestamp < 0 {
                return Err("negative timestamp".into());
            }
            let concepts = resolve_concepts(row.concept_ids.iter().map(|c| c.as_str()), taxonomy)?;
            let question_id = non_empty("question id", &row.question_id)?;
            Ok((row.student_id, InteractionRecord { question_id, question_text: None, concepts, correct, timestamp: row.timestamp }))
        })();
        match parsed {
            Ok((s, r)) => students.entry(s).or_default().push(r),
            Err(reason) => rejects.push(Reject { line, reason, raw: raw.to_string() }),
        }
    }
    finish(students, rejects)
}

/// Merges ingested records into an existing trajectory. Both are sorted by
/// time; on equal timestamps existing records come first.
pub fn merge_records(existing: &Trajectory, new: Vec<InteractionRecord>) -> Trajectory {
    let mut records = existing.records.clone();
    records.extend(new);
    records.sort_by_key(|r| r.timestamp);
    Trajectory { student_id: existing.student_id.clone(), records, merged_sessions: existing.merged_sessions.clone() }
}

pub fn read_file(path: &Path) -> Result<String, IngestError> {
    std::fs::read_to_string(path).map_err(|e| IngestError::UnreadableFile { path: path.to_path_buf(), message: e.to_string() })
}

pub fn rejects_to_jsonl(rejects: &[Reject]) -> String {
    rejects.iter().map(|r| serde_json::to_string(r).expect("reject serializes") + "\n").collect()
}
