//! File-backed persistence: one directory per student, one file per session.
//! Every write goes to a temporary file in the target directory and is
//! renamed into place, so readers never see a partial file.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tutor_core::model::{SessionState, StudentProfile};
use tutor_core::retrieval::VectorBank;
use tutor_core::tutoring::{ProfileBanks, TurnEvidence, TutorTurnOutput};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{0} not found")]
    NotFound(String),
    #[error("invalid id {0:?}: use letters, digits, '-', '_' or '.'")]
    InvalidId(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Corrupt { path: PathBuf, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.to_path_buf(), source }
}

/// Writes through `fill` into a temp file and renames it over `path`. If
/// `fill` fails the target is untouched and the temp file is removed.
pub fn write_atomic_with(path: &Path, fill: impl FnOnce(&mut File) -> std::io::Result<()>) -> Result<(), StoreError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut tmp = tempfile::Builder::new().prefix(".tmp-").tempfile_in(dir).map_err(io_err(dir))?;
    fill(tmp.as_file_mut()).map_err(io_err(path))?;
    tmp.as_file().sync_all().map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| StoreError::Io { path: path.to_path_buf(), source: e.error })?;
    Ok(())
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    write_atomic_with(path, |f| f.write_all(bytes))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), StoreError> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("value serializes");
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: &Path, what: &str) -> Result<T, StoreError> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(StoreError::NotFound(what.to_string())),
        Err(e) => return Err(StoreError::Io { path: path.to_path_buf(), source: e }),
    };
    serde_json::from_str(&text).map_err(|e| StoreError::Corrupt { path: path.to_path_buf(), message: e.to_string() })
}

pub fn validate_id(id: &str) -> Result<(), StoreError> {
    let ok = !id.is_empty()
        && id.len() <= 128
        && id != "."
        && id != ".."
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if ok {
        Ok(())
    } else {
        Err(StoreError::InvalidId(id.to_string()))
    }
}

/// Output and evidence of one tutor turn, keyed by its index in the session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub turn_index: usize,
    pub output: TutorTurnOutput,
    pub evidence: TurnEvidence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredSession {
    pub session: SessionState,
    #[serde(default)]
    pub tutor_turns: Vec<TurnRecord>,
}

/// Profile and banks as they were when a session opened, for replays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionContext {
    pub profile: StudentProfile,
    pub persona_bank: serde_json::Value,
    pub memory_bank: serde_json::Value,
}

#[derive(Debug, Clone)]
pub struct Store {
    root: PathBuf,
}

impl Store {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn student_dir(&self, id: &str) -> Result<PathBuf, StoreError> {
        validate_id(id)?;
        Ok(self.root.join("students").join(id))
    }

    fn session_path(&self, id: &str, suffix: &str) -> Result<PathBuf, StoreError> {
        validate_id(id)?;
        Ok(self.root.join("sessions").join(format!("{id}{suffix}")))
    }

    pub fn profile_exists(&self, id: &str) -> Result<bool, StoreError> {
        Ok(self.student_dir(id)?.join("profile.json").exists())
    }

    pub fn save_profile(&self, profile: &StudentProfile) -> Result<(), StoreError> {
        write_json(&self.student_dir(&profile.student_id)?.join("profile.json"), profile)
    }

    pub fn load_profile(&self, id: &str) -> Result<StudentProfile, StoreError> {
        read_json(&self.student_dir(id)?.join("profile.json"), &format!("student {id}"))
    }

    pub fn list_students(&self) -> Result<Vec<String>, StoreError> {
        let dir = self.root.join("students");
        let entries = match std::fs::read_dir(&dir) {
            Ok(e) => e,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(StoreError::Io { path: dir, source: e }),
        };
        let mut ids = Vec::new();
        for e in entries {
            let e = e.map_err(io_err(&dir))?;
            if e.path().join("profile.json").exists() {
                ids.push(e.file_name().to_string_lossy().to_string());
            }
        }
        ids.sort();
        Ok(ids)
    }

    pub fn save_banks(&self, student_id: &str, banks: &ProfileBanks) -> Result<(), StoreError> {
        let dir = self.student_dir(student_id)?;
        write_atomic(&dir.join("persona_bank.json"), banks.persona.to_json().as_bytes())?;
        write_atomic(&dir.join("memory_bank.json"), banks.memory.to_json().as_bytes())
    }

    pub fn load_banks(&self, student_id: &str, encoder_version: &str) -> Result<ProfileBanks, StoreError> {
        let dir = self.student_dir(student_id)?;
        let load = |name: &str| -> Result<VectorBank, StoreError> {
            let path = dir.join(name);
            let text = match std::fs::read_to_string(&path) {
                Ok(t) => t,
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                    return Err(StoreError::NotFound(format!("{name} of student {student_id}")))
                }
                Err(e) => return Err(StoreError::Io { path, source: e }),
            };
            VectorBank::from_json(&text, encoder_version).map_err(|e| StoreError::Corrupt { path, message: e.to_string() })
        };
        Ok(ProfileBanks { persona: load("persona_bank.json")?, memory: load("memory_bank.json")? })
    }

    pub fn save_session(&self, stored: &StoredSession) -> Result<(), StoreError> {
        write_json(&self.session_path(&stored.session.session_id, ".json")?, stored)
    }

    pub fn load_session(&self, id: &str) -> Result<StoredSession, StoreError> {
        read_json(&self.session_path(id, ".json")?, &format!("session {id}"))
    }

    pub fn save_session_context(&self, session_id: &str, context: &SessionContext) -> Result<(), StoreError> {
        write_json(&self.session_path(session_id, ".context.json")?, context)
    }

    pub fn load_session_context(&self, session_id: &str) -> Result<SessionContext, StoreError> {
        read_json(&self.session_path(session_id, ".context.json")?, &format!("context of session {session_id}"))
    }

    /// Session ids of one student, in creation order.
    pub fn sessions_of(&self, student_id: &str) -> Result<Vec<String>, StoreError> {
        validate_id(student_id)?;
        let dir = self.root.join("sessions");
        let prefix = format!("{student_id}-s");
        let entries = match std::fs::read_dir(&dir) {
            Ok(e) => e,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(StoreError::Io { path: dir, source: e }),
        };
        let mut ids: Vec<String> = entries
            .filter_map(Result::ok)
            .filter_map(|e| e.file_name().to_str().map(str::to_string))
            .filter_map(|n| n.strip_suffix(".json").map(str::to_string))
            .filter(|n| !n.ends_with(".context"))
            .filter(|n| n.strip_prefix(&prefix).is_some_and(|rest| rest.chars().all(|c| c.is_ascii_digit())))
            .collect();
        ids.sort();
        Ok(ids)
    }

    pub fn kt_dir(&self) -> PathBuf {
        self.root.join("kt")
    }

    pub fn ingest_dir(&self) -> PathBuf {
        self.root.join("ingest")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tutor_core::model::{InteractionRecord, Trajectory};

    #[test]
    fn ids_are_path_safe() {
        assert!(validate_id("stu-01_a.b").is_ok());
        for bad in ["", "..", "a/b", "a\\b", "x y", "."] {
            assert!(validate_id(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn profile_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::new(dir.path());
        let mut p = StudentProfile::new("s1", "history-laplace-a1");
        p.trajectory = Trajectory::new("s1").append_interaction(InteractionRecord::new("q", ["a"], true, 5)).unwrap();
        store.save_profile(&p).unwrap();
        assert_eq!(store.load_profile("s1").unwrap(), p);
        assert_eq!(store.list_students().unwrap(), ["s1"]);
        assert!(matches!(store.load_profile("nobody"), Err(StoreError::NotFound(_))));
        assert!(matches!(store.load_profile("../etc"), Err(StoreError::InvalidId(_))));
    }

    #[test]
    fn failed_write_leaves_old_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.json");
        write_atomic(&path, b"old").unwrap();
        let r = write_atomic_with(&path, |f| {
            f.write_all(b"half")?;
            Err(std::io::Error::other("disk full"))
        });
        assert!(r.is_err());
        assert_eq!(std::fs::read(&path).unwrap(), b"old");
        let leftovers: Vec<_> = std::fs::read_dir(dir.path()).unwrap().filter_map(Result::ok).collect();
        assert_eq!(leftovers.len(), 1);
    }
}
