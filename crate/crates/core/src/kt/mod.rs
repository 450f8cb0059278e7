//! Knowledge tracing: per-concept mastery probabilities from an interaction
//! history. Two backbones ship, a smoothed correctness-rate estimator and a
//! recurrent DKT network; both implement [`MasteryModel`].

mod dkt;

pub use dkt::{
    gradient_check, gradient_check_scaled, sequence_from_records, train, DktGradients, DktModel, DktParams,
    Step, TrainError, TrainReport, TrainingConfig, DKT_MODEL_ID,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{concept_stats, ConceptId, InteractionRecord, Taxonomy, Timestamp, Trajectory};

#[derive(Debug, Error, PartialEq)]
pub enum KtError {
    #[error("unknown concept {0}")]
    UnknownConcept(String),
    #[error("params were trained against taxonomy {expected}, active taxonomy is {found}")]
    TaxonomyMismatch { expected: String, found: String },
    #[error("malformed params: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MasteryEstimate {
    pub concept: ConceptId,
    pub value: f64,
    pub as_of: Timestamp,
    pub model_id: String,
}

pub trait MasteryModel: Send + Sync {
    fn model_id(&self) -> &str;
    fn taxonomy(&self) -> &Taxonomy;

    /// Mastery of each concept given the (already time-filtered) records.
    fn masteries(&self, records: &[InteractionRecord], concepts: &[ConceptId]) -> Result<Vec<f64>, KtError>;

    fn mastery(&self, trajectory: &Trajectory, concept: &ConceptId, as_of: Timestamp) -> Result<MasteryEstimate, KtError> {
        let value = self.masteries(trajectory.records_until(as_of), std::slice::from_ref(concept))?[0];
        Ok(MasteryEstimate { concept: concept.clone(), value, as_of, model_id: self.model_id().to_string() })
    }
}

pub(crate) fn check_known(taxonomy: &Taxonomy, concept: &ConceptId) -> Result<usize, KtError> {
    taxonomy.index_of(concept).ok_or_else(|| KtError::UnknownConcept(concept.0.clone()))
}

/// Beta-smoothed correctness rate: `(correct + alpha) / (attempts + 2 alpha)`.
pub fn history_mastery(records: &[InteractionRecord], concept: &ConceptId, alpha: f64) -> f64 {
    assert!(alpha > 0.0, "smoothing alpha must be positive");
    let s = concept_stats(records, concept);
    (f64::from(s.correct) + alpha) / (f64::from(s.attempts) + 2.0 * alpha)
}

#[derive(Debug, Clone)]
pub struct HistoryModel {
    taxonomy: Taxonomy,
    alpha: f64,
    model_id: String,
}

impl HistoryModel {
    pub fn new(taxonomy: Taxonomy) -> Self {
        Self::with_alpha(taxonomy, 1.0)
    }

    pub fn with_alpha(taxonomy: Taxonomy, alpha: f64) -> Self {
        assert!(alpha > 0.0, "smoothing alpha must be positive");
        Self { taxonomy, alpha, model_id: format!("history-laplace-a{alpha}") }
    }
}

impl MasteryModel for HistoryModel {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn taxonomy(&self) -> &Taxonomy {
        &self.taxonomy
    }

    fn masteries(&self, records: &[InteractionRecord], concepts: &[ConceptId]) -> Result<Vec<f64>, KtError> {
        concepts
            .iter()
            .map(|c| {
                check_known(&self.taxonomy, c)?;
                Ok(history_mastery(records, c, self.alpha))
            })
            .collect()
    }
}
