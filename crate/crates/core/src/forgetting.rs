//! Forgetting scores.
//!
//! The exact form decays retention exponentially, `F = 1 - s * exp(-dt / S)`.
//! The engine uses the rational surrogate `F = (1 - s) * dt / (dt + tau)`,
//! which is 0 right after practice and tends to `1 - s` for long gaps.
//! Elapsed time is measured in fractional days.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kt::{KtError, MasteryModel};
use crate::model::{seconds_to_days, ConceptId, Timestamp, Trajectory};

/// Smallest calibrated tau, in days.
pub const TAU_FLOOR_DAYS: f64 = 0.01;

#[derive(Debug, Error, PartialEq)]
pub enum ForgettingError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error(transparent)]
    Kt(#[from] KtError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreForm {
    Exact,
    Approx,
}

fn check_inputs(s: f64, delta_t_days: f64, scale: f64, scale_name: &str) -> Result<(), ForgettingError> {
    if !(0.0..=1.0).contains(&s) {
        return Err(ForgettingError::Domain(format!("mastery {s} outside [0, 1]")));
    }
    if delta_t_days.is_nan() || delta_t_days < 0.0 {
        return Err(ForgettingError::Domain(format!("elapsed time {delta_t_days} is negative")));
    }
    if !(scale > 0.0) || scale.is_infinite() {
        return Err(ForgettingError::Domain(format!("{scale_name} must be positive and finite, got {scale}")));
    }
    Ok(())
}

/// `1 - s * exp(-dt / strength)`.
pub fn forgetting_exact(s: f64, delta_t_days: f64, strength: f64) -> Result<f64, ForgettingError> {
    check_inputs(s, delta_t_days, strength, "memory strength")?;
    Ok(1.0 - s * (-delta_t_days / strength).exp())
}

/// `(1 - s) * dt / (dt + tau)`; an infinite gap yields the asymptote `1 - s`.
pub fn forgetting_approx(s: f64, delta_t_days: f64, tau: f64) -> Result<f64, ForgettingError> {
    check_inputs(s, delta_t_days, tau, "tau")?;
    if delta_t_days.is_infinite() {
        return Ok(1.0 - s);
    }
    Ok((1.0 - s) * (delta_t_days / (delta_t_days + tau)))
}

/// Median gap between consecutive practices of `concept`, in days, floored
/// at [`TAU_FLOOR_DAYS`]. Falls back to `default_days` below two practices.
pub fn calibrate_tau(trajectory: &Trajectory, concept: &ConceptId, default_days: f64) -> f64 {
    let times = trajectory.practice_times(concept);
    if times.len() < 2 {
        return default_days;
    }
    let mut gaps: Vec<f64> = times.windows(2).map(|w| seconds_to_days(w[1] - w[0])).collect();
    gaps.sort_by(f64::total_cmp);
    let mid = gaps.len() / 2;
    let median = if gaps.len() % 2 == 0 { (gaps[mid - 1] + gaps[mid]) / 2.0 } else { gaps[mid] };
    median.max(TAU_FLOOR_DAYS)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForgettingConfig {
    #[serde(default)]
    pub tau_per_concept: BTreeMap<ConceptId, f64>,
    pub tau_default: f64,
    #[serde(default)]
    pub memory_strength_per_concept: BTreeMap<ConceptId, f64>,
}

impl Default for ForgettingConfig {
    fn default() -> Self {
        Self { tau_per_concept: BTreeMap::new(), tau_default: 7.0, memory_strength_per_concept: BTreeMap::new() }
    }
}

impl ForgettingConfig {
    pub fn validate(&self) -> Result<(), ForgettingError> {
        let bad = |v: f64| !(v > 0.0) || v.is_infinite();
        if bad(self.tau_default)
            || self.tau_per_concept.values().any(|v| bad(*v))
            || self.memory_strength_per_concept.values().any(|v| bad(*v))
        {
            return Err(ForgettingError::Domain("tau and memory strength values must be positive".into()));
        }
        Ok(())
    }

    /// Configured tau for the concept, else calibrated from the trajectory.
    pub fn tau_for(&self, trajectory: &Trajectory, concept: &ConceptId) -> f64 {
        self.tau_per_concept
            .get(concept)
            .copied()
            .unwrap_or_else(|| calibrate_tau(trajectory, concept, self.tau_default))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgettingScore {
    pub concept: ConceptId,
    pub value: f64,
    pub mastery: f64,
    /// Days since last practice; infinite when never practiced.
    #[serde(with = "elapsed_serde")]
    pub elapsed_days: f64,
    pub tau: f64,
    pub form: ScoreForm,
}

/// Infinity is not representable in JSON; it is written as `null`.
mod elapsed_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

impl ForgettingScore {
    pub fn never_practiced(&self) -> bool {
        self.elapsed_days.is_infinite()
    }
}

/// Service-facing row: `{concept_id, label, mastery, elapsed_days, forgetting, tau, form}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgettingRow {
    pub concept_id: ConceptId,
    pub label: String,
    pub mastery: f64,
    #[serde(with = "elapsed_serde")]
    pub elapsed_days: f64,
    pub forgetting: f64,
    pub tau: f64,
    pub form: ScoreForm,
}

pub type ForgettingReport = BTreeMap<ConceptId, ForgettingScore>;

/// Forgetting score per concept at `now`, using the surrogate form with a
/// calibrated tau and KT mastery over records up to `now`.
pub fn forgetting_report(
    trajectory: &Trajectory,
    kt: &dyn MasteryModel,
    concepts: &BTreeSet<ConceptId>,
    now: Timestamp,
    config: &ForgettingConfig,
) -> Result<ForgettingReport, ForgettingError> {
    let ids: Vec<ConceptId> = concepts.iter().cloned().collect();
    let visible = trajectory.records_until(now);
    // tau is calibrated on the same visible prefix, never on later practice
    let past = Trajectory { records: visible.to_vec(), ..trajectory.clone() };
    let masteries = kt.masteries(visible, &ids)?;
    let mut report = BTreeMap::new();
    for (concept, s) in ids.into_iter().zip(masteries) {
        let last = visible.iter().rev().find(|r| r.concepts.contains(&concept)).map(|r| r.timestamp);
        let elapsed_days = match last {
            Some(t) => seconds_to_days((now - t).max(0)),
            None => f64::INFINITY,
        };
        let tau = config.tau_for(&past, &concept);
        let value = forgetting_approx(s, elapsed_days, tau)?;
        report.insert(concept.clone(), ForgettingScore { concept, value, mastery: s, elapsed_days, tau, form: ScoreForm::Approx });
    }
    Ok(report)
}

pub fn report_rows(report: &ForgettingReport, taxonomy: &crate::model::Taxonomy) -> Vec<ForgettingRow> {
    report
        .values()
        .map(|s| ForgettingRow {
            concept_id: s.concept.clone(),
            label: taxonomy.display(&s.concept),
            mastery: s.mastery,
            elapsed_days: s.elapsed_days,
            forgetting: s.value,
            tau: s.tau,
            form: s.form,
        })
        .collect()
}
