//! Evaluation: question pools and matched quizzes, normalized learning gain,
//! pairwise judging, and the simulated-student experiment.

mod experiment;
mod judge;
mod synthetic;

pub use experiment::{
    run_arm, run_experiment, synthetic_pool, synthetic_taxonomy, Arm, ArmReport, ArmSummary, ExperimentConfig, ExperimentReport,
    SeedReport, StudentResult,
};
pub use judge::{judge_pair, parse_verdict, render_dialogue, win_rate, JudgeOutcome, Verdict};
pub use synthetic::{generate_cohort, simulate_student_answer, CohortConfig, SyntheticStudent, SyntheticStudentModel};

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ConceptId, Taxonomy};
use crate::tutoring::TutorError;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("pool has {available} eligible items, quiz needs {needed}")]
    InsufficientPool { needed: usize, available: usize },
    #[error("pre-quiz accuracy is 1, gain is undefined")]
    DegeneratePre,
    #[error("no decided pairs")]
    NoDecidedPairs,
    #[error("invalid input: {0}")]
    Domain(String),
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error(transparent)]
    Tutor(#[from] TutorError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionPoolItem {
    pub question_ref: String,
    pub text: String,
    #[serde(rename = "concept_ids")]
    pub concepts: BTreeSet<ConceptId>,
    pub difficulty: f64,
}

impl QuestionPoolItem {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.concepts.is_empty() {
            return Err(EvalError::Domain(format!("item {} has no concepts", self.question_ref)));
        }
        if !(0.0..=1.0).contains(&self.difficulty) {
            return Err(EvalError::Domain(format!("item {} difficulty outside [0, 1]", self.question_ref)));
        }
        Ok(())
    }
}

/// Parses a JSONL question pool, rejecting items with unknown concepts.
pub fn load_pool_jsonl(text: &str, taxonomy: &Taxonomy) -> Result<Vec<QuestionPoolItem>, EvalError> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| EvalError::Malformed { line: i + 1, message };
        let item: QuestionPoolItem = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        item.validate().map_err(|e| bad(e.to_string()))?;
        if let Some(c) = item.concepts.iter().find(|c| !taxonomy.contains(c)) {
            return Err(bad(format!("unknown concept {c}")));
        }
        if !seen.insert(item.question_ref.clone()) {
            return Err(bad(format!("duplicate question_ref {}", item.question_ref)));
        }
        out.push(item);
    }
    Ok(out)
}

pub fn pool_to_jsonl(pool: &[QuestionPoolItem]) -> String {
    pool.iter().map(|q| serde_json::to_string(q).expect("item serializes") + "\n").collect()
}

/// Seeded sample of `n` distinct items touching `concepts`, with each target
/// concept represented at least once when `n` allows.
pub fn make_quiz(
    pool: &[QuestionPoolItem],
    concepts: &BTreeSet<ConceptId>,
    n: usize,
    seed: u64,
) -> Result<Vec<QuestionPoolItem>, EvalError> {
    let mut eligible: Vec<&QuestionPoolItem> =
        pool.iter().filter(|q| concepts.is_empty() || !q.concepts.is_disjoint(concepts)).collect();
    if eligible.len() < n {
        return Err(EvalError::InsufficientPool { needed: n, available: eligible.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    eligible.shuffle(&mut rng);
    let mut order: Vec<&ConceptId> = concepts.iter().collect();
    order.shuffle(&mut rng);
    let mut chosen: Vec<&QuestionPoolItem> = Vec::with_capacity(n);
    for c in order {
        if chosen.len() == n {
            break;
        }
        if chosen.iter().any(|q| q.concepts.contains(c)) {
            continue;
        }
        if let Some(item) = eligible.iter().find(|q| q.concepts.contains(c) && !chosen.iter().any(|x| x.question_ref == q.question_ref)) {
            chosen.push(item);
        }
    }
    for item in &eligible {
        if chosen.len() == n {
            break;
        }
        if !chosen.iter().any(|x| x.question_ref == item.question_ref) {
            chosen.push(item);
        }
    }
    Ok(chosen.into_iter().cloned().collect())
}

/// Normalized learning gain `(post - pre) / (1 - pre)`; negative values are
/// regressions and are kept.
pub fn nlg(pre_acc: f64, post_acc: f64) -> Result<f64, EvalError> {
    if !(0.0..=1.0).contains(&pre_acc) || !(0.0..=1.0).contains(&post_acc) {
        return Err(EvalError::Domain(format!("accuracies must lie in [0, 1], got {pre_acc} and {post_acc}")));
    }
    if pre_acc == 1.0 {
        return Err(EvalError::DegeneratePre);
    }
    Ok((post_acc - pre_acc) / (1.0 - pre_acc))
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}
