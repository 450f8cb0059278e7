//! Rule-based simulated students with exponential forgetting.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EvalError, QuestionPoolItem};
use crate::model::{seconds_to_days, ConceptId, InteractionRecord, Taxonomy, Timestamp, Trajectory, SECONDS_PER_DAY};
use crate::tutoring::derive_seed;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticStudentModel {
    pub mastery: BTreeMap<ConceptId, f64>,
    /// Memory strength per concept, in days.
    pub strength: BTreeMap<ConceptId, f64>,
    pub last_practice: BTreeMap<ConceptId, Timestamp>,
    pub eta: f64,
    pub slip: f64,
    pub guess: f64,
    pub seed: u64,
    rng: ChaCha8Rng,
}

impl SyntheticStudentModel {
    pub fn new(
        mastery: BTreeMap<ConceptId, f64>,
        strength: BTreeMap<ConceptId, f64>,
        eta: f64,
        slip: f64,
        guess: f64,
        seed: u64,
    ) -> Result<Self, EvalError> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if !mastery.values().all(|m| prob(*m)) || !prob(eta) || !prob(slip) || !prob(guess) || slip + guess > 1.0 {
            return Err(EvalError::Domain("synthetic student probabilities must lie in [0, 1]".into()));
        }
        if !strength.values().all(|s| *s > 0.0 && s.is_finite()) {
            return Err(EvalError::Domain("memory strength must be positive".into()));
        }
        Ok(Self { mastery, strength, last_practice: BTreeMap::new(), eta, slip, guess, seed, rng: ChaCha8Rng::seed_from_u64(seed) })
    }

    /// True mastery decayed since the last practice.
    pub fn effective(&self, concept: &ConceptId, now: Timestamp) -> f64 {
        let m = self.mastery.get(concept).copied().unwrap_or(0.0);
        match (self.last_practice.get(concept), self.strength.get(concept)) {
            (Some(t), Some(s)) => m * (-seconds_to_days((now - t).max(0)) / s).exp(),
            _ => m,
        }
    }

    pub fn p_correct(&self, item: &QuestionPoolItem, now: Timestamp) -> f64 {
        let n = item.concepts.len().max(1) as f64;
        let eff = item.concepts.iter().map(|c| self.effective(c, now)).sum::<f64>() / n;
        self.guess + (1.0 - self.slip - self.guess) * eff
    }

    /// Practice resets the decay clock; a correct answer also moves mastery
    /// a step `eta` toward 1.
    pub fn practice(&mut self, item: &QuestionPoolItem, now: Timestamp, correct: bool) {
        for c in &item.concepts {
            self.last_practice.insert(c.clone(), now);
            if correct {
                let m = self.mastery.entry(c.clone()).or_insert(0.0);
                *m += self.eta * (1.0 - *m);
            }
        }
    }

    /// Answers with a caller-supplied uniform draw, leaving the model as is.
    pub fn answer_with(&self, item: &QuestionPoolItem, now: Timestamp, u: f64) -> bool {
        u < self.p_correct(item, now)
    }

    pub fn draw(&mut self) -> f64 {
        self.rng.gen()
    }
}

/// One answer drawn from the model's own stream. Practice answers update the
/// model; quiz answers do not.
pub fn simulate_student_answer(
    model: &SyntheticStudentModel,
    item: &QuestionPoolItem,
    now: Timestamp,
    practice: bool,
) -> (bool, SyntheticStudentModel) {
    let mut next = model.clone();
    let u = next.draw();
    let correct = next.answer_with(item, now, u);
    if practice {
        next.practice(item, now, correct);
    }
    (correct, next)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortConfig {
    pub students: usize,
    pub mastery_range: (f64, f64),
    pub strength_days_range: (f64, f64),
    /// Days between the last practice of a concept and the session, sampled
    /// uniformly.
    pub last_practice_days_range: (f64, f64),
    pub practices_per_concept: (usize, usize),
    pub practice_gap_days_range: (f64, f64),
    pub eta: f64,
    pub slip: f64,
    pub guess: f64,
}

impl Default for CohortConfig {
    fn default() -> Self {
        Self {
            students: 50,
            mastery_range: (0.3, 0.9),
            strength_days_range: (5.0, 40.0),
            last_practice_days_range: (0.5, 45.0),
            practices_per_concept: (2, 6),
            practice_gap_days_range: (0.5, 4.0),
            eta: 0.08,
            slip: 0.1,
            guess: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticStudent {
    pub student_id: String,
    pub model: SyntheticStudentModel,
    /// Observable history, forward-simulated up to `now`.
    pub trajectory: Trajectory,
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Students whose histories are simulated forward through the same answer
/// and practice dynamics the experiment uses, ending at `now`.
pub fn generate_cohort(
    config: &CohortConfig,
    taxonomy: &Taxonomy,
    pool: &[QuestionPoolItem],
    now: Timestamp,
    seed: u64,
) -> Result<Vec<SyntheticStudent>, EvalError> {
    let mut out = Vec::with_capacity(config.students);
    for i in 0..config.students {
        let student_id = format!("syn-{i:03}");
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[&student_id, "cohort"]));
        let mut mastery = BTreeMap::new();
        let mut strength = BTreeMap::new();
        let mut events: Vec<(Timestamp, ConceptId)> = Vec::new();
        for c in taxonomy.concepts() {
            mastery.insert(c.id.clone(), uniform(&mut rng, config.mastery_range));
            strength.insert(c.id.clone(), uniform(&mut rng, config.strength_days_range));
            let last = uniform(&mut rng, config.last_practice_days_range);
            let (lo, hi) = config.practices_per_concept;
            let n = rng.gen_range(lo..=hi.max(lo));
            let mut at = last;
            for _ in 0..n {
                events.push((now - (at * SECONDS_PER_DAY) as Timestamp, c.id.clone()));
                at += uniform(&mut rng, config.practice_gap_days_range);
            }
        }
        events.sort();
        let mut model = SyntheticStudentModel::new(
            mastery,
            strength,
            config.eta,
            config.slip,
            config.guess,
            derive_seed(seed, &[&student_id, "model"]),
        )?;
        let mut trajectory = Trajectory::new(student_id.clone());
        for (k, (t, c)) in events.into_iter().enumerate() {
            let items: Vec<&QuestionPoolItem> = pool.iter().filter(|q| q.concepts.contains(&c)).collect();
            let item = items[rng.gen_range(0..items.len())];
            let correct = model.answer_with(item, t, rng.gen());
            model.practice(item, t, correct);
            let mut record = InteractionRecord::new(item.question_ref.clone(), item.concepts.iter().cloned(), correct, t);
            record.question_text = Some(item.text.clone());
            trajectory = trajectory
                .append_interaction(record)
                .map_err(|e| EvalError::Domain(format!("history event {k}: {e}")))?;
        }
        out.push(SyntheticStudent { student_id, model, trajectory });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn item(c: &str) -> QuestionPoolItem {
        QuestionPoolItem { question_ref: "q".into(), text: "t".into(), concepts: [ConceptId::new(c)].into(), difficulty: 0.5 }
    }

    fn model(m: f64, slip: f64, guess: f64) -> SyntheticStudentModel {
        SyntheticStudentModel::new([("a".into(), m)].into(), [("a".into(), 10.0)].into(), 0.08, slip, guess, 3).unwrap()
    }

    #[test]
    fn answer_probability_edges() {
        let sure = model(1.0, 0.0, 0.1);
        let mut m = sure.clone();
        for _ in 0..200 {
            let (ok, next) = simulate_student_answer(&m, &item("a"), 0, false);
            assert!(ok);
            m = next;
        }
        let mut m = model(0.0, 0.1, 0.0);
        for _ in 0..200 {
            let (ok, next) = simulate_student_answer(&m, &item("a"), 0, false);
            assert!(!ok);
            m = next;
        }
        assert!((model(0.5, 0.1, 0.1).p_correct(&item("a"), 0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn decay_and_practice() {
        let mut m = model(0.8, 0.1, 0.1);
        m.last_practice.insert("a".into(), 0);
        let later = (10.0 * SECONDS_PER_DAY) as Timestamp;
        assert!((m.effective(&"a".into(), later) - 0.8 / std::f64::consts::E).abs() < 1e-12);
        m.practice(&item("a"), later, true);
        assert!((m.mastery[&ConceptId::new("a")] - (0.8 + 0.08 * 0.2)).abs() < 1e-15);
        assert_eq!(m.effective(&"a".into(), later), m.mastery[&ConceptId::new("a")]);
        m.practice(&item("a"), later + 10, false);
        assert!((m.mastery[&ConceptId::new("a")] - 0.816).abs() < 1e-12);
    }

    #[test]
    fn invalid_probabilities_rejected() {
        assert!(SyntheticStudentModel::new([("a".into(), 1.2)].into(), BTreeMap::new(), 0.1, 0.1, 0.1, 0).is_err());
        assert!(SyntheticStudentModel::new(BTreeMap::new(), BTreeMap::new(), 0.1, 0.6, 0.6, 0).is_err());
    }

    proptest! {
        #[test]
        fn mastery_stays_in_unit_interval(
            m0 in 0.0f64..=1.0,
            eta in 0.0f64..=1.0,
            steps in proptest::collection::vec((any::<bool>(), 0i64..10_000_000), 0..60),
        ) {
            let mut m = SyntheticStudentModel::new([("a".into(), m0)].into(), [("a".into(), 3.0)].into(), eta, 0.1, 0.1, 0).unwrap();
            let mut t = 0;
            for (correct, dt) in steps {
                t += dt;
                m.practice(&item("a"), t, correct);
                let e = m.effective(&"a".into(), t + dt);
                prop_assert!((0.0..=1.0).contains(&m.mastery[&ConceptId::new("a")]));
                prop_assert!((0.0..=1.0).contains(&e));
                prop_assert!((0.0..=1.0).contains(&m.p_correct(&item("a"), t + dt)));
            }
        }
    }
}
