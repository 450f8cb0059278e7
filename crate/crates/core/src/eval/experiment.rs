//! Pre-quiz, tutoring session and post-quiz for each simulated student,
//! per arm and seed.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::judge::{judge_pair, render_dialogue, win_rate, Verdict};
use super::synthetic::{generate_cohort, CohortConfig, SyntheticStudent};
use super::{make_quiz, mean_std, nlg, EvalError, QuestionPoolItem};
use crate::embedding::HashingEncoder;
use crate::extraction::ExtractionConfig;
use crate::gateway::{prompts, Gateway, LlmRole};
use crate::kt::HistoryModel;
use crate::model::{ConceptId, SessionState, SessionTurn, StudentProfile, Taxonomy, Timestamp};
use crate::retrieval::JaccardReranker;
use crate::tutoring::{derive_seed, PipelineMode, ProfileBanks, TemplatedGenerator, Tutor, TutorConfig, TurnGenerator, VanillaGenerator};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arm {
    Tasa,
    TasaNoRewrite,
    Vanilla,
}

impl Arm {
    pub fn name(self) -> &'static str {
        match self {
            Arm::Tasa => "tasa",
            Arm::TasaNoRewrite => "tasa-no-rewrite",
            Arm::Vanilla => "vanilla",
        }
    }

    fn mode(self) -> PipelineMode {
        match self {
            Arm::Tasa => PipelineMode::Tasa,
            Arm::TasaNoRewrite => PipelineMode::NoRewrite,
            Arm::Vanilla => PipelineMode::Vanilla,
        }
    }
}

impl FromStr for Arm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim().to_ascii_lowercase().replace('_', "-").as_str() {
            "tasa" | "adaptive" => Ok(Arm::Tasa),
            "tasa-no-rewrite" | "no-rewrite" => Ok(Arm::TasaNoRewrite),
            "vanilla" | "vanilla-icl" => Ok(Arm::Vanilla),
            other => Err(format!("unknown arm {other:?} (expected tasa, tasa-no-rewrite or vanilla)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub arms: Vec<Arm>,
    pub seeds: Vec<u64>,
    pub turns: usize,
    pub quiz_size: usize,
    pub concepts: usize,
    pub items_per_concept: usize,
    pub cohort: CohortConfig,
    /// Session start, epoch seconds.
    pub now: Timestamp,
    /// Seconds between consecutive student turns.
    pub turn_spacing_secs: i64,
    #[serde(default)]
    pub tutor: TutorConfig,
    #[serde(default)]
    pub extraction: ExtractionConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            arms: vec![Arm::Tasa, Arm::TasaNoRewrite, Arm::Vanilla],
            seeds: vec![0, 1, 2],
            turns: 20,
            quiz_size: 10,
            concepts: 12,
            items_per_concept: 12,
            cohort: CohortConfig::default(),
            now: 1_700_000_000,
            turn_spacing_secs: 60,
            tutor: TutorConfig::default(),
            extraction: ExtractionConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.turns < 2 || self.turns % 2 != 0 {
            return Err(EvalError::Domain(format!("turns must be a positive even number, got {}", self.turns)));
        }
        if self.arms.is_empty() || self.seeds.is_empty() {
            return Err(EvalError::Domain("at least one arm and one seed are required".into()));
        }
        if self.concepts == 0 || self.concepts > LABELS.len() || self.items_per_concept == 0 {
            return Err(EvalError::Domain(format!("concepts must lie in 1..={} and items per concept be positive", LABELS.len())));
        }
        Ok(())
    }
}

const LABELS: [&str; 16] = [
    "fraction addition",
    "decimal rounding",
    "linear equations",
    "ratio reasoning",
    "percent change",
    "triangle area",
    "integer operations",
    "order of operations",
    "exponent rules",
    "probability basics",
    "coordinate plane",
    "angle measurement",
    "place value",
    "unit conversion",
    "mean and median",
    "circle circumference",
];

pub fn synthetic_taxonomy(concepts: usize) -> Taxonomy {
    Taxonomy::from_pairs((0..concepts.min(LABELS.len())).map(|i| (format!("c{:02}", i + 1), LABELS[i].to_string())))
        .expect("synthetic labels are unique")
}

/// Single-concept items with difficulties spread evenly over [0, 1].
pub fn synthetic_pool(taxonomy: &Taxonomy, items_per_concept: usize) -> Vec<QuestionPoolItem> {
    let mut pool = Vec::new();
    for c in taxonomy.concepts() {
        for k in 0..items_per_concept {
            pool.push(QuestionPoolItem {
                question_ref: format!("{}-{k:02}", c.id),
                text: format!("{} practice item {}", c.label, k + 1),
                concepts: [c.id.clone()].into(),
                difficulty: if items_per_concept == 1 { 0.5 } else { k as f64 / (items_per_concept - 1) as f64 },
            });
        }
    }
    pool
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentResult {
    pub student_id: String,
    pub pre_acc: f64,
    pub post_acc: f64,
    /// `None` when the pre-quiz was perfect.
    pub nlg: Option<f64>,
    pub practiced: Vec<ConceptId>,
    #[serde(skip)]
    pub session: Option<SessionState>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub arm: Arm,
    pub seed: u64,
    pub students: Vec<StudentResult>,
    pub mean_pre: f64,
    pub mean_post: f64,
    pub mean_nlg: f64,
    pub std_nlg: f64,
    /// Students excluded for a perfect pre-quiz.
    pub degenerate: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub arms: Vec<ArmReport>,
    /// Win rate of each arm against vanilla, when judged.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub win_rates: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: Arm,
    /// Mean and standard deviation of the per-seed mean gains.
    pub mean_nlg: f64,
    pub std_nlg: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub win_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub seeds: Vec<SeedReport>,
    pub summary: Vec<ArmSummary>,
}

impl ExperimentReport {
    pub fn arm(&self, seed: u64, arm: Arm) -> Option<&ArmReport> {
        self.seeds.iter().find(|s| s.seed == seed)?.arms.iter().find(|a| a.arm == arm)
    }

    /// Plain-text table: one row per arm, mean (std) over seeds.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<18} {:>18} {:>12}", "Method", "Delta-NLG (%)", "Win rate (%)");
        for s in &self.summary {
            let win = s.win_rate.map_or("-".to_string(), |w| format!("{w:.1}"));
            let _ = writeln!(out, "{:<18} {:>18} {:>12}", s.arm.name(), format!("{:.1} ({:.1})", s.mean_nlg * 100.0, s.std_nlg * 100.0), win);
        }
        out
    }
}

fn build_tutor(arm: Arm, pool: &[QuestionPoolItem], taxonomy: &Taxonomy, config: &ExperimentConfig, seed: u64) -> Result<Tutor, EvalError> {
    let generator: Arc<dyn TurnGenerator> = match arm {
        Arm::Vanilla => Arc::new(VanillaGenerator::new(pool.to_vec(), seed)),
        _ => Arc::new(TemplatedGenerator::new(pool.to_vec())),
    };
    let tutor_config = TutorConfig { mode: arm.mode(), session_turn_limit: config.turns, ..config.tutor.clone() };
    Ok(Tutor::new(
        taxonomy.clone(),
        Arc::new(HashingEncoder::default()),
        Arc::new(JaccardReranker),
        Arc::new(HistoryModel::new(taxonomy.clone())),
        generator,
        None,
        tutor_config,
    )?)
}

fn quiz_accuracy(model: &crate::eval::SyntheticStudentModel, quiz: &[QuestionPoolItem], at: Timestamp, stream: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(stream);
    let correct = quiz.iter().filter(|item| model.answer_with(item, at, rng.gen())).count();
    correct as f64 / quiz.len() as f64
}

fn run_student(
    tutor: &Tutor,
    student: &SyntheticStudent,
    pool: &[QuestionPoolItem],
    config: &ExperimentConfig,
    seed: u64,
    student_sim: Option<&Gateway>,
) -> Result<StudentResult, EvalError> {
    let sid = student.student_id.as_str();
    let focus: BTreeSet<ConceptId> = tutor.taxonomy.concepts().iter().map(|c| c.id.clone()).collect();
    let quiz = make_quiz(pool, &focus, config.quiz_size, derive_seed(seed, &[sid, "quiz"]))?;
    let now = config.now;
    let pre_acc = quiz_accuracy(&student.model, &quiz, now, derive_seed(seed, &[sid, "pre"]));

    let mut profile = StudentProfile::new(sid, tutor.kt.model_id());
    profile.trajectory = student.trajectory.clone();
    let banks = if tutor.config.mode == PipelineMode::Vanilla {
        ProfileBanks::empty(tutor.encoder.version())
    } else {
        tutor.rebuild_profile(&mut profile, &config.extraction)?
    };

    let mut model = student.model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[sid, "session"]));
    let mut session = SessionState::new(format!("{sid}-session"), sid, now);
    let mut t = now;
    let labels: Vec<String> = focus.iter().map(|c| tutor.taxonomy.display(c)).collect();
    let mut turn = SessionTurn { concepts: focus.clone(), ..SessionTurn::student(format!("I would like to review {}.", labels.join(", ")), t) };
    let mut practiced = Vec::new();
    let pairs = config.turns / 2;
    for k in 0..pairs {
        let result = tutor.step_session(&profile, &banks, &session, turn.clone())?;
        session = result.session;
        if k + 1 == pairs {
            break;
        }
        t += config.turn_spacing_secs;
        let q = &result.output.next_question;
        let item = pool.iter().find(|i| i.question_ref == q.question_ref).cloned().unwrap_or_else(|| QuestionPoolItem {
            question_ref: q.question_ref.clone(),
            text: q.text.clone(),
            concepts: q.concepts.clone(),
            difficulty: 0.5,
        });
        let correct = model.answer_with(&item, t, rng.gen());
        model.practice(&item, t, correct);
        practiced.extend(item.concepts.iter().cloned());
        let text = match student_sim {
            Some(g) => student_reply(g, &profile, &session)?,
            None => format!("My answer to {}.", q.question_ref),
        };
        turn = SessionTurn::answer(text, t, q.question_ref.clone(), correct);
    }
    let post_acc = quiz_accuracy(&model, &quiz, t + config.turn_spacing_secs, derive_seed(seed, &[sid, "post"]));
    let gain = match nlg(pre_acc, post_acc) {
        Ok(g) => Some(g),
        Err(EvalError::DegeneratePre) => None,
        Err(e) => return Err(e),
    };
    Ok(StudentResult { student_id: sid.to_string(), pre_acc, post_acc, nlg: gain, practiced, session: Some(session) })
}

/// Free-text student reply through the student-sim role. Correctness still
/// comes from the rule-based model.
fn student_reply(gateway: &Gateway, profile: &StudentProfile, session: &SessionState) -> Result<String, EvalError> {
    let persona: Vec<&str> = profile.persona_entries.iter().map(|p| p.description.as_str()).collect();
    let tutor_message = session.turns.last().map(|t| t.text.clone()).unwrap_or_default();
    let messages = prompts::render_prompt(
        prompts::STUDENT_SIM.id,
        [("student_profile", if persona.is_empty() { "(none)".to_string() } else { persona.join("\n") }), ("tutor_message", tutor_message)],
    )
    .map_err(crate::tutoring::TutorError::from)?;
    let reply = gateway.complete(LlmRole::StudentSim, messages).map_err(crate::tutoring::TutorError::from)?;
    Ok(if reply.trim().is_empty() { "(no reply)".to_string() } else { reply.trim().to_string() })
}

/// Runs one arm over a cohort. Students run in parallel; results keep
/// cohort order.
pub fn run_arm(
    arm: Arm,
    students: &[SyntheticStudent],
    pool: &[QuestionPoolItem],
    taxonomy: &Taxonomy,
    config: &ExperimentConfig,
    seed: u64,
) -> Result<ArmReport, EvalError> {
    config.validate()?;
    let tutor = build_tutor(arm, pool, taxonomy, config, seed)?;
    let results: Vec<StudentResult> = students
        .par_iter()
        .map(|s| run_student(&tutor, s, pool, config, seed, None))
        .collect::<Result<_, _>>()?;
    let gains: Vec<f64> = results.iter().filter_map(|r| r.nlg).collect();
    let (mean_nlg, std_nlg) = mean_std(&gains);
    let pre: Vec<f64> = results.iter().map(|r| r.pre_acc).collect();
    let post: Vec<f64> = results.iter().map(|r| r.post_acc).collect();
    Ok(ArmReport {
        arm,
        seed,
        degenerate: results.len() - gains.len(),
        mean_pre: mean_std(&pre).0,
        mean_post: mean_std(&post).0,
        mean_nlg,
        std_nlg,
        students: results,
    })
}

/// Every configured arm on every seed. With a judge gateway, each non-vanilla
/// arm's dialogues are judged against vanilla's for the same student.
pub fn run_experiment(config: &ExperimentConfig, judge: Option<&Gateway>) -> Result<ExperimentReport, EvalError> {
    config.validate()?;
    let taxonomy = synthetic_taxonomy(config.concepts);
    let pool = synthetic_pool(&taxonomy, config.items_per_concept);
    let mut seeds = Vec::new();
    for &seed in &config.seeds {
        let students = generate_cohort(&config.cohort, &taxonomy, &pool, config.now, seed)?;
        let arms = config.arms.iter().map(|&arm| run_arm(arm, &students, &pool, &taxonomy, config, seed)).collect::<Result<Vec<_>, _>>()?;
        let mut win_rates = BTreeMap::new();
        if let (Some(g), Some(base)) = (judge, arms.iter().find(|a| a.arm == Arm::Vanilla)) {
            for target in arms.iter().filter(|a| a.arm != Arm::Vanilla) {
                let mut verdicts = Vec::new();
                for (a, b) in target.students.iter().zip(&base.students) {
                    let (Some(sa), Some(sb)) = (&a.session, &b.session) else { continue };
                    let context = format!("Student {} with {} prior interactions.", a.student_id, students.iter().find(|s| s.student_id == a.student_id).map_or(0, |s| s.trajectory.len()));
                    let out = judge_pair(&render_dialogue(sa), &render_dialogue(sb), &context, g).map_err(crate::tutoring::TutorError::from)?;
                    verdicts.push(out.verdict);
                }
                if let Ok(w) = win_rate(&verdicts, Verdict::A) {
                    win_rates.insert(target.arm.name().to_string(), w);
                }
            }
        }
        seeds.push(SeedReport { seed, arms, win_rates });
    }
    let summary = config
        .arms
        .iter()
        .map(|&arm| {
            let means: Vec<f64> = seeds.iter().filter_map(|s| s.arms.iter().find(|a| a.arm == arm)).map(|a| a.mean_nlg).collect();
            let wins: Vec<f64> = seeds.iter().filter_map(|s| s.win_rates.get(arm.name()).copied()).collect();
            let (mean_nlg, std_nlg) = mean_std(&means);
            ArmSummary { arm, mean_nlg, std_nlg, win_rate: (!wins.is_empty()).then(|| mean_std(&wins).0) }
        })
        .collect();
    Ok(ExperimentReport { config: config.clone(), seeds, summary })
}
