//! One PASS/FAIL line per acceptance criterion. Runs as a plain binary
//! (`harness = false`) so the lines print in order; exits 1 on any failure.

mod common;

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tutor_core::embedding::{cosine, EmbeddingVector, HashingEncoder, TextEncoder};
use tutor_core::eval::{nlg, run_experiment, Arm, EvalError, ExperimentConfig};
use tutor_core::forgetting::{forgetting_approx, forgetting_exact};
use tutor_core::kt::{gradient_check, history_mastery, train, DktModel, DktParams, MasteryModel, TrainingConfig};
use tutor_core::model::{Concept, ConceptId, InteractionRecord, MemoryEntry, PersonaEntry, StudentProfile, Taxonomy, Trajectory};
use tutor_core::retrieval::{hybrid_score, retrieve_topk_vec, BankEntry, BankKind, BankSource, RetrievalConfig, VectorBank};
use tutor_service::engine::Engine;
use tutor_service::ingest::{parse_csv, CsvMapping};
use tutor_service::storage::{self, Store, StoredSession};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---- forgetting ----

fn forgetting_suite() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let f = |s: f64, dt: f64, tau: f64| forgetting_approx(s, dt, tau).unwrap();
    for _ in 0..1000 {
        let (s, tau) = (rng.gen_range(0.0..=1.0), rng.gen_range(0.1..60.0));
        ensure(f(s, 0.0, tau) == 0.0, || format!("F(0) != 0 at s={s}, tau={tau}"))?;
        let far = f(s, 1e6 * tau, tau);
        ensure((far - (1.0 - s)).abs() < 1e-5, || format!("asymptote off by {} at s={s}", far - (1.0 - s)))?;
    }
    for _ in 0..1000 {
        let (s, dt, tau) = (rng.gen_range(0.0..1.0), rng.gen_range(0.0..365.0), rng.gen_range(0.1..60.0));
        let (ddt, ds) = (rng.gen_range(0.0..30.0), rng.gen_range(0.0..(1.0 - s)));
        ensure(f(s, dt + ddt, tau) >= f(s, dt, tau), || format!("F decreases in dt at ({s}, {dt}, {tau})"))?;
        ensure(f(s + ds, dt, tau) <= f(s, dt, tau), || format!("F increases in s at ({s}, {dt}, {tau})"))?;
    }
    // central differences against the hand-derived partials
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (s, dt, tau) = (rng.gen_range(0.05..0.95), rng.gen_range(0.1..50.0), rng.gen_range(0.5..30.0));
        let d = dt + tau;
        let exact = [-dt / d, (1.0 - s) * tau / (d * d), -(1.0 - s) * dt / (d * d)];
        let hs = [1e-5 * s, 1e-5 * dt, 1e-5 * tau];
        let numeric = [
            (f(s + hs[0], dt, tau) - f(s - hs[0], dt, tau)) / (2.0 * hs[0]),
            (f(s, dt + hs[1], tau) - f(s, dt - hs[1], tau)) / (2.0 * hs[1]),
            (f(s, dt, tau + hs[2]) - f(s, dt, tau - hs[2])) / (2.0 * hs[2]),
        ];
        for (a, n) in exact.iter().zip(numeric) {
            worst = worst.max((a - n).abs() / a.abs().max(1e-300));
        }
    }
    ensure(worst < 1e-6, || format!("partial derivative relative error {worst:.2e}"))?;
    // 1 - exact(s=1, x, 1) is exp(-x); 1 - approx(s=0, x, 1) is 1/(1+x)
    for i in 0..1000 {
        let x = i as f64 / 999.0;
        let gap = (forgetting_exact(1.0, x, 1.0).unwrap() - forgetting_approx(0.0, x, 1.0).unwrap()).abs();
        ensure(gap <= x * x / 2.0 + 1e-15, || format!("Pade bound fails at x={x}: {gap}"))?;
    }
    Ok(format!("max partial rel err {worst:.1e}"))
}

// ---- retrieval ----

fn random_vector(rng: &mut ChaCha8Rng, dim: usize) -> EmbeddingVector {
    EmbeddingVector::new((0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn retrieval_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let dim = 256;
    for bank_no in 0..50 {
        let n = rng.gen_range(0..=200);
        let entries: Vec<BankEntry> = (0..n)
            .map(|i| BankEntry {
                entry_id: format!("m-{i:04}"),
                source: BankSource::Memory(MemoryEntry { timestamp: i as i64, description: String::new(), concepts: BTreeSet::new() }),
                desc_vec: random_vector(&mut rng, dim),
                kc_vec: random_vector(&mut rng, dim),
            })
            .collect();
        let bank = VectorBank::from_entries(BankKind::Memory, "random", entries).unwrap();
        let query = random_vector(&mut rng, dim);
        let lambda = [0.0, 1.0, 0.5, rng.gen_range(0.0..1.0)][bank_no % 4];
        let config = RetrievalConfig { lambda, top_k: rng.gen_range(1..=25), ..RetrievalConfig::default() };
        let got: Vec<String> = retrieve_topk_vec(&bank, &query, &config).unwrap().into_iter().map(|s| s.entry.entry_id).collect();

        let cos = |a: &EmbeddingVector, b: &EmbeddingVector| {
            let dot: f64 = a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum();
            let norm = |v: &EmbeddingVector| v.values.iter().map(|x| x * x).sum::<f64>().sqrt();
            dot / (norm(a) * norm(b))
        };
        let mut brute: Vec<(f64, String)> = bank
            .entries()
            .iter()
            .map(|e| (lambda * cos(&query, &e.desc_vec) + (1.0 - lambda) * cos(&query, &e.kc_vec), e.entry_id.clone()))
            .collect();
        brute.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
        let want: Vec<String> = brute.into_iter().take(config.top_k).map(|(_, id)| id).collect();
        ensure(got == want, || format!("bank {bank_no}: top-k differs from brute force"))?;

        for e in bank.entries().iter().take(5) {
            ensure(hybrid_score(&query, &e.desc_vec, &e.kc_vec, 1.0).unwrap() == cosine(&query, &e.desc_vec).unwrap(), || "lambda=1 is not cos(q, desc)".into())?;
            ensure(hybrid_score(&query, &e.desc_vec, &e.kc_vec, 0.0).unwrap() == cosine(&query, &e.kc_vec).unwrap(), || "lambda=0 is not cos(q, kc)".into())?;
        }
    }
    Ok("50 banks agree with brute force".into())
}

// ---- knowledge tracing ----

fn dkt_gradient_check() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let params = DktParams::init(5, 8, 3, "grad");
    let batch: Vec<Vec<(usize, bool)>> =
        (0..6).map(|_| (0..rng.gen_range(2..12)).map(|_| (rng.gen_range(0..5), rng.gen_bool(0.6))).collect()).collect();
    let err = gradient_check(&params, &batch, 1e-5);
    ensure(err < 1e-4, || format!("max relative error {err:.2e}"))?;
    Ok(format!("max relative error {err:.2e}"))
}

fn two_concept_taxonomy() -> Taxonomy {
    Taxonomy::new(vec![Concept { id: "A".into(), label: "always right".into() }, Concept { id: "B".into(), label: "always wrong".into() }]).unwrap()
}

fn two_concept_students(rng: &mut ChaCha8Rng, n: usize, prefix: &str) -> Vec<Trajectory> {
    (0..n)
        .map(|i| {
            let records = (0..rng.gen_range(6..16)).map(|t| {
                let a = rng.gen_bool(0.5);
                InteractionRecord::new(format!("q{t}"), [if a { "A" } else { "B" }], a, 1_000 + t as i64)
            });
            records.fold(Trajectory::new(format!("{prefix}{i}")), |tr, r| tr.append_interaction(r).unwrap())
        })
        .collect()
}

fn dkt_learning_sanity() -> Check {
    let taxonomy = two_concept_taxonomy();
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let train_set = two_concept_students(&mut rng, 200, "train-");
    let held_out = two_concept_students(&mut rng, 50, "test-");
    let config = TrainingConfig { epochs: 30, hidden_size: 16, learning_rate: 0.01, batch_size: 16, ..TrainingConfig::default() };
    let report = train(&train_set, &taxonomy, &config).map_err(|e| e.to_string())?;
    let model = DktModel::new(report.params, taxonomy).map_err(|e| e.to_string())?;
    let (mut min_a, mut max_b) = (1.0f64, 0.0f64);
    for t in &held_out {
        let m = model.masteries(&t.records, &["A".into(), "B".into()]).map_err(|e| e.to_string())?;
        min_a = min_a.min(m[0]);
        max_b = max_b.max(m[1]);
    }
    ensure(min_a > 0.8 && max_b < 0.2, || format!("held-out P(A) >= {min_a:.3}, P(B) <= {max_b:.3}"))?;

    // beta-smoothed rate against direct counting
    for case in 0..1000 {
        let n = rng.gen_range(0..40);
        let records: Vec<InteractionRecord> = (0..n)
            .map(|t| {
                let concepts: Vec<&str> = ["A", "B"].into_iter().filter(|_| rng.gen_bool(0.6)).collect();
                let concepts = if concepts.is_empty() { vec!["A"] } else { concepts };
                InteractionRecord::new(format!("q{t}"), concepts, rng.gen_bool(0.5), t)
            })
            .collect();
        let alpha = rng.gen_range(0.1..4.0);
        for c in ["A", "B"] {
            let id = ConceptId::from(c);
            let hits: Vec<_> = records.iter().filter(|r| r.concepts.contains(&id)).collect();
            let correct = hits.iter().filter(|r| r.correct).count() as f64;
            let want = (correct + alpha) / (hits.len() as f64 + 2.0 * alpha);
            let got = history_mastery(&records, &id, alpha);
            ensure(got == want, || format!("case {case}: history mastery {got} != {want}"))?;
        }
    }
    Ok(format!("held-out min P(A) {min_a:.3}, max P(B) {max_b:.3}; 1000 mastery cases exact"))
}

// ---- deterministic pipeline ----

fn deterministic_pipeline() -> Check {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    common::play_session(&common::recording_engine(a.path(), &a.path().join("transcript.jsonl")));
    common::play_session(&common::recording_engine(b.path(), &b.path().join("transcript.jsonl")));
    let (sa, sb) = (common::snapshot(a.path()), common::snapshot(b.path()));
    ensure(sa.contains_key("transcript.jsonl") && sa.keys().any(|k| k.starts_with("data/sessions/")), || "nothing persisted".into())?;
    ensure(sa == sb, || "two recorded runs differ".into())?;

    let c = tempfile::tempdir().map_err(|e| e.to_string())?;
    let engine = Engine::open(common::replay_config_in(c.path(), &a.path().join("transcript.jsonl"))).map_err(|e| e.to_string())?;
    let run = common::play_session(&engine);
    ensure(run.end.session.turns.len() == 20, || format!("{} turns", run.end.session.turns.len()))?;
    let data = |p: &Path| common::snapshot(&p.join("data"));
    ensure(data(c.path()) == data(a.path()), || "replayed store differs from the recorded one".into())?;
    Ok(format!("{} files byte-identical across 2 recorded runs and a replay", sa.len()))
}

// ---- synthetic experiment ----

fn nlg_separation() -> Check {
    let mut config = ExperimentConfig::default();
    config.arms = vec![Arm::Tasa, Arm::TasaNoRewrite, Arm::Vanilla];
    config.seeds = vec![0, 1, 2];
    config.cohort.students = 50;
    let report = run_experiment(&config, None).map_err(|e| e.to_string())?;
    let mut detail = Vec::new();
    for seed in [0, 1, 2] {
        let arm = |a| report.arm(seed, a).map(|r| r.mean_nlg).ok_or_else(|| format!("seed {seed}: arm missing"));
        let (tasa, plain, vanilla) = (arm(Arm::Tasa)?, arm(Arm::TasaNoRewrite)?, arm(Arm::Vanilla)?);
        ensure(tasa - vanilla >= 0.05, || format!("seed {seed}: tasa {tasa:.3} vs vanilla {vanilla:.3}"))?;
        ensure(plain <= tasa, || format!("seed {seed}: no-rewrite {plain:.3} above tasa {tasa:.3}"))?;
        detail.push(format!("seed {seed}: {tasa:.3}/{plain:.3}/{vanilla:.3}"));
    }
    Ok(format!("tasa/no-rewrite/vanilla {}", detail.join(", ")))
}

fn nlg_identities() -> Check {
    for p in [0.0, 0.25, 0.5, 0.9] {
        ensure(matches!(nlg(p, p), Ok(v) if v == 0.0), || format!("nlg({p}, {p}) = {:?}", nlg(p, p)))?;
        ensure(matches!(nlg(p, 1.0), Ok(v) if v == 1.0), || format!("nlg({p}, 1) = {:?}", nlg(p, 1.0)))?;
    }
    ensure(matches!(nlg(1.0, 0.5), Err(EvalError::DegeneratePre)), || "pre = 1 accepted".into())?;
    Ok("8 identities, pre = 1 rejected".into())
}

// ---- persistence ----

const CRASH_ENV: &str = "TUTOR_ACCEPTANCE_CRASH";

fn crash_profile(n: usize) -> StudentProfile {
    let mut p = StudentProfile::new("crash", "history");
    p.persona_entries = vec![PersonaEntry { description: format!("version {n} {}", "y".repeat(8192)), concepts: BTreeSet::new() }];
    p
}

/// In the re-executed child: start rewriting the profile, die halfway.
fn crash_child(root: &Path) -> ! {
    let path = root.join("students/crash/profile.json");
    let _ = storage::write_atomic_with(&path, |f| {
        f.write_all(b"{\"student_id\": \"crash\", \"traj")?;
        f.flush()?;
        std::process::abort();
    });
    unreachable!("abort returned")
}

fn persistence_and_ingest() -> Check {
    let golden = common::fixtures().join("golden");
    let read = |name: &str| std::fs::read_to_string(golden.join(name)).map_err(|e| format!("{name}: {e}"));
    let text = read("profile.json")?;
    let profile: StudentProfile = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    ensure(serde_json::to_string_pretty(&profile).unwrap() + "\n" == text, || "profile.json does not round-trip".into())?;
    let text = read("session.json")?;
    let session: StoredSession = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    ensure(serde_json::to_string_pretty(&session).unwrap() + "\n" == text, || "session.json does not round-trip".into())?;
    let version = HashingEncoder::default().version().to_string();
    for name in ["persona_bank.json", "memory_bank.json"] {
        let text = read(name)?;
        let bank = VectorBank::from_json(&text, &version).map_err(|e| e.to_string())?;
        ensure(bank.to_json() == text, || format!("{name} does not round-trip"))?;
    }
    let text = read("kt_params.json")?;
    let hash = serde_json::from_str::<serde_json::Value>(&text).unwrap()["taxonomy_hash"].as_str().unwrap_or_default().to_string();
    let (params, model_id) = DktParams::from_json(&text, &hash).map_err(|e| e.to_string())?;
    ensure(params.to_json(&model_id) == text, || "kt_params.json does not round-trip".into())?;

    let taxonomy: Taxonomy =
        serde_json::from_str(&std::fs::read_to_string(common::fixtures().join("taxonomy.json")).unwrap()).map_err(|e| e.to_string())?;
    let csv = "student_id,question_id,concept_ids,correct,timestamp\n\
               ana,q1,frac-add,1,1700000000\n\
               ana,q2,frac-add,2,1700000001\n\
               ana,q3,astrology,1,1700000002\n\
               ana,q4,ratio,1,yesterday\n\
               ,q5,ratio,1,1700000003\n\
               a/b,q6,ratio,0,1700000004\n\
               ana,q7,lin-eq,0,1699999999\n";
    let parsed = parse_csv(csv, &CsvMapping::default(), &taxonomy).map_err(|e| e.to_string())?;
    let lines: Vec<u64> = parsed.rejects.iter().map(|r| r.line).collect();
    ensure(lines == vec![3, 4, 5, 6, 7], || format!("rejected lines {lines:?}"))?;
    ensure(parsed.rejects.iter().all(|r| !r.reason.is_empty()), || "reject without a reason".into())?;
    ensure(parsed.rejects[0].reason.contains("correct") && parsed.rejects[1].reason.contains("astrology"), || format!("{:?}", parsed.rejects))?;
    let ana: Vec<&str> = parsed.students["ana"].iter().map(|r| r.question_id.as_str()).collect();
    ensure(ana == ["q7", "q1"], || format!("accepted rows {ana:?}"))?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let store = Store::new(dir.path());
    store.save_profile(&crash_profile(0)).map_err(|e| e.to_string())?;
    for _ in 0..3 {
        let status = Command::new(std::env::current_exe().unwrap())
            .env(CRASH_ENV, dir.path())
            .stderr(std::process::Stdio::null())
            .status()
            .map_err(|e| e.to_string())?;
        ensure(!status.success(), || "crash child exited cleanly".into())?;
        let back = store.load_profile("crash").map_err(|e| format!("profile unreadable after crash: {e}"))?;
        ensure(back == crash_profile(0), || "profile changed by an aborted write".into())?;
    }
    Ok("5 golden files round-trip, 5 malformed rows rejected with reasons, 3 aborted writes left the profile intact".into())
}

fn main() {
    if let Some(root) = std::env::var_os(CRASH_ENV) {
        crash_child(&PathBuf::from(root));
    }
    let checks: [(&str, fn() -> Check, Duration); 8] = [
        ("forgetting suite", forgetting_suite, Duration::from_secs(5)),
        ("retrieval oracle", retrieval_oracle, Duration::from_secs(10)),
        ("dkt gradient check", dkt_gradient_check, Duration::from_secs(30)),
        ("dkt learning sanity", dkt_learning_sanity, Duration::from_secs(120)),
        ("deterministic 20-turn pipeline", deterministic_pipeline, Duration::from_secs(10)),
        ("synthetic nlg separation", nlg_separation, Duration::from_secs(300)),
        ("nlg identities", nlg_identities, Duration::from_secs(5)),
        ("persistence and ingest", persistence_and_ingest, Duration::from_secs(30)),
    ];
    let mut failed = 0;
    for (name, check, budget) in checks {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let took = start.elapsed();
        let outcome = outcome.and_then(|d| if took <= budget { Ok(d) } else { Err(format!("{d}; took {took:.1?}, budget {budget:?}")) });
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail} ({took:.2?})"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name}: {why} ({took:.2?})");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
