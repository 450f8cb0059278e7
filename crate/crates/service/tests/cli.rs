mod common;

use std::path::Path;
use std::process::{Command, Output};

use common::*;
use tutor_core::kt::DktParams;
use tutor_core::model::Taxonomy;

fn tutor(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tutor")).current_dir(dir).args(args).output().unwrap()
}

/// Config pointing at the fixture taxonomy and pool, store under `dir/data`.
fn write_config(dir: &Path) -> String {
    let path = dir.join("tutor.toml");
    let text = format!(
        "data_dir = \"data\"\ntaxonomy = {:?}\nquestion_pool = {:?}\n",
        fixtures().join("taxonomy.json"),
        fixtures().join("pool.jsonl")
    );
    std::fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn simulate_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        let o = tutor(dir.path(), &["simulate", "--arms", "tasa,vanilla", "--students", "50", "--seed", "7", "--out", out]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(String::from_utf8_lossy(&o.stdout).contains("vanilla"));
    }
    for file in ["report.json", "report.txt"] {
        let a = std::fs::read(dir.path().join("a").join(file)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(file)).unwrap();
        assert!(!a.is_empty());
        assert_eq!(a, b, "{file}");
    }
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("a/report.json")).unwrap()).unwrap();
    assert_eq!(report["config"]["seeds"], serde_json::json!([7]));
}

#[test]
fn train_kt_zero_epochs_writes_initial_weights() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let o = tutor(dir.path(), &["--config", &config, "--seed", "3", "train-kt", "--epochs", "0"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let taxonomy: Taxonomy = serde_json::from_str(&std::fs::read_to_string(fixtures().join("taxonomy.json")).unwrap()).unwrap();
    let text = std::fs::read_to_string(dir.path().join("data/kt/params.json")).unwrap();
    let (params, _) = DktParams::from_json(&text, &taxonomy.hash()).unwrap();
    let hidden = tutor_core::kt::TrainingConfig::default().hidden_size;
    assert_eq!(params, DktParams::init(taxonomy.len(), hidden, 3, taxonomy.hash()));
}

#[test]
fn ingest_profile_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let history = fixtures().join("history.csv");
    let o = tutor(dir.path(), &["--config", &config, "ingest", history.to_str().unwrap()]);
    assert!(o.status.success());
    let summary: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(summary, serde_json::json!({"students": 2, "records": 11, "rejects": 1}));
    assert!(String::from_utf8_lossy(&o.stderr).contains("rejects.jsonl"));

    let o = tutor(dir.path(), &["--config", &config, "build-profile"]);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.lines().any(|l| l.starts_with("ana: ")) && text.lines().any(|l| l.starts_with("ben: ")));

    let at = (T0 + 86_400 * 30).to_string();
    let o = tutor(dir.path(), &["--config", &config, "forgetting-report", "--student", "ana", "--concepts", "frac-add,lin-eq", "--at", &at]);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    assert_eq!(text.lines().count(), 3);
    assert!(text.starts_with("concept"));

    let o = tutor(dir.path(), &["--config", &config, "forgetting-report", "--student", "ana", "--at", &at, "--json"]);
    let rows: Vec<serde_json::Value> = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(rows.len(), 4);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    assert_eq!(tutor(dir.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(tutor(dir.path(), &["forgetting-report"]).status.code(), Some(2));
    assert_eq!(tutor(dir.path(), &["--help"]).status.code(), Some(0));
    let o = tutor(dir.path(), &["--config", &config, "forgetting-report", "--student", "nobody"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error: "));
    std::fs::write(dir.path().join("bad.toml"), "colour = 1\n").unwrap();
    assert_eq!(tutor(dir.path(), &["--config", "bad.toml", "train-kt"]).status.code(), Some(1));
}

/// A session recorded through the engine replays from the command line.
#[test]
fn replay_command() {
    let dir = tempfile::tempdir().unwrap();
    let transcript = dir.path().join("transcript.jsonl");
    play_session(&recording_engine(dir.path(), &transcript));
    let config = format!(
        "{}\n[session]\ngenerator = \"llm\"\n[gateway]\nmode = \"replay\"\ntranscript = \"transcript.jsonl\"\n[gateway.routes.tutor]\nendpoint = \"http://127.0.0.1:9/v1/chat/completions\"\nmodel = \"{SCRIPTED_MODEL}\"\n",
        std::fs::read_to_string(write_config(dir.path())).unwrap()
    );
    std::fs::write(dir.path().join("tutor.toml"), config).unwrap();
    let o = tutor(dir.path(), &["--config", "tutor.toml", "replay", "--session", "ana-s001"]);
    assert_eq!(o.status.code(), Some(0), "{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["turns_replayed"], 10);

    // an empty transcript cannot answer the first model call
    std::fs::write(dir.path().join("empty.jsonl"), "").unwrap();
    let o = tutor(dir.path(), &["--config", "tutor.toml", "replay", "--session", "ana-s001", "--transcript", "empty.jsonl"]);
    assert_eq!(o.status.code(), Some(1));
}
