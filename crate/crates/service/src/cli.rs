//! The `tutor` command line. Exit codes: 0 success, 1 domain error, 2 usage.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use serde::Serialize;
use tutor_core::eval::{judge_pair, render_dialogue, run_experiment, Arm};
use tutor_core::tutoring::Bucket;

use crate::config::{EngineConfig, GatewayMode};
use crate::engine::{gateway_from_config, Engine, EngineError};
use crate::storage;

#[derive(Debug, Parser)]
#[command(name = "tutor", version, about = "Forgetting-aware personalized tutoring engine")]
pub struct Cli {
    /// TOML config file; built-in defaults when absent.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the seeds used by training, the vanilla generator and simulation.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Ingest interaction records from CSV (per the [ingest] mapping) or canonical JSONL.
    Ingest { file: PathBuf },
    /// Train the DKT backbone on every stored trajectory.
    TrainKt {
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Re-extract persona and memory and rebuild the banks.
    BuildProfile {
        /// Students to rebuild; all when omitted.
        #[arg(long = "student")]
        students: Vec<String>,
    },
    /// Per-concept mastery, elapsed time and forgetting score.
    ForgettingReport {
        #[arg(long)]
        student: String,
        /// Concept ids or labels; all concepts when omitted.
        #[arg(long, value_delimiter = ',')]
        concepts: Vec<String>,
        /// Epoch seconds; now when omitted.
        #[arg(long)]
        at: Option<i64>,
        #[arg(long)]
        json: bool,
    },
    /// Run the synthetic-student experiment and write report.json and report.txt.
    Simulate {
        #[arg(long, value_delimiter = ',')]
        arms: Vec<Arm>,
        #[arg(long)]
        students: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long)]
        turns: Option<usize>,
        #[arg(long, default_value = "simulation")]
        out: PathBuf,
        /// Judge dialogues pairwise against vanilla through the judge route.
        #[arg(long)]
        judge: bool,
    },
    /// Compare two stored sessions with the judge model.
    Judge {
        session_a: String,
        session_b: String,
        #[arg(long, default_value = "")]
        context: String,
    },
    /// Serve the HTTP API until interrupted.
    Serve {
        #[arg(long)]
        listen: Option<String>,
    },
    /// Re-run a stored session and compare every tutor turn.
    Replay {
        #[arg(long)]
        session: String,
        /// Answer model calls from this transcript instead of the configured gateway.
        #[arg(long)]
        transcript: Option<PathBuf>,
    },
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("{0}")]
    Other(String),
}

fn load_config(cli: &Cli) -> Result<EngineConfig, CliError> {
    let mut config = match &cli.config {
        Some(path) => EngineConfig::load(path).map_err(|e| CliError::Other(e.to_string()))?,
        None => EngineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.training.seed = seed;
        config.session.seed = seed;
        config.simulation.seeds = vec![seed];
    }
    config.validate().map_err(|e| CliError::Other(e.to_string()))?;
    Ok(config)
}

fn print_json<T: Serialize>(out: &mut dyn Write, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    writeln!(out, "{text}").map_err(|e| CliError::Other(e.to_string()))
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let stdout = std::io::stdout();
    match execute(cli, &mut stdout.lock()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn execute(cli: Cli, out: &mut dyn Write) -> Result<i32, CliError> {
    let config = load_config(&cli)?;
    match cli.command {
        Command::Ingest { file } => {
            let engine = Engine::open(config)?;
            let summary = engine.ingest(&file)?;
            print_json(out, &summary)?;
            if summary.rejects > 0 {
                eprintln!("{} rejected rows written to {}", summary.rejects, engine.store().ingest_dir().join("rejects.jsonl").display());
            }
        }
        Command::TrainKt { epochs } => {
            let engine = Engine::open(config)?;
            print_json(out, &engine.train_kt(epochs, None)?)?;
        }
        Command::BuildProfile { students } => {
            let engine = Engine::open(config)?;
            let ids = if students.is_empty() { engine.store().list_students().map_err(EngineError::from)? } else { students };
            for id in ids {
                let view = engine.rebuild_profile(&id)?;
                writeln!(out, "{id}: {} persona, {} memory entries", view.persona_bank_size, view.memory_bank_size)
                    .map_err(|e| CliError::Other(e.to_string()))?;
            }
        }
        Command::ForgettingReport { student, concepts, at, json } => {
            let engine = Engine::open(config)?;
            let rows = engine.forgetting(&student, &concepts, at)?;
            if json {
                print_json(out, &rows)?;
            } else {
                let mut text = format!("{:<12} {:<28} {:>8} {:>10} {:>10}  {}\n", "concept", "label", "mastery", "days", "forgetting", "bucket");
                for r in &rows {
                    let days = if r.elapsed_days.is_finite() { format!("{:.2}", r.elapsed_days) } else { "never".into() };
                    text.push_str(&format!(
                        "{:<12} {:<28} {:>8.3} {:>10} {:>10.3}  {}\n",
                        r.concept_id.as_str(),
                        r.label,
                        r.mastery,
                        days,
                        r.forgetting,
                        Bucket::of(r.forgetting).as_str()
                    ));
                }
                out.write_all(text.as_bytes()).map_err(|e| CliError::Other(e.to_string()))?;
            }
        }
        Command::Simulate { arms, students, seeds, turns, out: dir, judge } => {
            let mut exp = config.simulation.clone();
            if !arms.is_empty() {
                exp.arms = arms;
            }
            if let Some(n) = students {
                exp.cohort.students = n;
            }
            if !seeds.is_empty() {
                exp.seeds = seeds;
            }
            if let Some(t) = turns {
                exp.turns = t;
            }
            let gateway = if judge {
                let (g, _) = gateway_from_config(&config)?;
                let g = g.filter(|g| g.is_routed(tutor_core::gateway::LlmRole::Judge));
                Some(g.ok_or_else(|| CliError::Other("--judge needs a gateway with a judge route".into()))?)
            } else {
                None
            };
            let report = run_experiment(&exp, gateway.as_ref()).map_err(|e| CliError::Other(e.to_string()))?;
            let mut json = serde_json::to_string_pretty(&report).expect("report serializes");
            json.push('\n');
            let table = report.to_table();
            storage::write_atomic(&dir.join("report.json"), json.as_bytes()).map_err(EngineError::from)?;
            storage::write_atomic(&dir.join("report.txt"), table.as_bytes()).map_err(EngineError::from)?;
            out.write_all(table.as_bytes()).map_err(|e| CliError::Other(e.to_string()))?;
        }
        Command::Judge { session_a, session_b, context } => {
            let engine = Engine::open(config)?;
            let a = engine.get_session(&session_a)?;
            let b = engine.get_session(&session_b)?;
            let gateway = engine.judge_gateway().ok_or_else(|| CliError::Other("no judge route configured".into()))?;
            let outcome = judge_pair(&render_dialogue(&a.session), &render_dialogue(&b.session), &context, gateway)
                .map_err(EngineError::from)?;
            print_json(out, &outcome)?;
        }
        Command::Serve { listen } => {
            let mut config = config;
            if let Some(l) = listen {
                config.listen = l;
                config.validate().map_err(|e| CliError::Other(e.to_string()))?;
            }
            serve(config, out)?;
        }
        Command::Replay { session, transcript } => {
            let override_gateway = match transcript {
                Some(path) => {
                    let mut c = config.clone();
                    c.gateway.mode = GatewayMode::Replay;
                    c.gateway.transcript = Some(path);
                    gateway_from_config(&c)?.0
                }
                None => None,
            };
            let engine = Engine::open(config)?;
            let report = engine.replay_session(&session, override_gateway)?;
            print_json(out, &report)?;
            return Ok(if report.identical() { 0 } else { 1 });
        }
    }
    Ok(0)
}

fn serve(config: EngineConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let listen = config.listen.clone();
    let engine = Arc::new(Engine::open(config)?);
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build().map_err(|e| CliError::Other(e.to_string()))?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(&listen).await.map_err(|e| match e.kind() {
            std::io::ErrorKind::AddrInUse => CliError::Other(format!("address {listen} is already in use")),
            _ => CliError::Other(format!("cannot listen on {listen}: {e}")),
        })?;
        let addr = listener.local_addr().map_err(|e| CliError::Other(e.to_string()))?;
        writeln!(out, "listening on http://{addr}").and_then(|_| out.flush()).map_err(|e| CliError::Other(e.to_string()))?;
        crate::http::serve_with(listener, engine, crate::http::ctrl_c()).await.map_err(|e| CliError::Other(e.to_string()))
    })
}
