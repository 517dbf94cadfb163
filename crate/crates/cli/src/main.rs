use std::path::PathBuf;
use std::process::ExitCode;

use airhockey::pipeline::{self, PipelineConfig, Workspace};
use airhockey::Error;
use clap::{Parser, Subcommand};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "airhockey", about = "Air-hockey simulator and hierarchical agent")]
struct Cli {
    /// JSON pipeline configuration; defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Artifact directory.
    #[arg(long, global = true, default_value = "artifacts")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Collect labelled puck transitions from the simulator.
    GenData,
    /// Fit the piecewise-linear puck model.
    FitDynamics,
    /// Solve the shot planner on random contact beliefs.
    PlanShots,
    /// Train the energy-based shot policy.
    TrainEbm,
    /// Angle errors of the trained policy on held-out shots.
    EvalEbm,
    /// Run one match and write its logs.
    Play,
    /// Summarize match logs, or run shooting trials with `--trials`.
    Eval {
        /// Log directory, `<out>/match` by default.
        #[arg(long)]
        logs: Option<PathBuf>,
        /// Run the stationary-puck shooting trials instead.
        #[arg(long)]
        trials: bool,
    },
    /// Per-stage latency of the online loop.
    Bench {
        #[arg(long)]
        cycles: Option<usize>,
    },
}

fn run(cli: &Cli) -> airhockey::Result<Value> {
    let cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    let ws = Workspace::new(&cli.out);
    let seed = cli.seed;
    Ok(match &cli.command {
        Command::GenData => json!(pipeline::gen_data(&cfg, seed, &ws)?),
        Command::FitDynamics => {
            let model = pipeline::fit_dynamics(&ws)?;
            json!({ "dt": model.dt, "modes": model.modes })
        }
        Command::PlanShots => {
            let records = pipeline::plan_shots(&cfg, seed, &ws)?;
            let mean_p = records.iter().map(|r| r.p_goal).sum::<f64>() / records.len().max(1) as f64;
            json!({ "shots": records.len(), "mean_p_goal": mean_p })
        }
        Command::TrainEbm => json!(pipeline::train_ebm(&cfg, seed, &ws)?),
        Command::EvalEbm => json!(pipeline::eval_ebm(&cfg, seed, &ws)?),
        Command::Play => json!(pipeline::play(&cfg, seed, &ws)?),
        Command::Eval { logs, trials } => {
            if *trials {
                json!(pipeline::shooting_eval(&cfg, seed, &ws)?)
            } else {
                let dir = logs.clone().unwrap_or_else(|| ws.path("match"));
                json!(pipeline::summarize_logs(&pipeline::read_logs(&dir)?))
            }
        }
        Command::Bench { cycles } => {
            let report = pipeline::bench(&cfg, &ws.model()?, &ws.ebm()?, cycles.unwrap_or(cfg.bench_cycles), seed)?;
            airhockey::artifact::save_json(&ws.path("bench.json"), &report)?;
            json!(report)
        }
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(value) => {
            println!("{}", serde_json::to_string_pretty(&value).unwrap_or_default());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", error_json(&e));
            ExitCode::FAILURE
        }
    }
}

fn error_json(e: &Error) -> Value {
    let mut v = json!({ "error": e.kind(), "message": e.to_string() });
    match e {
        Error::MissingArtifact { command, .. } | Error::SchemaVersion { command, .. } => {
            v["commands"] = json!(pipeline::generation_chain(command));
        }
        _ => {}
    }
    v
}
