//! `d2d`: the data, training and generation pipeline as subcommands.
//!
//! Every subcommand prints one JSON line to stdout. Exit codes: 0 success,
//! 1 internal error, 2 bad input or usage, 3 failed verification.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

pub use config::PipelineConfig;

/// Environment variable naming the default config file.
pub const CONFIG_ENV: &str = "D2D_CONFIG";

#[derive(Debug)]
pub enum CliError {
    Input(String),
    Verification(Value),
    Internal(String),
}

impl From<d2dlstm::Error> for CliError {
    fn from(e: d2dlstm::Error) -> Self {
        use d2dlstm::Error as E;
        match e {
            E::Input(_) | E::Config(_) | E::Parse { .. } | E::Io(_) => CliError::Input(e.to_string()),
            E::Diverged { .. } | E::Internal(_) => CliError::Internal(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Input(e.to_string())
    }
}

#[derive(Parser, Debug)]
#[command(name = "d2d", version, about = "Diffusion-tree prediction pipeline")]
struct Cli {
    /// Config file (TOML).
    #[arg(long, global = true, env = CONFIG_ENV)]
    config: Option<PathBuf>,
    /// Global seed; overrides every per-stage seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads. Results do not depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Working directory for inputs and outputs.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Config override such as `train.epochs=5`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// No progress messages on stderr.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate transfer records from the planted generator.
    Simulate,
    /// Cluster record positions into regions.
    ClusterGps,
    /// Build and normalize per-user social features.
    BuildFeatures,
    /// Cluster users into prototypes.
    BuildPrototypes,
    /// Assemble diffusion trees, labeled when prototypes exist.
    MakeTrees,
    /// Split trees into train, validation and test sets.
    Split,
    /// Train one model.
    Train(TrainArgs),
    /// Score a trained model on the three sets.
    Eval(EvalArgs),
    /// Train the six-row model and feature comparison.
    Ablate,
    /// Re-cluster and retrain for several prototype counts.
    SweepK,
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Grow trees from the test roots with a trained model.
    Generate(GenerateArgs),
    /// Compare generated trees with the test trees.
    Compare(CompareArgs),
    /// Print the effective config as TOML.
    ShowConfig,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Model kind: d2d, lstm or fc.
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Checkpoint to score; defaults to the trained model of `train.model`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Also report the planted oracle accuracy on the test set.
    #[arg(long)]
    bayes: bool,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    trees: Option<usize>,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// greedy or sample.
    #[arg(long)]
    mode: Option<String>,
    /// Generate for the first N test trees only.
    #[arg(long)]
    count: Option<usize>,
}

#[derive(Args, Debug)]
struct CompareArgs {
    /// Generated trees; defaults to the `generate` output.
    #[arg(long)]
    predicted: Option<PathBuf>,
    /// Reference trees; defaults to the test split.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Write DOT renderings for the first N pairs.
    #[arg(long, default_value_t = 5)]
    dot: usize,
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Simulate => "simulate",
        Command::ClusterGps => "cluster-gps",
        Command::BuildFeatures => "build-features",
        Command::BuildPrototypes => "build-prototypes",
        Command::MakeTrees => "make-trees",
        Command::Split => "split",
        Command::Train(_) => "train",
        Command::Eval(_) => "eval",
        Command::Ablate => "ablate",
        Command::SweepK => "sweep-k",
        Command::Gradcheck(_) => "gradcheck",
        Command::Generate(_) => "generate",
        Command::Compare(_) => "compare",
        Command::ShowConfig => "show-config",
    }
}

fn build_config(cli: &Cli) -> Result<PipelineConfig, CliError> {
    let mut sets = cli.sets.clone();
    match &cli.command {
        Command::Train(a) => {
            sets.extend(a.model.as_ref().map(|m| format!("train.model={}", model_key(m))));
            sets.extend(a.epochs.map(|e| format!("train.epochs={e}")));
        }
        Command::Gradcheck(a) => {
            sets.extend(a.hidden.map(|v| format!("gradcheck.hidden={v}")));
            sets.extend(a.k.map(|v| format!("gradcheck.k={v}")));
            sets.extend(a.trees.map(|v| format!("gradcheck.trees={v}")));
        }
        Command::Generate(a) => sets.extend(a.mode.as_ref().map(|m| format!("generate.mode={m:?}"))),
        _ => {}
    }
    let mut cfg = PipelineConfig::load(cli.config.as_deref(), &sets)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    cfg.propagate_seed();
    Ok(cfg)
}

/// Accepts the model names the library parses and returns the config spelling.
fn model_key(m: &str) -> String {
    match m.parse::<d2dlstm::training::ModelKind>() {
        Ok(k) => serde_json::to_value(k).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default(),
        Err(_) => m.to_string(),
    }
}

fn run(cli: &Cli) -> Result<Value, CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Input("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Internal(format!("thread pool: {e}")))?;
    }
    let cfg = build_config(cli)?;
    let ctx = commands::Ctx { cfg, quiet: cli.quiet };
    match &cli.command {
        Command::Simulate => commands::simulate(&ctx),
        Command::ClusterGps => commands::cluster_gps(&ctx),
        Command::BuildFeatures => commands::build_features(&ctx),
        Command::BuildPrototypes => commands::build_prototypes(&ctx),
        Command::MakeTrees => commands::make_trees(&ctx),
        Command::Split => commands::split(&ctx),
        Command::Train(_) => commands::train(&ctx),
        Command::Eval(a) => commands::eval(&ctx, a.checkpoint.as_deref(), a.bayes),
        Command::Ablate => commands::ablate(&ctx),
        Command::SweepK => commands::sweep_k(&ctx),
        Command::Gradcheck(_) => commands::gradcheck(&ctx),
        Command::Generate(a) => commands::generate(&ctx, a.checkpoint.as_deref(), a.count),
        Command::Compare(a) => commands::compare(&ctx, a.predicted.as_deref(), a.truth.as_deref(), a.dot),
        Command::ShowConfig => {
            print!("{}", ctx.cfg.to_toml());
            Ok(json!({}))
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let name = command_name(&cli.command);
    let (mut summary, code) = match run(&cli) {
        Ok(v) => (v, 0),
        Err(CliError::Input(m)) => {
            eprintln!("error: {m}");
            (json!({ "ok": false, "error": m }), 2)
        }
        Err(CliError::Verification(v)) => {
            eprintln!("error: verification failed");
            (json!({ "ok": false, "report": v }), 3)
        }
        Err(CliError::Internal(m)) => {
            eprintln!("error: {m}");
            (json!({ "ok": false, "error": m }), 1)
        }
    };
    if matches!(cli.command, Command::ShowConfig) && code == 0 {
        return ExitCode::SUCCESS;
    }
    if let Value::Object(map) = &mut summary {
        map.insert("command".into(), name.into());
        map.entry("ok").or_insert(true.into());
    }
    println!("{summary}");
    ExitCode::from(code)
}
