//! `mvhand`: data generation, training, evaluation, triangulation and
//! ablation runs from the command line.

mod commands;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use mvhand::config::Switch;
use mvhand::evaluation::EvalMode;

/// Seed override for every subcommand that draws random numbers.
pub const SEED_ENV: &str = "MVHAND_SEED";

#[derive(Parser, Debug)]
#[command(name = "mvhand", version, about = "Multi-view self-supervised hand pose toolkit")]
struct Cli {
    /// Overrides the data and training seeds of the loaded config.
    #[arg(long, global = true, env = SEED_ENV)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic multi-view dataset.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes a checkpoint plus step and epoch CSV logs.
    Train(TrainArgs),
    /// Evaluate a checkpoint and print a JSON report.
    Eval(EvalArgs),
    /// Recover 3D joints from per-view 2D predictions.
    Triangulate(TriangulateArgs),
    /// Train and evaluate with one component disabled.
    Ablate(AblateArgs),
    /// Score 3D predictions against ground truth.
    Metrics(MetricsArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch metrics CSV [default: <out>.metrics.csv].
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Per-step loss CSV [default: <out>.steps.csv].
    #[arg(long)]
    steps: Option<PathBuf>,
    /// Also write the final report JSON here.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Split {
    HeldOut,
    Train,
    All,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Number of leading views, or a comma-separated list of view indices.
    #[arg(long)]
    views: Option<String>,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<EvalMode>,
    #[arg(long, value_enum, default_value = "held-out")]
    split: Split,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the forward graph of the first evaluated sample as JSON.
    #[arg(long)]
    dump_graph: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Method {
    Dlt,
    Ransac,
    OptCenter,
}

#[derive(Args, Debug)]
struct TriangulateArgs {
    #[arg(long, value_enum)]
    method: Method,
    /// CSV with columns `view,joint,u,v`.
    #[arg(long)]
    preds: PathBuf,
    /// Rig JSON (`width`, `height`, `cameras`).
    #[arg(long)]
    rig: PathBuf,
    /// Root-relative pose CSV `joint,x,y,z`; required by opt-center.
    #[arg(long)]
    pose: Option<PathBuf>,
    /// Output CSV `joint,x,y,z` [default: stdout].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_parser = parse_switch)]
    switch: Switch,
    /// Dataset; generated from the config when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Also train the unablated model and include its report.
    #[arg(long)]
    compare: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct MetricsArgs {
    /// CSV with columns `sample,joint,x,y,z` (meters).
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Plot-ready PCK curve CSV.
    #[arg(long)]
    pck: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_mode(s: &str) -> Result<EvalMode, String> {
    s.parse().map_err(|e: mvhand::Error| e.to_string())
}

fn parse_switch(s: &str) -> Result<Switch, String> {
    s.parse().map_err(|e: mvhand::Error| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
