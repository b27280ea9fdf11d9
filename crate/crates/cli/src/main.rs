mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use treefield_field::FusionMode;
use treefield_pipeline::Supervision;

use crate::config::Preset;

/// Synthetic tubular trees, TopoBreak corruption, and a tri-plane implicit
/// field for repair, labeling and segment reconstruction.
#[derive(Parser, Debug)]
#[command(name = "treefield", version)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug)]
pub struct Global {
    /// TOML file with [synth], [model] and [train] sections; replaces the preset.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value = "desk")]
    pub preset: Preset,
    /// Overrides the synth and train seeds.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate complete synthetic trees into DIR/case_NNNN.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        count: usize,
    },
    /// Apply TopoBreak to every case under --data.
    Corrupt {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        min_breaks: usize,
        #[arg(long, default_value_t = 3)]
        max_breaks: usize,
    },
    /// Train on the corrupted cases under --data.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        supervision: Option<Supervision>,
        #[arg(long)]
        fusion: Option<FusionMode>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Full-volume inference on one corrupted case.
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        case: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4096)]
        chunk: usize,
    },
    /// Score a prediction directory, or a model run on the case, and write metrics.json.
    Eval {
        #[arg(long)]
        case: PathBuf,
        #[arg(long, conflicts_with = "model", required_unless_present = "model")]
        pred: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Expected weak-supervision accuracy next to its Monte Carlo estimate.
    WeakAcc {
        /// Corrupted cases; generated from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        count: usize,
        #[arg(long, default_value_t = 1_000_000)]
        queries: usize,
        #[arg(long, default_value_t = 6.0)]
        radius: f64,
    },
    /// Time thinning, components, KNN and full inference on one case; writes JSON.
    Bench {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
    },
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
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", format!("{:#}", f.error).replace('\n', " "));
            ExitCode::from(f.code)
        }
    }
}
