//! `cloak` — operator entry point for the face-cloaking pipeline.
//!
//! Exit codes: 0 success, 1 internal failure, 2 configuration error,
//! 3 missing upstream artifact.

mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cloak_core::Error;
use config::RunConfig;
use run::Ctx;

#[derive(Parser)]
#[command(name = "cloak", version, about = "Adversarial face-cloaking pipeline")]
struct Cli {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed overriding the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Recorded in the resolved config; every pipeline stage is
    /// deterministic under a fixed seed regardless.
    #[arg(long, global = true)]
    deterministic: bool,

    /// Output directory (overrides config.paths.out_dir).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic identity dataset and write it to disk.
    SynthData,
    /// Train the white-box (and optionally black-box) embedder and
    /// calibrate verification thresholds.
    TrainEmbedder,
    /// Train the adversarial perturbation generator against the white-box
    /// embedder.
    TrainAttack,
    /// Distill the trained attack into the compact student network.
    Distill,
    /// Evaluate attack success, blur robustness, SSIM and embedding shift.
    Evaluate,
    /// Export the t-SNE embedding layout as CSV and a scatter PNG.
    Visualize,
    /// Cloak a single PNG and print the elapsed seconds.
    Cloak {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long = "out")]
        output: PathBuf,
        /// Use the distilled student instead of the teacher.
        #[arg(long)]
        student: bool,
    },
    /// Run the whole pipeline: synth-data, train-embedder, train-attack,
    /// distill, evaluate, visualize.
    Pipeline,
}

fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::InvalidConfig(_) => 2,
        Error::MissingArtifact(_) => 3,
        _ => 1,
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, (u8, String)> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| (2u8, format!("cannot read config {}: {e}", path.display())))?;
            serde_json::from_str::<RunConfig>(&text)
                .map_err(|e| (2u8, format!("invalid config {}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed.or(cfg.seed) {
        cfg.apply_seed(seed);
    }
    cfg.validate()
        .map_err(|e| (exit_code_for(&e), e.to_string()))?;
    Ok(cfg)
}

fn resolve_out_dir(cli: &Cli, cfg: &RunConfig) -> PathBuf {
    cli.out_dir
        .clone()
        .or_else(|| cfg.paths.out_dir.clone())
        .or_else(|| std::env::var_os("CLOAK_DATA_ROOT").map(|v| PathBuf::from(v).join("run")))
        .unwrap_or_else(|| PathBuf::from("run"))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match load_config(&cli) {
        Ok(c) => c,
        Err((code, msg)) => {
            eprintln!("error: {msg}");
            return ExitCode::from(code);
        }
    };
    let ctx = Ctx {
        out_dir: resolve_out_dir(&cli, &cfg),
        cfg,
        deterministic: cli.deterministic,
    };
    let result = match &cli.cmd {
        Cmd::SynthData => run::cmd_synth_data(&ctx),
        Cmd::TrainEmbedder => run::cmd_train_embedder(&ctx),
        Cmd::TrainAttack => run::cmd_train_attack(&ctx),
        Cmd::Distill => run::cmd_distill(&ctx),
        Cmd::Evaluate => run::cmd_evaluate(&ctx),
        Cmd::Visualize => run::cmd_visualize(&ctx),
        Cmd::Cloak { input, output, student } => run::cmd_cloak(&ctx, input, output, *student),
        Cmd::Pipeline => run::cmd_pipeline(&ctx),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
