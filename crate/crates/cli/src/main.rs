//! `salmask` command-line tool.

mod commands;

use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::error;
use salmask::Error;

use commands::*;

#[derive(Parser)]
#[command(name = "salmask", version, about = "Saliency-guided masking for contrastive pretraining")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Contrastive pretraining from a config file.
    Pretrain(PretrainArgs),
    /// Linear probe on a frozen checkpoint.
    LinearProbe(ProbeArgs),
    /// Saliency grid of one image, as SMT1 and PPM.
    Saliency(SaliencyArgs),
    /// Masks one image and writes the result, a saliency overlay and the plan.
    MaskPreview(PreviewArgs),
    /// Embedding variance across augmented views.
    VarianceReport(VarianceArgs),
    /// Pretrain and probe every config under every seed.
    Ablate(AblateArgs),
    /// Writes a procedural labeled dataset with train and val splits.
    SynthData(SynthArgs),
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) | Error::Format { .. } | Error::Unsupported(_) => 1,
        _ => 2,
    }
}

fn init_threads() -> Result<(), Error> {
    let Ok(v) = std::env::var("SALMASK_THREADS") else { return Ok(()) };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("SALMASK_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| Error::State(e.to_string()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = init_threads().and_then(|()| match cli.command {
        Command::Pretrain(a) => pretrain(a),
        Command::LinearProbe(a) => linear_probe(a),
        Command::Saliency(a) => saliency(a),
        Command::MaskPreview(a) => mask_preview(a),
        Command::VarianceReport(a) => variance_report(a),
        Command::Ablate(a) => ablate(a),
        Command::SynthData(a) => synth_data(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
