use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use bim_core::harness::config::TrainConfig;
use bim_core::harness::run::{run, Command, RunArtifacts};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "bim",
    version,
    about = "Block-wise masked image modeling on a from-scratch ViT"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct Common {
    /// key=value config file
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's seed
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Block-wise pretraining
    Pretrain(Common),
    /// End-to-end masked autoencoder pretraining
    BaselineMae(Common),
    /// Linear probe on a saved backbone or checkpoint
    Probe(Common),
    /// Write the first k blocks of a checkpoint as a standalone backbone
    ExportBackbone(Common),
    /// Measured vs analytic peak activation memory
    MemReport(Common),
    /// Per-block compute estimate
    FlopReport(Common),
}

fn split(cmd: Cmd) -> (Command, Common) {
    match cmd {
        Cmd::Pretrain(c) => (Command::Pretrain, c),
        Cmd::BaselineMae(c) => (Command::BaselineMae, c),
        Cmd::Probe(c) => (Command::Probe, c),
        Cmd::ExportBackbone(c) => (Command::ExportBackbone, c),
        Cmd::MemReport(c) => (Command::MemReport, c),
        Cmd::FlopReport(c) => (Command::FlopReport, c),
    }
}

fn summarize(cmd: Command, a: &RunArtifacts) {
    if let (Some(first), Some(last)) = (a.losses.first(), a.losses.last()) {
        println!("{}: {} steps, loss {first:.6} -> {last:.6}", cmd.name(), a.losses.len());
    }
    if let Some(m) = &a.memory {
        println!(
            "peak activations: {} {} B, mae {} B, ratio {:.4}",
            m.plan.mode.name(),
            m.plan.measured_peak_bytes,
            m.mae.measured_peak_bytes,
            m.ratio_vs_mae
        );
    }
    if let Some(f) = &a.flops {
        println!("encoder linear saving vs {}: {:.4}", f.baseline_ratio, f.linear_saving);
    }
    for p in &a.probes {
        println!(
            "probe k={}: train {:.4} val {:.4}",
            p.depth_index, p.train_accuracy, p.val_accuracy
        );
    }
    for f in a.files() {
        println!("wrote {}", f.display());
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (cmd, common) = split(cli.command);
    let result = (|| -> anyhow::Result<RunArtifacts> {
        let mut cfg =
            TrainConfig::load(&common.config).with_context(|| format!("reading config {}", common.config.display()))?;
        if let Some(seed) = common.seed {
            cfg = cfg.with_seed(seed);
        }
        run(cmd, &cfg, &common.out).with_context(|| format!("{} failed", cmd.name()))
    })();
    match result {
        Ok(a) => {
            summarize(cmd, &a);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
