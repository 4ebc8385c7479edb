use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use meshpose::estimator::GridCounts;
use meshpose::harness::OcclusionLevel;
use meshpose::Error;

mod commands;

#[derive(Parser, Debug)]
#[command(name = "meshpose", version, about = "Render-and-compare 6D pose estimation on neural feature maps")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Global {
    /// Seed for every random draw.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Pose grid counts, `r1xr2xr3:l1xl2xl3`.
    #[arg(long, global = true, default_value = "12x3x3:9x9x9")]
    grid: GridCounts,
    /// Occlusion level of generated scenes.
    #[arg(long, global = true, default_value_t = 0, value_parser = clap::value_parser!(u8).range(0..=3))]
    occlusion_level: u8,
    /// Coarse proposals kept per scene.
    #[arg(long, global = true, default_value_t = 10)]
    top_k: usize,
    /// Worker threads; 0 uses all cores.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic scenes from the reference model.
    GenData(commands::GenData),
    /// Fit vertex features and the background model to posed scenes.
    Fit(commands::Fit),
    /// Detect objects and their poses in scenes.
    Estimate(commands::Estimate),
    /// Score detections against ground truth.
    Evaluate(commands::Evaluate),
    /// Export 1D loss sweeps through a pose.
    Landscape(commands::Landscape),
}

/// Process exit code of an error.
fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Param(_) | Error::Consistency(_) | Error::BehindCamera { .. } => 2,
        Error::Io(_) | Error::Format(_) => 3,
        Error::Optimization { .. } | Error::Estimation(_) | Error::Generation(_) => 4,
    }
}

pub struct Context {
    pub seed: u64,
    pub grid: GridCounts,
    pub level: OcclusionLevel,
    pub top_k: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let g = cli.global;
    if g.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(g.threads).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let ctx = Context {
        seed: g.seed,
        grid: g.grid,
        level: OcclusionLevel::from_index(g.occlusion_level).expect("range checked by clap"),
        top_k: g.top_k,
    };
    let result = match cli.command {
        Command::GenData(a) => a.run(&ctx),
        Command::Fit(a) => a.run(&ctx),
        Command::Estimate(a) => a.run(&ctx),
        Command::Evaluate(a) => a.run(&ctx),
        Command::Landscape(a) => a.run(&ctx),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

pub fn output_dir(path: &PathBuf) -> meshpose::Result<()> {
    std::fs::create_dir_all(path)?;
    Ok(())
}
