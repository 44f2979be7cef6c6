use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use holo_cli::commands::{cmd_calibrate, cmd_citl, cmd_metrics, cmd_optimize};
use holo_cli::config::{resolve, CalibrateConfig, CitlConfig, MetricsConfig, OptimizeConfig, SweepConfig};
use holo_cli::exit_code;
use holo_cli::sweep::cmd_sweep;
use holo_core::{HoloError, Result};

#[derive(Parser)]
#[command(name = "cgh", version, about = "Quantized, time-multiplexed phase hologram experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON config for the command.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Sets the config's top-level `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// `dotted.key=value`, value parsed as JSON or taken as a string.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Optimize phase patterns for one target.
    Optimize,
    /// Bits x frames x method grid over a target set.
    Sweep,
    /// Camera-in-the-loop optimization on a simulated display, naive and surrogate.
    Citl,
    /// Fit the propagation model to simulated captures, with an ablation ladder.
    Calibrate,
    /// PSNR and SSIM between two images.
    Metrics { a: Option<String>, b: Option<String> },
}

fn out_dir(cli: &Cli) -> Result<&Path> {
    cli.out
        .as_deref()
        .ok_or_else(|| HoloError::config("--out is required for this command"))
}

fn run(cli: &Cli) -> Result<()> {
    let (cfg, ov, seed) = (cli.config.as_deref(), &cli.overrides, cli.seed);
    match &cli.command {
        Command::Optimize => {
            let c: OptimizeConfig = resolve(cfg, ov, seed)?;
            let m = cmd_optimize(&c, out_dir(cli)?)?;
            eprintln!("psnr {:.2} dB, ssim {:.4}, {} iterations", m.psnr, m.ssim, m.iterations);
        }
        Command::Sweep => {
            let c: SweepConfig = resolve(cfg, ov, seed)?;
            let o = cmd_sweep(&c, out_dir(cli)?)?;
            eprintln!(
                "{} cells, reference {:.2} dB",
                o.result.cells.len(),
                o.reference_psnr
            );
        }
        Command::Citl => {
            let c: CitlConfig = resolve(cfg, ov, seed)?;
            let m = cmd_citl(&c, out_dir(cli)?)?;
            eprintln!(
                "naive {:.2} dB, {} {:.2} dB",
                m.naive_psnr,
                m.surrogate.name(),
                m.surrogate_psnr
            );
        }
        Command::Calibrate => {
            let c: CalibrateConfig = resolve(cfg, ov, seed)?;
            let m = cmd_calibrate(&c, out_dir(cli)?)?;
            eprintln!(
                "test psnr {:.2} dB nominal, {:.2} dB fitted",
                m.nominal_test_psnr, m.fitted_test_psnr
            );
        }
        Command::Metrics { a, b } => {
            let mut c: MetricsConfig = resolve(cfg, ov, seed)?;
            if a.is_some() {
                c.a = a.clone();
            }
            if b.is_some() {
                c.b = b.clone();
            }
            let v = cmd_metrics(&c, cli.out.as_deref())?;
            println!("{}", serde_json::to_string_pretty(&v)?);
        }
    }
    Ok(())
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
    let jobs = match cli.jobs {
        Some(0) => {
            eprintln!("error: --jobs must be >= 1");
            return ExitCode::from(1);
        }
        Some(n) => n,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(jobs).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    match pool.install(|| run(&cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
