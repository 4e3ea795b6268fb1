//! `depthreg`: registers N depth-sensor point clouds by jointly optimising
//! their poses and a global 2.5D depth map.
//!
//! Subcommands: `register` (the solver pipeline), `synth` (scene generator),
//! `check-jacobian` (derivative verification), `eval` (trajectory and marker
//! metrics), `export` (cloud conversion and merging). Log verbosity comes
//! from the `DEPTHREG_LOG` environment variable.
//!
//! Exit codes: 0 success / converged; 1 usage, I/O, or data errors;
//! 2 iteration limit reached without convergence; 3 linear-solver failure;
//! 4 Jacobian check above threshold.

mod commands;

use clap::{Parser, Subcommand};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "depthreg",
    version,
    about = "Multiview point cloud registration over a joint depth map"
)]
struct Cli {
    /// Worker threads for residual evaluation (1 = fully serial, 0 = auto).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
#[allow(clippy::large_enum_variant)]
enum Command {
    Register(commands::register::RegisterArgs),
    Synth(commands::synth::SynthArgs),
    CheckJacobian(commands::check_jacobian::CheckJacobianArgs),
    Eval(commands::eval::EvalArgs),
    Export(commands::export::ExportArgs),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter("DEPTHREG_LOG")).init();
    let cli = Cli::parse();

    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
        {
            eprintln!("error: could not configure {} threads: {e}", cli.threads);
            return ExitCode::from(1);
        }
    }

    let result = match cli.command {
        Command::Register(args) => commands::register::run(args),
        Command::Synth(args) => commands::synth::run(args),
        Command::CheckJacobian(args) => commands::check_jacobian::run(args),
        Command::Eval(args) => commands::eval::run(args),
        Command::Export(args) => commands::export::run(args),
    };

    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
