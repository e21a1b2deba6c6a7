use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fuzzy_lsmpc_cli::{init_threads, run, Command, Exit, Overrides};

#[derive(Parser)]
#[command(name = "fuzzy-lsmpc", version, about = "Distributed fuzzy MPC synthesis, coordination and verification")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Solve the per-subsystem LMI problems and write gains.
    Synth(Common),
    /// Run the coordination loop.
    Coordinate(Common),
    /// Simulate the closed loop and write a trajectory CSV.
    Simulate(Common),
    /// Re-check stored gains against every invariant.
    Verify(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in name or system file.
    #[arg(long)]
    system: Option<String>,
    #[arg(long)]
    gains: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { Exit::Invalid as u8 } else { 0 });
        }
    };
    let (cmd, c) = match cli.cmd {
        Cmd::Synth(c) => (Command::Synth, c),
        Cmd::Coordinate(c) => (Command::Coordinate, c),
        Cmd::Simulate(c) => (Command::Simulate, c),
        Cmd::Verify(c) => (Command::Verify, c),
    };
    let ov = Overrides {
        config: c.config,
        system: c.system,
        gains: c.gains,
        seed: c.seed,
        steps: c.steps,
        out: c.out,
    };
    let result = init_threads().and_then(|_| run(cmd, &ov));
    match result {
        Ok(exit) => ExitCode::from(exit as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit() as u8)
        }
    }
}
