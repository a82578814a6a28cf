// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use csreft::cli;
use csreft::config::Overrides;
use csreft::router::GateMode;

#[derive(Parser)]
#[command(name = "csreft", version, about = "Routed subspace edits on a frozen toy transformer")]
struct Args {
    /// Overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Gate mode for evaluation.
    #[arg(long, global = true)]
    gate: Option<GateMode>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train edits and router on the configured task mixture.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the shared / routed / specialist interference benchmark.
    Interfere {
        #[arg(long)]
        config: PathBuf,
    },
    /// Check analytic gradients against central differences.
    Gradcheck {
        #[arg(long, default_value_t = 8)]
        d: usize,
        #[arg(long, default_value_t = 2)]
        r: usize,
        #[arg(long, default_value_t = 2)]
        k: usize,
    },
    /// Print trainable parameter counts for a config.
    Countparams {
        #[arg(long)]
        config: PathBuf,
    },
}

fn init_logging() {
    let level = match std::env::var("CSREFT_LOG").as_deref() {
        Ok("quiet") => log::LevelFilter::Off,
        Ok("debug") => log::LevelFilter::Debug,
        Ok("info") | Err(_) => log::LevelFilter::Info,
        Ok(other) => {
            eprintln!("warning: CSREFT_LOG={other} not one of quiet, info, debug; using info");
            log::LevelFilter::Info
        }
    };
    env_logger::Builder::new().filter_level(level).init();
}

fn main() -> ExitCode {
    init_logging();
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { cli::EXIT_CONFIG as u8 } else { 0 });
        }
    };
    let overrides = Overrides {
        seed: args.seed,
        out: args.out,
        gate: args.gate,
    };
    let (mut out, mut err) = (std::io::stdout(), std::io::stderr());
    let code = match args.command {
        Command::Train { config } => cli::cmd_train(&config, &overrides, &mut out, &mut err),
        Command::Interfere { config } => cli::cmd_interfere(&config, &overrides, &mut out, &mut err),
        Command::Gradcheck { d, r, k } => {
            cli::cmd_gradcheck(d, r, k, overrides.seed.unwrap_or(0), &mut out, &mut err)
        }
        Command::Countparams { config } => cli::cmd_countparams(&config, &overrides, &mut out, &mut err),
    };
    ExitCode::from(code as u8)
}
