use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;
mod output;

use commands::{ConfigError, Outcome};
use config::RunConfig;
use output::{write_run, RunManifest};

/// Verification, cost-model and simulation runs for sparse latent attention,
/// stabilized GRPO and agent context management.
#[derive(Parser, Debug)]
#[command(name = "dsa-lab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// key=value configuration file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the `seed` key
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for CSV artifacts and the manifest
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Run every module's property sweep; exit 1 if any fails
    Verify,
    /// Closed-form and instrumented operation counts over bench.L_grid
    Bench,
    /// Train the toy policy with GRPO and write the per-step trace
    Grpo,
    /// Compare context-management strategies over ctx.window
    Ctxsim,
    /// Two-stage indexer schedule on a toy instance
    Schedule,
    /// Print every config key with its default
    Keys,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Verify => "verify",
            Command::Bench => "bench",
            Command::Grpo => "grpo",
            Command::Ctxsim => "ctxsim",
            Command::Schedule => "schedule",
            Command::Keys => "keys",
        }
    }
}

const EXIT_CHECK_FAILED: u8 = 1;
const EXIT_BAD_CONFIG: u8 = 2;

fn run(cli: &Cli, cfg: &RunConfig) -> anyhow::Result<Outcome> {
    match cli.command {
        Command::Verify => commands::cmd_verify(cfg),
        Command::Bench => commands::cmd_bench(cfg),
        Command::Grpo => commands::cmd_grpo(cfg),
        Command::Ctxsim => commands::cmd_ctxsim(cfg),
        Command::Schedule => commands::cmd_schedule(cfg),
        Command::Keys => Ok(Outcome {
            summary: RunConfig::documentation(),
            ok: true,
            ..Outcome::default()
        }),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match RunConfig::load(cli.config.as_deref(), cli.seed, |k| std::env::var(k).ok()) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(EXIT_BAD_CONFIG);
        }
    };
    let outcome = match run(&cli, &cfg) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = if e.is::<ConfigError>() {
                EXIT_BAD_CONFIG
            } else {
                EXIT_CHECK_FAILED
            };
            return ExitCode::from(code);
        }
    };
    print!("{}", outcome.summary);
    if !outcome.artifacts.is_empty() {
        let manifest = RunManifest::new(
            cli.command.name(),
            cfg.seed(),
            cfg.snapshot(),
            &outcome.artifacts,
        );
        if let Err(e) = write_run(&cli.out, &outcome.artifacts, &manifest) {
            eprintln!("error: {e:#}");
            return ExitCode::from(EXIT_CHECK_FAILED);
        }
    }
    if outcome.ok {
        ExitCode::SUCCESS
    } else {
        eprintln!("error: {} reported failures", cli.command.name());
        ExitCode::from(EXIT_CHECK_FAILED)
    }
}
