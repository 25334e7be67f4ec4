use std::path::PathBuf;
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser};
use dbgp_cli::config::key_listing;
use dbgp_cli::{exit_code, resolve, run, Command, OUT_ENV};

/// Deep Bayesian GP classification pipeline.
#[derive(Parser, Debug)]
#[command(name = "dbgp", version)]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    /// TOML configuration file.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Root under which the run directory is created.
    #[arg(long, value_name = "DIR", env = OUT_ENV, default_value = "runs")]
    out: PathBuf,
    /// Run seed; overrides `seed` from the file and `--set`.
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let matches = Cli::command().after_help(key_listing()).get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let result = resolve(cli.config.as_deref(), &cli.overrides, cli.seed).and_then(|c| run(cli.command, &c, &cli.out));
    match result {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
