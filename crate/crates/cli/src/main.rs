mod args;
mod commands;
mod config;
mod error;
mod manifest;
mod pgm;

use clap::error::ErrorKind;
use clap::Parser;

use args::{Cli, Command};
use error::CliError;

fn init_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("PSAE_THREADS") else {
        return Ok(());
    };
    let n: usize = v.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        CliError::usage(format!(
            "PSAE_THREADS must be a positive integer, got `{v}`"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(CliError::internal)
}

fn run(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    let cfg = cli.config.as_deref().map(config::read_config).transpose()?;
    let cfg = cfg.as_ref();
    match cli.command {
        Command::Gen(a) => commands::gen(config::layer(a, cfg, "gen")?).map(drop),
        Command::Train(a) => commands::train(config::layer(a, cfg, "train")?).map(drop),
        Command::Eval(a) => commands::eval(config::layer(a, cfg, "eval")?).map(drop),
        Command::Predict(a) => commands::predict_cmd(config::layer(a, cfg, "predict")?).map(drop),
        Command::Transfer(a) => commands::transfer(config::layer(a, cfg, "transfer")?).map(drop),
        Command::Replay(a) => commands::replay(config::layer(a, cfg, "replay")?).map(drop),
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            e.exit()
        }
        Err(e) => {
            let text = e.to_string();
            let first = text
                .lines()
                .find(|l| !l.trim().is_empty())
                .unwrap_or("invalid arguments");
            let err = CliError::usage(first.trim_start_matches("error: "));
            eprintln!("{err}");
            std::process::exit(err.exit_code());
        }
    };
    if let Err(err) = run(cli) {
        eprintln!("{err}");
        std::process::exit(err.exit_code());
    }
}
