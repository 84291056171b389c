//! `sf2`: batch front end for data generation, training, evaluation and the
//! loss diagnostics.

mod commands;
mod config;
mod curves;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};

use config::{RunConfig, KEYS};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Io(String),
    #[error(transparent)]
    Core(#[from] sf2_core::Error),
    #[error("{0}")]
    Check(String),
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Io(_) => "io",
            CliError::Core(_) => "domain",
            CliError::Check(_) => "check",
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

const SUBCOMMANDS: &[(&str, &str)] = &[
    ("gen-data", "write synthetic train.csv and test.csv"),
    ("train", "train an encoder; writes model.json, history.csv, features.csv"),
    ("eval", "score held-out pairs; writes scores.csv and metrics.csv"),
    ("gradcheck", "finite-difference check of the loss gradients"),
    ("bias-init", "closed-form initial bias and its residual"),
    ("bench-shard", "classifier-layer throughput against shard count"),
    ("ablate", "accuracy for each cumulative design-principle row"),
    ("noise", "accuracy against label-noise rate for both losses"),
    ("plot-data", "tabulate a loss or similarity curve"),
];

fn key_help() -> String {
    let mut s = String::from("Config keys (set with --<key> <value> or in the --config file):\n");
    for k in KEYS {
        let default = if k.default.is_empty() { "\"\"" } else { k.default };
        s.push_str(&format!("  {:<16} {} [default: {default}]\n", k.name, k.help));
    }
    s
}

fn cli() -> Command {
    let mut sub_args = vec![Arg::new("config")
        .long("config")
        .value_name("PATH")
        .help("flat key = value file applied before the flags")];
    for k in KEYS {
        sub_args.push(
            Arg::new(k.name)
                .long(k.name)
                .value_name("VALUE")
                .action(ArgAction::Set)
                .allow_hyphen_values(true)
                .hide(true),
        );
    }
    let mut cmd = Command::new("sf2")
        .about("Hyperspherical one-vs-all loss toolkit")
        .subcommand_required(true)
        .arg_required_else_help(true);
    for (name, about) in SUBCOMMANDS {
        cmd = cmd.subcommand(Command::new(*name).about(*about).args(sub_args.clone()).after_help(key_help()));
    }
    cmd
}

fn resolve(m: &ArgMatches) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = m.get_one::<String>("config") {
        cfg.load_file(&PathBuf::from(path))?;
    }
    for k in KEYS {
        if let Some(v) = m.get_one::<String>(k.name) {
            cfg.set(k.name, v)?;
        }
    }
    Ok(cfg)
}

fn run(name: &str, m: &ArgMatches) -> Result<(), CliError> {
    let cfg = resolve(m)?;
    commands::dispatch(name, &cfg)
}

fn main() -> ExitCode {
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error,config,{first}");
            return ExitCode::from(2);
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand required");
    match run(name, sub) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error,{},{}", e.kind(), e.to_string().replace('\n', " "));
            ExitCode::from(if matches!(e, CliError::Config(_)) { 2 } else { 1 })
        }
    }
}
