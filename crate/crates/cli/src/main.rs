mod args;
mod commands;

use std::process::ExitCode;

use clap::Parser;
use massrank_core::Error;
use serde_json::json;

use args::{Cli, Command, FileConfig};

/// Command failure, mapped to an exit status.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Validation(Error),
    Other(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Self::Validation(e)
    }
}

impl From<massrank_core::io::TableViolation> for Failure {
    fn from(v: massrank_core::io::TableViolation) -> Self {
        Self::Validation(v.into())
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Self::Usage(_) => 1,
            Self::Validation(e) if e.is_adapter() => 3,
            Self::Validation(_) | Self::Other(_) => 2,
        }
    }

    fn report(&self) -> String {
        let (class, message) = match self {
            Self::Usage(m) => ("UsageError", m.clone()),
            Self::Validation(e) => (e.class(), e.to_string()),
            Self::Other(m) => ("IoError", m.clone()),
        };
        json!({ "error": class, "message": message }).to_string()
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = match &cli.config {
        Some(p) => FileConfig::load(p).map_err(|e| Failure::Usage(e.to_string()))?,
        None => FileConfig::default(),
    };
    if let Some(jobs) = cli.jobs.or(cfg.jobs) {
        if jobs == 0 {
            return Err(Failure::Usage("--jobs must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| Failure::Other(e.to_string()))?;
    }
    match cli.command {
        Command::Score(a) => commands::score(a, &cfg),
        Command::Eval(a) => commands::eval(a, &cfg),
        Command::Pareto(a) => commands::pareto(a, &cfg),
        Command::Oracle { command } => commands::oracle(command, &cfg),
        Command::Probe(a) => commands::probe(a, &cfg),
        Command::Lexicon { command } => commands::lexicon(command),
        Command::EchoAdapter { table } => commands::echo_adapter(table),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.render().to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ").to_owned();
            eprintln!("{}", json!({ "error": "UsageError", "message": first }));
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", f.report());
            ExitCode::from(f.exit_code())
        }
    }
}
