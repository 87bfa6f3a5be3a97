//! Command-line driver for `rough-young`.
//!
//! One subcommand per module plus `suite`. Every run writes a JSON result
//! envelope (also printed on stdout) and deterministic CSV tables into the
//! output directory. Exit status: 0 when every verdict passes, 1 on a
//! module error, 2 on a usage or configuration error, 3 when a verdict
//! fails.

pub mod commands;
pub mod config;
pub mod envelope;
pub mod plot;
pub mod suite;

use std::ffi::OsString;
use std::path::PathBuf;
use std::time::Instant;

use clap::Parser;

use crate::commands::{CmdError, Ctx, Outcome};
use crate::config::{ExperimentConfig, Task};
use crate::envelope::{ErrorReport, ResultEnvelope};
use crate::plot::emit_plot_data;

pub const EXIT_OK: i32 = 0;
pub const EXIT_MODULE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_VERDICT: i32 = 3;

/// Environment variable mirroring `--threads`.
pub const THREADS_ENV: &str = "ROUGH_YOUNG_THREADS";

#[derive(Debug, Parser)]
#[command(name = "rough-young", version, about = "Nonlinear Young integration, rough flows and Feynman-Kac Monte Carlo")]
pub struct Cli {
    /// JSON experiment config; replaces the subcommand.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub tol: Option<f64>,
    /// Output directory (default `rough-young-out`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads; also read from ROUGH_YOUNG_THREADS.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Option<Task>,
}

fn usage_exit(command: &str, message: String) -> i32 {
    let mut env = ResultEnvelope::new(command, None);
    env.error = Some(ErrorReport { kind: "usage".into(), message: message.clone() });
    eprintln!("error: {message}");
    emit(&env);
    EXIT_USAGE
}

/// Prints the envelope; a closed stdout is not an error.
fn emit(env: &ResultEnvelope) {
    use std::io::Write;
    let _ = writeln!(std::io::stdout().lock(), "{}", env.to_json());
}

fn init_threads(flag: Option<usize>) -> Result<(), String> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var(THREADS_ENV) {
            Ok(v) => Some(v.trim().parse::<usize>().map_err(|_| format!("{THREADS_ENV}='{v}' is not a thread count"))?),
            Err(_) => None,
        },
    };
    if let Some(n) = n {
        if n == 0 {
            return Err("thread count must be positive".into());
        }
        // A second initialisation in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

/// Parses arguments, runs, prints the envelope and returns the exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return EXIT_OK;
            }
            let _ = e.print();
            return usage_exit("unknown", e.kind().to_string());
        }
    };
    if let Err(m) = init_threads(cli.threads) {
        return usage_exit("unknown", m);
    }
    let mut cfg = match (&cli.config, cli.command.clone()) {
        (Some(_), Some(_)) => return usage_exit("unknown", "give either --config or a subcommand, not both".into()),
        (None, None) => return usage_exit("unknown", "no subcommand or --config given".into()),
        (Some(path), None) => match ExperimentConfig::load(path) {
            Ok(c) => c,
            Err(m) => return usage_exit("unknown", format!("config: {m}")),
        },
        (None, Some(task)) => ExperimentConfig::new(task),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if cli.tol.is_some() {
        cfg.tol = cli.tol;
    }
    if cli.out.is_some() {
        cfg.out = cli.out.clone();
    }
    let (env, code) = execute(&cfg);
    emit(&env);
    code
}

fn dispatch(cfg: &ExperimentConfig) -> Result<Outcome, CmdError> {
    let ctx = Ctx { seed: cfg.seed, tol: cfg.tol };
    match &cfg.task {
        Task::Integrate(a) => commands::integrate(a, ctx),
        Task::Flow(a) => commands::flow(a, ctx),
        Task::Transport(a) => commands::transport(a, ctx),
        Task::Fk(a) => commands::fk(a, ctx),
        Task::Sheet(a) => commands::sheet(a, ctx),
        Task::Suite(a) => suite::run(a, ctx),
    }
}

/// Runs a configuration, writes its files and returns the envelope with the
/// exit status.
pub fn execute(cfg: &ExperimentConfig) -> (ResultEnvelope, i32) {
    let start = Instant::now();
    let command = cfg.task.name();
    let mut env = ResultEnvelope::new(command, Some(cfg.clone()));
    let dir = cfg.out_dir();
    let result = dispatch(cfg).and_then(|mut outcome| {
        if let Some(p) = outcome.plot.take() {
            let kind = p.kind;
            env.outputs = outcome.outputs;
            env.outputs["plot"] = p.to_value();
            let table = emit_plot_data(&env, kind).map_err(CmdError::Usage)?;
            outcome.tables.push((format!("{command}_{}.csv", kind.name()), table.render()));
        } else {
            env.outputs = outcome.outputs;
        }
        env.verdicts = outcome.verdicts;
        write_tables(&dir, &outcome.tables).map_err(|e| CmdError::Module(rough_young::Error::Io(e)))?;
        env.files = outcome.tables.into_iter().map(|(n, _)| n).collect();
        Ok(())
    });
    let code = match result {
        Ok(()) if env.all_pass() => EXIT_OK,
        Ok(()) => EXIT_VERDICT,
        Err(e) => {
            env.error = Some(ErrorReport { kind: e.kind(), message: e.message() });
            e.exit_code()
        }
    };
    env.wall_clock_seconds = start.elapsed().as_secs_f64();
    if let Err(e) = env.write(&dir.join(format!("{command}.json"))) {
        eprintln!("warning: could not write envelope: {e}");
    }
    (env, code)
}

fn write_tables(dir: &std::path::Path, tables: &[(String, String)]) -> Result<(), String> {
    for (name, text) in tables {
        let path = dir.join(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| format!("{}: {e}", parent.display()))?;
        }
        std::fs::write(&path, text).map_err(|e| format!("{}: {e}", path.display()))?;
    }
    Ok(())
}
