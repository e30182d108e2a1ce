//! Command-line front end: runs scenario files and compares trace files.
//!
//! Exit codes: 0 success, 1 bad scenario or file, 2 event budget exhausted,
//! 3 trace divergence.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use sequent::kernel::RunOutcome;
use sequent::runner::run_scenario;
use sequent::scenario::Scenario;
use sequent::trace::diff_lines;

#[derive(Parser)]
#[command(
    name = "sequent",
    version,
    about = "Deterministic network protocol simulation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and print its JSON summary.
    Run {
        /// Scenario description (TOML).
        scenario: PathBuf,
        /// Override the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the scenario's run limit, in ticks.
        #[arg(long, value_name = "TICKS")]
        until: Option<u64>,
        /// Write the recorded trace here, one line per record.
        #[arg(long, value_name = "PATH")]
        trace_out: Option<PathBuf>,
        /// Write the summary here instead of stdout.
        #[arg(long, value_name = "PATH")]
        metrics_out: Option<PathBuf>,
    },
    /// Compare two trace files line by line.
    Diff { left: PathBuf, right: PathBuf },
}

const EXIT_BUDGET: u8 = 2;
const EXIT_DIVERGED: u8 = 3;

/// Prints one line to stdout; a closed pipe ends output without error, and
/// the run's exit code is unaffected.
fn emit(text: impl std::fmt::Display) -> Result<()> {
    let mut out = io::stdout().lock();
    match writeln!(out, "{text}") {
        Err(e) if e.kind() == io::ErrorKind::BrokenPipe => Ok(()),
        other => other.context("writing to stdout"),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Run {
            scenario,
            seed,
            until,
            trace_out,
            metrics_out,
        } => run(&scenario, seed, until, trace_out, metrics_out),
        Command::Diff { left, right } => diff(&left, &right),
    }
}

fn run(
    path: &Path,
    seed: Option<u64>,
    until: Option<u64>,
    trace_out: Option<PathBuf>,
    metrics_out: Option<PathBuf>,
) -> Result<u8> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading scenario {}", path.display()))?;
    let mut scenario = Scenario::from_toml(&text)
        .with_context(|| format!("loading scenario {}", path.display()))?;
    if let Some(seed) = seed {
        scenario.seed = seed;
    }
    if let Some(until) = until {
        scenario.run_limit = Some(until);
    }

    let output = run_scenario(&scenario)?;

    if let Some(out) = trace_out {
        let Some(report) = &output.trace else {
            bail!("the scenario records no trace kinds, nothing to write");
        };
        let records = report.records.as_ref().expect("memory stream keeps records");
        let mut lines = String::new();
        for r in records {
            lines.push_str(&r.line());
            lines.push('\n');
        }
        fs::write(&out, lines).with_context(|| format!("writing trace {}", out.display()))?;
    }

    let summary = format!("{:#}", output.summary);
    match metrics_out {
        Some(out) => fs::write(&out, summary + "\n")
            .with_context(|| format!("writing summary {}", out.display()))?,
        None => emit(&summary)?,
    }

    if output.outcome == RunOutcome::BudgetExhausted {
        eprintln!("event budget exhausted before the run finished");
        return Ok(EXIT_BUDGET);
    }
    if output.divergence.is_some() {
        eprintln!("paired runs diverged; see the summary for the first mismatch");
        return Ok(EXIT_DIVERGED);
    }
    Ok(0)
}

fn diff(left: &Path, right: &Path) -> Result<u8> {
    let read = |p: &Path| -> Result<Vec<String>> {
        Ok(fs::read_to_string(p)
            .with_context(|| format!("reading trace {}", p.display()))?
            .lines()
            .map(str::to_string)
            .collect())
    };
    match diff_lines(read(left)?, read(right)?) {
        Ok(lines) => {
            emit(format!("identical: {lines} lines"))?;
            Ok(0)
        }
        Err(d) => {
            emit(format!(
                "diverged at line {}\n  left:  {}\n  right: {}",
                d.index,
                d.left.as_deref().unwrap_or("<absent>"),
                d.right.as_deref().unwrap_or("<absent>"),
            ))?;
            Ok(EXIT_DIVERGED)
        }
    }
}
