use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use genbp::benchmarks::{run, write_metrics_csv, MetricsRow, RunConfig, RunOutcome, SweepConfig};
use genbp::selftest;
use rayon::prelude::*;
use serde::de::DeserializeOwned;

const EXIT_CONFIG: u8 = 1;
const EXIT_NUMERICAL: u8 = 2;
const EXIT_INTERNAL: u8 = 3;

#[derive(Parser)]
#[command(
    name = "genbp",
    version,
    about = "GEnBP and GaBP inference on system-identification benchmarks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one configuration; writes a metrics file and a diagnostics JSON.
    Run(RunArgs),
    /// Run a full-factorial grid of configurations.
    Sweep(SweepArgs),
    /// Check the structured algebra, conformation and conditioning against
    /// dense oracles.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Replace the seed (or, for a sweep, the seed list).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
    /// Include wall-time columns (they break byte-for-byte reproducibility).
    #[arg(long)]
    timings: bool,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    /// Cells run in parallel; results do not depend on it.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn config(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }

    fn internal(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_INTERNAL,
            message: message.into(),
        }
    }
}

/// Line of the first `"key"` in the config text, 1-based.
fn line_of_key(text: &str, key: &str) -> Option<usize> {
    let quoted = format!("\"{key}\"");
    text.lines()
        .position(|l| l.contains(&quoted))
        .map(|i| i + 1)
}

fn parse_config<T: DeserializeOwned>(path: &Path) -> Result<(T, String), Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
    let cfg = serde_json::from_str(&text).map_err(|e| {
        Failure::config(format!(
            "{}:{}:{}: {e}",
            path.display(),
            e.line(),
            e.column()
        ))
    })?;
    Ok((cfg, text))
}

/// Attach the line of the first backticked field in a validation message.
fn located(path: &Path, text: &str, err: genbp::Error) -> Failure {
    let msg = err.to_string();
    let line = msg
        .split('`')
        .nth(1)
        .and_then(|key| line_of_key(text, key))
        .unwrap_or(1);
    Failure::config(format!("{}:{line}: {msg}", path.display()))
}

fn write_rows(
    rows: &[MetricsRow],
    path: &Path,
    format: Format,
    timings: bool,
) -> Result<(), Failure> {
    let io = |e: std::io::Error| Failure::internal(format!("{}: {e}", path.display()));
    let file = fs::File::create(path).map_err(io)?;
    match format {
        Format::Csv => {
            write_metrics_csv(rows, file, timings).map_err(|e| Failure::internal(e.to_string()))
        }
        Format::Json => {
            let mut values =
                serde_json::to_value(rows).map_err(|e| Failure::internal(e.to_string()))?;
            if !timings {
                for v in values.as_array_mut().into_iter().flatten() {
                    if let Some(o) = v.as_object_mut() {
                        o.remove("times");
                    }
                }
            }
            serde_json::to_writer_pretty(file, &values)
                .map_err(|e| Failure::internal(e.to_string()))
        }
    }
}

fn write_diagnostics(outcome: &RunOutcome, path: &Path, timings: bool) -> Result<(), Failure> {
    let mut d = outcome.diagnostics.clone();
    if !timings {
        strip_timings(&mut d);
    }
    let text = serde_json::to_string_pretty(&d).map_err(|e| Failure::internal(e.to_string()))?;
    fs::write(path, text).map_err(|e| Failure::internal(format!("{}: {e}", path.display())))
}

fn strip_timings(v: &mut serde_json::Value) {
    if let Some(o) = v.as_object_mut() {
        o.remove("timings");
        for child in o.values_mut() {
            strip_timings(child);
        }
    } else if let Some(a) = v.as_array_mut() {
        a.iter_mut().for_each(strip_timings);
    }
}

fn extension(format: Format) -> &'static str {
    match format {
        Format::Csv => "csv",
        Format::Json => "json",
    }
}

fn cell_name(cfg: &RunConfig) -> String {
    format!(
        "{}-{}-d{}-n{}-s{}",
        cfg.problem.name(),
        cfg.method.name(),
        cfg.problem.dim(),
        cfg.n,
        cfg.seed
    )
}

fn cmd_run(args: RunArgs) -> Result<(), Failure> {
    let c = &args.common;
    let (mut cfg, text): (RunConfig, String) = parse_config(&c.config)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(|e| located(&c.config, &text, e))?;
    fs::create_dir_all(&c.out)
        .map_err(|e| Failure::internal(format!("{}: {e}", c.out.display())))?;
    let outcome = run(&cfg).map_err(|e| located(&c.config, &text, e))?;
    write_rows(
        std::slice::from_ref(&outcome.row),
        &c.out.join(format!("metrics.{}", extension(c.format))),
        c.format,
        c.timings,
    )?;
    write_diagnostics(&outcome, &c.out.join("diagnostics.json"), c.timings)?;
    match &outcome.error {
        None => Ok(()),
        Some(e) if e.is_numerical() => Err(Failure {
            code: EXIT_NUMERICAL,
            message: e.to_string(),
        }),
        Some(e) => Err(Failure::internal(e.to_string())),
    }
}

fn cmd_sweep(args: SweepArgs) -> Result<(), Failure> {
    let c = &args.common;
    let (mut cfg, text): (SweepConfig, String) = parse_config(&c.config)?;
    if let Some(s) = c.seed {
        cfg.seeds = vec![s];
    }
    let cells = cfg.cells();
    if cells.is_empty() {
        return Err(Failure::config(format!(
            "{}: the sweep has no cells",
            c.config.display()
        )));
    }
    for cell in &cells {
        cell.validate().map_err(|e| located(&c.config, &text, e))?;
    }
    let diag_dir = c.out.join("diagnostics");
    fs::create_dir_all(&diag_dir)
        .map_err(|e| Failure::internal(format!("{}: {e}", diag_dir.display())))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.jobs.max(1))
        .build()
        .map_err(|e| Failure::internal(e.to_string()))?;
    let outcomes: Vec<Result<RunOutcome, genbp::Error>> =
        pool.install(|| cells.par_iter().map(run).collect());
    let mut rows = Vec::with_capacity(outcomes.len());
    let mut failed = 0;
    for (cell, outcome) in cells.iter().zip(outcomes) {
        let outcome = outcome.map_err(|e| located(&c.config, &text, e))?;
        if outcome.failed() {
            failed += 1;
            eprintln!("{}: {}", cell_name(cell), outcome.row.status);
        }
        write_diagnostics(
            &outcome,
            &diag_dir.join(format!("{}.json", cell_name(cell))),
            c.timings,
        )?;
        rows.push(outcome.row);
    }
    write_rows(
        &rows,
        &c.out.join(format!("sweep.{}", extension(c.format))),
        c.format,
        c.timings,
    )?;
    eprintln!("{} cells, {failed} failed", rows.len());
    Ok(())
}

fn cmd_selftest(seed: u64) -> Result<(), Failure> {
    let reports = selftest::run_all(seed);
    println!(
        "{:<22} {:>6} {:>6} {:>11} {:>9} {:>8}  result",
        "suite", "cases", "fails", "worst", "tol", "secs"
    );
    let mut ok = true;
    for r in &reports {
        println!(
            "{:<22} {:>6} {:>6} {:>11.3e} {:>9.1e} {:>8.2}  {}",
            r.name,
            r.cases,
            r.failures,
            r.worst,
            r.tol,
            r.seconds,
            if r.passed() { "pass" } else { "FAIL" }
        );
        if let Some(n) = &r.note {
            println!("    {n}");
        }
        ok &= r.passed();
    }
    if ok {
        Ok(())
    } else {
        Err(Failure {
            code: EXIT_NUMERICAL,
            message: "self test failed".into(),
        })
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Selftest { seed } => cmd_selftest(seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_lines() {
        let text = "{\n  \"n\": 1,\n  \"hyper\": {\n    \"tol\": 0\n  }\n}";
        assert_eq!(line_of_key(text, "tol"), Some(4));
        assert_eq!(line_of_key(text, "n"), Some(2));
        assert_eq!(line_of_key(text, "missing"), None);
    }

    #[test]
    fn strips_nested_timings() {
        let mut v = serde_json::json!({"timings": 1, "a": [{"timings": 2, "b": 3}]});
        strip_timings(&mut v);
        assert_eq!(v, serde_json::json!({"a": [{"b": 3}]}));
    }
}
