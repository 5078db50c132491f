//! `cbm-audit`: command-line front end for auditing covariate-balance
//! metrics. Every command writing files also writes a run manifest from
//! which `replay` reproduces the same bytes.
//!
//! Exit codes: 0 ok, 2 input error, 3 solver or search budget exhausted
//! (whatever was found is still written), 4 internal error. Errors are
//! reported as a JSON object on standard error.

mod commands;
mod manifest;

use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Result;
use cbm_audit::milp::MilpError;
use cbm_audit::Error;
use clap::Parser;
use serde_json::json;

use commands::Command;
use manifest::Context;

const THREADS_ENV: &str = "CBM_AUDIT_THREADS";

const EXIT_INPUT: u8 = 2;
const EXIT_BUDGET: u8 = 3;
const EXIT_INTERNAL: u8 = 4;

#[derive(Debug, Parser)]
#[command(
    name = "cbm-audit",
    version,
    about = "Worst-case auditing of covariate-balance metrics"
)]
struct Cli {
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true, env = THREADS_ENV)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

fn exit_code_for(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Solver(
            MilpError::NumericalFailure(_) | MilpError::InvalidModel(_) | MilpError::Unbounded,
        )) => EXIT_INTERNAL,
        Some(Error::BudgetExhausted) => EXIT_BUDGET,
        _ => EXIT_INPUT,
    }
}

fn error_json(err: &anyhow::Error, code: u8) -> serde_json::Value {
    let mut v = json!({
        "error": err.to_string(),
        "chain": err.chain().skip(1).map(|e| e.to_string()).collect::<Vec<_>>(),
        "exit_code": code,
    });
    if let Some(Error::Csv { row, column, .. }) = err.downcast_ref::<Error>() {
        v["row"] = (*row).into();
        v["column"] = column.clone().into();
    }
    v
}

/// Runs a parsed command; returns whether a budget was exhausted.
fn execute(command: &Command, args: &[String], write_manifest: bool) -> Result<bool> {
    let start = Instant::now();
    let mut ctx = Context::new(command.primary_output());
    command.run(&mut ctx)?;
    if let (true, Some(primary)) = (write_manifest, ctx.primary()) {
        let m = manifest::build(
            command.name(),
            args,
            serde_json::to_value(command)?,
            &ctx,
            start.elapsed().as_secs_f64(),
        )?;
        manifest::save(&m, &manifest::manifest_path(primary))?;
    }
    Ok(ctx.budget_exceeded)
}

fn replay(path: &Path) -> Result<u8> {
    let m = manifest::load(path)?;
    std::env::set_current_dir(&m.working_dir)?;
    let inputs_unchanged = manifest::check_inputs(&m);
    let cli = Cli::try_parse_from(
        std::iter::once("cbm-audit".to_string()).chain(m.args.iter().cloned()),
    )?;
    if matches!(cli.command, Command::Replay(_)) {
        anyhow::bail!(Error::InvalidInput(
            "a manifest cannot replay a replay".into()
        ));
    }
    execute(&cli.command, &m.args, false)?;
    let outputs = manifest::compare_outputs(&m);
    let identical = outputs
        .iter()
        .all(|c| c.actual.as_ref() == Some(&c.expected));
    let report = manifest::ReplayReport {
        identical,
        inputs_unchanged,
        outputs,
    };
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(if identical { 0 } else { EXIT_INTERNAL })
}

fn configure_threads(threads: Option<usize>) -> Result<()> {
    if let Some(n) = threads {
        if n == 0 {
            anyhow::bail!(Error::InvalidInput("--threads must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()?;
    }
    Ok(())
}

fn run() -> Result<u8> {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            e.print()?;
            return Ok(0);
        }
        Err(e) => return Err(e.into()),
    };
    configure_threads(cli.threads)?;
    if let Command::Replay(a) = &cli.command {
        return replay(&a.manifest);
    }
    let args: Vec<String> = std::env::args().skip(1).collect();
    let budget = execute(&cli.command, &args, true)?;
    if budget {
        eprintln!(
            "{}",
            json!({
                "error": "budget exhausted; outputs hold the best solutions found",
                "exit_code": EXIT_BUDGET,
            })
        );
        return Ok(EXIT_BUDGET);
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match std::panic::catch_unwind(run) {
        Ok(Ok(code)) => ExitCode::from(code),
        Ok(Err(err)) => {
            let code = exit_code_for(&err);
            eprintln!("{}", error_json(&err, code));
            ExitCode::from(code)
        }
        Err(_) => {
            eprintln!(
                "{}",
                json!({ "error": "internal error (panic)", "exit_code": EXIT_INTERNAL })
            );
            ExitCode::from(EXIT_INTERNAL)
        }
    }
}
