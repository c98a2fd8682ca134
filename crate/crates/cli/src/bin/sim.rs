//! Simulator front end: single scenarios, the evaluation suites, the
//! regression mutants and the loopback TCP cluster.

use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use bft_core::harness::suites::{run_common_case, run_failure_suite, run_regressions, LatencyReport, Trial};
use bft_core::harness::tcp::cluster::LoopbackOptions;
use bft_core::harness::tcp::run_loopback;
use bft_core::harness::{run, Scenario};
use bft_core::sm::write_ndjson;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(about = "Run PBFT scenarios on the simulated network")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one scenario file and write its trace.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        /// Newline-delimited JSON trace.
        #[arg(long)]
        out: Option<PathBuf>,
        /// JSON report; printed to stdout when absent.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Run the common-case trials or the failure scenarios.
    Suite {
        #[arg(long, conflicts_with = "trials")]
        failure: bool,
        #[arg(long, default_value_t = 1)]
        f: u64,
        #[arg(long, default_value_t = 10)]
        trials: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        json: Option<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Check that every bug mutant is caught by its detector.
    Regressions {
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Run the common case on an in-process loopback TCP cluster.
    Tcp {
        #[arg(long, default_value_t = 1)]
        f: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 10_000)]
        timeout_ms: u64,
    },
}

fn emit(report: &LatencyReport, json: Option<PathBuf>, csv: Option<PathBuf>) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(report)?;
    match json {
        Some(p) => std::fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?,
        None => println!("{text}"),
    }
    if let Some(p) = csv {
        std::fs::write(&p, report.to_csv()).with_context(|| format!("writing {}", p.display()))?;
    }
    for t in &report.trials {
        for (check, why) in t.checks.failures() {
            eprintln!("{} seed {}: {check} failed: {why}", t.scenario, t.seed);
        }
    }
    Ok(())
}

fn write_trace<S: serde::Serialize, T: serde::Serialize>(
    prefix: &bft_core::sm::ExecutionPrefix<S, T>,
    out: &PathBuf,
) -> anyhow::Result<()> {
    let file = File::create(out).with_context(|| format!("creating {}", out.display()))?;
    write_ndjson(prefix, BufWriter::new(file))?;
    Ok(())
}

fn main() -> anyhow::Result<ExitCode> {
    tracing_subscriber::fmt().with_writer(std::io::stderr).init();
    let ok = match Cli::parse().cmd {
        Cmd::Run { scenario, out, report } => {
            let text = std::fs::read_to_string(&scenario).with_context(|| format!("reading {}", scenario.display()))?;
            let sc: Scenario = serde_json::from_str(&text).context("parsing scenario")?;
            let r = run(&sc)?;
            if let Some(out) = out {
                write_trace(&r.world.summary_prefix(), &out)?;
            }
            let rep = LatencyReport::new(vec![Trial::from_run(&r)]);
            emit(&rep, report, None)?;
            rep.checks_ok()
        }
        Cmd::Suite { failure, f, trials, seed, json, csv } => {
            let rep = if failure { run_failure_suite(f, seed)? } else { run_common_case(f, trials, seed)? };
            emit(&rep, json, csv)?;
            rep.checks_ok()
        }
        Cmd::Regressions { json } => {
            let verdicts = run_regressions()?;
            let text = serde_json::to_string_pretty(&verdicts)?;
            match json {
                Some(p) => std::fs::write(p, text)?,
                None => println!("{text}"),
            }
            verdicts.iter().all(|v| v.ok())
        }
        Cmd::Tcp { f, out, timeout_ms } => {
            let r = run_loopback(&LoopbackOptions { timeout_ms, ..LoopbackOptions::new(f) })?;
            if let Some(out) = out {
                write_trace(&r.summary_prefix(), &out)?;
            }
            let rep = r.report();
            emit(&rep, None, None)?;
            rep.checks_ok()
        }
    };
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
