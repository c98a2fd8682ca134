//! Submits a request to a running cluster and prints the decision.

use std::path::PathBuf;

use bft_core::harness::tcp::serve::client_request;
use bft_core::harness::tcp::ClusterConfig;
use bft_core::Value;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(about = "PBFT client")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    Request {
        #[arg(long)]
        config: PathBuf,
        /// Hex-encoded request value.
        #[arg(long)]
        value: String,
        #[arg(long, default_value_t = 30_000)]
        timeout_ms: u64,
    },
}

fn main() -> anyhow::Result<()> {
    let Cmd::Request { config, value, timeout_ms } = Cli::parse().cmd;
    let cfg = ClusterConfig::load(&config)?;
    let value = Value::new(hex::decode(value.trim())?);
    let reply = client_request(&cfg, &value, timeout_ms)?;
    println!("{}", serde_json::to_string(&reply)?);
    Ok(())
}
