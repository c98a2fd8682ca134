//! One PBFT replica serving over TCP.

use std::path::PathBuf;
use std::sync::atomic::AtomicBool;
use std::sync::Arc;

use bft_core::harness::tcp::serve::serve;
use bft_core::harness::tcp::ClusterConfig;
use bft_core::NodeId;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(about = "Run a PBFT replica")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Serve until killed.
    Serve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        id: u64,
    },
}

fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt().with_writer(std::io::stderr).init();
    let Cmd::Serve { config, id } = Cli::parse().cmd;
    let cfg = ClusterConfig::load(&config)?;
    serve(&cfg, NodeId(id), Arc::new(AtomicBool::new(false)))?;
    Ok(())
}
