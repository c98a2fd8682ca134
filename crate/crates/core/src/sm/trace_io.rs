//! Newline-delimited JSON persistence for execution prefixes.

use std::io::{self, BufRead, Write};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::ExecutionPrefix;

/// One line of a trace file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceLine<S, T> {
    pub index: usize,
    pub state: S,
    pub transition: T,
}

pub fn write_ndjson<S, T, W>(prefix: &ExecutionPrefix<S, T>, mut out: W) -> io::Result<()>
where
    S: Serialize,
    T: Serialize,
    W: Write,
{
    for (index, (state, transition)) in prefix.steps.iter().enumerate() {
        serde_json::to_writer(&mut out, &TraceLine { index, state, transition })?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

/// Reads a trace written by [`write_ndjson`]. Lines must appear in index order.
pub fn read_ndjson<S, T, R>(input: R) -> io::Result<ExecutionPrefix<S, T>>
where
    S: DeserializeOwned,
    T: DeserializeOwned,
    R: BufRead,
{
    let mut steps = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: TraceLine<S, T> = serde_json::from_str(&line).map_err(io::Error::other)?;
        if parsed.index != steps.len() {
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                format!("expected index {}, found {}", steps.len(), parsed.index),
            ));
        }
        steps.push((parsed.state, parsed.transition));
    }
    Ok(ExecutionPrefix { steps })
}
