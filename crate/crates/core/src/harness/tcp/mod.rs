//! The same node program hosted over TCP.
//!
//! Every connection opens with a one-byte role and the sender's id, then
//! carries length-prefixed envelope frames. Peers that cannot be reached
//! after the retry budget are treated as omission faults.

pub mod cluster;
pub mod serve;

use std::collections::{BTreeMap, BTreeSet};
use std::io::{self, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpStream};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use ed25519_dalek::VerifyingKey;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::authn::{Envelope, KeyRegistry, PeerEntry, Signer, TransmitError};
use crate::pbft::PbftConfig;
use crate::{Millis, NodeId};

pub use cluster::{run_loopback, TcpRun};

const MAX_FRAME: u32 = 16 << 20;
pub const ROLE_PEER: u8 = 0;
pub const ROLE_CONTROL: u8 = 1;

#[derive(Debug, Error)]
pub enum TcpError {
    #[error("cluster config: {0}")]
    Config(String),
    #[error("key file {path}: {err}")]
    Key { path: PathBuf, err: String },
    #[error("cannot bind {addr}: {err}")]
    Bind { addr: String, err: io::Error },
    #[error("peer {peer} unreachable: {err}")]
    PeerUnreachable { peer: NodeId, err: String },
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("node refused its own transmission: {0}")]
    Transmit(#[from] TransmitError),
    #[error("no decision within {0} ms")]
    Timeout(Millis),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Sim,
    Tcp,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeerConfig {
    pub id: NodeId,
    pub address: String,
    /// Hex-encoded ed25519 verifying key.
    pub public_key: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub f: u64,
    pub nodes: Vec<PeerConfig>,
    pub mode: Mode,
    #[serde(default = "default_tick")]
    pub tick_ms: Millis,
    #[serde(default = "default_base")]
    pub view_timeout_base_ms: Millis,
    #[serde(default = "default_delta")]
    pub delta_ms: Millis,
    /// Holds `node-<id>.key`, the hex secret of each local node.
    #[serde(default)]
    pub key_dir: Option<PathBuf>,
    #[serde(default = "default_retries")]
    pub connect_retries: u32,
    #[serde(default = "default_retry_ms")]
    pub retry_ms: Millis,
    #[serde(default = "default_client")]
    pub client: NodeId,
}

fn default_tick() -> Millis {
    250
}
fn default_base() -> Millis {
    1000
}
fn default_delta() -> Millis {
    1000
}
fn default_retries() -> u32 {
    20
}
fn default_retry_ms() -> Millis {
    50
}
fn default_client() -> NodeId {
    NodeId(0)
}

pub fn key_path(dir: &Path, id: NodeId) -> PathBuf {
    dir.join(format!("node-{}.key", id.0))
}

pub fn write_key_files(dir: &Path, signers: &[Signer]) -> io::Result<()> {
    std::fs::create_dir_all(dir)?;
    for s in signers {
        std::fs::write(key_path(dir, s.id()), s.secret_hex())?;
    }
    Ok(())
}

impl ClusterConfig {
    /// A loopback cluster at `addrs`, keys from `signers`.
    pub fn loopback(f: u64, addrs: &[SocketAddr], signers: &[Signer], key_dir: Option<PathBuf>) -> Self {
        ClusterConfig {
            f,
            nodes: signers
                .iter()
                .zip(addrs)
                .map(|(s, a)| PeerConfig {
                    id: s.id(),
                    address: a.to_string(),
                    public_key: hex::encode(s.public().as_bytes()),
                })
                .collect(),
            mode: Mode::Tcp,
            tick_ms: default_tick(),
            view_timeout_base_ms: default_base(),
            delta_ms: default_delta(),
            key_dir,
            connect_retries: default_retries(),
            retry_ms: default_retry_ms(),
            client: default_client(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, TcpError> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ClusterConfig = serde_json::from_str(&text).map_err(|e| TcpError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), TcpError> {
        let n = 3 * self.f + 1;
        if self.f == 0 || self.nodes.len() as u64 != n {
            return Err(TcpError::Config(format!("{} nodes for f={}, expected {n}", self.nodes.len(), self.f)));
        }
        if self.nodes.iter().enumerate().any(|(i, p)| p.id.0 != i as u64) {
            return Err(TcpError::Config("node ids must be 0..n-1 in order".into()));
        }
        if self.client.0 >= n {
            return Err(TcpError::Config(format!("client {} is not a node", self.client)));
        }
        if self.tick_ms == 0 || self.delta_ms == 0 {
            return Err(TcpError::Config("tick and delta must be positive".into()));
        }
        self.registry().map(|_| ())
    }

    pub fn pbft_config(&self) -> PbftConfig {
        PbftConfig { view_timeout_base: self.view_timeout_base_ms, client: self.client, ..PbftConfig::new(self.f) }
    }

    pub fn registry(&self) -> Result<KeyRegistry, TcpError> {
        let mut reg = KeyRegistry::new();
        for p in &self.nodes {
            let mut key = [0u8; 32];
            hex::decode_to_slice(&p.public_key, &mut key).map_err(|e| TcpError::Config(format!("{}: {e}", p.id)))?;
            let public = VerifyingKey::from_bytes(&key).map_err(|e| TcpError::Config(format!("{}: {e}", p.id)))?;
            reg.insert(p.id, PeerEntry { public, addr: Some(p.address.clone()) });
        }
        Ok(reg)
    }

    pub fn address(&self, id: NodeId) -> Option<&str> {
        self.nodes.get(id.0 as usize).map(|p| p.address.as_str())
    }

    /// Reads this node's secret and checks it against the configured key.
    pub fn load_signer(&self, id: NodeId) -> Result<Signer, TcpError> {
        let dir = self.key_dir.as_deref().ok_or_else(|| TcpError::Config("key_dir is not set".into()))?;
        let path = key_path(dir, id);
        let text =
            std::fs::read_to_string(&path).map_err(|e| TcpError::Key { path: path.clone(), err: e.to_string() })?;
        let signer =
            Signer::from_hex(id, &text).map_err(|e| TcpError::Key { path: path.clone(), err: e.to_string() })?;
        let expected = self.nodes.get(id.0 as usize).map(|p| p.public_key.as_str());
        if expected != Some(hex::encode(signer.public().as_bytes()).as_str()) {
            return Err(TcpError::Key { path, err: "secret does not match the configured public key".into() });
        }
        Ok(signer)
    }
}

pub fn write_hello(s: &mut TcpStream, role: u8, id: NodeId) -> io::Result<()> {
    let mut b = vec![role];
    b.extend_from_slice(&id.0.to_be_bytes());
    s.write_all(&b)
}

pub fn read_hello(s: &mut TcpStream) -> io::Result<(u8, NodeId)> {
    let mut b = [0u8; 9];
    s.read_exact(&mut b)?;
    Ok((b[0], NodeId(u64::from_be_bytes(b[1..].try_into().expect("8 bytes")))))
}

pub fn write_frame(s: &mut impl Write, body: &[u8]) -> io::Result<()> {
    let len = u32::try_from(body.len()).map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "frame too large"))?;
    s.write_all(&len.to_be_bytes())?;
    s.write_all(body)
}

pub fn read_frame(s: &mut impl Read) -> io::Result<Vec<u8>> {
    let mut len = [0u8; 4];
    s.read_exact(&mut len)?;
    let len = u32::from_be_bytes(len);
    if len > MAX_FRAME {
        return Err(io::Error::new(io::ErrorKind::InvalidData, format!("frame of {len} bytes")));
    }
    let mut body = vec![0u8; len as usize];
    s.read_exact(&mut body)?;
    Ok(body)
}

pub fn read_envelope(s: &mut impl Read) -> io::Result<Envelope> {
    let body = read_frame(s)?;
    Envelope::from_bytes(&body).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e.to_string()))
}

/// Connects and introduces this node, retrying within the budget.
pub fn connect(cfg: &ClusterConfig, from: NodeId, to: NodeId, role: u8) -> Result<TcpStream, TcpError> {
    let addr = cfg.address(to).ok_or_else(|| TcpError::Config(format!("no address for {to}")))?;
    let mut last = String::new();
    for _ in 0..=cfg.connect_retries {
        match TcpStream::connect(addr) {
            Ok(mut s) => {
                s.set_nodelay(true)?;
                write_hello(&mut s, role, from)?;
                return Ok(s);
            }
            Err(e) => last = e.to_string(),
        }
        thread::sleep(Duration::from_millis(cfg.retry_ms));
    }
    Err(TcpError::PeerUnreachable { peer: to, err: last })
}

/// Outbound connections, opened on first use and kept open.
pub struct Transport {
    cfg: ClusterConfig,
    links: Mutex<BTreeMap<(NodeId, NodeId), TcpStream>>,
    unreachable: Mutex<BTreeSet<NodeId>>,
}

impl Transport {
    pub fn new(cfg: ClusterConfig) -> Self {
        Transport { cfg, links: Mutex::new(BTreeMap::new()), unreachable: Mutex::new(BTreeSet::new()) }
    }

    /// Sends one envelope. A peer that exhausts the retry budget once is not
    /// retried again.
    pub fn send(&self, from: NodeId, to: NodeId, env: &Envelope) -> Result<(), TcpError> {
        if self.unreachable.lock().expect("transport lock").contains(&to) {
            return Err(TcpError::PeerUnreachable { peer: to, err: "gave up earlier".into() });
        }
        let mut links = self.links.lock().expect("transport lock");
        if let std::collections::btree_map::Entry::Vacant(slot) = links.entry((from, to)) {
            match connect(&self.cfg, from, to, ROLE_PEER) {
                Ok(s) => {
                    slot.insert(s);
                }
                Err(e) => {
                    self.unreachable.lock().expect("transport lock").insert(to);
                    return Err(e);
                }
            }
        }
        let stream = links.get_mut(&(from, to)).expect("link just opened");
        if let Err(e) = stream.write_all(&env.to_frame()) {
            links.remove(&(from, to));
            return Err(e.into());
        }
        Ok(())
    }

    /// Closes every outbound connection.
    pub fn close(&self) {
        for s in self.links.lock().expect("transport lock").values() {
            let _ = s.shutdown(Shutdown::Both);
        }
    }
}
