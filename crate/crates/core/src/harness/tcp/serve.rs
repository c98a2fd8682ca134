//! A standalone node process and the client side of its control port.
//!
//! A control connection sends one frame holding the requested value. The
//! node (which must be the configured client) issues the request and answers
//! with one JSON line once f+1 replies agree.

use std::io::{BufRead, BufReader, Write};
use std::net::{Shutdown, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::{
    connect, read_envelope, read_frame, read_hello, write_frame, ClusterConfig, TcpError, Transport, ROLE_CONTROL,
    ROLE_PEER,
};
use crate::authn::{validate_receive, Envelope};
use crate::pbft::{PbftCall, PbftProgram};
use crate::runtime::{recipients, step, Event, NodeProgram};
use crate::{Decision, Millis, NodeId, Value};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientReply {
    pub node: NodeId,
    pub decision: Decision,
    pub latency_ms: Millis,
}

enum Input {
    Peer(Envelope),
    Control(Value, TcpStream),
}

fn spawn_reader(mut s: TcpStream, tx: Sender<Input>) {
    thread::spawn(move || match read_hello(&mut s) {
        Ok((ROLE_PEER, _)) => {
            while let Ok(env) = read_envelope(&mut s) {
                if tx.send(Input::Peer(env)).is_err() {
                    break;
                }
            }
        }
        Ok((ROLE_CONTROL, _)) => {
            if let Ok(body) = read_frame(&mut s) {
                let _ = tx.send(Input::Control(Value(body), s));
            }
        }
        _ => {}
    });
}

/// Runs node `id` until `stop` is set.
pub fn serve(cfg: &ClusterConfig, id: NodeId, stop: Arc<AtomicBool>) -> Result<(), TcpError> {
    cfg.validate()?;
    let signer = cfg.load_signer(id)?;
    let registry = cfg.registry()?;
    let prog = PbftProgram::new(cfg.pbft_config());
    let addr = cfg.address(id).ok_or_else(|| TcpError::Config(format!("no address for {id}")))?;
    let listener = TcpListener::bind(addr).map_err(|err| TcpError::Bind { addr: addr.to_string(), err })?;
    listener.set_nonblocking(true)?;
    let (tx, rx) = mpsc::channel();
    let accept_stop = stop.clone();
    let acceptor = thread::spawn(move || {
        while !accept_stop.load(Ordering::Relaxed) {
            match listener.accept() {
                Ok((s, _)) => {
                    let _ = s.set_nonblocking(false);
                    let _ = s.set_nodelay(true);
                    spawn_reader(s, tx.clone());
                }
                Err(_) => thread::sleep(Duration::from_millis(5)),
            }
        }
    });

    let transport = Transport::new(cfg.clone());
    let start = Instant::now();
    let tick = Duration::from_millis(cfg.tick_ms);
    let mut next_tick = start + tick;
    let mut st = prog.zero(id);
    let mut waiting: Option<(TcpStream, Instant)> = None;
    while !stop.load(Ordering::Relaxed) {
        let ev = match rx.recv_timeout(next_tick.saturating_duration_since(Instant::now())) {
            Ok(Input::Peer(env)) => match validate_receive(&registry, &env, prog.extractor()) {
                Ok(a) => Event::Message { from: a.signer, msg: a.message, sig: a.sig },
                Err(e) => {
                    tracing::debug!(%id, "dropping envelope from {}: {e}", env.signer);
                    continue;
                }
            },
            Ok(Input::Control(value, s)) => {
                waiting = Some((s, Instant::now()));
                Event::Call(PbftCall::Request(value))
            }
            Err(RecvTimeoutError::Timeout) => {
                next_tick += tick;
                Event::Timeout(start.elapsed().as_millis() as Millis)
            }
            Err(RecvTimeoutError::Disconnected) => break,
        };
        let (next, outs) = step(&prog, &registry, id, &st, &ev)?;
        st = next;
        for o in outs {
            let env = o.sign(&signer);
            for to in recipients(o.to, cfg.nodes.len() as u64) {
                if let Err(e) = transport.send(id, to, &env) {
                    tracing::warn!(%id, "send to {to} failed: {e}");
                }
            }
        }
        let Some(decision) = st.client().done else { continue };
        if let Some((mut s, t0)) = waiting.take() {
            let reply = ClientReply { node: id, decision, latency_ms: t0.elapsed().as_millis() as Millis };
            let line = serde_json::to_string(&reply).expect("reply serializes");
            let _ = writeln!(s, "{line}");
            let _ = s.shutdown(Shutdown::Both);
        }
    }
    transport.close();
    let _ = acceptor.join();
    Ok(())
}

/// Asks the cluster's client node for `value` and waits for its reply.
pub fn client_request(cfg: &ClusterConfig, value: &Value, timeout_ms: Millis) -> Result<ClientReply, TcpError> {
    let mut s = connect(cfg, cfg.client, cfg.client, ROLE_CONTROL)?;
    write_frame(&mut s, &value.0)?;
    s.set_read_timeout(Some(Duration::from_millis(timeout_ms)))?;
    let mut line = String::new();
    BufReader::new(s).read_line(&mut line).map_err(|_| TcpError::Timeout(timeout_ms))?;
    if line.is_empty() {
        return Err(TcpError::Timeout(timeout_ms));
    }
    serde_json::from_str(&line).map_err(|e| TcpError::Config(format!("bad reply: {e}")))
}
