//! An in-process cluster whose nodes talk over loopback TCP.
//!
//! Node steps run under one recorder lock that applies each step to a
//! network state, so the run leaves an execution prefix the simulator's
//! checkers accept as is. Recorded times are milliseconds since the cluster
//! started; ticks are recorded lazily so that they land at exact multiples
//! of the tick period.

use std::collections::BTreeSet;
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use super::{read_envelope, read_hello, write_key_files, ClusterConfig, TcpError, Transport, ROLE_PEER};
use crate::authn::{Envelope, KeyRegistry, Signer};
use crate::harness::suites::{LatencyReport, Trial};
use crate::harness::{check_execution, CheckReport, Execution};
use crate::pbft::checks::{client_latency, critical_path};
use crate::pbft::measures::{target_view, PbftPrefix, TargetView};
use crate::pbft::spec::{PbftNetState, PbftTransition};
use crate::pbft::{PbftCall, PbftConfig, PbftMessage, PbftProgram};
use crate::simnet::{summary_prefix, Effects, NetTransition, Network, SentRecord};
use crate::sm::ExecutionPrefix;
use crate::{Decision, Millis, NodeId, Value};

type Outgoing = Vec<(NodeId, NodeId, Envelope)>;

struct Recorder {
    net: Arc<Network<PbftProgram>>,
    state: PbftNetState,
    prefix: PbftPrefix,
    sent_log: Vec<SentRecord<PbftMessage>>,
    start: Instant,
    stopped: bool,
    /// First step the network refused; the run is reported as failed.
    error: Option<String>,
}

impl Recorder {
    fn wall(&self) -> Millis {
        self.start.elapsed().as_millis() as Millis
    }

    fn record(&mut self, mut t: PbftTransition) -> Outgoing {
        let prep = match self.net.prepare(&self.state, &t) {
            Ok(p) => p,
            Err(e) => {
                self.error.get_or_insert_with(|| e.to_string());
                return Vec::new();
            }
        };
        let eff = Effects { sends: prep.sends.len() as u32, dropped: Vec::new(), output: prep.output.clone() };
        match &mut t {
            NetTransition::Deliver { effects, .. }
            | NetTransition::Tick { effects, .. }
            | NetTransition::LocalCall { effects, .. } => *effects = eff,
            _ => {}
        }
        let next = self.net.commit(&self.state, &t, &prep, &[]);
        let mut out = Vec::new();
        if let Some(from) = prep.node {
            for (to, msg, env) in &prep.emitted {
                let record = SentRecord {
                    at: t.at(),
                    step: self.state.step,
                    from,
                    to: *to,
                    message: msg.clone(),
                    env: env.clone(),
                };
                self.sent_log.push(record);
            }
            out.extend(prep.sends.iter().map(|(to, env)| (from, *to, env.clone())));
        }
        let prev = std::mem::replace(&mut self.state, next);
        self.prefix.push(prev, t);
        out
    }

    /// Records every tick due by `wall`, earliest first.
    fn catch_up(&mut self, wall: Millis) -> Outgoing {
        let mut out = Vec::new();
        while !self.stopped {
            let tick = self.net.tick;
            let due =
                self.state.last_tick.iter().map(|(id, last)| (last + tick, *id)).filter(|(at, _)| *at <= wall).min();
            let Some((at, node)) = due else { break };
            out.extend(self.record(NetTransition::Tick { at, node, effects: Effects::default() }));
        }
        out
    }

    fn deliver(&mut self, to: NodeId, env: &Envelope) -> Outgoing {
        if self.stopped {
            return Vec::new();
        }
        let wall = self.wall();
        let mut out = self.catch_up(wall);
        let id = self.state.inflight.values().filter(|m| m.to == to && *m.env == *env).map(|m| m.id).min();
        if let Some(id) = id {
            let at = wall.max(self.state.now);
            out.extend(self.record(NetTransition::Deliver { at, id, effects: Effects::default() }));
        }
        out
    }

    fn call(&mut self, node: NodeId, arg: PbftCall) -> Outgoing {
        let wall = self.wall();
        let mut out = self.catch_up(wall);
        let at = wall.max(self.state.now);
        out.extend(self.record(NetTransition::LocalCall { at, node, arg, effects: Effects::default() }));
        out
    }
}

struct Shared {
    recorder: Mutex<Recorder>,
    transport: Transport,
    stop: AtomicBool,
    inbound: Mutex<Vec<TcpStream>>,
}

impl Shared {
    fn send_all(&self, out: Outgoing) {
        for (from, to, env) in out {
            // A failed send is an omission; the trace shows the message in flight.
            let _ = self.transport.send(from, to, &env);
        }
    }

    fn with<R>(&self, f: impl FnOnce(&mut Recorder) -> (Outgoing, R)) -> R {
        let (out, r) = f(&mut self.recorder.lock().expect("recorder lock"));
        self.send_all(out);
        r
    }
}

fn serve_peer(shared: Arc<Shared>, me: NodeId, mut stream: TcpStream) {
    let Ok((ROLE_PEER, _)) = read_hello(&mut stream) else { return };
    while let Ok(env) = read_envelope(&mut stream) {
        shared.with(|r| (r.deliver(me, &env), ()));
    }
}

fn accept_loop(shared: Arc<Shared>, me: NodeId, listener: TcpListener) {
    while !shared.stop.load(Ordering::Relaxed) {
        match listener.accept() {
            Ok((s, _)) => {
                let _ = s.set_nonblocking(false);
                let _ = s.set_nodelay(true);
                if let Ok(c) = s.try_clone() {
                    shared.inbound.lock().expect("inbound lock").push(c);
                }
                let sh = shared.clone();
                thread::spawn(move || serve_peer(sh, me, s));
            }
            Err(_) => thread::sleep(Duration::from_millis(2)),
        }
    }
}

pub struct TcpRun {
    pub config: ClusterConfig,
    pub cfg: PbftConfig,
    pub absent: BTreeSet<NodeId>,
    pub net: Arc<Network<PbftProgram>>,
    pub prefix: PbftPrefix,
    pub state: PbftNetState,
    pub sent_log: Vec<SentRecord<PbftMessage>>,
    pub target: TargetView,
    pub value: Value,
    pub error: Option<String>,
}

impl TcpRun {
    pub fn checks(&self) -> CheckReport {
        let mut report = check_execution(&Execution {
            net: &self.net,
            cfg: &self.cfg,
            corrupt: &self.absent,
            prefix: &self.prefix,
            last: &self.state,
            sent_log: &self.sent_log,
            target: &self.target,
        });
        if let Some(e) = &self.error {
            report.conforms = Err(format!("recorder refused a step: {e}"));
        }
        report
    }

    pub fn summary_prefix(&self) -> ExecutionPrefix<serde_json::Value, PbftTransition> {
        summary_prefix(&self.net, &self.prefix)
    }

    pub fn terminate_view(&self) -> Option<u64> {
        let (id, _) = self.state.outputs.iter().min_by_key(|(_, (step, _))| *step)?;
        self.state.node(*id)?.decided().map(|(v, _)| v)
    }

    /// Milliseconds of wall time from the request to f+1 matching replies.
    pub fn latency_ms(&self) -> Option<Millis> {
        client_latency(&self.cfg, &self.prefix, &self.state)
    }

    pub fn report(&self) -> LatencyReport {
        let want = Decision::Value(self.value.clone());
        let honest = self.net.honest().collect::<Vec<_>>();
        LatencyReport::new(vec![Trial {
            scenario: format!("tcp-f{}", self.cfg.f),
            f: self.cfg.f,
            seed: 0,
            terminate_view: self.terminate_view(),
            client_latency_ms: self.latency_ms(),
            message_count_critical_path: critical_path(&self.cfg, &self.prefix, &self.state).map(|c| c.messages),
            client_value: honest.iter().all(|id| self.state.outputs.get(id).is_some_and(|(_, d)| *d == want)),
            checks: self.checks(),
        }])
    }
}

/// Options for [`run_loopback`].
#[derive(Clone, Debug)]
pub struct LoopbackOptions {
    pub f: u64,
    pub value: Value,
    /// Nodes that never start.
    pub absent: BTreeSet<NodeId>,
    pub client: NodeId,
    /// Key files are written here and read back when set.
    pub key_dir: Option<std::path::PathBuf>,
    pub timeout_ms: Millis,
}

impl LoopbackOptions {
    pub fn new(f: u64) -> Self {
        LoopbackOptions {
            f,
            value: Value::new(b"tcp-request".to_vec()),
            absent: BTreeSet::new(),
            client: NodeId(0),
            key_dir: None,
            timeout_ms: 10_000,
        }
    }
}

fn load_signers(cfg: &ClusterConfig, generated: Vec<Signer>, dir: Option<&Path>) -> Result<Vec<Signer>, TcpError> {
    match dir {
        None => Ok(generated),
        Some(d) => {
            write_key_files(d, &generated)?;
            (0..generated.len() as u64).map(|i| cfg.load_signer(NodeId(i))).collect()
        }
    }
}

/// Runs the common case on a loopback cluster until every live node has
/// decided and the client has its replies.
pub fn run_loopback(opts: &LoopbackOptions) -> Result<TcpRun, TcpError> {
    let n = 3 * opts.f + 1;
    if opts.absent.contains(&opts.client) {
        return Err(TcpError::Config("the client must be running".into()));
    }
    let seed = std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map_or(0, |d| d.as_nanos() as u64);
    let (_, generated) = KeyRegistry::generate(n, seed);
    let mut listeners = Vec::new();
    let mut addrs: Vec<SocketAddr> = Vec::new();
    for _ in 0..n {
        let l = TcpListener::bind("127.0.0.1:0").map_err(|err| TcpError::Bind { addr: "127.0.0.1:0".into(), err })?;
        addrs.push(l.local_addr()?);
        listeners.push(l);
    }
    let mut config = ClusterConfig::loopback(opts.f, &addrs, &generated, opts.key_dir.clone());
    config.client = opts.client;
    config.validate()?;
    let signers = load_signers(&config, generated, opts.key_dir.as_deref())?;
    let cfg = config.pbft_config();
    let net = Arc::new(Network::new(
        Arc::new(PbftProgram::new(cfg.clone())),
        config.registry()?,
        &signers,
        opts.absent.clone(),
        config.delta_ms,
        config.tick_ms,
        true,
    ));
    let recorder = Recorder {
        state: net.init_state(),
        net: net.clone(),
        prefix: PbftPrefix::default(),
        sent_log: Vec::new(),
        start: Instant::now(),
        stopped: false,
        error: None,
    };
    let shared = Arc::new(Shared {
        recorder: Mutex::new(recorder),
        transport: Transport::new(config.clone()),
        stop: AtomicBool::new(false),
        inbound: Mutex::new(Vec::new()),
    });
    let mut threads: Vec<JoinHandle<()>> = Vec::new();
    for (i, l) in listeners.into_iter().enumerate() {
        let id = NodeId(i as u64);
        if opts.absent.contains(&id) {
            continue;
        }
        l.set_nonblocking(true)?;
        let sh = shared.clone();
        threads.push(thread::spawn(move || accept_loop(sh, id, l)));
    }
    let sh = shared.clone();
    let period = Duration::from_millis((config.tick_ms / 5).max(1));
    threads.push(thread::spawn(move || {
        while !sh.stop.load(Ordering::Relaxed) {
            thread::sleep(period);
            sh.with(|r| {
                let wall = r.wall();
                (r.catch_up(wall), ())
            });
        }
    }));

    shared.with(|r| (r.call(cfg.client, PbftCall::Request(opts.value.clone())), ()));
    let deadline = Instant::now() + Duration::from_millis(opts.timeout_ms);
    let finished = |r: &Recorder| {
        let client_done = r.state.node(cfg.client).is_some_and(|st| st.client().done.is_some());
        client_done && r.net.honest().all(|id| r.state.outputs.contains_key(&id))
    };
    let done = loop {
        if shared.with(|r| (Vec::new(), finished(r) || r.error.is_some())) {
            break true;
        }
        if Instant::now() > deadline {
            break false;
        }
        thread::sleep(Duration::from_millis(2));
    };

    shared.recorder.lock().expect("recorder lock").stopped = true;
    shared.stop.store(true, Ordering::Relaxed);
    shared.transport.close();
    for s in shared.inbound.lock().expect("inbound lock").iter() {
        let _ = s.shutdown(Shutdown::Both);
    }
    for t in threads {
        let _ = t.join();
    }
    if !done {
        return Err(TcpError::Timeout(opts.timeout_ms));
    }
    let mut r = shared.recorder.lock().expect("recorder lock");
    let honest: BTreeSet<NodeId> = net.honest().collect();
    let prefix = std::mem::take(&mut r.prefix);
    let target = target_view(&cfg, &honest, config.delta_ms, config.tick_ms, &prefix);
    Ok(TcpRun {
        config,
        cfg,
        absent: opts.absent.clone(),
        net,
        prefix,
        state: r.state.clone(),
        sent_log: std::mem::take(&mut r.sent_log),
        target,
        value: opts.value.clone(),
        error: r.error.clone(),
    })
}
