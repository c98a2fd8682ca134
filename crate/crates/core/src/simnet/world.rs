//! The discrete-event simulator.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adversary::{AdversaryPolicy, CorruptKeys, Fate};
use super::{Effects, MsgId, NetSpec, NetState, NetTransition, Network, SimError, StepError};
use crate::authn::{Envelope, Signer, WireMessage};
use crate::runtime::{Destination, NodeProgram};
use crate::sm::ExecutionPrefix;
use crate::{Millis, NodeId};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    #[serde(rename = "delta_ms")]
    pub delta: Millis,
    #[serde(rename = "tick_ms")]
    pub tick: Millis,
    /// Upper bound on delays drawn before stabilization.
    #[serde(rename = "pre_gst_max_delay_ms")]
    pub pre_gst_max_delay: Millis,
    /// 0 starts the network stabilized.
    #[serde(rename = "stabilize_at_ms")]
    pub stabilize_at: Millis,
    #[serde(rename = "horizon_ms")]
    pub horizon: Millis,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig { delta: 50, tick: 250, pre_gst_max_delay: 500, stabilize_at: 0, horizon: 3000, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Pending<A> {
    Stabilize,
    LocalCall(NodeId, A),
    Tick(NodeId),
    Fault(NodeId, Box<Envelope>),
    Deliver(MsgId),
}

impl<A> Pending<A> {
    /// Tiebreak among events at the same instant.
    fn rank(&self) -> u8 {
        match self {
            Pending::Stabilize => 0,
            Pending::LocalCall(..) => 1,
            Pending::Tick(_) => 2,
            Pending::Fault(..) => 3,
            Pending::Deliver(_) => 4,
        }
    }

    fn node(&self) -> u64 {
        match self {
            Pending::LocalCall(n, _) | Pending::Tick(n) | Pending::Fault(n, _) => n.0,
            Pending::Stabilize | Pending::Deliver(_) => 0,
        }
    }
}

#[derive(Debug)]
struct Scheduled<A> {
    at: Millis,
    rank: u8,
    node: u64,
    seq: u64,
    event: Pending<A>,
}

impl<A> Scheduled<A> {
    fn key(&self) -> (Millis, u8, u64, u64) {
        (self.at, self.rank, self.node, self.seq)
    }
}

impl<A> PartialEq for Scheduled<A> {
    fn eq(&self, other: &Self) -> bool {
        self.key() == other.key()
    }
}

impl<A> Eq for Scheduled<A> {}

impl<A> PartialOrd for Scheduled<A> {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl<A> Ord for Scheduled<A> {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.key().cmp(&other.key())
    }
}

/// One honest transmission, before the network decides its fate.
#[derive(Clone, Debug)]
pub struct SentRecord<M> {
    pub at: Millis,
    pub step: usize,
    pub from: NodeId,
    pub to: Destination,
    pub message: M,
    pub env: Envelope,
}

pub type Prefix<P> = ExecutionPrefix<
    NetState<<P as NodeProgram>::State, <P as NodeProgram>::Output>,
    NetTransition<<P as NodeProgram>::Arg, <P as NodeProgram>::Output>,
>;

pub struct World<P: NodeProgram> {
    pub net: Arc<Network<P>>,
    pub cfg: SimConfig,
    pub state: NetState<P::State, P::Output>,
    pub prefix: Prefix<P>,
    /// Every message honest nodes emitted, in order.
    pub sent_log: Vec<SentRecord<P::Message>>,
    policy: AdversaryPolicy<P::Message>,
    keys: CorruptKeys,
    queue: BinaryHeap<Reverse<Scheduled<P::Arg>>>,
    delivery_time: BTreeMap<MsgId, Millis>,
    held: BTreeSet<MsgId>,
    rng: ChaCha8Rng,
    seq: u64,
}

impl<P> World<P>
where
    P: NodeProgram + Send + Sync + 'static,
    P::State: Send + Sync,
    P::Output: Send + Sync,
    P::Arg: PartialEq + Send + Sync,
{
    /// `signers` holds every node's key; the world keeps honest keys in the
    /// network and hands only corrupt keys to the adversary.
    pub fn new(
        prog: P,
        signers: &[Signer],
        registry: crate::authn::KeyRegistry,
        mut policy: AdversaryPolicy<P::Message>,
        cfg: SimConfig,
        calls: Vec<(Millis, NodeId, P::Arg)>,
    ) -> Result<Self, SimError> {
        let n = registry.len() as u64;
        if policy.corrupt.iter().any(|c| c.0 >= n) {
            return Err(SimError::Config("corrupt node outside the cluster".into()));
        }
        if cfg.tick == 0 || cfg.delta == 0 {
            return Err(SimError::Config("tick and delta must be positive".into()));
        }
        let net = Arc::new(Network::new(
            Arc::new(prog),
            registry,
            signers,
            policy.corrupt.clone(),
            cfg.delta,
            cfg.tick,
            cfg.stabilize_at == 0,
        ));
        let keys = CorruptKeys::new(signers, &policy.corrupt);
        let state = net.init_state();
        let mut w = World {
            net,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            cfg,
            state,
            prefix: ExecutionPrefix::default(),
            sent_log: Vec::new(),
            policy: AdversaryPolicy::default(),
            keys,
            queue: BinaryHeap::new(),
            delivery_time: BTreeMap::new(),
            held: BTreeSet::new(),
            seq: 0,
        };
        let mut mandatory = Vec::new();
        if w.cfg.stabilize_at > 0 {
            w.push(w.cfg.stabilize_at, Pending::Stabilize);
            mandatory.push(w.cfg.stabilize_at);
        }
        let honest: Vec<NodeId> = w.net.honest().collect();
        for id in honest {
            w.push(w.cfg.tick, Pending::Tick(id));
        }
        // Corrupt nodes have no program to call into.
        let net = w.net.clone();
        for (at, node, arg) in calls.into_iter().filter(|(_, node, _)| net.is_honest(*node)) {
            mandatory.push(at);
            w.push(at, Pending::LocalCall(node, arg));
        }
        let mut injections = std::mem::take(&mut policy.inject);
        if let Some(b) = policy.behavior.as_mut() {
            injections.extend(b.schedule(&w.keys, &w.net.registry));
        }
        for (at, to, env) in injections {
            if w.net.is_honest(to) {
                mandatory.push(at);
                w.push(at, Pending::Fault(to, Box::new(env)));
            }
        }
        w.policy = policy;
        if let Some(late) = mandatory.into_iter().max().filter(|t| *t > w.cfg.horizon) {
            return Err(SimError::HorizonTooSmall { horizon: w.cfg.horizon, event: late });
        }
        Ok(w)
    }

    fn push(&mut self, at: Millis, event: Pending<P::Arg>) {
        self.seq += 1;
        let (rank, node) = (event.rank(), event.node());
        self.queue.push(Reverse(Scheduled { at, rank, node, seq: self.seq, event }));
    }

    fn schedule_delivery(&mut self, id: MsgId, at: Millis) {
        self.delivery_time.insert(id, at);
        self.push(at, Pending::Deliver(id));
    }

    /// Time of the next event, skipping stale deliveries.
    pub fn peek_time(&mut self) -> Option<Millis> {
        while let Some(Reverse(top)) = self.queue.peek() {
            if let Pending::Deliver(id) = &top.event {
                if self.delivery_time.get(id) != Some(&top.at) {
                    self.queue.pop();
                    continue;
                }
            }
            return Some(top.at);
        }
        None
    }

    fn delay(&mut self, from: NodeId, to: NodeId) -> Option<Millis> {
        if self.state.stabilized {
            Some(if from == to { 0 } else { self.rng.gen_range(1..=self.cfg.delta) })
        } else {
            Some(self.rng.gen_range(0..=self.cfg.pre_gst_max_delay))
        }
    }

    /// Pops and executes the earliest event. `Ok(None)` when the queue is empty.
    pub fn step(&mut self) -> Result<Option<&NetTransition<P::Arg, P::Output>>, SimError> {
        if self.peek_time().is_none() {
            return Ok(None);
        }
        let Reverse(ev) = self.queue.pop().expect("peeked");
        let at = ev.at;
        let mut t = match ev.event {
            Pending::Stabilize => NetTransition::Stabilize { at },
            Pending::LocalCall(node, arg) => NetTransition::LocalCall { at, node, arg, effects: Effects::default() },
            Pending::Tick(node) => {
                self.push(at + self.cfg.tick, Pending::Tick(node));
                NetTransition::Tick { at, node, effects: Effects::default() }
            }
            Pending::Fault(to, env) => NetTransition::Fault { at, to, env: *env },
            Pending::Deliver(id) => {
                self.delivery_time.remove(&id);
                NetTransition::Deliver { at, id, effects: Effects::default() }
            }
        };
        let prep = match self.net.prepare(&self.state, &t) {
            Ok(p) => p,
            Err(StepError::Transmit(err)) => {
                let node = t.acting_node(&self.state).unwrap_or(NodeId(u64::MAX));
                return Err(SimError::Transmit { node, at, err });
            }
            Err(StepError::Disabled(why)) => panic!("simulator produced a disabled transition: {why}"),
        };

        let mut dropped = Vec::new();
        let mut fates = Vec::with_capacity(prep.sends.len());
        for (i, (to, env)) in prep.sends.iter().enumerate() {
            let tag = P::Message::decode(&env.payload).expect("honest payload decodes").wire_tag();
            let fate = self.policy.fate(self.state.stabilized, at, *to, tag);
            if fate == Fate::Drop {
                dropped.push(i as u32);
            }
            fates.push(fate);
        }
        let effects = Effects { sends: prep.sends.len() as u32, dropped: dropped.clone(), output: prep.output.clone() };
        match &mut t {
            NetTransition::Deliver { effects: e, .. }
            | NetTransition::Tick { effects: e, .. }
            | NetTransition::LocalCall { effects: e, .. } => *e = effects,
            _ => {}
        }
        let next = self.net.commit(&self.state, &t, &prep, &dropped);

        // Schedule whatever the step put on the network.
        let mut id = self.state.next_id;
        if let NetTransition::Fault { to, .. } = &t {
            let d = self.delay(NodeId(u64::MAX), *to).unwrap_or(0);
            self.schedule_delivery(id, at + d);
            id += 1;
        }
        if let Some(from) = prep.node {
            for (i, (to, _)) in prep.sends.iter().enumerate() {
                match fates[i] {
                    Fate::Drop => continue,
                    Fate::Hold => {
                        self.held.insert(id);
                    }
                    Fate::Deliver => {
                        let d = self.delay(from, *to).unwrap_or(0);
                        self.schedule_delivery(id, at + d);
                    }
                }
                id += 1;
            }
        }
        debug_assert_eq!(id, next.next_id);
        if let NetTransition::Stabilize { .. } = &t {
            let delta = self.cfg.delta;
            for held in std::mem::take(&mut self.held) {
                let d = self.rng.gen_range(1..=delta);
                self.schedule_delivery(held, at + d);
            }
            let late: Vec<MsgId> =
                self.delivery_time.iter().filter(|(_, when)| **when > at + delta).map(|(id, _)| *id).collect();
            for id in late {
                let d = self.rng.gen_range(1..=delta);
                self.schedule_delivery(id, at + d);
            }
        }

        // Eavesdropping adversary.
        let mut injections = Vec::new();
        if let Some(from) = prep.node {
            for (to, msg, env) in &prep.emitted {
                self.sent_log.push(SentRecord {
                    at,
                    step: self.state.step,
                    from,
                    to: *to,
                    message: msg.clone(),
                    env: env.clone(),
                });
                if let Some(b) = self.policy.behavior.as_mut() {
                    injections.extend(b.on_emit(&self.keys, &self.net.registry, at, from, *to, msg, env));
                }
            }
        }
        for (to, env) in injections {
            if self.net.is_honest(to) {
                self.push(at, Pending::Fault(to, Box::new(env)));
            }
        }

        let prev = std::mem::replace(&mut self.state, next);
        self.prefix.push(prev, t);
        Ok(self.prefix.steps.last().map(|(_, t)| t))
    }

    /// Runs until the next event lies beyond the horizon.
    pub fn run(&mut self) -> Result<(), SimError> {
        self.run_while(|_| true)
    }

    /// Runs while `keep_going` holds for the current state and the horizon
    /// is not reached.
    pub fn run_while(&mut self, keep_going: impl Fn(&NetState<P::State, P::Output>) -> bool) -> Result<(), SimError> {
        while let Some(at) = self.peek_time() {
            if at > self.cfg.horizon || !keep_going(&self.state) {
                break;
            }
            self.step()?;
        }
        Ok(())
    }

    pub fn spec(&self) -> NetSpec<P> {
        self.net.spec()
    }

    /// The prefix with node states replaced by their JSON summaries.
    pub fn summary_prefix(&self) -> ExecutionPrefix<serde_json::Value, NetTransition<P::Arg, P::Output>> {
        summary_prefix(&self.net, &self.prefix)
    }
}

/// `prefix` with node states replaced by `net`'s program summaries.
pub fn summary_prefix<P: NodeProgram>(
    net: &Network<P>,
    prefix: &Prefix<P>,
) -> ExecutionPrefix<serde_json::Value, NetTransition<P::Arg, P::Output>> {
    let prog = &net.prog;
    ExecutionPrefix::new(
        prefix
            .steps
            .iter()
            .map(|(s, t)| {
                let nodes: serde_json::Map<String, serde_json::Value> =
                    s.nodes.iter().map(|(id, st)| (id.0.to_string(), prog.summarize(st))).collect();
                let state = serde_json::json!({
                    "now": s.now,
                    "stabilized": s.stabilized,
                    "inflight": s.inflight.keys().collect::<Vec<_>>(),
                    "delivered": s.delivered.len(),
                    "nodes": nodes,
                });
                (state, t.clone())
            })
            .collect(),
    )
}

/// Builds a world and runs it to the horizon.
pub fn run_scenario<P>(
    prog: P,
    signers: &[Signer],
    registry: crate::authn::KeyRegistry,
    policy: AdversaryPolicy<P::Message>,
    cfg: SimConfig,
    calls: Vec<(Millis, NodeId, P::Arg)>,
) -> Result<World<P>, SimError>
where
    P: NodeProgram + Send + Sync + 'static,
    P::State: Send + Sync,
    P::Output: Send + Sync,
    P::Arg: PartialEq + Send + Sync,
{
    let mut w = World::new(prog, signers, registry, policy, cfg, calls)?;
    w.run()?;
    Ok(w)
}
