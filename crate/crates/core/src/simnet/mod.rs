//! Partially synchronous network: its specification and a deterministic
//! discrete-event simulator.
//!
//! [`Network`] holds the fixed context (program, keys, fault set, timing) and
//! defines the transition relation over [`NetState`]. The simulator in
//! [`world`] drives the same relation, so every prefix it produces can be
//! re-checked with [`crate::sm::conforms`] against [`Network::spec`].
//!
//! Message deadlines exist only after stabilization: a message in flight when
//! the network stabilizes must be delivered within `delta` of that moment, and
//! every later message within `delta` of being sent.

pub mod adversary;
pub mod audit;
pub mod world;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use im::{OrdMap, OrdSet};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::authn::{validate_receive, Envelope, KeyRegistry, Signer, TransmitError, WireMessage};
use crate::liveness::steps_until;
use crate::runtime::{recipients, step, Destination, Event, NodeProgram};
use crate::sm::{terminalize, Enabledness, ExecutionPrefix, SpecMachine, WeakSpec};
use crate::{Millis, NodeId};

pub use adversary::{AdversaryPolicy, Behavior, CorruptKeys, DropRule, Fate};
pub use audit::{fairness_audit, AuditReport, TaskFiring};
pub use world::{run_scenario, summary_prefix, Prefix, SentRecord, SimConfig, World};

pub type MsgId = u64;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MessageEvent {
    pub id: MsgId,
    /// Sending node, or the claimed signer for injected envelopes.
    pub from: NodeId,
    pub to: NodeId,
    pub env: Arc<Envelope>,
    pub sent_at: Millis,
    pub deadline: Option<Millis>,
    pub injected: bool,
}

/// What a node step did, recorded in the transition so that the transition
/// relation stays deterministic.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Effects<O> {
    /// Messages to honest nodes emitted by this step.
    pub sends: u32,
    /// Indices (into those sends) that the network loses.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub dropped: Vec<u32>,
    /// Output the node produced for the first time in this step.
    #[serde(default = "Option::default", skip_serializing_if = "Option::is_none")]
    pub output: Option<O>,
}

impl<O> Default for Effects<O> {
    fn default() -> Self {
        Effects { sends: 0, dropped: Vec::new(), output: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum NetTransition<A, O> {
    Deliver {
        at: Millis,
        id: MsgId,
        effects: Effects<O>,
    },
    /// Clock tick at one node; delivers a timeout carrying `at`.
    Tick {
        at: Millis,
        node: NodeId,
        effects: Effects<O>,
    },
    Stabilize {
        at: Millis,
    },
    /// Adversary puts an envelope on the network.
    Fault {
        at: Millis,
        to: NodeId,
        env: Envelope,
    },
    LocalCall {
        at: Millis,
        node: NodeId,
        arg: A,
        effects: Effects<O>,
    },
}

impl<A, O> NetTransition<A, O> {
    pub fn at(&self) -> Millis {
        match self {
            NetTransition::Deliver { at, .. }
            | NetTransition::Tick { at, .. }
            | NetTransition::Stabilize { at }
            | NetTransition::Fault { at, .. }
            | NetTransition::LocalCall { at, .. } => *at,
        }
    }

    pub fn effects(&self) -> Option<&Effects<O>> {
        match self {
            NetTransition::Deliver { effects, .. }
            | NetTransition::Tick { effects, .. }
            | NetTransition::LocalCall { effects, .. } => Some(effects),
            _ => None,
        }
    }

    /// Node whose program runs in this step, if any. Deliveries need the
    /// state to resolve their recipient.
    pub fn acting_node<S>(&self, s: &NetState<S, O>) -> Option<NodeId> {
        match self {
            NetTransition::Tick { node, .. } | NetTransition::LocalCall { node, .. } => Some(*node),
            NetTransition::Deliver { id, .. } => s.inflight.get(id).map(|m| m.to),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetState<S, O> {
    pub now: Millis,
    pub stabilized: bool,
    pub stabilized_at: Option<Millis>,
    /// Honest nodes only.
    pub nodes: OrdMap<NodeId, Arc<S>>,
    pub last_tick: OrdMap<NodeId, Millis>,
    pub inflight: OrdMap<MsgId, Arc<MessageEvent>>,
    pub delivered: OrdSet<MsgId>,
    pub next_id: MsgId,
    /// Hashes of every envelope an honest node has sent.
    pub observed: OrdSet<[u8; 32]>,
    /// First output of each honest node and the step that produced it.
    pub outputs: OrdMap<NodeId, (usize, O)>,
    pub step: usize,
}

impl<S, O: Clone> NetState<S, O> {
    pub fn node(&self, id: NodeId) -> Option<&S> {
        self.nodes.get(&id).map(|s| s.as_ref())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum NetTask {
    Stabilize,
    Tick(NodeId),
    Message(MsgId),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("node {node} at {at} ms: {err}")]
    Transmit { node: NodeId, at: Millis, err: TransmitError },
    #[error("horizon {horizon} ms is earlier than scheduled event at {event} ms")]
    HorizonTooSmall { horizon: Millis, event: Millis },
    #[error("invalid scenario: {0}")]
    Config(String),
}

/// Why a transition is not enabled.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StepError {
    #[error("{0}")]
    Disabled(String),
    #[error(transparent)]
    Transmit(#[from] TransmitError),
}

/// A node step computed but not yet applied to the network.
#[derive(Clone, Debug)]
pub struct Prepared<P: NodeProgram> {
    pub node: Option<NodeId>,
    pub next_node: Option<Arc<P::State>>,
    /// Envelopes to honest recipients, in send order.
    pub sends: Vec<(NodeId, Envelope)>,
    /// Every message the node emitted, with its envelope, for eavesdroppers.
    pub emitted: Vec<(Destination, P::Message, Envelope)>,
    pub output: Option<P::Output>,
}

/// Fixed context of a simulated network.
pub struct Network<P: NodeProgram> {
    pub prog: Arc<P>,
    pub registry: KeyRegistry,
    honest_signers: BTreeMap<NodeId, Signer>,
    pub corrupt: BTreeSet<NodeId>,
    pub n: u64,
    pub delta: Millis,
    pub tick: Millis,
    pub start_stabilized: bool,
}

pub type NetSpec<P> = SpecMachine<
    NetState<<P as NodeProgram>::State, <P as NodeProgram>::Output>,
    NetTransition<<P as NodeProgram>::Arg, <P as NodeProgram>::Output>,
    NetTask,
>;

impl<P> Network<P>
where
    P: NodeProgram + Send + Sync + 'static,
    P::State: Send + Sync,
    P::Output: Send + Sync,
    P::Arg: PartialEq + Send + Sync,
{
    /// `signers` must contain every node; only honest keys are retained.
    pub fn new(
        prog: Arc<P>,
        registry: KeyRegistry,
        signers: &[Signer],
        corrupt: BTreeSet<NodeId>,
        delta: Millis,
        tick: Millis,
        start_stabilized: bool,
    ) -> Self {
        let honest_signers =
            signers.iter().filter(|s| !corrupt.contains(&s.id())).map(|s| (s.id(), s.clone())).collect();
        Network { prog, n: registry.len() as u64, registry, honest_signers, corrupt, delta, tick, start_stabilized }
    }

    pub fn is_honest(&self, id: NodeId) -> bool {
        id.0 < self.n && !self.corrupt.contains(&id)
    }

    pub fn honest(&self) -> impl Iterator<Item = NodeId> + '_ {
        (0..self.n).map(NodeId).filter(|id| !self.corrupt.contains(id))
    }

    pub fn init_state(&self) -> NetState<P::State, P::Output> {
        NetState {
            now: 0,
            stabilized: self.start_stabilized,
            stabilized_at: self.start_stabilized.then_some(0),
            nodes: self.honest().map(|id| (id, Arc::new(self.prog.zero(id)))).collect(),
            last_tick: self.honest().map(|id| (id, 0u64)).collect(),
            inflight: OrdMap::new(),
            delivered: OrdSet::new(),
            next_id: 0,
            observed: OrdSet::new(),
            outputs: OrdMap::new(),
            step: 0,
        }
    }

    fn run_node(
        &self,
        s: &NetState<P::State, P::Output>,
        node: NodeId,
        ev: &Event<P::Message, P::Arg>,
    ) -> Result<Prepared<P>, StepError> {
        let cur = s.nodes.get(&node).ok_or_else(|| StepError::Disabled(format!("{node} is not honest")))?;
        let (next, outs) = step(self.prog.as_ref(), &self.registry, node, cur, ev)?;
        let signer = &self.honest_signers[&node];
        let mut sends = Vec::new();
        let mut emitted = Vec::with_capacity(outs.len());
        for o in outs {
            let env = o.sign(signer);
            for to in recipients(o.to, self.n) {
                if self.is_honest(to) {
                    sends.push((to, env.clone()));
                }
            }
            emitted.push((o.to, o.message, env));
        }
        let output = match (self.prog.output(cur), self.prog.output(&next)) {
            (None, Some(o)) => Some(o),
            _ => None,
        };
        Ok(Prepared { node: Some(node), next_node: Some(Arc::new(next)), sends, emitted, output })
    }

    fn idle() -> Prepared<P> {
        Prepared { node: None, next_node: None, sends: Vec::new(), emitted: Vec::new(), output: None }
    }

    /// Runs the node program for `t` (ignoring `t`'s recorded effects).
    pub fn prepare(
        &self,
        s: &NetState<P::State, P::Output>,
        t: &NetTransition<P::Arg, P::Output>,
    ) -> Result<Prepared<P>, StepError> {
        if t.at() < s.now {
            return Err(StepError::Disabled("time runs backwards".into()));
        }
        match t {
            NetTransition::Deliver { id, at, .. } => {
                let m = s.inflight.get(id).ok_or_else(|| StepError::Disabled(format!("message {id} not in flight")))?;
                if *at < m.sent_at {
                    return Err(StepError::Disabled(format!("message {id} delivered before it was sent")));
                }
                match validate_receive(&self.registry, &m.env, self.prog.extractor()) {
                    Ok(auth) => {
                        self.run_node(s, m.to, &Event::Message { from: auth.signer, msg: auth.message, sig: auth.sig })
                    }
                    // Unauthenticated input is dropped at the runtime boundary.
                    Err(_) => Ok(Prepared { node: Some(m.to), ..Self::idle() }),
                }
            }
            NetTransition::Tick { at, node, .. } => {
                let last = s.last_tick.get(node).ok_or_else(|| StepError::Disabled(format!("{node} has no clock")))?;
                if *at != last + self.tick {
                    return Err(StepError::Disabled(format!("tick at {at} does not follow {last}")));
                }
                self.run_node(s, *node, &Event::Timeout(*at))
            }
            NetTransition::LocalCall { node, arg, .. } => self.run_node(s, *node, &Event::Call(arg.clone())),
            NetTransition::Stabilize { .. } if s.stabilized => Err(StepError::Disabled("already stable".into())),
            NetTransition::Stabilize { .. } | NetTransition::Fault { .. } => Ok(Self::idle()),
        }
    }

    /// Applies a prepared step. `dropped` indexes into `prep.sends`.
    pub fn commit(
        &self,
        s: &NetState<P::State, P::Output>,
        t: &NetTransition<P::Arg, P::Output>,
        prep: &Prepared<P>,
        dropped: &[u32],
    ) -> NetState<P::State, P::Output> {
        let at = t.at();
        let mut next = s.clone();
        next.now = at;
        next.step += 1;
        match t {
            NetTransition::Deliver { id, .. } => {
                next.inflight.remove(id);
                next.delivered.insert(*id);
            }
            NetTransition::Tick { node, .. } => {
                next.last_tick.insert(*node, at);
            }
            NetTransition::Stabilize { .. } => {
                next.stabilized = true;
                next.stabilized_at = Some(at);
                next.inflight = next
                    .inflight
                    .iter()
                    .map(|(id, m)| {
                        let mut m = m.as_ref().clone();
                        m.deadline = Some(m.deadline.unwrap_or(at + self.delta).min(at + self.delta));
                        (*id, Arc::new(m))
                    })
                    .collect();
            }
            NetTransition::Fault { to, env, .. } => {
                let id = next.next_id;
                next.next_id += 1;
                let deadline = next.stabilized.then_some(at + self.delta);
                let ev = MessageEvent {
                    id,
                    from: env.signer,
                    to: *to,
                    env: Arc::new(env.clone()),
                    sent_at: at,
                    deadline,
                    injected: true,
                };
                next.inflight.insert(id, Arc::new(ev));
            }
            NetTransition::LocalCall { .. } => {}
        }
        if let (Some(node), Some(state)) = (prep.node, &prep.next_node) {
            next.nodes.insert(node, state.clone());
            for (_, _, env) in &prep.emitted {
                next.observed.insert(env.hash());
            }
            for (i, (to, env)) in prep.sends.iter().enumerate() {
                if dropped.contains(&(i as u32)) {
                    continue;
                }
                let id = next.next_id;
                next.next_id += 1;
                let ev = MessageEvent {
                    id,
                    from: node,
                    to: *to,
                    env: Arc::new(env.clone()),
                    sent_at: at,
                    deadline: next.stabilized.then_some(at + self.delta),
                    injected: false,
                };
                next.inflight.insert(id, Arc::new(ev));
            }
            if let Some(o) = &prep.output {
                next.outputs.insert(node, (s.step, o.clone()));
            }
        }
        next
    }

    /// The transition relation: `Ok(successor)` or why `t` is not enabled.
    pub fn next_state(
        &self,
        s: &NetState<P::State, P::Output>,
        t: &NetTransition<P::Arg, P::Output>,
    ) -> Result<NetState<P::State, P::Output>, StepError> {
        let prep = self.prepare(s, t)?;
        let empty = Effects::default();
        let effects = t.effects().unwrap_or(&empty);
        if effects.sends as usize != prep.sends.len() {
            return Err(StepError::Disabled(format!(
                "recorded {} sends, program produced {}",
                effects.sends,
                prep.sends.len()
            )));
        }
        if effects.output != prep.output {
            return Err(StepError::Disabled("recorded output differs".into()));
        }
        if let NetTransition::Deliver { id, at, .. } = t {
            if let Some(d) = s.inflight[id].deadline {
                if *at > d {
                    return Err(StepError::Disabled(format!("message {id} delivered after its deadline")));
                }
            }
        }
        Ok(self.commit(s, t, &prep, &effects.dropped))
    }

    /// Safety conditions on a step that do not depend on the program.
    pub fn invariant(
        &self,
        s: &NetState<P::State, P::Output>,
        t: &NetTransition<P::Arg, P::Output>,
    ) -> Result<(), String> {
        let at = t.at();
        if at < s.now {
            return Err("clock moved backwards".into());
        }
        if s.stabilized {
            if let Some(m) = s.inflight.values().find(|m| m.deadline.is_some_and(|d| d < at)) {
                return Err(format!("message {} overdue at {at}", m.id));
            }
        }
        if let NetTransition::Fault { env, .. } = t {
            if !self.corrupt.contains(&env.signer) && !s.observed.contains(&env.hash()) {
                return Err(format!("fault signed by honest {} is not a replay", env.signer));
            }
        }
        if let Some(e) = t.effects() {
            if !e.dropped.is_empty() && s.stabilized {
                return Err("message dropped after stabilization".into());
            }
        }
        Ok(())
    }

    pub fn weak_fair(task: &NetTask, s: &NetState<P::State, P::Output>, t: &NetTransition<P::Arg, P::Output>) -> bool {
        match (task, t) {
            (NetTask::Stabilize, NetTransition::Stabilize { .. }) => !s.stabilized,
            (NetTask::Tick(n), NetTransition::Tick { node, .. }) => n == node,
            (NetTask::Message(m), NetTransition::Deliver { id, .. }) => m == id && s.inflight.contains_key(m),
            _ => false,
        }
    }

    pub fn tasks(&self, s: &NetState<P::State, P::Output>) -> Vec<NetTask> {
        let mut all = Vec::new();
        if !s.stabilized {
            all.push(NetTask::Stabilize);
        }
        all.extend(s.last_tick.keys().map(|n| NetTask::Tick(*n)));
        all.extend(s.inflight.values().filter(|m| self.is_honest(m.to)).map(|m| NetTask::Message(m.id)));
        all
    }

    /// The network specification, terminalized.
    pub fn spec(self: &Arc<Self>) -> NetSpec<P> {
        let init_net = self.clone();
        let next_net = self.clone();
        let tasks_net = self.clone();
        let ws = WeakSpec::new(
            move |s: &NetState<P::State, P::Output>| *s == init_net.init_state(),
            move |s, t| next_net.next_state(s, t).ok(),
            move |s| tasks_net.tasks(s),
            Self::weak_fair,
        );
        let disabled =
            Enabledness::Disabled(Arc::new(|task: &NetTask, s: &NetState<P::State, P::Output>| match task {
                NetTask::Stabilize => s.stabilized,
                NetTask::Tick(n) => !s.last_tick.contains_key(n),
                NetTask::Message(m) => !s.inflight.contains_key(m),
            }));
        let inv_net = self.clone();
        let mut spec = terminalize(ws, disabled);
        spec.invar = Arc::new(move |s, t| inv_net.invariant(s, t).is_ok());
        spec
    }
}

/// Decodes an envelope's root message without checking signatures.
pub fn peek<M: WireMessage>(env: &Envelope) -> Option<M> {
    M::decode(&env.payload).ok()
}

/// Steps until the network task next fires, as seen in hindsight.
pub fn net_measure<S, A, O>(
    task: &NetTask,
    prefix: &ExecutionPrefix<NetState<S, O>, NetTransition<A, O>>,
    i: usize,
) -> u64 {
    match task {
        NetTask::Stabilize => steps_until(prefix, i, |_, t| matches!(t, NetTransition::Stabilize { .. })),
        NetTask::Tick(n) => steps_until(prefix, i, |_, t| matches!(t, NetTransition::Tick { node, .. } if *node == *n)),
        NetTask::Message(m) => {
            steps_until(prefix, i, |_, t| matches!(t, NetTransition::Deliver { id, .. } if *id == *m))
        }
    }
}

#[cfg(test)]
mod tests;
