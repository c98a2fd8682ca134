//! What a PBFT cluster implements: a register written once, then reported by
//! every honest node. The client's request may only be replaced by NULL
//! unless the client or the first leader is corrupt.

use std::collections::BTreeSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::node::{NodeState, PbftCall};
use super::PbftConfig;
use crate::simnet::{NetState, NetTransition};
use crate::sm::{terminalize, Enabledness, RefinementFn, SpecMachine, WeakSpec};
use crate::{Decision, NodeId, Value};

pub type PbftNetState = NetState<NodeState, Decision>;
pub type PbftTransition = NetTransition<PbftCall, Decision>;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BroadcastState {
    pub reg: Option<Decision>,
    pub send: Option<Value>,
    pub terminated: BTreeSet<NodeId>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BroadcastTransition {
    Send(Value),
    Set(Decision),
    Terminate(NodeId, Decision),
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum BroadcastTask {
    TerminateF(NodeId),
    SetF,
}

/// Fixed facts the specification is parameterized by.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BroadcastContext {
    pub honest: BTreeSet<NodeId>,
    pub client: NodeId,
    pub first_leader: NodeId,
}

impl BroadcastContext {
    pub fn new(cfg: &PbftConfig, corrupt: &BTreeSet<NodeId>) -> Self {
        BroadcastContext {
            honest: (0..cfg.n()).map(NodeId).filter(|id| !corrupt.contains(id)).collect(),
            client: cfg.client,
            first_leader: cfg.leader_of(0),
        }
    }

    /// Whether validity applies: client and first leader honest.
    pub fn validity(&self) -> bool {
        self.honest.contains(&self.client) && self.honest.contains(&self.first_leader)
    }

    pub fn next(&self, s: &BroadcastState, t: &BroadcastTransition) -> Option<BroadcastState> {
        let mut n = s.clone();
        match t {
            BroadcastTransition::Send(v) if s.send.is_none() => n.send = Some(v.clone()),
            BroadcastTransition::Set(d) if s.reg.is_none() => {
                let allowed =
                    *d == Decision::Null || d.value().is_some_and(|v| s.send.as_ref() == Some(v)) || !self.validity();
                if !allowed {
                    return None;
                }
                n.reg = Some(d.clone());
            }
            BroadcastTransition::Terminate(id, d) => {
                if s.reg.as_ref() != Some(d) || !self.honest.contains(id) || s.terminated.contains(id) {
                    return None;
                }
                n.terminated.insert(*id);
            }
            _ => return None,
        }
        Some(n)
    }

    /// Termination obligations start once a request exists.
    pub fn tasks(&self, s: &BroadcastState) -> Vec<BroadcastTask> {
        if s.send.is_none() && s.reg.is_none() {
            return Vec::new();
        }
        let mut all: Vec<BroadcastTask> = self
            .honest
            .iter()
            .filter(|id| !s.terminated.contains(id))
            .map(|id| BroadcastTask::TerminateF(*id))
            .collect();
        if s.reg.is_none() && self.validity() {
            all.push(BroadcastTask::SetF);
        }
        all
    }

    pub fn weak_fair(task: &BroadcastTask, s: &BroadcastState, t: &BroadcastTransition) -> bool {
        match (task, t) {
            (BroadcastTask::TerminateF(id), BroadcastTransition::Terminate(j, _)) => id == j,
            (BroadcastTask::SetF, BroadcastTransition::Set(Decision::Value(v))) => s.send.as_ref() == Some(v),
            _ => false,
        }
    }
}

pub fn broadcast_spec(ctx: BroadcastContext) -> SpecMachine<BroadcastState, BroadcastTransition, BroadcastTask> {
    let ctx = Arc::new(ctx);
    let (c_next, c_tasks, c_dis) = (ctx.clone(), ctx.clone(), ctx);
    let ws = WeakSpec::new(
        |s: &BroadcastState| *s == BroadcastState::default(),
        move |s, t| c_next.next(s, t),
        move |s| c_tasks.tasks(s),
        BroadcastContext::weak_fair,
    );
    terminalize(
        ws,
        Enabledness::Disabled(Arc::new(move |task: &BroadcastTask, s: &BroadcastState| match task {
            BroadcastTask::TerminateF(id) => s.terminated.contains(id) || !c_dis.honest.contains(id),
            BroadcastTask::SetF => s.reg.is_some() || s.send.is_none(),
        })),
    )
}

/// The abstract state a simulator state stands for.
pub fn abstract_state(client: NodeId, s: &PbftNetState) -> BroadcastState {
    BroadcastState {
        reg: s.outputs.values().min_by_key(|(step, _)| *step).map(|(_, d)| d.clone()),
        send: s.node(client).and_then(|st| st.client().request),
        terminated: s.outputs.keys().copied().collect(),
    }
}

/// Maps the honest client's call to `Send`, and a node's first commit
/// quorum to `Terminate`, preceded by `Set` when it is the first anywhere.
pub fn abstraction(client: NodeId) -> RefinementFn<PbftNetState, PbftTransition, BroadcastState, BroadcastTransition> {
    RefinementFn::new(
        move |s: &PbftNetState, t: &PbftTransition| {
            let a = abstract_state(client, s);
            let mut ts = Vec::new();
            if let NetTransition::LocalCall { node, arg: PbftCall::Request(v), .. } = t {
                if *node == client && a.send.is_none() && s.nodes.contains_key(node) {
                    ts.push(BroadcastTransition::Send(v.clone()));
                }
            }
            if let (Some(d), Some(j)) = (t.effects().and_then(|e| e.output.clone()), t.acting_node(s)) {
                if a.reg.is_none() {
                    ts.push(BroadcastTransition::Set(d.clone()));
                }
                ts.push(BroadcastTransition::Terminate(j, d));
            }
            (a, ts)
        },
        true,
    )
}
