//! A one-shot quorum vote: every node broadcasts a vote and finishes once it
//! has heard from a quorum. This is the shape of the prepare and commit
//! phases of PBFT, small enough to check its completion measure directly.

use std::collections::BTreeSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::authn::{ProtocolId, Signature, Staple, StapledExtractor, WireMessage, WireTag};
use crate::codec::{DecodeError, Reader};
use crate::liveness::{steps_until, Measure};
use crate::runtime::{Destination, Event, NodeProgram, Transmit};
use crate::simnet::{net_measure, NetState, NetTask, NetTransition, Network};
use crate::sm::{ExecutionPrefix, SpecMachine};
use crate::NodeId;

pub const VOTE_PROTOCOL: ProtocolId = *b"VOTE-v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vote {
    pub round: u64,
}

impl WireMessage for Vote {
    const PROTOCOL: ProtocolId = VOTE_PROTOCOL;

    fn wire_tag(&self) -> WireTag {
        WireTag { kind: 1, tag: self.round }
    }

    fn encode(&self) -> Vec<u8> {
        let mut w = crate::codec::Writer::new();
        w.u8(1).u64(self.round);
        w.finish()
    }

    fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        match r.u8()? {
            1 => {
                let round = r.u64()?;
                r.finish()?;
                Ok(Vote { round })
            }
            k => Err(DecodeError::UnknownKind(k)),
        }
    }

    fn bind(&mut self, sigs: &[Signature]) -> Result<(), DecodeError> {
        if sigs.is_empty() {
            Ok(())
        } else {
            Err(DecodeError::Invalid("vote carries no staples"))
        }
    }
}

fn no_staples(_: &Vote) -> Vec<Staple<Vote>> {
    Vec::new()
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct VoteState {
    pub voted: bool,
    pub heard: BTreeSet<NodeId>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum VoteCall {
    Start,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VoteProgram {
    pub n: u64,
    pub f: u64,
    /// Mutation: drop votes from this sender on receipt.
    pub ignore_from: Option<NodeId>,
}

impl VoteProgram {
    pub fn new(n: u64, f: u64) -> Self {
        VoteProgram { n, f, ignore_from: None }
    }

    pub fn quorum(&self) -> usize {
        (self.n - self.f) as usize
    }

    pub fn done(&self, st: &VoteState) -> bool {
        st.heard.len() >= self.quorum()
    }
}

impl NodeProgram for VoteProgram {
    type State = VoteState;
    type Message = Vote;
    type Arg = VoteCall;
    type Output = ();

    fn zero(&self, _: NodeId) -> VoteState {
        VoteState::default()
    }

    fn run(&self, _: NodeId, st: &VoteState, ev: &Event<Vote, VoteCall>) -> (VoteState, Vec<Transmit<Vote>>) {
        let mut next = st.clone();
        match ev {
            Event::Call(VoteCall::Start) if !st.voted => {
                next.voted = true;
                return (next, vec![Transmit { to: Destination::Broadcast, message: Vote { round: 0 } }]);
            }
            Event::Message { from, msg: Vote { round: 0 }, .. } if Some(*from) != self.ignore_from => {
                next.heard.insert(*from);
            }
            _ => {}
        }
        (next, Vec::new())
    }

    fn extractor(&self) -> StapledExtractor<Vote> {
        no_staples
    }

    fn output(&self, st: &VoteState) -> Option<()> {
        self.done(st).then_some(())
    }

    fn summarize(&self, st: &VoteState) -> serde_json::Value {
        serde_json::json!({ "voted": st.voted, "heard": st.heard.iter().map(|n| n.0).collect::<Vec<_>>() })
    }
}

pub type VoteNetState = NetState<VoteState, ()>;
pub type VoteTransition = NetTransition<VoteCall, ()>;

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum VoteTask {
    Net(NetTask),
    /// Node `id` has heard from a quorum.
    Done(NodeId),
}

/// Network tasks plus `Done(id)` for every honest node, active once every
/// honest node has cast its vote.
pub fn vote_spec(net: &Arc<Network<VoteProgram>>) -> SpecMachine<VoteNetState, VoteTransition, VoteTask> {
    let base = net.spec();
    let tasks_net = net.clone();
    let fair_base = base.clone();
    base.retask(
        move |s: &VoteNetState| {
            let mut all: Vec<VoteTask> = tasks_net.tasks(s).into_iter().map(VoteTask::Net).collect();
            if s.nodes.values().all(|st| st.voted) {
                all.extend(
                    s.nodes.iter().filter(|(_, st)| !tasks_net.prog.done(st)).map(|(id, _)| VoteTask::Done(*id)),
                );
            }
            all
        },
        move |task, s, t| match task {
            VoteTask::Net(nt) => (fair_base.fair)(nt, s, t),
            VoteTask::Done(id) => t.acting_node(s) == Some(*id) && t.effects().is_some_and(|e| e.output.is_some()),
        },
    )
}

/// Honest senders whose vote `id` has not yet counted.
pub fn pending(net: &Network<VoteProgram>, s: &VoteNetState, id: NodeId) -> BTreeSet<NodeId> {
    let heard = s.node(id).map(|st| st.heard.clone()).unwrap_or_default();
    net.honest().filter(|j| !heard.contains(j)).collect()
}

/// Measure of `Done(id)`: the number of pending honest senders, then the
/// fewest steps until one of their votes reaches `id`.
pub fn done_measure(
    net: &Network<VoteProgram>,
    prefix: &ExecutionPrefix<VoteNetState, VoteTransition>,
    id: NodeId,
    i: usize,
) -> Measure {
    let s = &prefix.steps[i].0;
    let h = pending(net, s, id);
    let lost = (prefix.len() - i) as u64 + 1;
    let soonest = s
        .inflight
        .values()
        .filter(|m| m.to == id && h.contains(&m.from) && !m.injected)
        .map(|m| steps_until(prefix, i, |_, t| matches!(t, NetTransition::Deliver { id: d, .. } if *d == m.id)))
        .min()
        .unwrap_or(lost);
    vec![h.len() as u64, soonest.min(lost)]
}

/// Variant for every [`VoteTask`]: message tasks count steps to delivery;
/// ticks and stabilization count steps to their next occurrence.
pub fn vote_variant(
    net: Arc<Network<VoteProgram>>,
) -> impl Fn(&VoteTask, &ExecutionPrefix<VoteNetState, VoteTransition>, usize) -> Measure {
    move |task, prefix, i| match task {
        VoteTask::Done(id) => done_measure(&net, prefix, *id, i),
        VoteTask::Net(nt) => vec![net_measure(nt, prefix, i)],
    }
}
