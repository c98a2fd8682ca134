//! A PBFT node: the client sub-protocol next to an unbounded map of views.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::message::{extract, PbftMessage};
use super::view::{pre_prepare, select, view_change, votes, Incoming, Phase, PhaseArg, ViewComp, ViewState};
use super::{Mutation, PbftConfig};
use crate::authn::StapledExtractor;
use crate::compose::{sync_dispatch, Composition, DefaultMap, Input, SubInput, Trigger, Zeroed, DEFAULT_CALL_DEPTH};
use crate::runtime::{Destination, Event, NodeProgram, Transmit};
use crate::{Decision, Millis, NodeId, Value};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum NodeTag {
    Client,
    View(u64),
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ClientState {
    /// Set at the client when the application asks for a value.
    pub request: Option<Value>,
    /// The client's request as received by this node.
    pub seen: Option<Value>,
    pub replies: BTreeMap<NodeId, Decision>,
    /// Reached once f+1 replies agree.
    pub done: Option<Decision>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum NodeSub {
    Client(ClientState),
    View(ViewState),
}

impl Zeroed<NodeTag> for NodeSub {
    fn zero(tag: &NodeTag) -> Self {
        match tag {
            NodeTag::Client => NodeSub::Client(ClientState::default()),
            NodeTag::View(_) => NodeSub::View(ViewState::new()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum NodeArg {
    /// Application call at the client.
    Request(Value),
    Send(Value),
    Phase(Phase, PhaseArg),
}

/// Node state: the last clock reading and the sub-protocols.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct NodeState {
    pub clock: Millis,
    pub subs: DefaultMap<NodeTag, NodeSub>,
}

impl NodeState {
    pub fn client(&self) -> ClientState {
        match self.subs.get(&NodeTag::Client) {
            NodeSub::Client(c) => c,
            NodeSub::View(_) => unreachable!("client tag holds client state"),
        }
    }

    pub fn view(&self, v: u64) -> ViewState {
        match self.subs.get(&NodeTag::View(v)) {
            NodeSub::View(s) => s,
            NodeSub::Client(_) => unreachable!("view tag holds view state"),
        }
    }

    /// Views with any state, ascending.
    pub fn views(&self) -> impl Iterator<Item = (u64, &ViewState)> {
        self.subs.explicit().filter_map(|(t, s)| match (t, s) {
            (NodeTag::View(v), NodeSub::View(s)) => Some((*v, s)),
            _ => None,
        })
    }

    /// Highest view this node has started.
    pub fn current_view(&self) -> Option<u64> {
        self.views().filter(|(_, s)| view_change(s).started).map(|(v, _)| v).last()
    }

    /// The committed value and the view it committed in.
    pub fn decided(&self) -> Option<(u64, Decision)> {
        self.views().find_map(|(v, s)| {
            let c = votes(s, Phase::Commit);
            c.quorum.then(|| (v, c.target.expect("quorum implies a target").1))
        })
    }
}

pub struct NodeComp<'a> {
    pub cfg: &'a PbftConfig,
    pub id: NodeId,
    pub clock: Millis,
    pub decided: bool,
}

impl NodeComp<'_> {
    fn view_comp(&self, view: u64) -> ViewComp<'_> {
        ViewComp { cfg: self.cfg, id: self.id, view, clock: self.clock, decided: self.decided }
    }

    fn run_client(
        &self,
        mut s: ClientState,
        input: SubInput<'_, Incoming, NodeArg>,
    ) -> (ClientState, Vec<Transmit<PbftMessage>>) {
        match input {
            SubInput::Call(NodeArg::Send(v)) if s.request.is_none() => {
                s.request = Some(v.clone());
                let t = Transmit { to: Destination::Broadcast, message: PbftMessage::Request(v.clone()) };
                return (s, vec![t]);
            }
            SubInput::Message(Incoming { from, msg: PbftMessage::Request(v), .. })
                if *from == self.cfg.client && s.seen.is_none() =>
            {
                s.seen = Some(v.clone());
            }
            SubInput::Message(Incoming { from, msg: PbftMessage::Reply(d), .. }) if self.id == self.cfg.client => {
                s.replies.entry(*from).or_insert_with(|| d.clone());
                if s.done.is_none() && s.replies.values().filter(|r| *r == d).count() >= self.cfg.weak() {
                    s.done = Some(d.clone());
                }
            }
            _ => {}
        }
        (s, Vec::new())
    }

    fn run_view(
        &self,
        view: u64,
        s: &ViewState,
        input: SubInput<'_, Incoming, NodeArg>,
    ) -> (ViewState, Vec<Transmit<PbftMessage>>) {
        let inner = match input {
            SubInput::Timeout(now) => Input::Timeout(now),
            SubInput::Message(m) => match Phase::of(&m.msg) {
                Some(p) => Input::Message(p, m.clone()),
                None => return (s.clone(), Vec::new()),
            },
            SubInput::Call(NodeArg::Phase(p, a)) => Input::Call(Some(*p), a.clone()),
            SubInput::Call(_) => return (s.clone(), Vec::new()),
        };
        match sync_dispatch(&self.view_comp(view), s, &inner, DEFAULT_CALL_DEPTH) {
            Ok((next, out)) => (next, out.into_iter().map(|(_, t)| t).collect()),
            Err(_) => (s.clone(), Vec::new()),
        }
    }

    fn call(view: u64, phase: Phase, arg: PhaseArg) -> (NodeTag, NodeArg) {
        (NodeTag::View(view), NodeArg::Phase(phase, arg))
    }

    /// Calls that move this node between views after `view` went from
    /// `before` to `after`.
    fn view_transitions(
        &self,
        pre: &DefaultMap<NodeTag, NodeSub>,
        view: u64,
        before: &ViewState,
        after: &ViewState,
    ) -> Vec<(NodeTag, NodeArg)> {
        let mut calls = Vec::new();
        let (vc0, vc1) = (view_change(before), view_change(after));
        let stop_through = |last: u64, calls: &mut Vec<(NodeTag, NodeArg)>| {
            for (tag, sub) in pre.explicit() {
                if let (NodeTag::View(u), NodeSub::View(s)) = (tag, sub) {
                    if *u <= last && !view_change(s).stopped {
                        calls.push(Self::call(*u, Phase::ViewChange, PhaseArg::Stop));
                    }
                }
            }
        };
        // A new view inherits the highest prepared certificate seen so far.
        let start = |w: u64, calls: &mut Vec<(NodeTag, NodeArg)>| {
            calls.push(Self::call(w, Phase::ViewChange, PhaseArg::Start));
            let mut best = vc1.prepared.clone().filter(|_| view < w);
            for (tag, sub) in pre.explicit() {
                if let (NodeTag::View(u), NodeSub::View(s)) = (tag, sub) {
                    let c = view_change(s).prepared;
                    if *u < w && *u != view && c.as_ref().map(|c| c.view) > best.as_ref().map(|b| b.view) {
                        best = c;
                    }
                }
            }
            if let Some(c) = best {
                calls.push(Self::call(w, Phase::ViewChange, PhaseArg::Prepared(c)));
            }
        };
        if !vc0.quorum && vc1.quorum {
            stop_through(view, &mut calls);
            start(view + 1, &mut calls);
            if self.cfg.leader_of(view + 1) == self.id {
                let nv = self.view_comp(view).new_view(&vc1);
                let value = select(&nv.view_changes);
                calls.push(Self::call(view + 1, Phase::PrePrepare, PhaseArg::Propose { value, new_view: Some(nv) }));
            }
        }
        let accepted = pre_prepare(before).accepted.is_none() && pre_prepare(after).accepted.is_some();
        if accepted && view > 0 && !vc1.started {
            stop_through(view - 1, &mut calls);
            start(view, &mut calls);
        }
        if self.cfg.mutated(Mutation::EarlyTimer) && vc0.sent.is_empty() && !vc1.sent.is_empty() {
            calls.push(Self::call(view + 1, Phase::ViewChange, PhaseArg::Arm));
        }
        calls
    }
}

impl Composition for NodeComp<'_> {
    type Tag = NodeTag;
    type Sub = NodeSub;
    type Msg = Incoming;
    type Arg = NodeArg;
    type Out = Transmit<PbftMessage>;

    fn run(&self, tag: &NodeTag, sub: &NodeSub, input: SubInput<'_, Incoming, NodeArg>) -> (NodeSub, Vec<Self::Out>) {
        match (tag, sub) {
            (NodeTag::Client, NodeSub::Client(s)) => {
                let (s, out) = self.run_client(s.clone(), input);
                (NodeSub::Client(s), out)
            }
            (NodeTag::View(v), NodeSub::View(s)) => {
                let (s, out) = self.run_view(*v, s, input);
                (NodeSub::View(s), out)
            }
            _ => (sub.clone(), Vec::new()),
        }
    }

    fn split(
        &self,
        pre: &DefaultMap<NodeTag, NodeSub>,
        trigger: Trigger<'_, NodeTag, Incoming, NodeArg>,
    ) -> Vec<(NodeTag, NodeArg)> {
        let client = match pre.get(&NodeTag::Client) {
            NodeSub::Client(c) => c,
            NodeSub::View(_) => unreachable!("client tag holds client state"),
        };
        let start0 = Self::call(0, Phase::ViewChange, PhaseArg::Start);
        // Views touched by this trigger, with the input each one sees.
        let touched: Vec<(u64, SubInput<'_, Incoming, NodeArg>)> = match &trigger {
            Trigger::Input(Input::Call(None, NodeArg::Request(v))) => {
                if self.id != self.cfg.client || client.request.is_some() {
                    return Vec::new();
                }
                return vec![(NodeTag::Client, NodeArg::Send(v.clone())), start0];
            }
            Trigger::Input(Input::Message(NodeTag::Client, Incoming { from, msg: PbftMessage::Request(v), .. })) => {
                if *from != self.cfg.client || client.seen.is_some() {
                    return Vec::new();
                }
                let mut calls = vec![start0];
                if self.cfg.leader_of(0) == self.id {
                    let propose = PhaseArg::Propose { value: Decision::Value(v.clone()), new_view: None };
                    calls.push(Self::call(0, Phase::PrePrepare, propose));
                }
                return calls;
            }
            Trigger::Input(Input::Message(NodeTag::View(v), m)) => vec![(*v, SubInput::Message(m))],
            Trigger::Input(Input::Timeout(now)) => pre
                .explicit()
                .filter_map(|(t, _)| match t {
                    NodeTag::View(v) => Some((*v, SubInput::Timeout(*now))),
                    NodeTag::Client => None,
                })
                .collect(),
            Trigger::Injected(NodeTag::View(v), a) => vec![(*v, SubInput::Call(*a))],
            _ => return Vec::new(),
        };
        let mut calls = Vec::new();
        for (view, input) in touched {
            let before = match pre.get(&NodeTag::View(view)) {
                NodeSub::View(s) => s,
                NodeSub::Client(_) => continue,
            };
            let (after, _) = self.run_view(view, &before, input);
            calls.extend(self.view_transitions(pre, view, &before, &after));
        }
        calls
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PbftCall {
    Request(Value),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PbftProgram {
    pub cfg: PbftConfig,
}

impl PbftProgram {
    pub fn new(cfg: PbftConfig) -> Self {
        PbftProgram { cfg }
    }

    fn comp(&self, id: NodeId, st: &NodeState, clock: Millis) -> NodeComp<'_> {
        NodeComp { cfg: &self.cfg, id, clock, decided: st.decided().is_some() }
    }
}

impl NodeProgram for PbftProgram {
    type State = NodeState;
    type Message = PbftMessage;
    type Arg = PbftCall;
    type Output = Decision;

    fn zero(&self, _: NodeId) -> NodeState {
        NodeState::default()
    }

    fn run(
        &self,
        id: NodeId,
        st: &NodeState,
        ev: &Event<PbftMessage, PbftCall>,
    ) -> (NodeState, Vec<Transmit<PbftMessage>>) {
        let clock = match ev {
            Event::Timeout(now) => (*now).max(st.clock),
            _ => st.clock,
        };
        let input = match ev {
            Event::Timeout(now) => Input::Timeout(*now),
            Event::Call(PbftCall::Request(v)) => Input::Call(None, NodeArg::Request(v.clone())),
            Event::Message { from, msg, sig } => {
                let tag = msg.view().map_or(NodeTag::Client, NodeTag::View);
                Input::Message(tag, Incoming { from: *from, msg: msg.clone(), sig: *sig })
            }
        };
        match sync_dispatch(&self.comp(id, st, clock), &st.subs, &input, DEFAULT_CALL_DEPTH) {
            Ok((subs, out)) => (NodeState { clock, subs }, out.into_iter().map(|(_, t)| t).collect()),
            Err(_) => (NodeState { clock, subs: st.subs.clone() }, Vec::new()),
        }
    }

    fn extractor(&self) -> StapledExtractor<PbftMessage> {
        extract
    }

    fn output(&self, st: &NodeState) -> Option<Decision> {
        st.decided().map(|(_, d)| d)
    }

    fn summarize(&self, st: &NodeState) -> serde_json::Value {
        let views: Vec<serde_json::Value> = st
            .views()
            .map(|(v, s)| {
                let vc = view_change(s);
                serde_json::json!({
                    "view": v,
                    "started": vc.started,
                    "accepted": pre_prepare(s).accepted.is_some(),
                    "prepared": votes(s, Phase::Prepare).quorum,
                    "committed": votes(s, Phase::Commit).quorum,
                    "vc_sent": vc.sent.len(),
                    "vc_votes": vc.votes.len(),
                })
            })
            .collect();
        serde_json::json!({ "clock": st.clock, "views": views, "decided": st.decided() })
    }
}
