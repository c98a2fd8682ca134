//! One view: pre-prepare, prepare, commit and view-change phases composed
//! under synchronous dispatch.
//!
//! Prepare and commit share one vote implementation. Cross-phase calls are
//! produced by [`ViewComp::split`]: an accepted pre-prepare feeds the prepare
//! phase, and a prepare quorum feeds both the commit phase and the prepared
//! certificate a later view change will carry.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::message::{digest_of, Digest, NewView, PbftMessage, PreparedCert, ViewChange};
use super::{Mutation, PbftConfig};
use crate::authn::SigRef;
use crate::compose::{Composition, DefaultMap, Input, SubInput, Trigger, Zeroed};
use crate::runtime::{Destination, Transmit};
use crate::{Decision, Millis, NodeId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Phase {
    PrePrepare,
    Prepare,
    Commit,
    ViewChange,
}

impl Phase {
    pub fn of(msg: &PbftMessage) -> Option<Phase> {
        match msg {
            PbftMessage::PrePrepare { .. } => Some(Phase::PrePrepare),
            PbftMessage::Prepare { .. } => Some(Phase::Prepare),
            PbftMessage::Commit { .. } => Some(Phase::Commit),
            PbftMessage::ViewChange(_) => Some(Phase::ViewChange),
            PbftMessage::Request(_) | PbftMessage::Reply(_) => None,
        }
    }
}

/// An authenticated message as the phases see it.
#[derive(Clone, Debug, PartialEq)]
pub struct Incoming {
    pub from: NodeId,
    pub msg: PbftMessage,
    pub sig: SigRef,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PrePrepareState {
    pub proposed: bool,
    pub accepted: Option<(Decision, Digest)>,
    /// Distinct signers of the accepted proposal's certificate.
    pub justification: usize,
}

/// Prepare or commit: collect votes for the accepted digest.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct VotePhase {
    pub target: Option<(Digest, Decision)>,
    pub sent: bool,
    /// First vote from each sender.
    pub votes: BTreeMap<NodeId, (Digest, SigRef)>,
    pub quorum: bool,
}

impl VotePhase {
    pub fn matching<'a>(&'a self, d: &'a Digest) -> impl Iterator<Item = (&'a NodeId, &'a SigRef)> + 'a {
        self.votes.iter().filter(move |(_, (v, _))| v == d).map(|(id, (_, sig))| (id, sig))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ViewChangeState {
    pub started: bool,
    pub deadline: Option<Millis>,
    /// Values this node sent view changes on; at most one when correct.
    pub sent: Vec<Decision>,
    /// A later view has started; this view sends nothing more.
    pub stopped: bool,
    pub prepared: Option<PreparedCert>,
    /// First valid view change from each sender.
    pub votes: BTreeMap<NodeId, (ViewChange, SigRef)>,
    pub quorum: bool,
}

impl ViewChangeState {
    pub fn own_vote(&self) -> Decision {
        self.prepared.as_ref().map_or(Decision::Null, |c| c.value.clone())
    }

    /// Whether prepare and commit votes may still go out in this view.
    pub fn may_vote(&self) -> bool {
        self.sent.is_empty() && !self.stopped
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PhaseState {
    PrePrepare(PrePrepareState),
    Prepare(VotePhase),
    Commit(VotePhase),
    ViewChange(ViewChangeState),
}

impl Zeroed<Phase> for PhaseState {
    fn zero(tag: &Phase) -> Self {
        match tag {
            Phase::PrePrepare => PhaseState::PrePrepare(Default::default()),
            Phase::Prepare => PhaseState::Prepare(Default::default()),
            Phase::Commit => PhaseState::Commit(Default::default()),
            Phase::ViewChange => PhaseState::ViewChange(Default::default()),
        }
    }
}

pub type ViewState = DefaultMap<Phase, PhaseState>;

pub fn pre_prepare(v: &ViewState) -> PrePrepareState {
    match v.get(&Phase::PrePrepare) {
        PhaseState::PrePrepare(s) => s,
        _ => unreachable!("phase map holds a pre-prepare state at its tag"),
    }
}

pub fn votes(v: &ViewState, phase: Phase) -> VotePhase {
    match v.get(&phase) {
        PhaseState::Prepare(s) | PhaseState::Commit(s) => s,
        _ => unreachable!("phase map holds a vote state at its tag"),
    }
}

pub fn view_change(v: &ViewState) -> ViewChangeState {
    match v.get(&Phase::ViewChange) {
        PhaseState::ViewChange(s) => s,
        _ => unreachable!("phase map holds a view-change state at its tag"),
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PhaseArg {
    /// Leader only: propose `value`, justified by `new_view` after view 0.
    Propose {
        value: Decision,
        new_view: Option<NewView>,
    },
    /// Vote target for prepare or commit; `send` is false once this node has
    /// left the view.
    Target {
        digest: Digest,
        value: Decision,
        send: bool,
    },
    Start,
    Stop,
    /// Start the timer without starting the view.
    Arm,
    Prepared(PreparedCert),
}

/// Context of one view at one node for the duration of a step.
pub struct ViewComp<'a> {
    pub cfg: &'a PbftConfig,
    pub id: NodeId,
    pub view: u64,
    pub clock: Millis,
    pub decided: bool,
}

/// Checks a prepared certificate's own consistency and threshold.
pub fn cert_ok(cfg: &PbftConfig, c: &PreparedCert) -> bool {
    let signers: BTreeSet<NodeId> = c.prepares.iter().map(|(id, _)| *id).collect();
    digest_of(&c.value) == c.digest && signers.len() >= cfg.quorum() && signers.iter().all(|s| s.0 < cfg.n())
}

pub fn view_change_ok(cfg: &PbftConfig, vc: &ViewChange) -> bool {
    match &vc.prepared {
        None => vc.vote == Decision::Null,
        Some(c) => c.view <= vc.view && c.value == vc.vote && cert_ok(cfg, c),
    }
}

/// The value a new view must propose: the prepared value with the highest
/// view, or NULL when nobody prepared.
pub fn select(vcs: &[(NodeId, ViewChange, SigRef)]) -> Decision {
    vcs.iter()
        .filter_map(|(_, vc, _)| vc.prepared.as_ref())
        .max_by_key(|c| c.view)
        .map_or(Decision::Null, |c| c.value.clone())
}

impl ViewComp<'_> {
    fn leader(&self) -> NodeId {
        self.cfg.leader_of(self.view)
    }

    fn broadcast(msg: PbftMessage) -> Transmit<PbftMessage> {
        Transmit { to: Destination::Broadcast, message: msg }
    }

    /// If `nv` justifies proposing `value` in this view, the number of
    /// distinct signers in it.
    pub fn check_new_view(&self, value: &Decision, nv: &NewView) -> Option<usize> {
        if nv.view != self.view || self.view == 0 {
            return None;
        }
        let prev = self.view - 1;
        if nv.view_changes.iter().any(|(_, vc, _)| vc.view != prev || !view_change_ok(self.cfg, vc)) {
            return None;
        }
        let signers = nv.view_changes.iter().map(|(id, _, _)| *id).collect::<BTreeSet<_>>().len();
        let counted = if self.cfg.mutated(Mutation::UnderCountedCertificate) { nv.view_changes.len() } else { signers };
        (counted >= self.cfg.quorum() && select(&nv.view_changes) == *value).then_some(signers)
    }

    fn run_pre_prepare(
        &self,
        mut s: PrePrepareState,
        input: SubInput<'_, Incoming, PhaseArg>,
    ) -> (PrePrepareState, Vec<Transmit<PbftMessage>>) {
        match input {
            SubInput::Call(PhaseArg::Propose { value, new_view }) if !s.proposed && self.id == self.leader() => {
                s.proposed = true;
                let mut new_view = new_view.clone();
                if self.cfg.mutated(Mutation::WrongViewStaple) {
                    for (_, vc, _) in new_view.iter_mut().flat_map(|nv| nv.view_changes.iter_mut()) {
                        vc.view += 1;
                    }
                }
                let msg = PbftMessage::PrePrepare { view: self.view, value: value.clone(), new_view };
                (s, vec![Self::broadcast(msg)])
            }
            SubInput::Message(Incoming { from, msg: PbftMessage::PrePrepare { view, value, new_view }, .. })
                if s.accepted.is_none() && *from == self.leader() && *view == self.view =>
            {
                let justification = match (self.view, new_view) {
                    (0, None) => Some(0),
                    (_, Some(nv)) => self.check_new_view(value, nv),
                    _ => None,
                };
                if let Some(j) = justification {
                    s.accepted = Some((value.clone(), digest_of(value)));
                    s.justification = j;
                }
                (s, Vec::new())
            }
            _ => (s, Vec::new()),
        }
    }

    fn run_votes(
        &self,
        phase: Phase,
        mut s: VotePhase,
        input: SubInput<'_, Incoming, PhaseArg>,
    ) -> (VotePhase, Vec<Transmit<PbftMessage>>) {
        let mut out = Vec::new();
        match input {
            SubInput::Call(PhaseArg::Target { digest, value, send }) if s.target.is_none() => {
                s.target = Some((*digest, value.clone()));
                if *send {
                    s.sent = true;
                    let msg = match phase {
                        Phase::Prepare => PbftMessage::Prepare { view: self.view, digest: *digest },
                        _ => PbftMessage::Commit { view: self.view, digest: *digest },
                    };
                    out.push(Self::broadcast(msg));
                }
            }
            SubInput::Message(Incoming { from, msg, sig }) => {
                let digest = match (phase, msg) {
                    (Phase::Prepare, PbftMessage::Prepare { view, digest }) if *view == self.view => Some(*digest),
                    (Phase::Commit, PbftMessage::Commit { view, digest }) if *view == self.view => Some(*digest),
                    _ => None,
                };
                if let Some(d) = digest {
                    s.votes.entry(*from).or_insert((d, *sig));
                }
            }
            _ => {}
        }
        if let Some((d, value)) = s.target.clone() {
            if !s.quorum && s.matching(&d).count() >= self.cfg.quorum() {
                s.quorum = true;
                if phase == Phase::Commit {
                    out.push(Transmit { to: Destination::To(self.cfg.client), message: PbftMessage::Reply(value) });
                }
            }
        }
        (s, out)
    }

    fn send_view_change(&self, s: &mut ViewChangeState, vote: Decision) -> Transmit<PbftMessage> {
        let prepared = s.prepared.clone().filter(|c| c.value == vote);
        s.sent.push(vote.clone());
        Self::broadcast(PbftMessage::ViewChange(ViewChange { view: self.view, prepared, vote }))
    }

    fn expire(&self, s: &mut ViewChangeState, now: Millis) -> Vec<Transmit<PbftMessage>> {
        let due = s.started && s.deadline.is_some_and(|d| d <= now);
        if due && !self.decided && s.may_vote() {
            let vote = s.own_vote();
            vec![self.send_view_change(s, vote)]
        } else {
            Vec::new()
        }
    }

    fn run_view_change(
        &self,
        mut s: ViewChangeState,
        input: SubInput<'_, Incoming, PhaseArg>,
    ) -> (ViewChangeState, Vec<Transmit<PbftMessage>>) {
        let timeout = self.cfg.view_timeout(self.view);
        let mut out = Vec::new();
        match input {
            SubInput::Call(PhaseArg::Start) if !s.started => {
                s.started = true;
                if !(self.cfg.mutated(Mutation::EarlyTimer) && s.deadline.is_some()) {
                    s.deadline = Some(self.clock + timeout);
                }
                out = self.expire(&mut s, self.clock);
            }
            SubInput::Call(PhaseArg::Arm) if s.deadline.is_none() => {
                s.deadline = Some(self.clock + timeout);
            }
            SubInput::Call(PhaseArg::Stop) => s.stopped = true,
            SubInput::Call(PhaseArg::Prepared(cert))
                if s.sent.is_empty() && s.prepared.as_ref().is_none_or(|p| cert.view > p.view) =>
            {
                s.prepared = Some(cert.clone());
            }
            SubInput::Timeout(now) => {
                if self.cfg.mutated(Mutation::ZeroStateTimer) && s.deadline.is_none() {
                    s.deadline = Some(now + timeout);
                }
                out = self.expire(&mut s, now);
            }
            SubInput::Message(Incoming { from, msg: PbftMessage::ViewChange(vc), sig })
                if vc.view == self.view && view_change_ok(self.cfg, vc) =>
            {
                s.votes.entry(*from).or_insert((vc.clone(), *sig));
                if s.votes.len() >= self.cfg.quorum() {
                    s.quorum = true;
                }
                out = self.amplify(&mut s);
            }
            _ => {}
        }
        (s, out)
    }

    /// Joins a view change once f+1 nodes, counting this one, vote for the
    /// value this node would vote for itself.
    fn amplify(&self, s: &mut ViewChangeState) -> Vec<Transmit<PbftMessage>> {
        if self.decided {
            return Vec::new();
        }
        let mut tally: BTreeMap<&Decision, usize> = BTreeMap::new();
        for (id, (vc, _)) in &s.votes {
            if *id != self.id {
                *tally.entry(&vc.vote).or_default() += 1;
            }
        }
        if self.cfg.mutated(Mutation::DualViewChange) {
            let ready: Vec<Decision> = tally
                .into_iter()
                .filter(|(d, c)| *c >= self.cfg.weak() && !s.sent.contains(d))
                .map(|(d, _)| d.clone())
                .collect();
            return ready.into_iter().map(|d| self.send_view_change(s, d)).collect();
        }
        let own = s.own_vote();
        if s.may_vote() && tally.get(&own).copied().unwrap_or(0) + 1 >= self.cfg.weak() {
            vec![self.send_view_change(s, own)]
        } else {
            Vec::new()
        }
    }

    /// The first quorum of stored view changes, by sender.
    pub fn new_view(&self, s: &ViewChangeState) -> NewView {
        NewView {
            view: self.view + 1,
            view_changes: s
                .votes
                .iter()
                .take(self.cfg.quorum())
                .map(|(id, (vc, sig))| (*id, vc.clone(), *sig))
                .collect(),
        }
    }

    pub fn prepared_cert(&self, s: &VotePhase) -> Option<PreparedCert> {
        let (digest, value) = s.target.clone()?;
        let prepares: Vec<(NodeId, SigRef)> =
            s.matching(&digest).take(self.cfg.quorum()).map(|(id, sig)| (*id, *sig)).collect();
        (prepares.len() >= self.cfg.quorum()).then_some(PreparedCert { view: self.view, digest, value, prepares })
    }
}

impl Composition for ViewComp<'_> {
    type Tag = Phase;
    type Sub = PhaseState;
    type Msg = Incoming;
    type Arg = PhaseArg;
    type Out = Transmit<PbftMessage>;

    fn run(
        &self,
        tag: &Phase,
        sub: &PhaseState,
        input: SubInput<'_, Incoming, PhaseArg>,
    ) -> (PhaseState, Vec<Self::Out>) {
        match (tag, sub.clone()) {
            (Phase::PrePrepare, PhaseState::PrePrepare(s)) => {
                let (s, out) = self.run_pre_prepare(s, input);
                (PhaseState::PrePrepare(s), out)
            }
            (Phase::Prepare, PhaseState::Prepare(s)) => {
                let (s, out) = self.run_votes(Phase::Prepare, s, input);
                (PhaseState::Prepare(s), out)
            }
            (Phase::Commit, PhaseState::Commit(s)) => {
                let (s, out) = self.run_votes(Phase::Commit, s, input);
                (PhaseState::Commit(s), out)
            }
            (Phase::ViewChange, PhaseState::ViewChange(s)) => {
                let (s, out) = self.run_view_change(s, input);
                (PhaseState::ViewChange(s), out)
            }
            _ => (sub.clone(), Vec::new()),
        }
    }

    fn split(&self, pre: &ViewState, trigger: Trigger<'_, Phase, Incoming, PhaseArg>) -> Vec<(Phase, PhaseArg)> {
        let (phase, input) = match &trigger {
            Trigger::Input(Input::Message(p, m)) => (*p, SubInput::Message(m)),
            Trigger::Injected(p, a) => (**p, SubInput::Call(*a)),
            _ => return Vec::new(),
        };
        let send = view_change(pre).may_vote();
        match phase {
            Phase::PrePrepare => {
                let before = pre_prepare(pre);
                let (after, _) = self.run_pre_prepare(before.clone(), input);
                match (&before.accepted, &after.accepted) {
                    (None, Some((value, digest))) => {
                        vec![(Phase::Prepare, PhaseArg::Target { digest: *digest, value: value.clone(), send })]
                    }
                    _ => Vec::new(),
                }
            }
            Phase::Prepare => {
                let before = votes(pre, Phase::Prepare);
                let (after, _) = self.run_votes(Phase::Prepare, before.clone(), input);
                if before.quorum || !after.quorum {
                    return Vec::new();
                }
                let Some(cert) = self.prepared_cert(&after) else { return Vec::new() };
                vec![
                    (Phase::Commit, PhaseArg::Target { digest: cert.digest, value: cert.value.clone(), send }),
                    (Phase::ViewChange, PhaseArg::Prepared(cert)),
                ]
            }
            Phase::Commit | Phase::ViewChange => Vec::new(),
        }
    }
}
