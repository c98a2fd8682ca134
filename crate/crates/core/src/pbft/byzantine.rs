//! Byzantine behaviors used by the failure scenarios and regressions.

use std::collections::{BTreeMap, BTreeSet};

use super::message::{digest_of, extract, NewView, PbftMessage, ViewChange};
use super::PbftConfig;
use crate::authn::{Envelope, KeyRegistry, SigRef};
use crate::runtime::Destination;
use crate::simnet::{Behavior, CorruptKeys};
use crate::{Decision, Millis, NodeId, Value};

/// Corrupt nodes vote for a value nobody requested.
///
/// Each corrupt node sends one wrong prepare and commit per view once an
/// honest pre-prepare for that view appears, a NULL view change whenever an
/// honest node sends one, and, when it leads the next view, a proposal for
/// the wrong value stapled with honest view changes.
pub struct WrongValue {
    cfg: PbftConfig,
    wrong: Value,
    sent: BTreeSet<(u8, u64, NodeId)>,
    seen_vcs: BTreeMap<u64, Vec<(NodeId, ViewChange, SigRef)>>,
}

impl WrongValue {
    pub fn new(cfg: PbftConfig, wrong: Value) -> Self {
        WrongValue { cfg, wrong, sent: BTreeSet::new(), seen_vcs: BTreeMap::new() }
    }

    fn to_all(
        &self,
        keys: &CorruptKeys,
        registry: &KeyRegistry,
        c: NodeId,
        msg: &PbftMessage,
    ) -> Vec<(NodeId, Envelope)> {
        let Some(env) = keys.sign(registry, c, msg, extract) else { return Vec::new() };
        (0..self.cfg.n()).map(NodeId).filter(|to| *to != c).map(|to| (to, env.clone())).collect()
    }

    fn once(&mut self, kind: u8, view: u64, c: NodeId) -> bool {
        self.sent.insert((kind, view, c))
    }
}

impl Behavior<PbftMessage> for WrongValue {
    fn on_emit(
        &mut self,
        keys: &CorruptKeys,
        registry: &KeyRegistry,
        _at: Millis,
        from: NodeId,
        _to: Destination,
        msg: &PbftMessage,
        env: &Envelope,
    ) -> Vec<(NodeId, Envelope)> {
        let corrupt: Vec<NodeId> = keys.ids().collect();
        let mut out = Vec::new();
        match msg {
            PbftMessage::PrePrepare { view, .. } => {
                let digest = digest_of(&Decision::Value(self.wrong.clone()));
                for c in corrupt {
                    for m in [PbftMessage::Prepare { view: *view, digest }, PbftMessage::Commit { view: *view, digest }]
                    {
                        if self.once(m.kind(), *view, c) {
                            out.extend(self.to_all(keys, registry, c, &m));
                        }
                    }
                }
            }
            PbftMessage::ViewChange(vc) => {
                let seen = self.seen_vcs.entry(vc.view).or_default();
                if !seen.iter().any(|(id, _, _)| *id == from) {
                    seen.push((from, vc.clone(), SigRef::bound(env.root_sig)));
                }
                let ready = seen.len() >= self.cfg.quorum();
                for c in corrupt {
                    let own =
                        PbftMessage::ViewChange(ViewChange { view: vc.view, prepared: None, vote: Decision::Null });
                    if self.once(own.kind(), vc.view, c) {
                        out.extend(self.to_all(keys, registry, c, &own));
                    }
                    let next = vc.view + 1;
                    if ready && self.cfg.leader_of(next) == c && self.once(super::message::KIND_PRE_PREPARE, next, c) {
                        let view_changes = self.seen_vcs[&vc.view][..self.cfg.quorum()].to_vec();
                        let pp = PbftMessage::PrePrepare {
                            view: next,
                            value: Decision::Value(self.wrong.clone()),
                            new_view: Some(NewView { view: next, view_changes }),
                        };
                        out.extend(self.to_all(keys, registry, c, &pp));
                    }
                }
            }
            _ => {}
        }
        out
    }
}

/// A corrupt leader of view 1 that justifies a NULL proposal with its own
/// view change repeated a quorum of times.
pub struct RepeatedCertificate {
    pub cfg: PbftConfig,
    pub at: Millis,
}

impl RepeatedCertificate {
    pub fn forger(&self) -> NodeId {
        self.cfg.leader_of(1)
    }
}

impl Behavior<PbftMessage> for RepeatedCertificate {
    fn schedule(&mut self, keys: &CorruptKeys, registry: &KeyRegistry) -> Vec<(Millis, NodeId, Envelope)> {
        let me = self.forger();
        let vc = ViewChange { view: 0, prepared: None, vote: Decision::Null };
        let Some(vc_env) = keys.sign(registry, me, &PbftMessage::ViewChange(vc.clone()), extract) else {
            return Vec::new();
        };
        let sig = SigRef::bound(vc_env.root_sig);
        let pp = PbftMessage::PrePrepare {
            view: 1,
            value: Decision::Null,
            new_view: Some(NewView { view: 1, view_changes: vec![(me, vc, sig); self.cfg.quorum()] }),
        };
        let Some(env) = keys.sign(registry, me, &pp, extract) else { return Vec::new() };
        (0..self.cfg.n()).map(NodeId).filter(|to| *to != me).map(|to| (self.at, to, env.clone())).collect()
    }

    fn on_emit(
        &mut self,
        _: &CorruptKeys,
        _: &KeyRegistry,
        _: Millis,
        _: NodeId,
        _: Destination,
        _: &PbftMessage,
        _: &Envelope,
    ) -> Vec<(NodeId, Envelope)> {
        Vec::new()
    }
}
