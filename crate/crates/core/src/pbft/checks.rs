//! Trace-level checks run over a finished simulation.

use std::collections::{BTreeMap, BTreeSet};

use super::measures::PbftPrefix;
use super::message::PbftMessage;
use super::node::NodeState;
use super::spec::PbftNetState;
use super::view::pre_prepare;
use super::PbftConfig;
use crate::simnet::{peek, NetTransition, SentRecord};
use crate::{Decision, Millis, NodeId};

/// Every honest output is the same decision.
pub fn agreement(s: &PbftNetState) -> Result<(), String> {
    let decided: BTreeSet<&Decision> = s.outputs.values().map(|(_, d)| d).collect();
    if decided.len() > 1 {
        return Err(format!("honest nodes decided {} different values: {decided:?}", decided.len()));
    }
    Ok(())
}

/// Every proposal an honest node accepted after view 0 carried view changes
/// from at least a quorum of distinct signers.
pub fn certificate_threshold(cfg: &PbftConfig, s: &PbftNetState) -> Result<(), String> {
    for (id, st) in s.nodes.iter() {
        for (v, vs) in st.views() {
            let pp = pre_prepare(vs);
            if v > 0 && pp.accepted.is_some() && pp.justification < cfg.quorum() {
                return Err(format!(
                    "node {} accepted the view {v} proposal on {} signers, quorum is {}",
                    id.0,
                    pp.justification,
                    cfg.quorum()
                ));
            }
        }
    }
    Ok(())
}

/// No honest node sent more than one view change for a view.
pub fn single_view_change(log: &[SentRecord<PbftMessage>]) -> Result<(), String> {
    let mut sent: BTreeMap<(NodeId, u64), usize> = BTreeMap::new();
    for r in log {
        if let PbftMessage::ViewChange(vc) = &r.message {
            let n = sent.entry((r.from, vc.view)).or_default();
            *n += 1;
            if *n > 1 {
                return Err(format!("node {} sent a second view change for view {} at {}ms", r.from.0, vc.view, r.at));
            }
        }
    }
    Ok(())
}

/// Messages on the path from the client's request to the first quorum of
/// decisions, counted from deliveries in the trace.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CriticalPath {
    pub view: u64,
    pub deciders: Vec<NodeId>,
    pub messages: u64,
}

fn deliveries(prefix: &PbftPrefix) -> impl Iterator<Item = (usize, NodeId, NodeId, PbftMessage)> + '_ {
    prefix.steps.iter().enumerate().filter_map(|(j, (s, t))| match t {
        NetTransition::Deliver { id, .. } => {
            let m = s.inflight.get(id)?;
            Some((j, m.from, m.to, peek::<PbftMessage>(&m.env)?))
        }
        _ => None,
    })
}

/// First step at which each honest node output, in order.
pub fn decision_steps(prefix: &PbftPrefix) -> Vec<(usize, NodeId)> {
    prefix
        .steps
        .iter()
        .enumerate()
        .filter_map(|(j, (s, t))| t.effects()?.output.as_ref().and(t.acting_node(s)).map(|id| (j, id)))
        .collect()
}

/// `None` if fewer than a quorum of nodes decided.
pub fn critical_path(cfg: &PbftConfig, prefix: &PbftPrefix, last: &PbftNetState) -> Option<CriticalPath> {
    let q = cfg.quorum();
    let firsts: Vec<(usize, NodeId)> = decision_steps(prefix).into_iter().take(q).collect();
    if firsts.len() < q {
        return None;
    }
    let view = last.node(firsts[0].1).and_then(NodeState::decided)?.0;
    let leader = cfg.leader_of(view);
    let all: Vec<_> = deliveries(prefix).collect();
    let request =
        all.iter().any(|(_, from, to, m)| *from == cfg.client && *to == leader && matches!(m, PbftMessage::Request(_)));
    let mut messages = u64::from(request);
    for (k, m) in &firsts {
        let before = all.iter().filter(|(j, _, to, _)| j <= k && to == m);
        let mut pp = false;
        let (mut prep, mut com) = (BTreeSet::new(), BTreeSet::new());
        for (_, from, _, msg) in before {
            match msg {
                PbftMessage::PrePrepare { view: v, .. } if *v == view => pp = true,
                PbftMessage::Prepare { view: v, .. } if *v == view => {
                    prep.insert(*from);
                }
                PbftMessage::Commit { view: v, .. } if *v == view => {
                    com.insert(*from);
                }
                _ => {}
            }
        }
        let reply =
            all.iter().any(|(_, from, to, msg)| from == m && *to == cfg.client && matches!(msg, PbftMessage::Reply(_)));
        messages += u64::from(pp) + prep.len().min(q) as u64 + com.len().min(q) as u64 + u64::from(reply);
    }
    Some(CriticalPath { view, deciders: firsts.into_iter().map(|(_, id)| id).collect(), messages })
}

/// Milliseconds from the client's request to the client accepting f+1
/// matching replies.
pub fn client_latency(cfg: &PbftConfig, prefix: &PbftPrefix, last: &PbftNetState) -> Option<Millis> {
    let start = prefix.steps.iter().find_map(|(_, t)| match t {
        NetTransition::LocalCall { at, node, .. } if *node == cfg.client => Some(*at),
        _ => None,
    })?;
    let done = |s: &PbftNetState| s.node(cfg.client).is_some_and(|st| st.client().done.is_some());
    let end = match prefix.steps.iter().position(|(s, _)| done(s)) {
        Some(0) => return None,
        Some(k) => prefix.steps[k - 1].1.at(),
        None if done(last) => prefix.steps.last()?.1.at(),
        None => return None,
    };
    Some(end - start)
}
