//! Bounded fairness audit of a simulated prefix.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{MsgId, NetState, NetTask, NetTransition};
use crate::sm::ExecutionPrefix;
use crate::{Millis, NodeId};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskFiring {
    pub task: NetTask,
    /// Step at which the task became pending.
    pub activated: usize,
    /// Step whose transition satisfied it, if any.
    pub fired: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AuditReport {
    pub messages: Vec<TaskFiring>,
    pub ticks: BTreeMap<NodeId, usize>,
    pub stabilize: Option<usize>,
    /// Fairness obligations broken within the prefix.
    pub violations: Vec<String>,
}

impl AuditReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn unfired(&self) -> impl Iterator<Item = &TaskFiring> {
        self.messages.iter().filter(|m| m.fired.is_none())
    }
}

/// Reports when each network task fired. A message still in flight at the
/// end is only a violation if its deadline has already passed.
pub fn fairness_audit<S, A, O: Clone>(
    prefix: &ExecutionPrefix<NetState<S, O>, NetTransition<A, O>>,
    last: &NetState<S, O>,
    delta: Millis,
) -> AuditReport {
    let mut report = AuditReport::default();
    let mut open: BTreeMap<MsgId, usize> = BTreeMap::new();
    let states: Vec<&NetState<S, O>> = prefix.steps.iter().map(|(s, _)| s).chain(std::iter::once(last)).collect();
    for (i, (s, t)) in prefix.steps.iter().enumerate() {
        let after = states[i + 1];
        for id in after.inflight.keys() {
            if !s.inflight.contains_key(id) {
                open.insert(*id, i);
            }
        }
        match t {
            NetTransition::Deliver { id, at, .. } => {
                let m = &s.inflight[id];
                if let Some(gst) = s.stabilized_at {
                    if at.saturating_sub(m.sent_at.max(gst)) > delta {
                        report.violations.push(format!("message {id} took longer than delta after stabilization"));
                    }
                }
                let activated = open.remove(id).unwrap_or(0);
                report.messages.push(TaskFiring { task: NetTask::Message(*id), activated, fired: Some(i) });
            }
            NetTransition::Tick { node, .. } => *report.ticks.entry(*node).or_default() += 1,
            NetTransition::Stabilize { .. } => report.stabilize = Some(i),
            _ => {}
        }
    }
    for (id, activated) in open {
        if let Some(m) = last.inflight.get(&id) {
            if m.deadline.is_some_and(|d| d < last.now) {
                report.violations.push(format!("message {id} missed its deadline"));
            }
        }
        report.messages.push(TaskFiring { task: NetTask::Message(id), activated, fired: None });
    }
    report.messages.sort_by_key(|m| m.activated);
    report
}
