//! Measures for the broadcast liveness tasks over a finished run.
//!
//! A node's termination measure is `[a, c, d]`:
//!
//! - `a`: steps until the network stabilizes, 0 afterwards.
//! - `c`: views the node still has to enter before reaching the target view.
//! - `d`: steps until the node enters a later view or decides.
//!
//! The target view is the first view at or past the timeout threshold whose
//! leader is honest and which no honest node had started at stabilization.
//! Entering views is fine until the target is reached; entering one past it
//! is what a stalled protocol looks like.

use std::collections::BTreeSet;

use super::node::NodeState;
use super::spec::{BroadcastTask, PbftNetState, PbftTransition};
use super::PbftConfig;
use crate::liveness::{first_from, Measure};
use crate::simnet::{net_measure, NetTask};
use crate::sm::ExecutionPrefix;
use crate::{Millis, NodeId};

pub type PbftPrefix = ExecutionPrefix<PbftNetState, PbftTransition>;

/// First view whose timeout leaves room for a full round after
/// stabilization: four message delays plus two tick periods.
pub fn timeout_view(cfg: &PbftConfig, delta: Millis, tick: Millis) -> u64 {
    let need = 4 * delta + 2 * tick;
    (0..).find(|k| cfg.view_timeout(*k) > need || *k >= cfg.timeout_cap_exp as u64).unwrap_or(0)
}

/// Views entered so far; 0 before view 0 starts.
pub fn rank(s: &PbftNetState, id: NodeId) -> u64 {
    s.node(id).and_then(NodeState::current_view).map_or(0, |v| v + 1)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TargetView {
    pub threshold: u64,
    pub view: u64,
}

pub fn target_view(
    cfg: &PbftConfig,
    honest: &BTreeSet<NodeId>,
    delta: Millis,
    tick: Millis,
    prefix: &PbftPrefix,
) -> TargetView {
    let threshold = timeout_view(cfg, delta, tick);
    let at = first_from(prefix, 0, |s, _| s.stabilized).unwrap_or(prefix.len().saturating_sub(1));
    let floor = match prefix.steps.get(at) {
        Some((s, _)) if at > 0 => honest.iter().map(|id| rank(s, *id)).max().unwrap_or(0),
        _ => 0,
    };
    let view = (threshold.max(floor)..).find(|v| honest.contains(&cfg.leader_of(*v))).expect("an honest leader exists");
    TargetView { threshold, view }
}

pub fn terminate_measure(target: &TargetView, prefix: &PbftPrefix, id: NodeId, i: usize) -> Measure {
    let s = &prefix.steps[i].0;
    let a = match first_from(prefix, i, |s, _| s.stabilized) {
        Some(j) => (j - i) as u64,
        None => (prefix.len() - i) as u64 + 1,
    };
    let r = rank(s, id);
    let c = (target.view + 1).saturating_sub(r);
    let d = match first_from(prefix, i + 1, |s, _| rank(s, id) > r || s.outputs.contains_key(&id)) {
        Some(j) => (j - i) as u64,
        None => (prefix.len() - i) as u64 + 1,
    };
    vec![a, c, d]
}

/// Variant for the broadcast tasks: `SetF` takes the least measure of any
/// honest node, and a node that has decided counts as zero.
pub fn broadcast_variant(
    target: TargetView,
    honest: BTreeSet<NodeId>,
) -> impl Fn(&BroadcastTask, &PbftPrefix, usize) -> Measure {
    move |task, prefix, i| match task {
        BroadcastTask::TerminateF(id) => terminate_measure(&target, prefix, *id, i),
        BroadcastTask::SetF => honest
            .iter()
            .map(|id| {
                if prefix.steps[i].0.outputs.contains_key(id) {
                    vec![0, 0, 0]
                } else {
                    terminate_measure(&target, prefix, *id, i)
                }
            })
            .min()
            .unwrap_or_else(|| vec![0, 0, 0]),
    }
}

/// Variant for the network's own tasks.
pub fn net_variant(task: &NetTask, prefix: &PbftPrefix, i: usize) -> Measure {
    vec![net_measure(task, prefix, i)]
}
