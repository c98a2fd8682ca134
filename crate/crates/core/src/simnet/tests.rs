use std::collections::BTreeMap;

use proptest::prelude::*;

use super::*;
use crate::authn::{seal, KeyRegistry};
use crate::sm::conforms;
use crate::vote::{Vote, VoteCall, VoteProgram};

type VoteWorld = World<VoteProgram>;

fn build(n: u64, policy: AdversaryPolicy<Vote>, cfg: SimConfig, start: bool) -> (VoteWorld, Vec<Signer>) {
    let (registry, signers) = KeyRegistry::generate(n, 3);
    let calls = if start { (0..n).map(|i| (0, NodeId(i), VoteCall::Start)).collect() } else { Vec::new() };
    let w = World::new(VoteProgram::new(n, (n - 1) / 3), &signers, registry, policy, cfg, calls).unwrap();
    (w, signers)
}

fn run(n: u64, cfg: SimConfig) -> VoteWorld {
    let (mut w, _) = build(n, AdversaryPolicy::default(), cfg, true);
    w.run().unwrap();
    w
}

#[test]
fn inert_cluster_ticks_four_times_by_1000() {
    let cfg = SimConfig { horizon: 1000, ..Default::default() };
    let (mut w, _) = build(4, AdversaryPolicy::default(), cfg, false);
    w.run().unwrap();
    let mut ticks: BTreeMap<NodeId, Vec<Millis>> = BTreeMap::new();
    for (_, t) in &w.prefix.steps {
        match t {
            NetTransition::Tick { at, node, .. } => ticks.entry(*node).or_default().push(*at),
            other => panic!("unexpected {other:?}"),
        }
    }
    assert_eq!(ticks.len(), 4);
    for at in ticks.values() {
        assert_eq!(at, &vec![250, 500, 750, 1000]);
    }
    assert_eq!(conforms(&w.spec(), &w.prefix), Ok(()));
}

#[test]
fn ties_resolve_by_kind_then_node() {
    let cfg = SimConfig { horizon: 250, stabilize_at: 250, ..Default::default() };
    let (registry, signers) = KeyRegistry::generate(3, 3);
    let calls = vec![(250, NodeId(2), VoteCall::Start), (250, NodeId(1), VoteCall::Start)];
    let mut w = World::new(VoteProgram::new(3, 0), &signers, registry, AdversaryPolicy::default(), cfg, calls).unwrap();
    w.run().unwrap();
    let order: Vec<String> = w
        .prefix
        .steps
        .iter()
        .take(6)
        .map(|(_, t)| match t {
            NetTransition::Stabilize { .. } => "S".to_string(),
            NetTransition::LocalCall { node, .. } => format!("C{}", node.0),
            NetTransition::Tick { node, .. } => format!("T{}", node.0),
            NetTransition::Deliver { .. } => "D".to_string(),
            NetTransition::Fault { .. } => "F".to_string(),
        })
        .collect();
    assert_eq!(order, ["S", "C1", "C2", "T0", "T1", "T2"]);
}

#[test]
fn same_seed_same_trace() {
    let a = run(4, SimConfig { seed: 11, ..Default::default() });
    let b = run(4, SimConfig { seed: 11, ..Default::default() });
    assert_eq!(a.prefix.trace(), b.prefix.trace());
    let c = run(4, SimConfig { seed: 12, ..Default::default() });
    assert_ne!(a.prefix.trace(), c.prefix.trace());
}

#[test]
fn deliveries_meet_deadlines_after_stabilization() {
    let cfg = SimConfig { stabilize_at: 900, pre_gst_max_delay: 2000, horizon: 3000, seed: 5, ..Default::default() };
    let w = run(4, cfg.clone());
    assert_eq!(conforms(&w.spec(), &w.prefix), Ok(()));
    let report = fairness_audit(&w.prefix, &w.state, cfg.delta);
    assert!(report.is_ok(), "{:?}", report.violations);
    for (s, t) in &w.prefix.steps {
        if let NetTransition::Deliver { at, id, .. } = t {
            let m = &s.inflight[id];
            if *at > 900 {
                assert!(at - m.sent_at.max(900) <= cfg.delta);
            }
        }
    }
}

#[test]
fn held_messages_arrive_after_stabilization() {
    let cfg = SimConfig { stabilize_at: 1000, horizon: 2000, seed: 1, ..Default::default() };
    let policy = AdversaryPolicy { drop_rules: vec![DropRule::new(&[1], Fate::Hold)], ..Default::default() };
    let (mut w, _) = build(4, policy, cfg, true);
    w.run().unwrap();
    let first = w.prefix.steps.iter().find(|(_, t)| matches!(t, NetTransition::Deliver { .. })).unwrap();
    assert!(first.1.at() > 1000 && first.1.at() <= 1050);
    assert_eq!(w.state.outputs.len(), 4);
}

#[test]
fn dropped_messages_never_arrive() {
    let cfg = SimConfig { stabilize_at: 1000, horizon: 2000, ..Default::default() };
    let policy = AdversaryPolicy { drop_rules: vec![DropRule::new(&[1], Fate::Drop)], ..Default::default() };
    let (mut w, _) = build(4, policy, cfg, true);
    w.run().unwrap();
    assert!(w.state.outputs.is_empty());
    assert_eq!(conforms(&w.spec(), &w.prefix), Ok(()));
}

#[test]
fn tampered_effects_do_not_conform() {
    let w = run(4, SimConfig::default());
    let mut prefix = w.prefix.clone();
    let i = prefix.steps.iter().position(|(_, t)| matches!(t, NetTransition::LocalCall { .. })).unwrap();
    if let NetTransition::LocalCall { effects, .. } = &mut prefix.steps[i].1 {
        effects.sends += 1;
    }
    let err = conforms(&w.spec(), &prefix).unwrap_err();
    assert_eq!(err.index, i);
}

#[test]
fn honest_signature_cannot_be_forged() {
    let w = run(4, SimConfig::default());
    let (registry, signers) = KeyRegistry::generate(4, 3);
    let env = seal(&registry, &signers[1], &Vote { round: 5 }, |_| Vec::new()).unwrap();
    let s = &w.prefix.steps[0].0;
    let t = NetTransition::Fault { at: 0, to: NodeId(0), env };
    assert!(w.net.invariant(s, &t).is_err());
}

#[test]
fn corrupt_injection_is_delivered_and_ignored_if_invalid() {
    let (registry, signers) = KeyRegistry::generate(4, 3);
    let env = seal(&registry, &signers[3], &Vote { round: 0 }, |_| Vec::new()).unwrap();
    let mut bad = env.clone();
    bad.payload = WireMessage::encode(&Vote { round: 1 });
    let policy = AdversaryPolicy {
        corrupt: [NodeId(3)].into(),
        inject: vec![(10, NodeId(0), env), (10, NodeId(1), bad)],
        ..Default::default()
    };
    let (mut w, _) = build(4, policy, SimConfig::default(), false);
    w.run().unwrap();
    assert_eq!(conforms(&w.spec(), &w.prefix), Ok(()));
    assert!(w.state.node(NodeId(0)).unwrap().heard.contains(&NodeId(3)));
    assert!(w.state.node(NodeId(1)).unwrap().heard.is_empty());
}

#[test]
fn call_beyond_horizon_is_rejected() {
    let (registry, signers) = KeyRegistry::generate(4, 3);
    let calls = vec![(5000, NodeId(0), VoteCall::Start)];
    let r =
        World::new(VoteProgram::new(4, 1), &signers, registry, AdversaryPolicy::default(), SimConfig::default(), calls);
    assert!(matches!(r, Err(SimError::HorizonTooSmall { .. })));
}

#[test]
fn prefixes_of_a_run_conform() {
    let w = run(4, SimConfig { stabilize_at: 300, seed: 2, ..Default::default() });
    let spec = w.spec();
    for len in [1, 5, w.prefix.len() / 2, w.prefix.len()] {
        assert_eq!(conforms(&spec, &w.prefix.truncated(len)), Ok(()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn every_run_conforms(seed in any::<u64>(), gst in 0u64..1500, n in 1u64..6) {
        let cfg = SimConfig { stabilize_at: gst, horizon: 2000, seed, ..Default::default() };
        let w = run(n, cfg);
        prop_assert_eq!(conforms(&w.spec(), &w.prefix), Ok(()));
        prop_assert!(fairness_audit(&w.prefix, &w.state, 50).is_ok());
        prop_assert_eq!(w.state.outputs.len() as u64, n);
    }
}
