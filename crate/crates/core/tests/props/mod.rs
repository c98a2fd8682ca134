//! Randomized property suites, run with an explicit case count.

use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};

use bft_core::authn::{Envelope, KeyRegistry, SigRef, Signature, WireMessage, WireTag};
use bft_core::compose::{zero_noop_check, Composition, SubInput, Zeroed};
use bft_core::harness::suites::Trial;
use bft_core::harness::{run, Scenario};
use bft_core::pbft::node::{NodeComp, NodeSub, NodeTag};
use bft_core::pbft::view::{Phase, PhaseState, ViewComp};
use bft_core::pbft::{digest_of, NewView, PbftCall, PbftConfig, PbftMessage, PbftProgram, PreparedCert, ViewChange};
use bft_core::runtime::{Event, NodeProgram};
use bft_core::simnet::DropRule;
use bft_core::sm::write_ndjson;
use bft_core::vote::VoteProgram;
use bft_core::{Decision, NodeId, Value};

fn decision() -> impl Strategy<Value = Decision> {
    prop_oneof![
        Just(Decision::Null),
        proptest::collection::vec(any::<u8>(), 0..8).prop_map(|b| Decision::Value(Value(b))),
    ]
}

fn cert() -> impl Strategy<Value = PreparedCert> {
    (0u64..6, decision(), proptest::collection::vec(0u64..7, 0..5)).prop_map(|(view, value, ids)| PreparedCert {
        view,
        digest: digest_of(&value),
        value,
        prepares: ids.into_iter().map(|i| (NodeId(i), SigRef::unbound())).collect(),
    })
}

fn view_change() -> impl Strategy<Value = ViewChange> {
    (0u64..6, proptest::option::of(cert()), decision()).prop_map(|(view, prepared, vote)| ViewChange {
        view,
        prepared,
        vote,
    })
}

pub fn message() -> impl Strategy<Value = PbftMessage> {
    let nv = (1u64..7, proptest::collection::vec((0u64..7, view_change()), 0..4)).prop_map(|(view, vcs)| NewView {
        view,
        view_changes: vcs.into_iter().map(|(i, vc)| (NodeId(i), vc, SigRef::unbound())).collect(),
    });
    prop_oneof![
        proptest::collection::vec(any::<u8>(), 0..16).prop_map(|b| PbftMessage::Request(Value(b))),
        (0u64..6, decision(), proptest::option::of(nv)).prop_map(|(view, value, new_view)| PbftMessage::PrePrepare {
            view,
            value,
            new_view
        }),
        (0u64..6, decision()).prop_map(|(view, d)| PbftMessage::Prepare { view, digest: digest_of(&d) }),
        (0u64..6, decision()).prop_map(|(view, d)| PbftMessage::Commit { view, digest: digest_of(&d) }),
        view_change().prop_map(PbftMessage::ViewChange),
        decision().prop_map(PbftMessage::Reply),
    ]
}

fn event() -> impl Strategy<Value = Event<PbftMessage, PbftCall>> {
    prop_oneof![
        1 => (0u64..20_000).prop_map(Event::Timeout),
        1 => proptest::collection::vec(any::<u8>(), 0..4).prop_map(|b| Event::Call(PbftCall::Request(Value(b)))),
        3 => (0u64..4, message()).prop_map(|(from, msg)| Event::Message { from: NodeId(from), msg, sig: SigRef::unbound() }),
    ]
}

fn suite<S: Strategy>(
    name: &'static str,
    cases: u32,
    strategy: S,
    test: impl Fn(S::Value) -> Result<(), TestCaseError>,
) -> Result<(&'static str, u32), String> {
    let mut runner = TestRunner::new(Config { cases, failure_persistence: None, ..Config::default() });
    runner.run(&strategy, test).map_err(|e| format!("{name}: {e}"))?;
    Ok((name, cases))
}

pub fn encoding(cases: u32) -> Result<(&'static str, u32), String> {
    suite("encoding round trip", cases, message(), |m| {
        let bytes = m.encode();
        let back = PbftMessage::decode(&bytes).map_err(|e| TestCaseError::fail(e.to_string()))?;
        prop_assert_eq!(&back, &m);
        prop_assert_eq!(back.encode(), bytes);
        let env =
            Envelope { signer: NodeId(1), payload: m.encode(), root_sig: Signature([0; 64]), staples: Vec::new() };
        prop_assert_eq!(Envelope::from_bytes(&env.to_bytes()).ok(), Some(env));
        Ok(())
    })
}

pub fn zero_state_timeouts(cases: u32) -> Result<(&'static str, u32), String> {
    let phases =
        prop_oneof![Just(Phase::PrePrepare), Just(Phase::Prepare), Just(Phase::Commit), Just(Phase::ViewChange)];
    let strategy = (phases, 0u64..1000, 0u64..4, any::<u64>(), any::<u64>(), 0u64..1000, any::<bool>());
    suite("zero-state timeout no-op", cases, strategy, |(phase, view, id, now, clock, tag_view, client)| {
        let cfg = PbftConfig::new(1);
        let id = NodeId(id);
        let comp = ViewComp { cfg: &cfg, id, view, clock, decided: false };
        let verdict = zero_noop_check(
            |s: &PhaseState, t| comp.run(&phase, s, SubInput::Timeout(t)),
            &PhaseState::zero(&phase),
            &[now],
        );
        prop_assert!(verdict.is_ok(), "{:?} view {}: {:?}", phase, view, verdict);
        let node = NodeComp { cfg: &cfg, id, clock, decided: false };
        let tag = if client { NodeTag::Client } else { NodeTag::View(tag_view) };
        let verdict =
            zero_noop_check(|s: &NodeSub, t| node.run(&tag, s, SubInput::Timeout(t)), &NodeSub::zero(&tag), &[now]);
        prop_assert!(verdict.is_ok(), "{:?}: {:?}", tag, verdict);
        let vote = VoteProgram::new(4, 1);
        let zero = vote.zero(id);
        let (after, sent) = vote.run(id, &zero, &Event::Timeout(now));
        prop_assert!(after == zero && sent.is_empty());
        let prog = PbftProgram::new(cfg.clone());
        let zero = prog.zero(id);
        let (after, sent) = prog.run(id, &zero, &Event::Timeout(now));
        prop_assert!(after.subs == zero.subs && sent.is_empty());
        Ok(())
    })
}

pub fn canonical_maps(cases: u32) -> Result<(&'static str, u32), String> {
    let strategy = (0u64..4, proptest::collection::vec(event(), 0..24));
    suite("default-map canonical form", cases, strategy, |(id, events)| {
        let prog = PbftProgram::new(PbftConfig::new(1));
        let id = NodeId(id);
        let mut st = prog.zero(id);
        for ev in &events {
            st = prog.run(id, &st, ev).0;
            prop_assert!(st.subs.is_canonical(), "node map after {:?}", ev);
            for (v, vs) in st.views() {
                prop_assert!(vs.is_canonical(), "view {} map after {:?}", v, ev);
            }
        }
        Ok(())
    })
}

pub fn signatures(cases: u32) -> Result<(&'static str, u32), String> {
    let (reg, signers) = KeyRegistry::generate(4, 11);
    let strategy = (message(), 0usize..4, any::<u8>(), any::<u64>());
    suite("sign/verify and cross-tag rejection", cases, strategy, |(m, who, kind, tag)| {
        let protocol = <PbftMessage as WireMessage>::PROTOCOL;
        let payload = m.encode();
        let t = m.wire_tag();
        let sig = signers[who].sign(&protocol, t, &payload);
        prop_assert!(reg.verify(signers[who].id(), &protocol, t, &payload, &sig));
        let other = WireTag { kind, tag };
        if other != t {
            prop_assert!(!reg.verify(signers[who].id(), &protocol, other, &payload, &sig));
        }
        prop_assert!(!reg.verify(signers[(who + 1) % 4].id(), &protocol, t, &payload, &sig));
        Ok(())
    })
}

fn trace_bytes(sc: &Scenario) -> Result<(Vec<u8>, String), TestCaseError> {
    let r = run(sc).map_err(|e| TestCaseError::fail(e.to_string()))?;
    let mut out = Vec::new();
    write_ndjson(&r.world.summary_prefix(), &mut out).map_err(|e| TestCaseError::fail(e.to_string()))?;
    let report = serde_json::to_string(&Trial::from_run(&r)).map_err(|e| TestCaseError::fail(e.to_string()))?;
    Ok((out, report))
}

pub fn replay(cases: u32) -> Result<(&'static str, u32), String> {
    let kinds = proptest::collection::vec(2u8..6, 0..3);
    let strategy = (any::<u64>(), prop_oneof![Just(0u64), 1u64..1500], kinds, 0u64..3);
    suite("deterministic replay", cases, strategy, |(seed, gst, kinds, view)| {
        let mut sc = Scenario::new("replay", 1);
        sc.sim.seed = seed;
        sc.sim.stabilize_at = gst;
        sc.sim.horizon = gst + 2500;
        if !kinds.is_empty() {
            sc.drop_rules = vec![DropRule::new(&kinds, bft_core::simnet::Fate::Drop).tags(view, view)];
        }
        let (a, ra) = trace_bytes(&sc)?;
        let (b, rb) = trace_bytes(&sc)?;
        prop_assert!(a == b, "traces differ for seed {}", seed);
        prop_assert_eq!(ra, rb);
        Ok(())
    })
}

pub fn run_all(cases: u32) -> Result<Vec<(&'static str, u32)>, String> {
    Ok(vec![encoding(cases)?, zero_state_timeouts(cases)?, canonical_maps(cases)?, signatures(cases)?, replay(cases)?])
}
