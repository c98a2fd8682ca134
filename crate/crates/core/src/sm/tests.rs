use std::collections::BTreeSet;
use std::sync::Arc;

use proptest::prelude::*;
use serde::{Deserialize, Serialize};

use super::*;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
enum Step {
    Inc,
    Reset,
}

fn counter() -> SpecMachine<u64, Step, ()> {
    SpecMachine::new(
        |s: &u64| *s == 0,
        |s: &u64, t: &Step| match t {
            Step::Inc => Some(s + 1),
            Step::Reset => None,
        },
    )
}

fn counting(len: u64) -> ExecutionPrefix<u64, Step> {
    ExecutionPrefix::new((0..len).map(|i| (i, Step::Inc)).collect())
}

#[test]
fn counter_prefix_conforms() {
    assert_eq!(conforms(&counter(), &counting(3)), Ok(()));
}

#[test]
fn bad_initial_state_is_index_zero() {
    let p = ExecutionPrefix::new(vec![(7u64, Step::Inc)]);
    let v = conforms(&counter(), &p).unwrap_err();
    assert_eq!((v.index, v.clause), (0, Clause::Init));
}

#[test]
fn successor_mismatch_and_disabled_transition() {
    let p = ExecutionPrefix::new(vec![(0u64, Step::Inc), (2, Step::Inc)]);
    assert_eq!(conforms(&counter(), &p).unwrap_err().clause, Clause::Next);
    let p = ExecutionPrefix::new(vec![(0u64, Step::Inc), (1, Step::Reset)]);
    let v = conforms(&counter(), &p).unwrap_err();
    assert_eq!((v.index, v.clause), (1, Clause::Next));
}

#[test]
fn invariant_reports_first_failure() {
    let spec = counter().with_invariant(|s, _| *s < 2);
    let v = conforms(&spec, &counting(5)).unwrap_err();
    assert_eq!((v.index, v.clause), (2, Clause::Invariant));
}

#[derive(Clone, Debug, PartialEq)]
enum Net {
    Deliver(u8),
    Tick,
}

fn deliver_spec() -> WeakSpec<BTreeSet<u8>, Net, u8> {
    WeakSpec::new(
        |_| true,
        |s: &BTreeSet<u8>, t: &Net| match t {
            Net::Deliver(m) if s.contains(m) => {
                let mut s = s.clone();
                s.remove(m);
                Some(s)
            }
            Net::Deliver(_) => None,
            Net::Tick => Some(s.clone()),
        },
        |s: &BTreeSet<u8>| s.iter().copied().collect(),
        |m: &u8, s: &BTreeSet<u8>, t: &Net| s.contains(m) && *t == Net::Deliver(*m),
    )
}

fn enumerate_net() -> Enabledness<BTreeSet<u8>, Net, u8> {
    Enabledness::Enumerate(Arc::new(|s: &BTreeSet<u8>| {
        let mut all: Vec<Net> = s.iter().map(|m| Net::Deliver(*m)).collect();
        all.push(Net::Tick);
        all
    }))
}

#[test]
fn terminalize_message_delivery() {
    let spec = terminalize(deliver_spec(), enumerate_net());
    let s: BTreeSet<u8> = [1].into_iter().collect();
    assert!((spec.fair)(&1, &s, &Net::Deliver(1)));
    assert!(!(spec.fair)(&1, &s, &Net::Tick));
    // Message 2 was never sent: the task is disabled and vacuously fair.
    assert!((spec.fair)(&2, &s, &Net::Tick));
    assert!((spec.invar)(&s, &Net::Tick));
}

#[test]
fn disabledness_predicate_agrees_with_enumerator() {
    let by_enum = terminalize(deliver_spec(), enumerate_net());
    let by_pred =
        terminalize(deliver_spec(), Enabledness::Disabled(Arc::new(|m: &u8, s: &BTreeSet<u8>| !s.contains(m))));
    let mut runner = proptest::test_runner::TestRunner::default();
    let strat = (
        proptest::collection::btree_set(0u8..6, 0..5),
        0u8..6,
        prop_oneof![(0u8..6).prop_map(Net::Deliver), Just(Net::Tick)],
    );
    runner
        .run(&strat, |(s, m, t)| {
            prop_assert_eq!((by_enum.fair)(&m, &s, &t), (by_pred.fair)(&m, &s, &t));
            Ok(())
        })
        .unwrap();
}

#[test]
fn identity_refinement_of_conforming_prefix() {
    let r = RefinementFn::<u64, Step, u64, Step>::identity();
    assert_eq!(refine_check(&r, &counting(10), &counter()), Ok(Ok(())));
}

#[test]
fn identity_refinement_rejects_nonconforming_prefix() {
    let r = RefinementFn::<u64, Step, u64, Step>::identity();
    let p = ExecutionPrefix::new(vec![(0u64, Step::Inc), (5, Step::Inc)]);
    assert!(refine_check(&r, &p, &counter()).unwrap().is_err());
}

#[test]
fn trace_refinement_collapses_stutters() {
    // Concrete counter counts by one; abstract counter ticks on even values only.
    let halves =
        RefinementFn::new(|s: &u64, _: &Step| (s / 2, if s % 2 == 1 { vec![Step::Inc] } else { vec![] }), true);
    assert_eq!(refine_check(&halves, &counting(9), &counter()), Ok(Ok(())));
    let nothing = RefinementFn::new(|_: &u64, _: &Step| (0u64, Vec::<Step>::new()), true);
    assert_eq!(refine_check(&nothing, &counting(4), &counter()), Err(RefineError::StutterForever));
}

#[test]
fn strict_refinement_requires_one_step_each() {
    let halves =
        RefinementFn::new(|s: &u64, _: &Step| (s / 2, if s % 2 == 1 { vec![Step::Inc] } else { vec![] }), false);
    let v = refine_check(&halves, &counting(4), &counter()).unwrap().unwrap_err();
    assert_eq!((v.index, v.clause), (0, Clause::Refinement));
}

#[test]
fn ndjson_round_trip() {
    let p = counting(4);
    let mut buf = Vec::new();
    write_ndjson(&p, &mut buf).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert!(text.lines().next().unwrap().contains(r#""transition":{"kind":"Inc"}"#));
    let back: ExecutionPrefix<u64, Step> = read_ndjson(buf.as_slice()).unwrap();
    assert_eq!(back, p);
}

proptest! {
    #[test]
    fn conformance_is_prefix_closed(len in 1u64..40, cut in 1usize..40, bad in 0u64..60) {
        let mut p = counting(len);
        if let Some(step) = p.steps.get_mut(bad as usize) {
            step.0 += 1;
        }
        let full = conforms(&counter(), &p);
        let part = conforms(&counter(), &p.truncated(cut));
        if full.is_ok() {
            prop_assert!(part.is_ok());
        }
        prop_assert_eq!(full.clone(), conforms(&counter(), &p));
    }
}
