//! One line per acceptance criterion. Criteria run in sequence so that the
//! runtime bounds are measured without other tests competing for the CPU.

use std::collections::BTreeSet;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use bft_core::authn::KeyRegistry;
use bft_core::harness::suites::{
    common_case, failure_scenarios, run_regressions, scenario_bad_leaders, scenario_dropped_commits,
    scenario_wrong_votes,
};
use bft_core::harness::tcp::cluster::LoopbackOptions;
use bft_core::harness::tcp::run_loopback;
use bft_core::harness::{run, Run};
use bft_core::liveness::measure_check;
use bft_core::pbft::measures::net_variant;
use bft_core::pbft::spec::{abstraction, BroadcastTransition};
use bft_core::simnet::{AdversaryPolicy, SimConfig, World};
use bft_core::sm::refine_check;
use bft_core::vote::{done_measure, vote_spec, vote_variant, VoteCall, VoteProgram, VoteTask};
use bft_core::{Decision, Millis, NodeId};

mod props;

type Outcome = Result<String, String>;

fn check(cond: bool, why: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(why())
    }
}

/// Critical-path message count, written out from its closed form.
fn critical_path_oracle(f: u64) -> u64 {
    let q = 2 * f + 1;
    1 + 2 * q + 2 * q * q
}

/// Simulated time of each honest node's decision.
fn decision_times(r: &Run) -> Vec<Millis> {
    let steps = &r.world.prefix.steps;
    r.world.state.outputs.values().map(|(step, _)| steps[*step].1.at()).collect()
}

fn within(budget: Duration, start: Instant) -> Result<(), String> {
    let took = start.elapsed();
    check(took < budget, || format!("took {took:?}, budget {budget:?}"))
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut worst = Vec::new();
    for f in [1u32, 2] {
        let n = 3 * f + 1;
        let quorums: Vec<u32> = (0u32..1 << n).filter(|m| m.count_ones() == 2 * f + 1).collect();
        let min = quorums.iter().flat_map(|a| quorums.iter().map(move |b| (a & b).count_ones())).min().unwrap();
        check(min > f, || format!("f={f}: two quorums share only {min} nodes"))?;
        worst.push(format!("f={f} min overlap {min}"));
    }
    within(Duration::from_secs(1), start)?;
    Ok(worst.join(", "))
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut latest = 0;
    for f in 1..=3 {
        for seed in 0..10 {
            let r = run(&common_case(f, seed)).map_err(|e| e.to_string())?;
            let c = r.checks();
            check(c.all_ok(), || format!("f={f} seed {seed}: {:?}", c.failures()))?;
            check(r.terminate_view() == Some(0), || format!("f={f} seed {seed}: view {:?}", r.terminate_view()))?;
            let want = Decision::Value(r.scenario.value.clone());
            check(r.all_decided() && r.decisions() == BTreeSet::from([want]), || {
                format!("f={f} seed {seed}: decisions {:?}", r.decisions())
            })?;
            let times = decision_times(&r);
            let last = *times.iter().max().unwrap();
            check(last < 1000, || format!("f={f} seed {seed}: last decision at {last} ms"))?;
            latest = latest.max(last);
            let count = r.critical_path().map(|c| c.messages);
            check(count == Some(critical_path_oracle(f)), || {
                format!("f={f}: critical path {count:?}, expected {}", critical_path_oracle(f))
            })?;
        }
    }
    within(Duration::from_secs(10), start)?;
    Ok(format!("30 trials in view 0, last decision at {latest} ms, paths 25/61/113, {:?}", start.elapsed()))
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    // Tolerance above the nominal latency is 4 delta plus 500 ms.
    let band = |nominal: Millis, delta: Millis| nominal..=nominal + 4 * delta + 500;
    let cases = [
        (scenario_dropped_commits(2, 0), 1, Some(2000)),
        (scenario_wrong_votes(2, 0), 0, None),
        (scenario_bad_leaders(2, 0, 1, 4000), 2, Some(4000)),
        (scenario_bad_leaders(2, 0, 2, 8000), 3, Some(8000)),
    ];
    let mut seen = Vec::new();
    for (sc, view, nominal) in cases {
        let r = run(&sc).map_err(|e| e.to_string())?;
        let c = r.checks();
        check(c.all_ok(), || format!("{}: {:?}", sc.name, c.failures()))?;
        check(r.terminate_view() == Some(view), || {
            format!("{}: view {:?}, expected {view}", sc.name, r.terminate_view())
        })?;
        let want = Decision::Value(sc.value.clone());
        check(r.decisions() == BTreeSet::from([want]), || format!("{}: decided {:?}", sc.name, r.decisions()))?;
        let lat = r.client_latency().ok_or_else(|| format!("{}: client never finished", sc.name))?;
        if let Some(nominal) = nominal {
            let b = band(nominal, sc.sim.delta);
            check(b.contains(&lat), || format!("{}: latency {lat} ms outside {b:?}", sc.name))?;
        }
        seen.push(format!("{} v{view} {lat}ms", sc.name));
    }
    within(Duration::from_secs(10), start)?;
    Ok(seen.join(", "))
}

fn vote_world(n: u64, f: u64, corrupt: &[u64], cfg: SimConfig) -> World<VoteProgram> {
    let prog = VoteProgram::new(n, f);
    let (registry, signers) = KeyRegistry::generate(n, cfg.seed);
    let policy = AdversaryPolicy { corrupt: corrupt.iter().map(|c| NodeId(*c)).collect(), ..Default::default() };
    let calls = (0..n).map(|i| (0, NodeId(i), VoteCall::Start)).collect();
    let mut w = World::new(prog, &signers, registry, policy, cfg, calls).unwrap();
    w.run().unwrap();
    w
}

/// Recomputes the vote measure's first component from node states and
/// checks strict decrease at every step that does not finish the task.
fn vote_oracle(w: &World<VoteProgram>) -> Result<usize, String> {
    let spec = vote_spec(&w.net);
    let honest: BTreeSet<NodeId> = w.net.honest().collect();
    let steps = &w.prefix.steps;
    let mut compared = 0;
    for (i, (s, t)) in steps.iter().enumerate().take(steps.len().saturating_sub(1)) {
        for task in (spec.tasks)(s) {
            let VoteTask::Done(id) = task else { continue };
            let heard = &s.nodes[&id].heard;
            let pending = honest.iter().filter(|j| !heard.contains(j)).count() as u64;
            let before = done_measure(&w.net, &w.prefix, id, i);
            check(before[0] == pending, || format!("step {i}: measure {before:?}, {pending} pending"))?;
            if (spec.fair)(&task, s, t) {
                continue;
            }
            let after = done_measure(&w.net, &w.prefix, id, i + 1);
            check(after < before, || format!("step {i} task {task:?}: {before:?} -> {after:?}"))?;
            compared += 1;
        }
    }
    Ok(compared)
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let mut scenarios: Vec<_> = (1..=3).flat_map(|f| (0..10).map(move |s| common_case(f, s))).collect();
    scenarios.extend(failure_scenarios(2, 0));
    let mut steps = 0;
    for sc in &scenarios {
        let r = run(sc).map_err(|e| e.to_string())?;
        let spec = r.world.spec();
        measure_check(&r.world.prefix, &spec, &net_variant)
            .map_err(|e| format!("{}: {}", sc.name, e.to_violation()))?;
        r.checks().measures.map_err(|e| format!("{}: {e}", sc.name))?;
        steps += r.world.prefix.len();
    }
    let mut compared = 0;
    for seed in 0..40 {
        let gst = if seed % 2 == 0 { 0 } else { 100 + 37 * seed };
        let cfg =
            SimConfig { stabilize_at: gst, pre_gst_max_delay: 300, horizon: gst + 1500, seed, ..Default::default() };
        let corrupt: &[u64] = if seed % 3 == 0 { &[6] } else { &[] };
        let w = vote_world(7, 2, corrupt, cfg);
        measure_check(&w.prefix, &vote_spec(&w.net), &vote_variant(w.net.clone()))
            .map_err(|e| format!("vote seed {seed}: {}", e.to_violation()))?;
        compared += vote_oracle(&w).map_err(|e| format!("vote seed {seed}: {e}"))?;
    }
    check(compared > 0, || "no non-fair vote steps compared".into())?;
    within(Duration::from_secs(30), start)?;
    Ok(format!("{} prefixes, {steps} steps; vote measure decreased on {compared} non-fair steps", scenarios.len()))
}

fn criterion_5() -> Outcome {
    let verdicts = run_regressions().map_err(|e| e.to_string())?;
    check(verdicts.len() == 4, || format!("{} mutants", verdicts.len()))?;
    for v in &verdicts {
        check(v.detected, || format!("{:?} not detected: {}", v.mutation, v.detail))?;
        check(!v.false_positive, || format!("{:?} fires on the unmutated build: {}", v.detector, v.baseline_detail))?;
    }
    Ok(verdicts.iter().map(|v| format!("{:?} by {:?}", v.mutation, v.detector)).collect::<Vec<_>>().join(", "))
}

fn criterion_6() -> Outcome {
    let suites = props::run_all(1000)?;
    Ok(suites.iter().map(|(name, n)| format!("{name} x{n}")).collect::<Vec<_>>().join(", "))
}

fn criterion_7() -> Outcome {
    let mut scenarios: Vec<_> = (1..=3).flat_map(|f| (0..10).map(move |s| common_case(f, s))).collect();
    scenarios.extend(failure_scenarios(2, 0));
    for sc in &scenarios {
        let r = run(sc).map_err(|e| e.to_string())?;
        r.checks().refinement.map_err(|e| format!("{}: {e}", sc.name))?;
        let map = abstraction(r.cfg.client);
        let abs = refine_check(&map, &r.world.prefix, &bft_core::pbft::spec::broadcast_spec(r.context()));
        check(matches!(abs, Ok(Ok(()))), || format!("{}: {abs:?}", sc.name))?;
        let image: Vec<BroadcastTransition> =
            r.world.prefix.steps.iter().flat_map(|(s, t)| map.apply(s, t).1).collect();
        let sets = image.iter().filter(|a| matches!(a, BroadcastTransition::Set(_))).count();
        check(sets == 1, || format!("{}: {sets} register sets", sc.name))?;
        let terminated: Vec<NodeId> = image
            .iter()
            .filter_map(|a| match a {
                BroadcastTransition::Terminate(id, _) => Some(*id),
                _ => None,
            })
            .collect();
        let honest: Vec<NodeId> = r.world.net.honest().collect();
        let mut sorted = terminated.clone();
        sorted.sort();
        check(sorted == honest, || format!("{}: terminated {terminated:?}, honest {honest:?}", sc.name))?;
    }
    Ok(format!("{} prefixes refine; one Set and one Terminate per honest node in each", scenarios.len()))
}

fn criterion_9() -> Outcome {
    let start = Instant::now();
    let r = run_loopback(&LoopbackOptions::new(1)).map_err(|e| e.to_string())?;
    let c = r.checks();
    check(c.all_ok(), || format!("{:?}", c.failures()))?;
    check(r.terminate_view() == Some(0), || format!("view {:?}", r.terminate_view()))?;
    let lat = r.latency_ms().ok_or("client never finished")?;
    check(lat < r.cfg.view_timeout(0), || format!("wall latency {lat} ms"))?;
    within(Duration::from_secs(10), start)?;
    Ok(format!("view 0, wall latency {lat} ms, {} recorded steps", r.prefix.len()))
}

/// Written to the stdout handle directly so the lines show without
/// `--nocapture`.
fn report(line: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
}

#[test]
fn acceptance() {
    let criteria: [(u32, fn() -> Outcome); 8] = [
        (1, criterion_1),
        (2, criterion_2),
        (3, criterion_3),
        (4, criterion_4),
        (5, criterion_5),
        (6, criterion_6),
        (7, criterion_7),
        (9, criterion_9),
    ];
    let mut failed = Vec::new();
    report("");
    for (n, f) in criteria {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or(p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default())
        });
        match outcome {
            Ok(detail) => report(&format!("criterion {n}: PASS ({detail})")),
            Err(why) => {
                report(&format!("criterion {n}: FAIL ({why})"));
                failed.push(n);
            }
        }
        if n == 7 {
            report(
                "criterion 8: NOT REPRODUCIBLE (absolute wall-clock latencies and proof artifact sizes; covered by criteria 6 and 9 instead)",
            );
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
