//! Scenario suites: the common case, the failure scenarios and one
//! regression scenario per known bug class.

use serde::{Deserialize, Serialize};

use super::{run, BehaviorSpec, CheckReport, HarnessError, Run, Scenario};
use crate::authn::TransmitError;
use crate::pbft::message::{KIND_COMMIT, KIND_PREPARE, KIND_PRE_PREPARE, KIND_VIEW_CHANGE};
use crate::pbft::Mutation;
use crate::simnet::{DropRule, Fate, SimError};
use crate::{Millis, NodeId};

const VIEW_KINDS: [u8; 4] = [KIND_PRE_PREPARE, KIND_PREPARE, KIND_COMMIT, KIND_VIEW_CHANGE];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trial {
    pub scenario: String,
    pub f: u64,
    pub seed: u64,
    pub terminate_view: Option<u64>,
    pub client_latency_ms: Option<Millis>,
    pub message_count_critical_path: Option<u64>,
    /// Whether every honest node decided the client's value.
    pub client_value: bool,
    pub checks: CheckReport,
}

impl Trial {
    pub fn from_run(r: &Run) -> Self {
        let want = crate::Decision::Value(r.scenario.value.clone());
        Trial {
            scenario: r.scenario.name.clone(),
            f: r.scenario.f,
            seed: r.scenario.sim.seed,
            terminate_view: r.terminate_view(),
            client_latency_ms: r.client_latency(),
            message_count_critical_path: r.critical_path().map(|c| c.messages),
            client_value: r.all_decided() && r.decisions().iter().all(|d| *d == want),
            checks: r.checks(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub trials: Vec<Trial>,
    pub mean_ms: Option<f64>,
    pub min_ms: Option<Millis>,
    pub max_ms: Option<Millis>,
}

impl LatencyReport {
    pub fn new(trials: Vec<Trial>) -> Self {
        let lat: Vec<Millis> = trials.iter().filter_map(|t| t.client_latency_ms).collect();
        LatencyReport {
            mean_ms: (!lat.is_empty()).then(|| lat.iter().sum::<Millis>() as f64 / lat.len() as f64),
            min_ms: lat.iter().min().copied(),
            max_ms: lat.iter().max().copied(),
            trials,
        }
    }

    pub fn checks_ok(&self) -> bool {
        self.trials.iter().all(|t| t.checks.all_ok())
    }

    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("scenario,f,seed,terminate_view,client_latency_ms,message_count_critical_path,checks_ok\n");
        let opt = |v: Option<u64>| v.map_or(String::new(), |v| v.to_string());
        for t in &self.trials {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                t.scenario,
                t.f,
                t.seed,
                opt(t.terminate_view),
                opt(t.client_latency_ms),
                opt(t.message_count_critical_path),
                t.checks.all_ok()
            ));
        }
        out
    }
}

pub fn common_case(f: u64, seed: u64) -> Scenario {
    let mut sc = Scenario::new(&format!("common-f{f}"), f);
    sc.sim.seed = seed;
    sc
}

/// Trial `k` runs with seed `seed + k`.
pub fn run_common_case(f: u64, trials: u64, seed: u64) -> Result<LatencyReport, HarnessError> {
    let runs = (0..trials).map(|k| run(&common_case(f, seed.wrapping_add(k))).map(|r| Trial::from_run(&r)));
    Ok(LatencyReport::new(runs.collect::<Result<_, _>>()?))
}

fn drop_view0_commits() -> DropRule {
    DropRule::new(&[KIND_COMMIT], Fate::Drop).tags(0, 0)
}

/// Hold every view message from `view` on until stabilization.
fn hold_from(view: u64) -> DropRule {
    DropRule::new(&VIEW_KINDS, Fate::Hold).tags(view, u64::MAX)
}

fn unstable(sc: &mut Scenario, gst: Millis) {
    sc.sim.stabilize_at = gst;
    sc.sim.pre_gst_max_delay = sc.sim.delta;
    sc.sim.horizon = gst + 3000;
}

/// View-0 commits are lost and view 1 is cut off until 2 s.
pub fn scenario_dropped_commits(f: u64, seed: u64) -> Scenario {
    let mut sc = Scenario::new("dropped-commits", f);
    sc.sim.seed = seed;
    sc.drop_rules = vec![drop_view0_commits(), hold_from(1)];
    unstable(&mut sc, 2000);
    sc
}

/// `f` corrupt non-leaders vote for a different value.
pub fn scenario_wrong_votes(f: u64, seed: u64) -> Scenario {
    let mut sc = Scenario::new("wrong-votes", f);
    sc.sim.seed = seed;
    let n = 3 * f + 1;
    sc.corrupt = (n - f..n).map(NodeId).collect();
    sc.behavior = Some(BehaviorSpec::WrongValue { value: b"forged".to_vec() });
    sc
}

/// Leaders of views 1..=`bad` are corrupt; view-0 commits are lost and the
/// first honest leader's view is cut off until `gst`.
pub fn scenario_bad_leaders(f: u64, seed: u64, bad: u64, gst: Millis) -> Scenario {
    let mut sc = Scenario::new(&format!("bad-leaders-{bad}"), f);
    sc.sim.seed = seed;
    sc.corrupt = (1..=bad).map(NodeId).collect();
    sc.behavior = Some(BehaviorSpec::WrongValue { value: b"forged".to_vec() });
    sc.drop_rules = vec![drop_view0_commits(), hold_from(bad + 1)];
    unstable(&mut sc, gst);
    sc
}

pub fn failure_scenarios(f: u64, seed: u64) -> Vec<Scenario> {
    vec![
        scenario_dropped_commits(f, seed),
        scenario_wrong_votes(f, seed),
        scenario_bad_leaders(f, seed, 1, 4000),
        scenario_bad_leaders(f, seed, 2, 8000),
    ]
}

pub fn run_failure_suite(f: u64, seed: u64) -> Result<LatencyReport, HarnessError> {
    let runs = failure_scenarios(f, seed).into_iter().map(|sc| run(&sc).map(|r| Trial::from_run(&r)));
    Ok(LatencyReport::new(runs.collect::<Result<_, _>>()?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Detector {
    StapleAtTransmit,
    CertificateThreshold,
    TerminateMeasure,
    SingleViewChange,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegressionVerdict {
    pub mutation: Mutation,
    pub detector: Detector,
    /// The mutant trips the detector.
    pub detected: bool,
    pub detail: String,
    /// The unmutated build trips the detector.
    pub false_positive: bool,
    pub baseline_detail: String,
}

impl RegressionVerdict {
    pub fn ok(&self) -> bool {
        self.detected && !self.false_positive
    }
}

pub fn regression_scenario(m: Mutation) -> (Scenario, Detector) {
    let mut sc = Scenario::new(&format!("regression-{m:?}"), 1);
    match m {
        Mutation::WrongViewStaple => {
            sc.drop_rules = vec![drop_view0_commits()];
            unstable(&mut sc, 2000);
            (sc, Detector::StapleAtTransmit)
        }
        Mutation::UnderCountedCertificate => {
            sc.corrupt = [NodeId(1)].into();
            sc.behavior = Some(BehaviorSpec::RepeatedCertificate { at: 1 });
            (sc, Detector::CertificateThreshold)
        }
        Mutation::EarlyTimer => {
            sc.drop_rules = vec![drop_view0_commits(), DropRule::new(&[KIND_VIEW_CHANGE], Fate::Hold)];
            unstable(&mut sc, 5000);
            (sc, Detector::TerminateMeasure)
        }
        Mutation::DualViewChange | Mutation::ZeroStateTimer => {
            sc.drop_rules = vec![
                DropRule::new(&[KIND_PREPARE], Fate::Drop).tags(0, 0).to(&[NodeId(2), NodeId(3)]),
                drop_view0_commits(),
            ];
            unstable(&mut sc, 2000);
            (sc, Detector::SingleViewChange)
        }
    }
}

/// `Ok(detail)` if the detector fired.
fn detect(sc: &Scenario, d: Detector) -> Result<Result<String, String>, HarnessError> {
    let r = match run(sc) {
        Err(HarnessError::Sim(SimError::Transmit {
            node,
            at,
            err: err @ TransmitError::StapleInvalidAtTransmit { .. },
        })) if d == Detector::StapleAtTransmit => {
            return Ok(Ok(format!("node {} at {at} ms: {err}", node.0)));
        }
        r => r?,
    };
    let checks = r.checks();
    let verdict = match d {
        Detector::StapleAtTransmit => Err("every transmission validated".to_string()),
        Detector::CertificateThreshold => checks.certificates.err().ok_or("certificates above threshold".into()),
        Detector::TerminateMeasure => match checks.measures {
            Err(e) if e.contains("TerminateF") => Ok(e),
            Err(e) => Err(format!("measure failure on another task: {e}")),
            Ok(()) => Err("measures decrease".into()),
        },
        Detector::SingleViewChange => checks.single_view_change.err().ok_or("one view change per view".into()),
    };
    Ok(verdict)
}

pub const REGRESSIONS: [Mutation; 4] =
    [Mutation::WrongViewStaple, Mutation::UnderCountedCertificate, Mutation::EarlyTimer, Mutation::DualViewChange];

pub fn run_regression(m: Mutation) -> Result<RegressionVerdict, HarnessError> {
    let (sc, detector) = regression_scenario(m);
    let mutant = Scenario { mutation: Some(m), ..sc.clone() };
    let found = detect(&mutant, detector)?;
    let baseline = detect(&sc, detector)?;
    Ok(RegressionVerdict {
        mutation: m,
        detector,
        detected: found.is_ok(),
        detail: found.unwrap_or_else(|e| e),
        false_positive: baseline.is_ok(),
        baseline_detail: baseline.unwrap_or_else(|e| e),
    })
}

pub fn run_regressions() -> Result<Vec<RegressionVerdict>, HarnessError> {
    REGRESSIONS.iter().map(|m| run_regression(*m)).collect()
}
