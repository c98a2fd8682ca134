//! Scenario runner: builds a simulated PBFT cluster from a JSON description,
//! runs it, and applies every checker to the recorded execution.

pub mod suites;
pub mod tcp;

use std::collections::BTreeSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::authn::{Envelope, KeyRegistry};
use crate::liveness::refinement_measure_check;
use crate::pbft::byzantine::{RepeatedCertificate, WrongValue};
use crate::pbft::checks::{
    agreement, certificate_threshold, client_latency, critical_path, single_view_change, CriticalPath,
};
use crate::pbft::measures::{broadcast_variant, net_variant, target_view, PbftPrefix, TargetView};
use crate::pbft::spec::{abstraction, broadcast_spec, BroadcastContext, PbftNetState};
use crate::pbft::{Mutation, PbftCall, PbftConfig, PbftMessage, PbftProgram};
use crate::simnet::{
    fairness_audit, AdversaryPolicy, Behavior, DropRule, Network, SentRecord, SimConfig, SimError, World,
};
use crate::sm::{conforms, refine_check};
use crate::{Decision, Millis, NodeId, Value};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BehaviorSpec {
    /// Corrupt nodes vote for `value`.
    WrongValue {
        #[serde(with = "hex::serde")]
        value: Vec<u8>,
    },
    /// The view-1 leader proposes NULL on its own repeated view change.
    RepeatedCertificate { at: Millis },
}

/// A raw envelope delivered to `to` at `at_ms`; it must carry a corrupt
/// signer's signature or replay an honest one.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InjectSpec {
    pub at_ms: Millis,
    pub to: NodeId,
    #[serde(with = "hex::serde")]
    pub envelope: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub f: u64,
    #[serde(flatten)]
    pub sim: SimConfig,
    #[serde(default = "default_base")]
    pub view_timeout_base_ms: Millis,
    #[serde(default)]
    pub corrupt: BTreeSet<NodeId>,
    #[serde(default)]
    pub drop_rules: Vec<DropRule>,
    #[serde(default)]
    pub inject: Vec<InjectSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub behavior: Option<BehaviorSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mutation: Option<Mutation>,
    #[serde(default)]
    pub request_at: Millis,
    pub value: Value,
}

fn default_base() -> Millis {
    1000
}

impl Scenario {
    pub fn new(name: &str, f: u64) -> Self {
        Scenario {
            name: name.into(),
            f,
            sim: SimConfig::default(),
            view_timeout_base_ms: default_base(),
            corrupt: BTreeSet::new(),
            drop_rules: Vec::new(),
            inject: Vec::new(),
            behavior: None,
            mutation: None,
            request_at: 0,
            value: Value::new(b"client-request".to_vec()),
        }
    }

    pub fn pbft_config(&self) -> PbftConfig {
        PbftConfig { view_timeout_base: self.view_timeout_base_ms, mutation: self.mutation, ..PbftConfig::new(self.f) }
    }
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("simulation failed: {0}")]
    Sim(#[from] SimError),
    #[error("scenario: {0}")]
    Scenario(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Serializes a verdict as `"ok"` or `"failed: <reason>"`.
mod verdict {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Result<(), String>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Ok(()) => s.serialize_str("ok"),
            Err(e) => s.serialize_str(&format!("failed: {e}")),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Result<(), String>, D::Error> {
        let text = String::deserialize(d)?;
        match text.as_str() {
            "ok" => Ok(Ok(())),
            t => Ok(Err(t.strip_prefix("failed: ").unwrap_or(t).to_string())),
        }
    }
}

/// Verdict of each checker; `Err` carries the reason.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckReport {
    #[serde(with = "verdict")]
    pub conforms: Result<(), String>,
    #[serde(with = "verdict")]
    pub refinement: Result<(), String>,
    #[serde(with = "verdict")]
    pub measures: Result<(), String>,
    #[serde(with = "verdict")]
    pub fairness: Result<(), String>,
    #[serde(with = "verdict")]
    pub agreement: Result<(), String>,
    #[serde(with = "verdict")]
    pub certificates: Result<(), String>,
    #[serde(with = "verdict")]
    pub single_view_change: Result<(), String>,
}

impl CheckReport {
    pub fn all_ok(&self) -> bool {
        self.failures().is_empty()
    }

    pub fn failures(&self) -> Vec<(&'static str, &str)> {
        [
            ("conforms", &self.conforms),
            ("refinement", &self.refinement),
            ("measures", &self.measures),
            ("fairness", &self.fairness),
            ("agreement", &self.agreement),
            ("certificates", &self.certificates),
            ("single_view_change", &self.single_view_change),
        ]
        .into_iter()
        .filter_map(|(name, r)| r.as_ref().err().map(|e| (name, e.as_str())))
        .collect()
    }
}

pub struct Run {
    pub scenario: Scenario,
    pub cfg: PbftConfig,
    pub world: World<PbftProgram>,
    pub target: TargetView,
}

impl Run {
    /// View the first deciding node committed in.
    pub fn terminate_view(&self) -> Option<u64> {
        let s = &self.world.state;
        s.outputs
            .iter()
            .min_by_key(|(_, (step, _))| *step)
            .and_then(|(id, _)| s.node(*id))
            .and_then(|st| st.decided())
            .map(|(v, _)| v)
    }

    pub fn decisions(&self) -> BTreeSet<Decision> {
        self.world.state.outputs.values().map(|(_, d)| d.clone()).collect()
    }

    /// Whether every honest node decided.
    pub fn all_decided(&self) -> bool {
        self.world.net.honest().all(|id| self.world.state.outputs.contains_key(&id))
    }

    pub fn client_latency(&self) -> Option<Millis> {
        client_latency(&self.cfg, &self.world.prefix, &self.world.state)
    }

    pub fn critical_path(&self) -> Option<CriticalPath> {
        critical_path(&self.cfg, &self.world.prefix, &self.world.state)
    }

    pub fn context(&self) -> BroadcastContext {
        BroadcastContext::new(&self.cfg, &self.scenario.corrupt)
    }

    pub fn checks(&self) -> CheckReport {
        let w = &self.world;
        check_execution(&Execution {
            net: &w.net,
            cfg: &self.cfg,
            corrupt: &self.scenario.corrupt,
            prefix: &w.prefix,
            last: &w.state,
            sent_log: &w.sent_log,
            target: &self.target,
        })
    }
}

/// A recorded PBFT execution, from the simulator or from a TCP cluster.
pub struct Execution<'a> {
    pub net: &'a Arc<Network<PbftProgram>>,
    pub cfg: &'a PbftConfig,
    pub corrupt: &'a BTreeSet<NodeId>,
    pub prefix: &'a PbftPrefix,
    pub last: &'a PbftNetState,
    pub sent_log: &'a [SentRecord<PbftMessage>],
    pub target: &'a TargetView,
}

pub fn check_execution(e: &Execution<'_>) -> CheckReport {
    let spec = e.net.spec();
    let ctx = BroadcastContext::new(e.cfg, e.corrupt);
    let honest = ctx.honest.clone();
    let abs = broadcast_spec(ctx);
    let r = abstraction(e.cfg.client);
    let refinement = match refine_check(&r, e.prefix, &abs) {
        Ok(Ok(())) => Ok(()),
        Ok(Err(v)) => Err(v.to_string()),
        Err(err) => Err(err.to_string()),
    };
    let measures =
        refinement_measure_check(e.prefix, &r, &spec, &net_variant, &abs, &broadcast_variant(e.target.clone(), honest))
            .map(|_| ())
            .map_err(|f| f.to_violation().to_string());
    let audit = fairness_audit(e.prefix, e.last, e.net.delta);
    CheckReport {
        conforms: conforms(&spec, e.prefix).map_err(|v| v.to_string()),
        refinement,
        measures,
        fairness: if audit.is_ok() { Ok(()) } else { Err(audit.violations.join("; ")) },
        agreement: agreement(e.last),
        certificates: certificate_threshold(e.cfg, e.last),
        single_view_change: single_view_change(e.sent_log),
    }
}

fn behavior(sc: &Scenario, cfg: &PbftConfig) -> Option<Box<dyn Behavior<PbftMessage>>> {
    match &sc.behavior {
        None => None,
        Some(BehaviorSpec::WrongValue { value }) => Some(Box::new(WrongValue::new(cfg.clone(), Value(value.clone())))),
        Some(BehaviorSpec::RepeatedCertificate { at }) => {
            Some(Box::new(RepeatedCertificate { cfg: cfg.clone(), at: *at }))
        }
    }
}

/// Keys are derived from the scenario seed so that runs are reproducible.
pub fn run(sc: &Scenario) -> Result<Run, HarnessError> {
    let cfg = sc.pbft_config();
    if sc.f == 0 {
        return Err(HarnessError::Scenario("f must be at least 1".into()));
    }
    if sc.corrupt.contains(&cfg.client) {
        return Err(HarnessError::Scenario("the client must be honest".into()));
    }
    let (registry, signers) = KeyRegistry::generate(cfg.n(), sc.sim.seed);
    let inject = sc
        .inject
        .iter()
        .map(|i| {
            let env = Envelope::from_bytes(&i.envelope)
                .map_err(|e| HarnessError::Scenario(format!("inject at {}: {e}", i.at_ms)))?;
            Ok((i.at_ms, i.to, env))
        })
        .collect::<Result<Vec<_>, HarnessError>>()?;
    let policy = AdversaryPolicy {
        corrupt: sc.corrupt.clone(),
        drop_rules: sc.drop_rules.clone(),
        inject,
        behavior: behavior(sc, &cfg),
    };
    let calls = vec![(sc.request_at, cfg.client, PbftCall::Request(sc.value.clone()))];
    let mut world = World::new(PbftProgram::new(cfg.clone()), &signers, registry, policy, sc.sim.clone(), calls)?;
    world.run()?;
    let honest: BTreeSet<NodeId> = world.net.honest().collect();
    let target = target_view(&cfg, &honest, world.cfg.delta, world.cfg.tick, &world.prefix);
    Ok(Run { scenario: sc.clone(), cfg, world, target })
}
