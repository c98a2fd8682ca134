//! What the adversary may do: corrupt up to `f` nodes, drop or hold messages
//! before stabilization, and inject envelopes signed with corrupt keys or
//! replayed from honest traffic.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::authn::{seal, Envelope, KeyRegistry, Signer, StapledExtractor, WireMessage, WireTag};
use crate::runtime::Destination;
use crate::{Millis, NodeId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fate {
    Deliver,
    /// Never delivered.
    Drop,
    /// Delivered only once the network stabilizes.
    Hold,
}

/// Matches messages by kind byte, tag range (the view, for PBFT), send time
/// and recipient. Empty lists match everything.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropRule {
    #[serde(default)]
    pub kinds: Vec<u8>,
    #[serde(default)]
    pub min_tag: u64,
    #[serde(default = "max_u64")]
    pub max_tag: u64,
    #[serde(default)]
    pub from_ms: Millis,
    #[serde(default = "max_u64")]
    pub until_ms: Millis,
    #[serde(default)]
    pub to: Vec<NodeId>,
    pub fate: Fate,
}

fn max_u64() -> u64 {
    u64::MAX
}

impl DropRule {
    pub fn new(kinds: &[u8], fate: Fate) -> Self {
        DropRule {
            kinds: kinds.to_vec(),
            min_tag: 0,
            max_tag: u64::MAX,
            from_ms: 0,
            until_ms: u64::MAX,
            to: Vec::new(),
            fate,
        }
    }

    pub fn tags(mut self, min: u64, max: u64) -> Self {
        self.min_tag = min;
        self.max_tag = max;
        self
    }

    pub fn to(mut self, nodes: &[NodeId]) -> Self {
        self.to = nodes.to_vec();
        self
    }

    pub fn matches(&self, at: Millis, to: NodeId, tag: WireTag) -> bool {
        (self.kinds.is_empty() || self.kinds.contains(&tag.kind))
            && (self.min_tag..=self.max_tag).contains(&tag.tag)
            && (self.from_ms..=self.until_ms).contains(&at)
            && (self.to.is_empty() || self.to.contains(&to))
    }
}

/// Signing keys of the corrupt nodes, and nothing else.
///
/// The simulator hands this to the adversary; it cannot be built from
/// outside the crate, so an adversary has no way to reach honest keys:
///
/// ```compile_fail
/// use bft_core::simnet::CorruptKeys;
/// let keys = CorruptKeys { signers: Default::default() };
/// ```
pub struct CorruptKeys {
    signers: BTreeMap<NodeId, Signer>,
}

impl fmt::Debug for CorruptKeys {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.signers.keys()).finish()
    }
}

impl CorruptKeys {
    pub(crate) fn new(all: &[Signer], corrupt: &BTreeSet<NodeId>) -> Self {
        CorruptKeys { signers: all.iter().filter(|s| corrupt.contains(&s.id())).map(|s| (s.id(), s.clone())).collect() }
    }

    pub fn ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.signers.keys().copied()
    }

    /// Signs `msg` as corrupt node `id`. `None` if `id` is honest or a staple
    /// does not verify.
    pub fn sign<M: WireMessage>(
        &self,
        registry: &KeyRegistry,
        id: NodeId,
        msg: &M,
        ex: StapledExtractor<M>,
    ) -> Option<Envelope> {
        seal(registry, self.signers.get(&id)?, msg, ex).ok()
    }
}

/// Reactive Byzantine behavior. Sees every honest message as it is sent.
pub trait Behavior<M> {
    /// Injections to schedule before the run starts.
    fn schedule(&mut self, _keys: &CorruptKeys, _registry: &KeyRegistry) -> Vec<(Millis, NodeId, Envelope)> {
        Vec::new()
    }

    /// Injections to make now in reaction to an honest transmission.
    fn on_emit(
        &mut self,
        keys: &CorruptKeys,
        registry: &KeyRegistry,
        at: Millis,
        from: NodeId,
        to: Destination,
        msg: &M,
        env: &Envelope,
    ) -> Vec<(NodeId, Envelope)>;
}

pub struct AdversaryPolicy<M> {
    pub corrupt: BTreeSet<NodeId>,
    /// Applied before stabilization only; first match wins.
    pub drop_rules: Vec<DropRule>,
    pub inject: Vec<(Millis, NodeId, Envelope)>,
    pub behavior: Option<Box<dyn Behavior<M>>>,
}

impl<M> Default for AdversaryPolicy<M> {
    fn default() -> Self {
        AdversaryPolicy { corrupt: BTreeSet::new(), drop_rules: Vec::new(), inject: Vec::new(), behavior: None }
    }
}

impl<M> AdversaryPolicy<M> {
    pub fn fate(&self, stabilized: bool, at: Millis, to: NodeId, tag: WireTag) -> Fate {
        if stabilized {
            return Fate::Deliver;
        }
        self.drop_rules.iter().find(|r| r.matches(at, to, tag)).map_or(Fate::Deliver, |r| r.fate)
    }
}
