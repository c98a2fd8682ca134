//! Single-slot PBFT.
//!
//! A node is a composition of a client sub-protocol and an unbounded map of
//! views ([`node`]); each view is itself a composition of pre-prepare,
//! prepare, commit and view-change phases ([`view`]). [`spec`] holds the
//! broadcast specification the whole cluster should implement and the map
//! from simulator steps to it.

pub mod byzantine;
pub mod checks;
pub mod measures;
pub mod message;
pub mod node;
pub mod spec;
pub mod view;

use serde::{Deserialize, Serialize};

use crate::{Millis, NodeId};

pub use message::{digest_of, extract, Digest, NewView, PbftMessage, PreparedCert, ViewChange};
pub use node::{NodeState, PbftCall, PbftProgram};

/// Deliberately broken behaviors, each reproducing a known class of bug.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mutation {
    /// The new leader re-encodes stapled view changes under the wrong view.
    WrongViewStaple,
    /// New-view certificates are counted by entries rather than signers.
    UnderCountedCertificate,
    /// A view's timer starts when this node sends its view change for the
    /// previous view, not when the view starts.
    EarlyTimer,
    /// View-change amplification ignores whether a view change was already
    /// sent and on which value.
    DualViewChange,
    /// A view that has not started still arms its timer on a clock tick.
    ZeroStateTimer,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PbftConfig {
    pub f: u64,
    pub view_timeout_base: Millis,
    /// Timeouts stop doubling after this many views.
    pub timeout_cap_exp: u32,
    pub client: NodeId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mutation: Option<Mutation>,
}

impl PbftConfig {
    pub fn new(f: u64) -> Self {
        PbftConfig { f, view_timeout_base: 1000, timeout_cap_exp: 16, client: NodeId(0), mutation: None }
    }

    pub fn with_mutation(mut self, m: Mutation) -> Self {
        self.mutation = Some(m);
        self
    }

    pub fn n(&self) -> u64 {
        3 * self.f + 1
    }

    pub fn quorum(&self) -> usize {
        (2 * self.f + 1) as usize
    }

    pub fn weak(&self) -> usize {
        (self.f + 1) as usize
    }

    pub fn leader_of(&self, view: u64) -> NodeId {
        NodeId(view % self.n())
    }

    pub fn view_timeout(&self, view: u64) -> Millis {
        let exp = view.min(self.timeout_cap_exp as u64) as u32;
        self.view_timeout_base.saturating_mul(1u64 << exp)
    }

    pub fn mutated(&self, m: Mutation) -> bool {
        self.mutation == Some(m)
    }

    /// Messages on the common-case critical path: one request, a pre-prepare
    /// and a reply per quorum member, and a quorum of prepares and commits
    /// into each of them.
    pub fn critical_path_messages(&self) -> u64 {
        let q = self.quorum() as u64;
        1 + 2 * q + 2 * q * q
    }
}
