//! Composable, event-driven protocol state machines with signed message
//! stapling, a deterministic partially synchronous network simulator, a
//! completion-measure liveness checker, and a single-slot PBFT built on top of
//! them.
//!
//! The layers, bottom up:
//!
//! - [`sm`]: specifications (`Init`/`Next`/`Inv`/`Fair`), finite execution
//!   prefixes, conformance and trace-refinement checking.
//! - [`compose`]: parallel composition of specifications and synchronous
//!   dispatch over default maps for implementations.
//! - [`authn`] and [`codec`]: ed25519 signing with tag domain separation,
//!   envelopes, stapled-signature extraction and validation.
//! - [`runtime`]: the node program contract (`zero`, `run`, extractor).
//! - [`simnet`]: the network specification and a deterministic simulator with
//!   a constrained Byzantine adversary.
//! - [`liveness`]: tasks, lexicographic measures and the per-step measure
//!   obligation.
//! - [`vote`]: a one-shot quorum vote used to exercise the measure checks.
//! - [`pbft`]: the single-slot PBFT program, the broadcast specification and
//!   the abstraction map.
//! - [`harness`]: scenarios, reports, regression mutants and the TCP host.

#![allow(clippy::type_complexity, clippy::too_many_arguments)]

pub mod authn;
pub mod codec;
pub mod compose;
pub mod harness;
pub mod liveness;
pub mod pbft;
pub mod runtime;
pub mod simnet;
pub mod sm;
mod types;
pub mod vote;

pub use types::{Decision, Millis, NodeId, Value};
