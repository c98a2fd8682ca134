//! The contract between a protocol implementation and its host.
//!
//! A host (the simulator or the TCP runtime) owns the clock, the network and
//! the keys. It feeds a node one [`Event`] at a time through [`step`], which
//! validates every stapled signature in the outgoing messages before any of
//! them is signed and sent.

use std::fmt::Debug;

use serde::{Deserialize, Serialize};

use crate::authn::{
    validate_transmit, Envelope, KeyRegistry, SigRef, Signer, StapledExtractor, TransmitError, WireMessage, WireStaple,
};
use crate::{Millis, NodeId};

/// Interval at which hosts deliver [`Event::Timeout`].
pub const TICK_MS: Millis = 250;

#[derive(Clone, Debug, PartialEq)]
pub enum Event<M, A> {
    /// Periodic clock reading; the only way a program learns the time.
    Timeout(Millis),
    /// An authenticated message and the handle to its signature.
    Message { from: NodeId, msg: M, sig: SigRef },
    /// A local call from the application above.
    Call(A),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Destination {
    To(NodeId),
    /// Every node, including the sender.
    Broadcast,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transmit<M> {
    pub to: Destination,
    pub message: M,
}

pub trait NodeProgram {
    type State: Clone + PartialEq + Debug;
    type Message: WireMessage + Debug;
    type Arg: Clone + Debug + Serialize;
    /// What a node reports once it has finished, e.g. a decided value.
    type Output: Clone + PartialEq + Debug + Serialize;

    fn zero(&self, id: NodeId) -> Self::State;

    /// Must be total and terminate on every input.
    fn run(
        &self,
        id: NodeId,
        st: &Self::State,
        ev: &Event<Self::Message, Self::Arg>,
    ) -> (Self::State, Vec<Transmit<Self::Message>>);

    fn extractor(&self) -> StapledExtractor<Self::Message>;

    fn output(&self, st: &Self::State) -> Option<Self::Output>;

    /// Compact JSON view of a node state for trace files.
    fn summarize(&self, _st: &Self::State) -> serde_json::Value {
        serde_json::Value::Null
    }
}

/// A transmit whose staples have been checked, ready to be signed.
#[derive(Clone, Debug, PartialEq)]
pub struct Outbound<M> {
    pub to: Destination,
    pub message: M,
    staples: Vec<WireStaple>,
}

impl<M: WireMessage> Outbound<M> {
    pub fn sign(&self, signer: &Signer) -> Envelope {
        let payload = self.message.encode();
        let root_sig = signer.sign(&M::PROTOCOL, self.message.wire_tag(), &payload);
        Envelope { signer: signer.id(), payload, root_sig, staples: self.staples.clone() }
    }
}

/// Runs one event. Fails if any outgoing staple does not verify.
pub fn step<P: NodeProgram>(
    prog: &P,
    registry: &KeyRegistry,
    id: NodeId,
    st: &P::State,
    ev: &Event<P::Message, P::Arg>,
) -> Result<(P::State, Vec<Outbound<P::Message>>), TransmitError> {
    let (next, sends) = prog.run(id, st, ev);
    let ex = prog.extractor();
    let out = sends
        .into_iter()
        .map(|t| {
            let staples = validate_transmit(registry, &t.message, ex)?;
            Ok(Outbound { to: t.to, message: t.message, staples })
        })
        .collect::<Result<Vec<_>, TransmitError>>()?;
    Ok((next, out))
}

/// Recipients of a destination in a cluster of `n` nodes.
pub fn recipients(to: Destination, n: u64) -> Vec<NodeId> {
    match to {
        Destination::To(id) => vec![id],
        Destination::Broadcast => (0..n).map(NodeId).collect(),
    }
}
