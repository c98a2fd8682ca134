//! Signing, envelopes and stapled signatures.
//!
//! Every signature covers a 16-byte context followed by the canonical
//! payload. The context is the 7-byte protocol id, the message kind byte and
//! the 8-byte big-endian tag (a view number for PBFT), so a signature made
//! for one sub-protocol never verifies for another.
//!
//! Messages that carry other nodes' signed messages (certificates) hold
//! [`SigRef`] handles. The stapled extractor lists those messages; on the
//! wire each one travels as `(signer, payload, signature)` next to the root.

use std::collections::BTreeMap;
use std::fmt;

use ed25519_dalek::{Signer as _, SigningKey, Verifier as _, VerifyingKey};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::codec::{DecodeError, Reader, Writer};
use crate::NodeId;

pub const CONTEXT_LEN: usize = 16;

pub type ProtocolId = [u8; 7];

/// Sub-protocol scope of a signature: message kind and tag value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct WireTag {
    pub kind: u8,
    pub tag: u64,
}

pub fn context(protocol: &ProtocolId, tag: WireTag) -> [u8; CONTEXT_LEN] {
    let mut ctx = [0u8; CONTEXT_LEN];
    ctx[..7].copy_from_slice(protocol);
    ctx[7] = tag.kind;
    ctx[8..].copy_from_slice(&tag.tag.to_be_bytes());
    ctx
}

fn signed_bytes(protocol: &ProtocolId, tag: WireTag, payload: &[u8]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(CONTEXT_LEN + payload.len());
    buf.extend_from_slice(&context(protocol, tag));
    buf.extend_from_slice(payload);
    buf
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Signature(pub [u8; 64]);

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Signature({}..)", hex::encode(&self.0[..6]))
    }
}

impl Serialize for Signature {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(self.0))
    }
}

impl<'de> Deserialize<'de> for Signature {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        let bytes = hex::decode(text).map_err(serde::de::Error::custom)?;
        let arr: [u8; 64] = bytes.try_into().map_err(|_| serde::de::Error::custom("signature must be 64 bytes"))?;
        Ok(Signature(arr))
    }
}

/// Opaque handle to a stapled signature. Decoded messages hold unbound
/// handles until [`validate_receive`] binds them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct SigRef(Option<Signature>);

impl SigRef {
    pub fn unbound() -> Self {
        SigRef(None)
    }

    pub(crate) fn bound(sig: Signature) -> Self {
        SigRef(Some(sig))
    }

    pub(crate) fn signature(&self) -> Option<Signature> {
        self.0
    }

    pub fn is_bound(&self) -> bool {
        self.0.is_some()
    }
}

/// A node's private signing capability.
#[derive(Clone)]
pub struct Signer {
    id: NodeId,
    key: SigningKey,
}

impl fmt::Debug for Signer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Signer({})", self.id)
    }
}

impl Signer {
    pub fn from_secret(id: NodeId, secret: [u8; 32]) -> Self {
        Signer { id, key: SigningKey::from_bytes(&secret) }
    }

    /// Deterministic key derived from a cluster seed.
    pub fn derived(id: NodeId, seed: u64) -> Self {
        let mut h = Sha256::new();
        h.update(b"bft-node-key");
        h.update(seed.to_be_bytes());
        h.update(id.0.to_be_bytes());
        Signer::from_secret(id, h.finalize().into())
    }

    pub fn from_hex(id: NodeId, text: &str) -> Result<Self, hex::FromHexError> {
        let mut secret = [0u8; 32];
        hex::decode_to_slice(text.trim(), &mut secret)?;
        Ok(Signer::from_secret(id, secret))
    }

    pub fn secret_hex(&self) -> String {
        hex::encode(self.key.to_bytes())
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn public(&self) -> VerifyingKey {
        self.key.verifying_key()
    }

    pub fn sign(&self, protocol: &ProtocolId, tag: WireTag, payload: &[u8]) -> Signature {
        Signature(self.key.sign(&signed_bytes(protocol, tag, payload)).to_bytes())
    }
}

pub fn verify(key: &VerifyingKey, protocol: &ProtocolId, tag: WireTag, payload: &[u8], sig: &Signature) -> bool {
    let sig = ed25519_dalek::Signature::from_bytes(&sig.0);
    key.verify(&signed_bytes(protocol, tag, payload), &sig).is_ok()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PeerEntry {
    pub public: VerifyingKey,
    pub addr: Option<String>,
}

/// Public keys and addresses of every cluster member.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KeyRegistry {
    entries: BTreeMap<NodeId, PeerEntry>,
}

impl KeyRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registry plus signers for nodes `0..n`, keys derived from `seed`.
    pub fn generate(n: u64, seed: u64) -> (Self, Vec<Signer>) {
        let signers: Vec<Signer> = (0..n).map(|i| Signer::derived(NodeId(i), seed)).collect();
        let mut reg = KeyRegistry::new();
        for s in &signers {
            reg.insert(s.id(), PeerEntry { public: s.public(), addr: None });
        }
        (reg, signers)
    }

    pub fn insert(&mut self, id: NodeId, entry: PeerEntry) {
        self.entries.insert(id, entry);
    }

    pub fn get(&self, id: NodeId) -> Option<&PeerEntry> {
        self.entries.get(&id)
    }

    pub fn ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.entries.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn verify(&self, signer: NodeId, protocol: &ProtocolId, tag: WireTag, payload: &[u8], sig: &Signature) -> bool {
        self.entries.get(&signer).is_some_and(|e| verify(&e.public, protocol, tag, payload, sig))
    }
}

/// Application messages that can be signed and sent.
pub trait WireMessage: Sized + Clone {
    const PROTOCOL: ProtocolId;

    fn wire_tag(&self) -> WireTag;

    /// Canonical encoding without any stapled signatures.
    fn encode(&self) -> Vec<u8>;

    /// Inverse of `encode`; handles come back unbound.
    fn decode(bytes: &[u8]) -> Result<Self, DecodeError>;

    /// Fills handles with `sigs`, in the order the extractor lists staples.
    fn bind(&mut self, sigs: &[Signature]) -> Result<(), DecodeError>;
}

/// One stapled message as seen by the application.
#[derive(Clone, Debug, PartialEq)]
pub struct Staple<M> {
    pub signer: NodeId,
    pub message: M,
    pub sig: SigRef,
}

pub type StapledExtractor<M> = fn(&M) -> Vec<Staple<M>>;

/// A staple as carried on the wire.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WireStaple {
    pub signer: NodeId,
    #[serde(with = "hex::serde")]
    pub payload: Vec<u8>,
    pub sig: Signature,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Envelope {
    pub signer: NodeId,
    #[serde(with = "hex::serde")]
    pub payload: Vec<u8>,
    pub root_sig: Signature,
    pub staples: Vec<WireStaple>,
}

impl Envelope {
    /// Envelope bytes (without the frame length).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u64(self.signer.0).bytes(&self.payload).raw(&self.root_sig.0);
        w.u16(u16::try_from(self.staples.len()).expect("too many staples"));
        for s in &self.staples {
            w.u64(s.signer.0).bytes(&s.payload).raw(&s.sig.0);
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        let signer = NodeId(r.u64()?);
        let payload = r.bytes()?.to_vec();
        let root_sig = Signature(r.array()?);
        let count = r.u16()?;
        let mut staples = Vec::with_capacity(usize::from(count).min(r.remaining()));
        for _ in 0..count {
            staples.push(WireStaple {
                signer: NodeId(r.u64()?),
                payload: r.bytes()?.to_vec(),
                sig: Signature(r.array()?),
            });
        }
        r.finish()?;
        Ok(Envelope { signer, payload, root_sig, staples })
    }

    /// 4-byte big-endian length followed by the envelope bytes.
    pub fn to_frame(&self) -> Vec<u8> {
        let body = self.to_bytes();
        let mut frame = Vec::with_capacity(4 + body.len());
        frame.extend_from_slice(&u32::try_from(body.len()).expect("frame too large").to_be_bytes());
        frame.extend_from_slice(&body);
        frame
    }

    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.to_bytes()).into()
    }
}

/// A root message whose signature and staples have been verified.
#[derive(Clone, Debug, PartialEq)]
pub struct AuthenticatedMessage<M> {
    pub signer: NodeId,
    pub message: M,
    /// Handle to the root signature, for stapling this message later.
    pub sig: SigRef,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AuthError {
    #[error("malformed payload: {0}")]
    Decode(#[from] DecodeError),
    #[error("root signature invalid")]
    RootSigInvalid,
    #[error("staples disagree with the extractor")]
    StapleMismatch,
    #[error("stapled signature {0} invalid")]
    StapleSigInvalid(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransmitError {
    #[error("staple {index} (signer {signer}) does not verify at transmit")]
    StapleInvalidAtTransmit { index: usize, signer: NodeId },
}

pub fn validate_receive<M: WireMessage>(
    registry: &KeyRegistry,
    env: &Envelope,
    ex: StapledExtractor<M>,
) -> Result<AuthenticatedMessage<M>, AuthError> {
    let mut root = M::decode(&env.payload)?;
    if !registry.verify(env.signer, &M::PROTOCOL, root.wire_tag(), &env.payload, &env.root_sig) {
        return Err(AuthError::RootSigInvalid);
    }
    let expected = ex(&root);
    if expected.len() != env.staples.len() {
        return Err(AuthError::StapleMismatch);
    }
    for (i, (want, got)) in expected.iter().zip(&env.staples).enumerate() {
        if want.signer != got.signer {
            return Err(AuthError::StapleMismatch);
        }
        let reencoded = want.message.encode();
        if !registry.verify(got.signer, &M::PROTOCOL, want.message.wire_tag(), &reencoded, &got.sig) {
            return Err(AuthError::StapleSigInvalid(i));
        }
        if reencoded != got.payload {
            return Err(AuthError::StapleMismatch);
        }
    }
    let sigs: Vec<Signature> = env.staples.iter().map(|s| s.sig).collect();
    root.bind(&sigs)?;
    Ok(AuthenticatedMessage { signer: env.signer, message: root, sig: SigRef::bound(env.root_sig) })
}

/// Every staple of `msg` must resolve to a signature that verifies over the
/// canonical encoding of the stapled message.
pub fn validate_transmit<M: WireMessage>(
    registry: &KeyRegistry,
    msg: &M,
    ex: StapledExtractor<M>,
) -> Result<Vec<WireStaple>, TransmitError> {
    ex(msg)
        .into_iter()
        .enumerate()
        .map(|(index, st)| {
            let payload = st.message.encode();
            match st.sig.signature() {
                Some(sig) if registry.verify(st.signer, &M::PROTOCOL, st.message.wire_tag(), &payload, &sig) => {
                    Ok(WireStaple { signer: st.signer, payload, sig })
                }
                _ => Err(TransmitError::StapleInvalidAtTransmit { index, signer: st.signer }),
            }
        })
        .collect()
}

/// Validates staples, signs the root and builds the envelope.
pub fn seal<M: WireMessage>(
    registry: &KeyRegistry,
    signer: &Signer,
    msg: &M,
    ex: StapledExtractor<M>,
) -> Result<Envelope, TransmitError> {
    let staples = validate_transmit(registry, msg, ex)?;
    let payload = msg.encode();
    let root_sig = signer.sign(&M::PROTOCOL, msg.wire_tag(), &payload);
    Ok(Envelope { signer: signer.id(), payload, root_sig, staples })
}

#[cfg(test)]
mod tests;
