//! PBFT messages, their canonical encoding and stapled signatures.

use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};

use crate::authn::{ProtocolId, SigRef, Signature, Staple, WireMessage, WireTag};
use crate::codec::{Canonical, DecodeError, Reader, Writer};
use crate::{Decision, NodeId, Value};

pub const PBFT_PROTOCOL: ProtocolId = *b"PBFT-v1";

pub const KIND_REQUEST: u8 = 0x01;
pub const KIND_PRE_PREPARE: u8 = 0x02;
pub const KIND_PREPARE: u8 = 0x03;
pub const KIND_COMMIT: u8 = 0x04;
pub const KIND_VIEW_CHANGE: u8 = 0x05;
pub const KIND_NEW_VIEW: u8 = 0x06;
pub const KIND_REPLY: u8 = 0x07;

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Digest(#[serde(with = "hex::serde")] pub [u8; 32]);

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", &hex::encode(self.0)[..12])
    }
}

/// Hash of the canonical request encoding; NULL hashes a single zero byte.
pub fn digest_of(d: &Decision) -> Digest {
    let bytes = match d {
        Decision::Null => vec![0u8],
        Decision::Value(v) => Canonical::encode(&PbftMessage::Request(v.clone())),
    };
    Digest(Sha256::digest(&bytes).into())
}

/// A quorum of prepares for one digest in one view.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PreparedCert {
    pub view: u64,
    pub digest: Digest,
    pub value: Decision,
    pub prepares: Vec<(NodeId, SigRef)>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ViewChange {
    /// The view being abandoned.
    pub view: u64,
    pub prepared: Option<PreparedCert>,
    /// The value this node votes to carry into the next view.
    pub vote: Decision,
}

/// Justification for a view's proposal: view changes from the previous view.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NewView {
    pub view: u64,
    pub view_changes: Vec<(NodeId, ViewChange, SigRef)>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PbftMessage {
    Request(Value),
    PrePrepare { view: u64, value: Decision, new_view: Option<NewView> },
    Prepare { view: u64, digest: Digest },
    Commit { view: u64, digest: Digest },
    ViewChange(ViewChange),
    Reply(Decision),
}

impl PbftMessage {
    /// View the message belongs to; requests and replies sit outside views.
    pub fn view(&self) -> Option<u64> {
        match self {
            PbftMessage::Request(_) | PbftMessage::Reply(_) => None,
            PbftMessage::PrePrepare { view, .. }
            | PbftMessage::Prepare { view, .. }
            | PbftMessage::Commit { view, .. }
            | PbftMessage::ViewChange(ViewChange { view, .. }) => Some(*view),
        }
    }

    pub fn kind(&self) -> u8 {
        match self {
            PbftMessage::Request(_) => KIND_REQUEST,
            PbftMessage::PrePrepare { .. } => KIND_PRE_PREPARE,
            PbftMessage::Prepare { .. } => KIND_PREPARE,
            PbftMessage::Commit { .. } => KIND_COMMIT,
            PbftMessage::ViewChange(_) => KIND_VIEW_CHANGE,
            PbftMessage::Reply(_) => KIND_REPLY,
        }
    }
}

fn put_decision(w: &mut Writer, d: &Decision) {
    match d {
        Decision::Null => {
            w.u8(0);
        }
        Decision::Value(v) => {
            w.u8(1).bytes(&v.0);
        }
    }
}

fn get_decision(r: &mut Reader<'_>) -> Result<Decision, DecodeError> {
    match r.u8()? {
        0 => Ok(Decision::Null),
        1 => Ok(Decision::Value(Value(r.bytes()?.to_vec()))),
        b => Err(DecodeError::BadFlag(b)),
    }
}

fn put_view_change(w: &mut Writer, vc: &ViewChange) {
    w.u8(KIND_VIEW_CHANGE).u64(vc.view);
    w.option(vc.prepared.as_ref(), |w, c| {
        w.u64(c.view).raw(&c.digest.0);
        put_decision(w, &c.value);
        w.seq(&c.prepares, |w, (id, _)| {
            w.u64(id.0);
        });
    });
    put_decision(w, &vc.vote);
}

/// Reads a view change after its kind byte.
fn get_view_change(r: &mut Reader<'_>) -> Result<ViewChange, DecodeError> {
    let view = r.u64()?;
    let prepared = r.option(|r| {
        Ok(PreparedCert {
            view: r.u64()?,
            digest: Digest(r.array()?),
            value: get_decision(r)?,
            prepares: r.seq(|r| Ok((NodeId(r.u64()?), SigRef::unbound())))?,
        })
    })?;
    Ok(ViewChange { view, prepared, vote: get_decision(r)? })
}

impl Canonical for PbftMessage {
    fn encode_into(&self, w: &mut Writer) {
        match self {
            PbftMessage::Request(v) => {
                w.u8(KIND_REQUEST).bytes(&v.0);
            }
            PbftMessage::PrePrepare { view, value, new_view } => {
                w.u8(KIND_PRE_PREPARE).u64(*view);
                put_decision(w, value);
                w.option(new_view.as_ref(), |w, nv| {
                    w.u8(KIND_NEW_VIEW).u64(nv.view);
                    w.seq(&nv.view_changes, |w, (id, vc, _)| {
                        w.u64(id.0);
                        put_view_change(w, vc);
                    });
                });
            }
            PbftMessage::Prepare { view, digest } => {
                w.u8(KIND_PREPARE).u64(*view).raw(&digest.0);
            }
            PbftMessage::Commit { view, digest } => {
                w.u8(KIND_COMMIT).u64(*view).raw(&digest.0);
            }
            PbftMessage::ViewChange(vc) => put_view_change(w, vc),
            PbftMessage::Reply(d) => {
                w.u8(KIND_REPLY);
                put_decision(w, d);
            }
        }
    }

    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        match r.u8()? {
            KIND_REQUEST => Ok(PbftMessage::Request(Value(r.bytes()?.to_vec()))),
            KIND_PRE_PREPARE => {
                let view = r.u64()?;
                let value = get_decision(r)?;
                let new_view = r.option(|r| {
                    if r.u8()? != KIND_NEW_VIEW {
                        return Err(DecodeError::Invalid("expected new-view"));
                    }
                    let view = r.u64()?;
                    let view_changes = r.seq(|r| {
                        let id = NodeId(r.u64()?);
                        if r.u8()? != KIND_VIEW_CHANGE {
                            return Err(DecodeError::Invalid("expected view-change"));
                        }
                        Ok((id, get_view_change(r)?, SigRef::unbound()))
                    })?;
                    Ok(NewView { view, view_changes })
                })?;
                Ok(PbftMessage::PrePrepare { view, value, new_view })
            }
            KIND_PREPARE => Ok(PbftMessage::Prepare { view: r.u64()?, digest: Digest(r.array()?) }),
            KIND_COMMIT => Ok(PbftMessage::Commit { view: r.u64()?, digest: Digest(r.array()?) }),
            KIND_VIEW_CHANGE => Ok(PbftMessage::ViewChange(get_view_change(r)?)),
            KIND_REPLY => Ok(PbftMessage::Reply(get_decision(r)?)),
            k => Err(DecodeError::UnknownKind(k)),
        }
    }
}

impl WireMessage for PbftMessage {
    const PROTOCOL: ProtocolId = PBFT_PROTOCOL;

    fn wire_tag(&self) -> WireTag {
        WireTag { kind: self.kind(), tag: self.view().unwrap_or(0) }
    }

    fn encode(&self) -> Vec<u8> {
        Canonical::encode(self)
    }

    fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        Canonical::decode(bytes)
    }

    fn bind(&mut self, sigs: &[Signature]) -> Result<(), DecodeError> {
        let mut slots: Vec<&mut SigRef> = Vec::new();
        match self {
            PbftMessage::ViewChange(vc) => prepare_slots(vc, &mut slots),
            PbftMessage::PrePrepare { new_view: Some(nv), .. } => {
                for (_, vc, sig) in &mut nv.view_changes {
                    slots.push(sig);
                    prepare_slots(vc, &mut slots);
                }
            }
            _ => {}
        }
        if slots.len() != sigs.len() {
            return Err(DecodeError::Invalid("signature count"));
        }
        for (slot, sig) in slots.into_iter().zip(sigs) {
            *slot = SigRef::bound(*sig);
        }
        Ok(())
    }
}

fn prepare_slots<'a>(vc: &'a mut ViewChange, slots: &mut Vec<&'a mut SigRef>) {
    if let Some(c) = &mut vc.prepared {
        slots.extend(c.prepares.iter_mut().map(|(_, s)| s));
    }
}

fn prepare_staples(vc: &ViewChange) -> Vec<Staple<PbftMessage>> {
    match &vc.prepared {
        None => Vec::new(),
        Some(c) => c
            .prepares
            .iter()
            .map(|(id, sig)| Staple {
                signer: *id,
                message: PbftMessage::Prepare { view: c.view, digest: c.digest },
                sig: *sig,
            })
            .collect(),
    }
}

/// Staples in wire order: each view change, followed by its prepares.
pub fn extract(m: &PbftMessage) -> Vec<Staple<PbftMessage>> {
    match m {
        PbftMessage::ViewChange(vc) => prepare_staples(vc),
        PbftMessage::PrePrepare { new_view: Some(nv), .. } => {
            let mut out = Vec::new();
            for (id, vc, sig) in &nv.view_changes {
                out.push(Staple { signer: *id, message: PbftMessage::ViewChange(vc.clone()), sig: *sig });
                out.extend(prepare_staples(vc));
            }
            out
        }
        _ => Vec::new(),
    }
}
