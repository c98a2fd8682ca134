use proptest::prelude::*;

use super::*;
use crate::codec::Canonical;

const TOY: ProtocolId = *b"TOY-v01";

#[derive(Clone, Debug, PartialEq)]
enum Toy {
    Vote { round: u64, value: u8 },
    Cert { round: u64, value: u8, votes: Vec<(NodeId, SigRef)> },
}

impl Canonical for Toy {
    fn encode_into(&self, w: &mut Writer) {
        match self {
            Toy::Vote { round, value } => {
                w.u8(1).u64(*round).u8(*value);
            }
            Toy::Cert { round, value, votes } => {
                w.u8(2).u64(*round).u8(*value).seq(votes, |w, (id, _)| {
                    w.u64(id.0);
                });
            }
        }
    }

    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        match r.u8()? {
            1 => Ok(Toy::Vote { round: r.u64()?, value: r.u8()? }),
            2 => Ok(Toy::Cert {
                round: r.u64()?,
                value: r.u8()?,
                votes: r.seq(|r| Ok((NodeId(r.u64()?), SigRef::unbound())))?,
            }),
            k => Err(DecodeError::UnknownKind(k)),
        }
    }
}

impl WireMessage for Toy {
    const PROTOCOL: ProtocolId = TOY;

    fn wire_tag(&self) -> WireTag {
        match self {
            Toy::Vote { round, .. } => WireTag { kind: 1, tag: *round },
            Toy::Cert { round, .. } => WireTag { kind: 2, tag: *round },
        }
    }

    fn encode(&self) -> Vec<u8> {
        Canonical::encode(self)
    }

    fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        Canonical::decode(bytes)
    }

    fn bind(&mut self, sigs: &[Signature]) -> Result<(), DecodeError> {
        match self {
            Toy::Vote { .. } if sigs.is_empty() => Ok(()),
            Toy::Cert { votes, .. } if votes.len() == sigs.len() => {
                for ((_, r), s) in votes.iter_mut().zip(sigs) {
                    *r = SigRef::bound(*s);
                }
                Ok(())
            }
            _ => Err(DecodeError::Invalid("signature count")),
        }
    }
}

fn extract(m: &Toy) -> Vec<Staple<Toy>> {
    match m {
        Toy::Vote { .. } => vec![],
        Toy::Cert { round, value, votes } => votes
            .iter()
            .map(|(id, sig)| Staple { signer: *id, message: Toy::Vote { round: *round, value: *value }, sig: *sig })
            .collect(),
    }
}

/// Same as `extract` but re-encodes each vote one round later.
fn extract_next_round(m: &Toy) -> Vec<Staple<Toy>> {
    extract(m)
        .into_iter()
        .map(|mut s| {
            if let Toy::Vote { round, .. } = &mut s.message {
                *round += 1;
            }
            s
        })
        .collect()
}

fn cluster() -> (KeyRegistry, Vec<Signer>) {
    KeyRegistry::generate(4, 7)
}

fn cert(signers: &[Signer], reg: &KeyRegistry, round: u64) -> Toy {
    let votes = signers[..3]
        .iter()
        .map(|s| {
            let env = seal(reg, s, &Toy::Vote { round, value: 9 }, extract).unwrap();
            (s.id(), SigRef::bound(env.root_sig))
        })
        .collect();
    Toy::Cert { round, value: 9, votes }
}

#[test]
fn sign_verify_and_wrong_key() {
    let (_, s) = cluster();
    let tag = WireTag { kind: 3, tag: 4 };
    let sig = s[0].sign(&TOY, tag, b"payload");
    assert!(verify(&s[0].public(), &TOY, tag, b"payload", &sig));
    assert!(!verify(&s[1].public(), &TOY, tag, b"payload", &sig));
    assert!(!verify(&s[0].public(), &TOY, WireTag { kind: 4, tag: 4 }, b"payload", &sig));
}

#[test]
fn context_layout() {
    let ctx = context(b"PBFT-v1", WireTag { kind: 5, tag: 0x0102 });
    assert_eq!(&ctx[..7], b"PBFT-v1");
    assert_eq!(ctx[7], 5);
    assert_eq!(&ctx[8..], &[0, 0, 0, 0, 0, 0, 1, 2]);
}

#[test]
fn certificate_round_trip() {
    let (reg, s) = cluster();
    let c = cert(&s, &reg, 3);
    let env = seal(&reg, &s[3], &c, extract).unwrap();
    assert_eq!(env.staples.len(), 3);
    let got = validate_receive(&reg, &env, extract).unwrap();
    assert_eq!(got.signer, NodeId(3));
    assert_eq!(got.message, c);
}

#[test]
fn empty_staples() {
    let (reg, s) = cluster();
    let v = Toy::Vote { round: 0, value: 1 };
    let env = seal(&reg, &s[1], &v, extract).unwrap();
    assert!(env.staples.is_empty());
    assert_eq!(validate_receive(&reg, &env, extract).unwrap().message, v);
}

#[test]
fn wrong_round_reencoding() {
    let (reg, s) = cluster();
    let env = seal(&reg, &s[3], &cert(&s, &reg, 3), extract).unwrap();
    assert_eq!(validate_receive(&reg, &env, extract_next_round), Err(AuthError::StapleSigInvalid(0)));
    assert_eq!(
        seal(&reg, &s[3], &cert(&s, &reg, 3), extract_next_round).unwrap_err(),
        TransmitError::StapleInvalidAtTransmit { index: 0, signer: NodeId(0) }
    );
}

#[test]
fn unbound_staple_fails_at_transmit() {
    let (reg, s) = cluster();
    let c = Toy::Cert { round: 1, value: 2, votes: vec![(NodeId(0), SigRef::unbound())] };
    assert!(seal(&reg, &s[0], &c, extract).is_err());
}

#[test]
fn receive_errors() {
    let (reg, s) = cluster();
    let env = seal(&reg, &s[3], &cert(&s, &reg, 3), extract).unwrap();

    let mut bad = env.clone();
    bad.payload.push(0);
    assert!(matches!(validate_receive(&reg, &bad, extract), Err(AuthError::Decode(_))));

    let mut forged = env.clone();
    forged.signer = NodeId(0);
    assert_eq!(validate_receive(&reg, &forged, extract), Err(AuthError::RootSigInvalid));

    let mut short = env.clone();
    short.staples.pop();
    assert_eq!(validate_receive(&reg, &short, extract), Err(AuthError::StapleMismatch));

    let mut swapped = env.clone();
    swapped.staples.swap(0, 1);
    assert_eq!(validate_receive(&reg, &swapped, extract), Err(AuthError::StapleMismatch));

    let mut resigned = env;
    resigned.staples[2].sig = resigned.staples[1].sig;
    assert_eq!(validate_receive(&reg, &resigned, extract), Err(AuthError::StapleSigInvalid(2)));
}

#[test]
fn replay_into_another_round_is_rejected() {
    let (reg, s) = cluster();
    let env = seal(&reg, &s[1], &Toy::Vote { round: 4, value: 1 }, extract).unwrap();
    let mut moved = env.clone();
    moved.payload = WireMessage::encode(&Toy::Vote { round: 5, value: 1 });
    assert_eq!(validate_receive(&reg, &moved, extract), Err(AuthError::RootSigInvalid));
    assert!(validate_receive(&reg, &env, extract).is_ok());
}

fn any_envelope() -> impl Strategy<Value = Envelope> {
    let sig = proptest::array::uniform32(any::<u8>()).prop_map(|h| {
        let mut s = [0u8; 64];
        s[..32].copy_from_slice(&h);
        s[32..].copy_from_slice(&h);
        Signature(s)
    });
    let staple = (any::<u64>(), proptest::collection::vec(any::<u8>(), 0..12), sig.clone())
        .prop_map(|(i, payload, sig)| WireStaple { signer: NodeId(i), payload, sig });
    (any::<u64>(), proptest::collection::vec(any::<u8>(), 0..24), sig, proptest::collection::vec(staple, 0..4))
        .prop_map(|(i, payload, root_sig, staples)| Envelope { signer: NodeId(i), payload, root_sig, staples })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn sign_verify_round_trip_and_cross_tag(
        payload in proptest::collection::vec(any::<u8>(), 0..64),
        kind in any::<u8>(), tag in any::<u64>(), other_kind in any::<u8>(), other_tag in any::<u64>(),
        who in 0usize..4,
    ) {
        let (reg, s) = cluster();
        let t = WireTag { kind, tag };
        let sig = s[who].sign(&TOY, t, &payload);
        prop_assert!(reg.verify(s[who].id(), &TOY, t, &payload, &sig));
        let u = WireTag { kind: other_kind, tag: other_tag };
        if u != t {
            prop_assert!(!reg.verify(s[who].id(), &TOY, u, &payload, &sig));
        }
        prop_assert!(!reg.verify(s[(who + 1) % 4].id(), &TOY, t, &payload, &sig));
    }

    #[test]
    fn envelope_bytes_round_trip(env in any_envelope()) {
        let bytes = env.to_bytes();
        prop_assert_eq!(Envelope::from_bytes(&bytes).unwrap(), env.clone());
        let frame = env.to_frame();
        prop_assert_eq!(u32::from_be_bytes(frame[..4].try_into().unwrap()) as usize, bytes.len());
    }
}
