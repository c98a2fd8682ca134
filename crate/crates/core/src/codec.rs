//! Canonical byte encoding.
//!
//! Integers are fixed-width big-endian, byte strings and sequences carry a
//! 4-byte length prefix, and optional fields a presence byte. A value
//! encodes to exactly one byte string and decoding rejects trailing input,
//! so `decode(encode(x)) == x` and `encode` is injective.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("unexpected end of input")]
    Truncated,
    #[error("{0} trailing bytes")]
    Trailing(usize),
    #[error("unknown kind byte {0:#04x}")]
    UnknownKind(u8),
    #[error("invalid presence byte {0:#04x}")]
    BadFlag(u8),
    #[error("length {0} exceeds remaining input")]
    BadLength(usize),
    #[error("{0}")]
    Invalid(&'static str),
}

#[derive(Default, Debug, Clone)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Writer::default()
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }

    pub fn u16(&mut self, v: u16) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    /// Fixed-size field, no prefix.
    pub fn raw(&mut self, bytes: &[u8]) -> &mut Self {
        self.buf.extend_from_slice(bytes);
        self
    }

    /// Length-prefixed byte string.
    pub fn bytes(&mut self, bytes: &[u8]) -> &mut Self {
        self.u32(u32::try_from(bytes.len()).expect("field longer than 4 GiB"));
        self.raw(bytes)
    }

    pub fn option<T>(&mut self, v: Option<&T>, f: impl FnOnce(&mut Self, &T)) -> &mut Self {
        match v {
            None => {
                self.u8(0);
            }
            Some(x) => {
                self.u8(1);
                f(self, x);
            }
        }
        self
    }

    pub fn seq<T>(&mut self, items: &[T], mut f: impl FnMut(&mut Self, &T)) -> &mut Self {
        self.u32(u32::try_from(items.len()).expect("sequence too long"));
        for x in items {
            f(self, x);
        }
        self
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

#[derive(Debug, Clone)]
pub struct Reader<'a> {
    rest: &'a [u8],
}

impl<'a> Reader<'a> {
    pub fn new(input: &'a [u8]) -> Self {
        Reader { rest: input }
    }

    pub fn raw(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        if self.rest.len() < n {
            return Err(DecodeError::Truncated);
        }
        let (head, tail) = self.rest.split_at(n);
        self.rest = tail;
        Ok(head)
    }

    pub fn array<const N: usize>(&mut self) -> Result<[u8; N], DecodeError> {
        Ok(self.raw(N)?.try_into().expect("length checked"))
    }

    pub fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.array::<1>()?[0])
    }

    pub fn u16(&mut self) -> Result<u16, DecodeError> {
        Ok(u16::from_be_bytes(self.array()?))
    }

    pub fn u32(&mut self) -> Result<u32, DecodeError> {
        Ok(u32::from_be_bytes(self.array()?))
    }

    pub fn u64(&mut self) -> Result<u64, DecodeError> {
        Ok(u64::from_be_bytes(self.array()?))
    }

    pub fn bytes(&mut self) -> Result<&'a [u8], DecodeError> {
        let len = self.u32()? as usize;
        if len > self.rest.len() {
            return Err(DecodeError::BadLength(len));
        }
        self.raw(len)
    }

    pub fn option<T>(&mut self, f: impl FnOnce(&mut Self) -> Result<T, DecodeError>) -> Result<Option<T>, DecodeError> {
        match self.u8()? {
            0 => Ok(None),
            1 => Ok(Some(f(self)?)),
            b => Err(DecodeError::BadFlag(b)),
        }
    }

    pub fn seq<T>(&mut self, mut f: impl FnMut(&mut Self) -> Result<T, DecodeError>) -> Result<Vec<T>, DecodeError> {
        let len = self.u32()? as usize;
        // Every element takes at least one byte; reject absurd counts early.
        if len > self.rest.len() {
            return Err(DecodeError::BadLength(len));
        }
        (0..len).map(|_| f(self)).collect()
    }

    pub fn remaining(&self) -> usize {
        self.rest.len()
    }

    pub fn finish(self) -> Result<(), DecodeError> {
        match self.rest.len() {
            0 => Ok(()),
            n => Err(DecodeError::Trailing(n)),
        }
    }
}

/// Types with a canonical encoding.
pub trait Canonical: Sized {
    fn encode_into(&self, w: &mut Writer);
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError>;

    fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        self.encode_into(&mut w);
        w.finish()
    }

    fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        let v = Self::decode_from(&mut r)?;
        r.finish()?;
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[derive(Debug, Clone, PartialEq)]
    struct Sample {
        a: u64,
        b: Vec<u8>,
        c: Option<u16>,
        d: Vec<Vec<u8>>,
    }

    impl Canonical for Sample {
        fn encode_into(&self, w: &mut Writer) {
            w.u64(self.a).bytes(&self.b).option(self.c.as_ref(), |w, x| {
                w.u16(*x);
            });
            w.seq(&self.d, |w, x| {
                w.bytes(x);
            });
        }

        fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
            Ok(Sample {
                a: r.u64()?,
                b: r.bytes()?.to_vec(),
                c: r.option(|r| r.u16())?,
                d: r.seq(|r| Ok(r.bytes()?.to_vec()))?,
            })
        }
    }

    fn sample() -> impl Strategy<Value = Sample> {
        (
            any::<u64>(),
            proptest::collection::vec(any::<u8>(), 0..16),
            any::<Option<u16>>(),
            proptest::collection::vec(proptest::collection::vec(any::<u8>(), 0..4), 0..4),
        )
            .prop_map(|(a, b, c, d)| Sample { a, b, c, d })
    }

    #[test]
    fn big_endian_fixed_width() {
        let mut w = Writer::new();
        w.u64(1).u16(0x0203);
        assert_eq!(w.finish(), vec![0, 0, 0, 0, 0, 0, 0, 1, 2, 3]);
    }

    #[test]
    fn rejects_trailing_and_truncated() {
        let s = Sample { a: 1, b: vec![9], c: None, d: vec![] };
        let mut bytes = s.encode();
        bytes.push(0);
        assert_eq!(Sample::decode(&bytes), Err(DecodeError::Trailing(1)));
        bytes.truncate(5);
        assert_eq!(Sample::decode(&bytes), Err(DecodeError::Truncated));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn round_trip(s in sample()) {
            prop_assert_eq!(Sample::decode(&s.encode()).unwrap(), s);
        }

        #[test]
        fn injective(x in sample(), y in sample()) {
            if x != y {
                prop_assert_ne!(x.encode(), y.encode());
            }
        }

        #[test]
        fn garbage_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
            let _ = Sample::decode(&bytes);
        }
    }
}
