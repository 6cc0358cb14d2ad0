//! Canonical byte encoding.
//!
//! Every value that is hashed, signed, sealed or sent between enclaves goes
//! through this module. Fields are written in declaration order, integers are
//! fixed-width big-endian, and every variable-length field (byte strings,
//! sequences, maps) carries a big-endian `u64` length prefix. Enum variants are
//! prefixed with a big-endian `u32` tag. Maps must be `BTreeMap` so iteration
//! order is canonical.

use bincode::Options;
use serde::{de::DeserializeOwned, Serialize};

/// Upper bound on decoded input, so hostile bytes cannot force large allocations.
const DECODE_LIMIT: u64 = 1 << 24;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("malformed canonical encoding: {0}")]
pub struct DecodeError(pub String);

fn options() -> impl Options {
    bincode::DefaultOptions::new().with_big_endian().with_fixint_encoding().reject_trailing_bytes().with_limit(DECODE_LIMIT)
}

pub fn encode<T: Serialize + ?Sized>(value: &T) -> Vec<u8> {
    bincode::DefaultOptions::new().with_big_endian().with_fixint_encoding().serialize(value).expect("in-memory values always encode")
}

pub fn decode<T: DeserializeOwned>(bytes: &[u8]) -> Result<T, DecodeError> {
    options().deserialize(bytes).map_err(|e| DecodeError(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;
    use std::collections::BTreeMap;

    #[derive(Serialize, Deserialize, Debug, PartialEq)]
    struct Sample {
        a: u16,
        b: Vec<u8>,
        c: Option<u32>,
    }

    #[derive(Serialize, Deserialize, Debug, PartialEq)]
    enum Tagged {
        Zero,
        One(u8),
    }

    #[test]
    fn integers_are_big_endian_fixed_width() {
        assert_eq!(encode(&0x0102u16), vec![1, 2]);
        assert_eq!(encode(&1u64), vec![0, 0, 0, 0, 0, 0, 0, 1]);
    }

    #[test]
    fn struct_layout_matches_hand_assembled_bytes() {
        let s = Sample { a: 0xabcd, b: vec![9, 8], c: Some(7) };
        let mut expected = vec![0xab, 0xcd];
        expected.extend_from_slice(&2u64.to_be_bytes());
        expected.extend_from_slice(&[9, 8]);
        expected.push(1);
        expected.extend_from_slice(&7u32.to_be_bytes());
        assert_eq!(encode(&s), expected);
        assert_eq!(decode::<Sample>(&expected).unwrap(), s);
    }

    #[test]
    fn enum_tags_are_u32() {
        assert_eq!(encode(&Tagged::Zero), vec![0, 0, 0, 0]);
        assert_eq!(encode(&Tagged::One(5)), vec![0, 0, 0, 1, 5]);
    }

    #[test]
    fn maps_encode_in_key_order() {
        let mut m = BTreeMap::new();
        m.insert(2u8, 20u8);
        m.insert(1u8, 10u8);
        let mut expected = 2u64.to_be_bytes().to_vec();
        expected.extend_from_slice(&[1, 10, 2, 20]);
        assert_eq!(encode(&m), expected);
    }

    #[test]
    fn trailing_bytes_and_truncation_are_rejected() {
        let mut bytes = encode(&Sample { a: 1, b: vec![], c: None });
        bytes.push(0);
        assert!(decode::<Sample>(&bytes).is_err());
        assert!(decode::<Sample>(&[0]).is_err());
    }

    #[test]
    fn oversized_length_prefix_is_rejected() {
        let mut bytes = vec![0, 1];
        bytes.extend_from_slice(&u64::MAX.to_be_bytes());
        assert!(decode::<Sample>(&bytes).is_err());
    }
}
