//! Canonical JSON: lexicographically sorted keys, no insignificant whitespace.
//!
//! `serde_json::Map` is backed by a `BTreeMap` (the `preserve_order` feature is
//! never enabled in this workspace), so routing a value through
//! `serde_json::Value` sorts every object's keys.

use serde::Serialize;
use sha2::{Digest, Sha256};

/// Serializes `value` into its canonical byte form.
pub fn to_canonical_string<T: Serialize + ?Sized>(value: &T) -> serde_json::Result<String> {
    let tree = serde_json::to_value(value)?;
    serde_json::to_string(&tree)
}

/// Canonicalizes an already-parsed JSON value.
pub fn canonicalize_value(value: &serde_json::Value) -> String {
    // Value's Display is the compact serializer over sorted maps.
    value.to_string()
}

/// Lowercase hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keys_are_sorted_and_compact() {
        let v: serde_json::Value = serde_json::from_str(r#"{ "b": 1, "a": {"z": [1, 2], "y": null} }"#).unwrap();
        assert_eq!(canonicalize_value(&v), r#"{"a":{"y":null,"z":[1,2]},"b":1}"#);
    }

    #[test]
    fn sha256_known_vector() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
