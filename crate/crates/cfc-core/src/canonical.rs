//! Canonical text format.
//!
//! Structured values render as compact JSON with lexicographically sorted
//! keys, shortest round-trip number rendering, and base64url byte fields.
//! Digests of structured values are SHA-256 over exactly these bytes, so
//! the rules here are normative: two semantically identical values must
//! produce identical bytes.

use serde::Serialize;
use serde_json::Value;
use thiserror::Error;

use crate::crypto::Digest32;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CanonicalError {
    #[error("value does not serialize: {0}")]
    Serialize(String),
    #[error("value is not canonically representable: {0}")]
    NonCanonical(&'static str),
}

/// Canonical bytes of a serializable value.
///
/// Key sorting comes from routing through `serde_json::Value`, whose map is
/// ordered; numbers render via the shortest representation that round-trips.
pub fn to_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>, CanonicalError> {
    let tree = serde_json::to_value(value).map_err(|e| CanonicalError::Serialize(e.to_string()))?;
    reject_nulls(&tree)?;
    serde_json::to_vec(&tree).map_err(|e| CanonicalError::Serialize(e.to_string()))
}

pub fn to_string<T: Serialize>(value: &T) -> Result<String, CanonicalError> {
    let bytes = to_bytes(value)?;
    String::from_utf8(bytes).map_err(|_| CanonicalError::NonCanonical("non-UTF-8 output"))
}

/// SHA-256 of the canonical bytes.
pub fn digest<T: Serialize>(value: &T) -> Result<Digest32, CanonicalError> {
    Ok(Digest32::of(&to_bytes(value)?))
}

// serde_json silently maps non-finite floats to null, which would let two
// different inputs share canonical bytes. The wire types in this crate never
// serialize nulls (options are skipped when absent), so any null here is a
// smuggled NaN/infinity and is rejected.
fn reject_nulls(value: &Value) -> Result<(), CanonicalError> {
    match value {
        Value::Null => Err(CanonicalError::NonCanonical("null (non-finite number?)")),
        Value::Array(items) => items.iter().try_for_each(reject_nulls),
        Value::Object(map) => map.values().try_for_each(reject_nulls),
        _ => Ok(()),
    }
}
