use alloc::string::String;

use serde::Serialize;
use sha2::{Digest, Sha256};

/// Serializes `value` as compact JSON with object keys in sorted order.
///
/// Going through `serde_json::Value` sorts keys because its map is a
/// `BTreeMap` (the `preserve_order` feature must stay disabled workspace-wide).
pub fn canonical_json<T: Serialize + ?Sized>(value: &T) -> String {
    let tree = serde_json::to_value(value).expect("value serializes to JSON");
    serde_json::to_string(&tree).expect("JSON tree serializes")
}

/// Lowercase hex SHA-256 digest.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn keys_are_sorted_without_whitespace() {
        let v = json!({"b": 1, "a": {"z": [1, 2], "c": "x"}});
        assert_eq!(canonical_json(&v), r#"{"a":{"c":"x","z":[1,2]},"b":1}"#);
    }

    #[test]
    fn sha256_of_empty_input() {
        assert_eq!(
            sha256_hex(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }
}
