//! Small shared helpers.

use serde::Serialize;

/// Serializes to JSON with object keys sorted, so equal values always
/// produce equal bytes.
pub fn canonical_json<T: Serialize>(value: &T) -> serde_json::Result<String> {
    let value = serde_json::to_value(value)?;
    serde_json::to_string(&value)
}

/// Pretty variant of [`canonical_json`] for files meant to be read.
pub fn canonical_json_pretty<T: Serialize>(value: &T) -> serde_json::Result<String> {
    let value = serde_json::to_value(value)?;
    serde_json::to_string_pretty(&value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    #[test]
    fn object_keys_are_sorted() {
        let mut map = HashMap::new();
        map.insert("zebra", 1);
        map.insert("alpha", 2);
        map.insert("mid", 3);
        assert_eq!(
            canonical_json(&map).unwrap(),
            r#"{"alpha":2,"mid":3,"zebra":1}"#
        );
    }
}
