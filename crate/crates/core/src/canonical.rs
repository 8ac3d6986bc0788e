//! Canonical JSON rendering.
//!
//! Hashes over JSON payloads must be identical on every endorsing node, so
//! JSON is reduced to a canonical byte form before hashing or storage:
//! object keys sorted lexicographically by UTF-8 bytes, no insignificant
//! whitespace, number literals preserved as written in the source document.

use serde_json::Value;

/// Render a JSON value in canonical form.
pub fn to_canonical_string(value: &Value) -> String {
    let mut out = String::new();
    write_value(value, &mut out);
    out
}

pub fn to_canonical_bytes(value: &Value) -> Vec<u8> {
    to_canonical_string(value).into_bytes()
}

/// Parse a JSON document and re-render it canonically.
pub fn canonicalize_text(text: &str) -> Result<String, serde_json::Error> {
    let value: Value = serde_json::from_str(text)?;
    Ok(to_canonical_string(&value))
}

fn write_value(value: &Value, out: &mut String) {
    match value {
        Value::Null => out.push_str("null"),
        Value::Bool(true) => out.push_str("true"),
        Value::Bool(false) => out.push_str("false"),
        // With arbitrary precision enabled the literal text survives parsing.
        Value::Number(n) => out.push_str(&n.to_string()),
        Value::String(s) => {
            out.push_str(&serde_json::to_string(s).expect("string serialization is infallible"))
        }
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_value(item, out);
            }
            out.push(']');
        }
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort_unstable();
            out.push('{');
            for (i, key) in keys.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&serde_json::to_string(key).expect("string serialization is infallible"));
                out.push(':');
                write_value(&map[*key], out);
            }
            out.push('}');
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn sorts_keys_and_strips_whitespace() {
        let c = canonicalize_text("{\"b\": 1, \"a\": {\"z\": true, \"y\": null}}").unwrap();
        assert_eq!(c, "{\"a\":{\"y\":null,\"z\":true},\"b\":1}");
    }

    #[test]
    fn preserves_number_literals() {
        // Decimal literals keep their exact text; 12.50 stays distinct from
        // 12.5 and 12. Exponents get a normalized sign, deterministically.
        let c = canonicalize_text("{\"x\": 12.50, \"y\": 1e3}").unwrap();
        assert_eq!(c, "{\"x\":12.50,\"y\":1e+3}");
        let again = canonicalize_text(&c).unwrap();
        assert_eq!(c, again);
    }

    #[test]
    fn escapes_strings() {
        let c = to_canonical_string(&json!({"k": "a\"b\n"}));
        assert_eq!(c, "{\"k\":\"a\\\"b\\n\"}");
    }

    #[test]
    fn canonical_form_is_stable() {
        let text = "{\"rules\":{\"user.status\":{\"comparison\":\"boolAnd\"}},\"policyID\":\"p\"}";
        let once = canonicalize_text(text).unwrap();
        let twice = canonicalize_text(&once).unwrap();
        assert_eq!(once, twice);
    }
}
