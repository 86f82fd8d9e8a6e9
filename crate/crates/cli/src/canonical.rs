//! Canonical JSON: sorted object keys, two-space indentation, integers as
//! integers and every float in `d.dddddddddddddddde±x` form (17 significant
//! digits, enough to round-trip any f64).

use std::fmt::Write;

use serde::Serialize;
use serde_json::{Number, Value};

use crate::error::{CliError, CliResult};

pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn write_number(n: &Number, out: &mut String) {
    if let Some(u) = n.as_u64() {
        write!(out, "{u}").unwrap();
    } else if let Some(i) = n.as_i64() {
        write!(out, "{i}").unwrap();
    } else {
        out.push_str(&format_f64(n.as_f64().expect("serde_json numbers are u64, i64 or f64")));
    }
}

fn write_value(v: &Value, depth: usize, out: &mut String) {
    let pad = |d: usize, out: &mut String| out.extend(std::iter::repeat_n("  ", d));
    match v {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => write_number(n, out),
        Value::String(s) => out.push_str(&serde_json::to_string(s).expect("strings always serialize")),
        Value::Array(items) => {
            if items.is_empty() {
                out.push_str("[]");
                return;
            }
            out.push_str("[\n");
            for (i, item) in items.iter().enumerate() {
                pad(depth + 1, out);
                write_value(item, depth + 1, out);
                out.push_str(if i + 1 < items.len() { ",\n" } else { "\n" });
            }
            pad(depth, out);
            out.push(']');
        }
        Value::Object(map) => {
            if map.is_empty() {
                out.push_str("{}");
                return;
            }
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push_str("{\n");
            for (i, k) in keys.iter().enumerate() {
                pad(depth + 1, out);
                out.push_str(&serde_json::to_string(k).expect("strings always serialize"));
                out.push_str(": ");
                write_value(&map[*k], depth + 1, out);
                out.push_str(if i + 1 < keys.len() { ",\n" } else { "\n" });
            }
            pad(depth, out);
            out.push('}');
        }
    }
}

pub fn value_to_string(v: &Value) -> String {
    let mut out = String::new();
    write_value(v, 0, &mut out);
    out.push('\n');
    out
}

pub fn to_string<T: Serialize>(v: &T) -> CliResult<String> {
    let value = serde_json::to_value(v).map_err(|e| CliError::input(format!("cannot serialize: {e}")))?;
    Ok(value_to_string(&value))
}

/// Re-emits arbitrary JSON text in canonical form.
pub fn canonicalize(text: &str) -> CliResult<String> {
    let value: Value = serde_json::from_str(text).map_err(|e| CliError::input(format!("invalid JSON: {e}")))?;
    Ok(value_to_string(&value))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keys_sorted_and_floats_fixed() {
        let s = canonicalize(r#"{"b": 0.1, "a": [1, -2, 2.5e-300], "c": {}}"#).unwrap();
        assert_eq!(
            s,
            "{\n  \"a\": [\n    1,\n    -2,\n    2.5000000000000000e-300\n  ],\n  \"b\": 1.0000000000000001e-1,\n  \"c\": {}\n}\n"
        );
    }

    #[test]
    fn floats_round_trip() {
        for v in [0.1, 1.0 / 3.0, -1e-310, 6.02214076e23, f64::MAX, 1.0] {
            assert_eq!(format_f64(v).parse::<f64>().unwrap().to_bits(), v.to_bits());
        }
    }

    #[test]
    fn canonical_is_a_fixed_point() {
        let once = canonicalize(r#"{"z": [true, null, "x"], "y": 3.25}"#).unwrap();
        assert_eq!(canonicalize(&once).unwrap(), once);
    }
}
