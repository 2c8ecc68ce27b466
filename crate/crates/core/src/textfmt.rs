//! Text output helpers: 17-significant-digit floats and a TOML emitter that
//! writes every float at that precision.

use serde::Serialize;
use toml::{Table, Value};

use crate::error::{Error, Result};

/// Formats `x` with 17 significant digits, which round-trips every `f64`.
pub fn fmt17(x: f64) -> String {
    if x.is_nan() {
        "nan".to_string()
    } else if x.is_infinite() {
        if x > 0.0 { "inf" } else { "-inf" }.to_string()
    } else {
        format!("{x:.16e}")
    }
}

/// Serializes `value` to TOML, with floats written by [`fmt17`].
pub fn to_toml_string<T: Serialize>(value: &T) -> Result<String> {
    let value = Value::try_from(value).map_err(|e| Error::Format(e.to_string()))?;
    let Value::Table(table) = value else {
        return Err(Error::Format("top-level value must be a table".into()));
    };
    let mut out = String::new();
    emit_table(&mut out, &table, &mut Vec::new());
    Ok(out)
}

fn emit_table(out: &mut String, table: &Table, path: &mut Vec<String>) {
    for (key, value) in table {
        if !matches!(value, Value::Table(_)) {
            out.push_str(&format!("{} = {}\n", fmt_key(key), fmt_value(value)));
        }
    }
    for (key, value) in table {
        if let Value::Table(sub) = value {
            path.push(fmt_key(key));
            out.push_str(&format!("\n[{}]\n", path.join(".")));
            emit_table(out, sub, path);
            path.pop();
        }
    }
}

fn fmt_key(key: &str) -> String {
    if !key.is_empty() && key.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
        key.to_string()
    } else {
        Value::String(key.to_string()).to_string()
    }
}

fn fmt_value(value: &Value) -> String {
    match value {
        Value::Float(x) => fmt17(*x),
        Value::Array(items) => {
            let inner: Vec<String> = items.iter().map(fmt_value).collect();
            format!("[{}]", inner.join(", "))
        }
        Value::Table(t) => {
            let inner: Vec<String> = t.iter().map(|(k, v)| format!("{} = {}", fmt_key(k), fmt_value(v))).collect();
            format!("{{ {} }}", inner.join(", "))
        }
        other => other.to_string(),
    }
}

/// Recursively overlays `patch` onto `base`. Nested tables merge key by key.
pub fn merge_tables(base: &mut Table, patch: Table) {
    for (key, value) in patch {
        match (base.get_mut(&key), value) {
            (Some(Value::Table(b)), Value::Table(p)) => merge_tables(b, p),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}
