//! Run configuration: a TOML file of parameters for the chosen command, with
//! `--set key=value` overrides merged on top. Defaults live in the typed
//! parameter structs of the core crate; unknown keys are rejected there.

use std::path::Path;

use bbm_core::harness::Params;
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::Fail;

pub fn load(path: Option<&Path>, sets: &[String]) -> Result<Params, Fail> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Fail::Config(format!("cannot read config {}: {e}", p.display())))?;
            text.parse::<Table>().map_err(|e| Fail::Config(format!("{}: {e}", p.display())))?
        }
        None => Table::new(),
    };
    for s in sets {
        merge(&mut table, parse_set(s)?);
    }
    let json = serde_json::to_value(&table).map_err(|e| Fail::Config(e.to_string()))?;
    match json {
        serde_json::Value::Object(m) => Ok(m.into_iter().collect()),
        _ => unreachable!("a TOML table serializes to an object"),
    }
}

/// `key=value`, where `value` is a TOML value or else a bare string.
/// Dotted keys address nested tables.
fn parse_set(s: &str) -> Result<Table, Fail> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Fail::Config(format!("--set expects key=value, got {s:?}")))?;
    let (k, v) = (k.trim(), v.trim());
    if k.is_empty() {
        return Err(Fail::Config(format!("--set has an empty key: {s:?}")));
    }
    format!("{k} = {v}")
        .parse::<Table>()
        .or_else(|_| format!("{k} = {}", Value::String(v.to_string())).parse::<Table>())
        .map_err(|e| Fail::Config(format!("--set {s:?}: {e}")))
}

fn merge(into: &mut Table, from: Table) {
    for (k, v) in from {
        match (into.get_mut(&k), v) {
            (Some(Value::Table(a)), Value::Table(b)) => merge(a, b),
            (_, v) => {
                into.insert(k, v);
            }
        }
    }
}

/// Hex SHA-256 of the canonical JSON form of `params` (keys sorted).
pub fn hash(params: &Params) -> String {
    let canon = serde_json::to_string(params).expect("params serialize");
    Sha256::digest(canon.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}
