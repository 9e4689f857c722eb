//! TOML config files with dotted `key=value` overrides.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use toml::{Table, Value};

use crate::error::CliError;

/// Parses `path` (if any), applies `overrides` in order, then deserializes.
///
/// Unknown keys are rejected by the target type.
pub fn load<C: DeserializeOwned>(path: Option<&Path>, overrides: &[String]) -> Result<C, CliError> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            toml::from_str::<Table>(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => Table::new(),
    };
    for item in overrides {
        apply_override(&mut table, item)?;
    }
    Value::Table(table).try_into().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))
}

/// Sets one dotted key. The value is read as a TOML literal when it parses
/// as one and as a bare string otherwise.
pub fn apply_override(table: &mut Table, item: &str) -> Result<(), CliError> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override '{item}' is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("bad override key '{key}'")));
    }
    let value = parse_value(raw.trim());
    let (last, parents) = path.split_last().expect("nonempty path");
    let mut cur = table;
    for p in parents {
        let next = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = match next {
            Value::Table(t) => t,
            _ => return Err(CliError::Config(format!("override '{key}': '{p}' is not a table"))),
        };
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Resolved configuration as TOML, stored next to outputs.
pub fn to_toml<C: Serialize>(config: &C) -> String {
    toml::to_string_pretty(config).expect("config serializes")
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Default, Deserialize, PartialEq)]
    #[serde(default, deny_unknown_fields)]
    struct Inner {
        flag: bool,
        name: String,
    }

    #[derive(Debug, Default, Deserialize, PartialEq)]
    #[serde(default, deny_unknown_fields)]
    struct Outer {
        epochs: usize,
        rate: f64,
        inner: Inner,
        list: Vec<usize>,
    }

    fn over(items: &[&str]) -> Result<Outer, CliError> {
        load(None, &items.iter().map(|s| s.to_string()).collect::<Vec<_>>())
    }

    #[test]
    fn overrides_reach_nested_keys() {
        let c = over(&["epochs=2", "rate=3e-4", "inner.flag=true", "inner.name=seq", "list=[1, 2]"]).unwrap();
        assert_eq!(c, Outer { epochs: 2, rate: 3e-4, inner: Inner { flag: true, name: "seq".into() }, list: vec![1, 2] });
    }

    #[test]
    fn later_overrides_win_and_files_come_first() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "epochs = 5\n[inner]\nname = \"a\"\n").unwrap();
        let c: Outer = load(Some(&p), &["epochs=7".into(), "epochs=9".into()]).unwrap();
        assert_eq!((c.epochs, c.inner.name.as_str()), (9, "a"));
    }

    #[test]
    fn unknown_and_malformed_keys_are_rejected() {
        assert!(matches!(over(&["epoch=2"]), Err(CliError::Config(_))));
        assert!(matches!(over(&["inner.nope=1"]), Err(CliError::Config(_))));
        assert!(matches!(over(&["epochs"]), Err(CliError::Config(_))));
        assert!(matches!(over(&["epochs=1", "epochs.x=1"]), Err(CliError::Config(_))));
        assert!(matches!(over(&["a..b=1"]), Err(CliError::Config(_))));
    }
}
