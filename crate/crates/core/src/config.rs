//! Flat TOML config files with `key=value` command-line overrides.

use std::path::Path;

use serde::de::DeserializeOwned;

use crate::error::{Error, Result};

/// Reads a flat TOML file (or starts empty), then applies `key=value`
/// overrides. Values are parsed as TOML literals and fall back to plain
/// strings, so `architecture=transformer` needs no quotes.
pub fn load_flat<T: DeserializeOwned>(path: Option<&Path>, overrides: &[String]) -> Result<T> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            text.parse::<toml::Table>()
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    for item in overrides {
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {item:?} is not key=value")))?;
        let value = format!("v = {raw}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        table.insert(key.trim().to_string(), value);
    }
    table.try_into().map_err(|e| Error::Config(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(serde::Deserialize, Default)]
    #[serde(default, deny_unknown_fields)]
    struct Probe {
        n: usize,
        name: String,
        rate: f64,
    }

    #[test]
    fn overrides_are_typed_with_string_fallback() {
        let p: Probe = load_flat(None, &["n=3".into(), "name=abc".into(), "rate=0.5".into()]).unwrap();
        assert_eq!((p.n, p.name.as_str(), p.rate), (3, "abc", 0.5));
    }

    #[test]
    fn file_values_are_overridden() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "n = 1\nname = \"x\"\n").unwrap();
        let p: Probe = load_flat(Some(&path), &["n=7".into()]).unwrap();
        assert_eq!((p.n, p.name.as_str()), (7, "x"));
    }

    #[test]
    fn malformed_input_is_a_config_error() {
        assert!(matches!(load_flat::<Probe>(None, &["n".into()]), Err(Error::Config(_))));
        assert!(matches!(load_flat::<Probe>(None, &["bogus=1".into()]), Err(Error::Config(_))));
        assert!(matches!(load_flat::<Probe>(None, &["n=-1".into()]), Err(Error::Config(_))));
    }
}
