//! Flat `key = value` run configuration: defaults, then the config file,
//! then command-line flags.

use std::path::Path;

use serde::de::DeserializeOwned;
use toml::{Table, Value};

use crate::error::{CliError, CliResult};

pub fn load_file(path: Option<&Path>) -> CliResult<Table> {
    let Some(path) = path else {
        return Ok(Table::new());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let table: Table = text.parse()?;
    if let Some((k, _)) = table.iter().find(|(_, v)| v.is_table()) {
        return Err(CliError::Config(format!(
            "config must be flat key = value pairs; {k:?} is a section"
        )));
    }
    Ok(table)
}

/// Collects flag values that were actually given.
#[derive(Debug, Default)]
pub struct Overrides(Table);

impl Overrides {
    pub fn set(&mut self, key: &str, value: Option<impl Into<Value>>) -> &mut Self {
        if let Some(v) = value {
            self.0.insert(key.to_string(), v.into());
        }
        self
    }

    pub fn set_list<T: Into<Value>>(&mut self, key: &str, value: Option<Vec<T>>) -> &mut Self {
        if let Some(v) = value {
            self.0.insert(
                key.to_string(),
                Value::Array(v.into_iter().map(Into::into).collect()),
            );
        }
        self
    }
}

/// Merges `file` and `flags` (flags win) and deserializes the result.
/// Settings types use `deny_unknown_fields`, so stray keys are errors.
pub fn resolve<T: DeserializeOwned>(mut file: Table, flags: Overrides) -> CliResult<T> {
    file.extend(flags.0);
    Ok(T::deserialize(Value::Table(file))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Deserialize, PartialEq)]
    #[serde(deny_unknown_fields, default)]
    struct Demo {
        a: u32,
        b: f64,
    }

    impl Default for Demo {
        fn default() -> Self {
            Self { a: 1, b: 0.5 }
        }
    }

    #[test]
    fn flags_override_file() {
        let file: Table = "a = 3\nb = 2.0".parse().unwrap();
        let mut flags = Overrides::default();
        flags.set("a", Some(7));
        let d: Demo = resolve(file, flags).unwrap();
        assert_eq!(d, Demo { a: 7, b: 2.0 });
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let file: Table = "zzz = 3".parse().unwrap();
        assert!(resolve::<Demo>(file, Overrides::default()).is_err());
    }

    #[test]
    fn sections_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "[x]\na = 1\n").unwrap();
        assert!(load_file(Some(&p)).is_err());
    }
}
