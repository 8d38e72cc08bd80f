//! `key=value` configuration text.
//!
//! One entry per line; blank lines and lines starting with `#` are ignored.
//! Keys are dotted paths (`aggregation.strategy`). Serialization sorts keys,
//! so equal maps always produce identical bytes.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ConfigError {
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("invalid value '{value}' for key '{key}': {reason}")]
    InvalidValue { key: String, value: String, reason: String },
    #[error("missing key '{0}'")]
    MissingKey(String),
    #[error("unknown key '{0}'")]
    UnknownKey(String),
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let malformed = |reason: &str| ConfigError::Malformed {
                line: i + 1,
                reason: reason.to_string(),
            };
            let (k, v) = line.split_once('=').ok_or_else(|| malformed("expected key=value"))?;
            let key = k.trim();
            if key.is_empty() || key.chars().any(char::is_whitespace) {
                return Err(malformed("invalid key"));
            }
            if entries.insert(key.to_string(), v.trim().to_string()).is_some() {
                return Err(malformed(&format!("duplicate key '{key}'")));
            }
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    /// Values must be single-line.
    pub fn set(&mut self, key: &str, value: impl fmt::Display) {
        let v = value.to_string();
        debug_assert!(!v.contains('\n'), "multi-line value for {key}");
        self.entries.insert(key.to_string(), v);
    }

    pub fn remove(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Entries of `other` override entries here.
    pub fn merge(&mut self, other: &KeyValues) {
        for (k, v) in other.iter() {
            self.entries.insert(k.to_string(), v.to_string());
        }
    }

    pub fn parsed<V: FromStr>(&self, key: &str) -> Result<Option<V>, ConfigError>
    where
        V::Err: fmt::Display,
    {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v.parse::<V>().map(Some).map_err(|e| ConfigError::InvalidValue {
                key: key.to_string(),
                value: v.to_string(),
                reason: e.to_string(),
            }),
        }
    }

    pub fn require<V: FromStr>(&self, key: &str) -> Result<V, ConfigError>
    where
        V::Err: fmt::Display,
    {
        self.parsed(key)?.ok_or_else(|| ConfigError::MissingKey(key.to_string()))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            out.push_str(k);
            out.push('=');
            out.push_str(v);
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_serialize() {
        let kv = KeyValues::parse("# comment\n\nb = 2\na=x=y\n").unwrap();
        assert_eq!(kv.get("a"), Some("x=y"));
        assert_eq!(kv.require::<u32>("b").unwrap(), 2);
        assert_eq!(kv.to_text(), "a=x=y\nb=2\n");
        assert_eq!(KeyValues::parse(&kv.to_text()).unwrap(), kv);
    }

    #[test]
    fn errors() {
        assert!(matches!(KeyValues::parse("novalue"), Err(ConfigError::Malformed { line: 1, .. })));
        assert!(matches!(KeyValues::parse("a=1\na=2"), Err(ConfigError::Malformed { line: 2, .. })));
        assert!(matches!(KeyValues::parse("a b=1"), Err(ConfigError::Malformed { .. })));
        let kv = KeyValues::parse("n=abc").unwrap();
        assert!(matches!(kv.require::<u32>("n"), Err(ConfigError::InvalidValue { .. })));
        assert!(matches!(kv.require::<u32>("m"), Err(ConfigError::MissingKey(_))));
    }

    #[test]
    fn merge_overrides() {
        let mut a = KeyValues::parse("x=1\ny=2").unwrap();
        a.merge(&KeyValues::parse("y=3\nz=4").unwrap());
        assert_eq!(a.to_text(), "x=1\ny=3\nz=4\n");
    }
}
