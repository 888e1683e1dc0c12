//! Flat `key = value` configuration text: the format used by run manifests
//! and checkpoint headers. Typed readers reject unknown keys so a manifest
//! can only mean one thing; serialization is canonical (sorted keys) so
//! identical configs produce identical bytes.

use crate::error::{Error, Result};
use std::collections::BTreeMap;
use std::fmt::Write as _;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvConfig {
    entries: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected `key = value`, got `{raw}`", lineno + 1)));
            };
            let key = k.trim().to_string();
            if entries.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(Error::Config(format!("duplicate key `{key}`")));
            }
        }
        Ok(KvConfig { entries })
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key).ok_or_else(|| Error::Config(format!("missing key `{key}`")))
    }

    pub fn parse_value<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.require(key)?;
        raw.parse()
            .map_err(|_| Error::Config(format!("key `{key}`: cannot parse `{raw}` as {}", std::any::type_name::<T>())))
    }

    pub fn parse_or<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.get(key) {
            None => Ok(default),
            Some(raw) => raw.parse().map_err(|_| {
                Error::Config(format!("key `{key}`: cannot parse `{raw}` as {}", std::any::type_name::<T>()))
            }),
        }
    }

    /// Fail on any key outside the accepted set. Typed readers call this
    /// after pulling their fields so typos surface instead of silently
    /// falling back to defaults.
    pub fn reject_unknown(&self, accepted: &[&str]) -> Result<()> {
        for k in self.entries.keys() {
            if !accepted.contains(&k.as_str()) {
                return Err(Error::Config(format!("unknown key `{k}`")));
            }
        }
        Ok(())
    }

    /// Canonical serialization: sorted keys, `key = value` lines.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}
