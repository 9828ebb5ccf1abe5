//! Flat `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Keys may appear once.
//! Every key must be consumed by the reader; leftovers are reported as unknown.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{bail, Error, Result};

/// Parses `key = value` lines into a map.
pub fn parse_pairs(text: &str) -> std::result::Result<BTreeMap<String, String>, String> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(format!("line {}: expected 'key = value'", i + 1));
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(format!("line {}: empty key", i + 1));
        }
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(format!("line {}: key '{}' repeated", i + 1, k));
        }
    }
    Ok(out)
}

/// Parsed configuration consumed key by key.
#[derive(Clone, Debug, Default)]
pub struct Config {
    entries: BTreeMap<String, String>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        parse_pairs(text).map(|entries| Config { entries }).map_err(Error::Config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, String)>) -> Self {
        Config { entries: pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect() }
    }

    /// Sets `key` unless already present.
    pub fn set_default(&mut self, key: &str, value: impl ToString) {
        self.entries.entry(key.to_string()).or_insert_with(|| value.to_string());
    }

    /// Overrides `key`.
    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn take_str(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key)
    }

    pub fn require_str(&mut self, key: &str) -> Result<String> {
        match self.take_str(key) {
            Some(v) => Ok(v),
            None => bail!(Config, "missing required key '{}'", key),
        }
    }

    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.entries.remove(key) {
            None => Ok(None),
            Some(v) => match v.parse() {
                Ok(x) => Ok(Some(x)),
                Err(_) => bail!(Config, "key '{}': cannot parse '{}' as {}", key, v, std::any::type_name::<T>()),
            },
        }
    }

    pub fn take_or<T: FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        Ok(self.take(key)?.unwrap_or(default))
    }

    pub fn require<T: FromStr>(&mut self, key: &str) -> Result<T> {
        match self.take(key)? {
            Some(v) => Ok(v),
            None => bail!(Config, "missing required key '{}'", key),
        }
    }

    /// Fails on any key that was never read.
    pub fn finish(self) -> Result<()> {
        if let Some(k) = self.entries.keys().next() {
            let all: Vec<&String> = self.entries.keys().collect();
            bail!(Config, "unknown key{} {:?} (first: '{}')", if all.len() > 1 { "s" } else { "" }, all, k);
        }
        Ok(())
    }
}
