//! `key=value` configuration files.
//!
//! One assignment per line; blank lines and lines starting with `#` are
//! ignored. Later assignments override earlier ones.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KeyValues {
    context: String,
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn parse(text: &str, context: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(format!("{context}:{}", n + 1), format!("expected key=value, got {line:?}")))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::parse(format!("{context}:{}", n + 1), "empty key"));
            }
            entries.insert(k.to_string(), v.trim().to_string());
        }
        Ok(Self {
            context: context.to_string(),
            entries,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?, &path.display().to_string())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Required typed value.
    pub fn get_parsed<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self
            .get(key)
            .ok_or_else(|| Error::parse(self.context.clone(), format!("missing key {key}")))?;
        raw.parse()
            .map_err(|e: T::Err| Error::parse(self.context.clone(), format!("{key}: {e}")))
    }

    /// Overwrites `*slot` if `key` is present.
    pub fn apply<T: FromStr>(&self, key: &str, slot: &mut T) -> Result<()>
    where
        T::Err: std::fmt::Display,
    {
        if self.get(key).is_some() {
            *slot = self.get_parsed(key)?;
        }
        Ok(())
    }

    /// Serialises back to `key=value` lines in key order.
    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_overrides() {
        let kv = KeyValues::parse("# c\na = 1\n\nb=x=y\na=2\n", "t").unwrap();
        assert_eq!(kv.get("a"), Some("2"));
        assert_eq!(kv.get("b"), Some("x=y"));
        assert_eq!(kv.get_parsed::<u32>("a").unwrap(), 2);
        assert!(kv.get_parsed::<u32>("b").is_err());
        assert!(kv.get_parsed::<u32>("zz").is_err());
    }

    #[test]
    fn rejects_line_without_equals() {
        assert!(KeyValues::parse("novalue\n", "t").is_err());
    }

    #[test]
    fn round_trips_text() {
        let kv = KeyValues::parse("b=2\na=1\n", "t").unwrap();
        assert_eq!(KeyValues::parse(&kv.to_text(), "t").unwrap().entries, kv.entries);
    }
}
