//! `key = value` text configuration.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Parsed `key = value` pairs. Keys are consumed by the typed getters;
/// [`KvMap::finish`] rejects whatever is left over.
#[derive(Clone, Debug, Default)]
pub struct KvMap {
    source: String,
    entries: BTreeMap<String, (usize, String)>,
}

impl KvMap {
    pub fn parse(source: &str, text: &str) -> Result<Self> {
        let mut map = KvMap {
            source: source.to_string(),
            entries: BTreeMap::new(),
        };
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            map.insert_line(line, i + 1)?;
        }
        Ok(map)
    }

    fn insert_line(&mut self, line: &str, lineno: usize) -> Result<()> {
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: self.source.clone(),
            line: lineno,
            message: format!("expected key=value, got {line:?}"),
        })?;
        let key = k.trim();
        if key.is_empty() {
            return Err(Error::Parse {
                path: self.source.clone(),
                line: lineno,
                message: "empty key".into(),
            });
        }
        self.entries
            .insert(key.to_string(), (lineno, v.trim().to_string()));
        Ok(())
    }

    /// Applies a `key=value` override; later values replace earlier ones.
    pub fn set_override(&mut self, assignment: &str) -> Result<()> {
        self.insert_line(assignment.trim(), 0)
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.entries
            .insert(key.to_string(), (0, value.to_string()));
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn take_str(&mut self, key: &str) -> Option<(usize, String)> {
        self.entries.remove(key)
    }

    pub fn take<T>(&mut self, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((line, v)) => v.parse().map(Some).map_err(|e| Error::Parse {
                path: self.source.clone(),
                line,
                message: format!("{key}: {e}"),
            }),
        }
    }

    pub fn take_or<T>(&mut self, key: &str, default: T) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        Ok(self.take(key)?.unwrap_or(default))
    }

    pub fn error(&self, line: usize, message: impl Into<String>) -> Error {
        Error::Parse {
            path: self.source.clone(),
            line,
            message: message.into(),
        }
    }

    /// Fails on any key not consumed so far.
    pub fn finish(self) -> Result<()> {
        match self.entries.into_iter().next() {
            None => Ok(()),
            Some((k, (line, _))) => Err(Error::Parse {
                path: self.source,
                line,
                message: format!("unknown key {k:?}"),
            }),
        }
    }

    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|(k, (_, v))| format!("{k}={v}\n"))
            .collect()
    }
}
