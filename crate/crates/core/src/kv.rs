//! Plain `key = value` files with `#` comments.

use std::collections::BTreeMap;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum KvError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("line {line}: invalid value for {key}: {message}")]
    Value { line: usize, key: String, message: String },
    #[error("missing required key {0:?}")]
    Missing(String),
    #[error("line {line}: unknown key {key:?}")]
    Unknown { line: usize, key: String },
}

/// Parsed entries. Keys are consumed with `take*`; [`KvFile::finish`]
/// rejects whatever was not consumed.
#[derive(Clone, Debug, Default)]
pub struct KvFile {
    entries: BTreeMap<String, (usize, String)>,
}

impl KvFile {
    pub fn parse(text: &str) -> Result<Self, KvError> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = n + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (k, v) = body.split_once('=').ok_or_else(|| KvError::Syntax {
                line,
                message: format!("expected key = value, found {body:?}"),
            })?;
            let key = k.trim().to_string();
            if key.is_empty() {
                return Err(KvError::Syntax {
                    line,
                    message: "empty key".into(),
                });
            }
            if entries.insert(key.clone(), (line, v.trim().to_string())).is_some() {
                return Err(KvError::Syntax {
                    line,
                    message: format!("duplicate key {key:?}"),
                });
            }
        }
        Ok(Self { entries })
    }

    pub fn take_str(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key).map(|(_, v)| v)
    }

    pub fn require_str(&mut self, key: &str) -> Result<String, KvError> {
        self.take_str(key).ok_or_else(|| KvError::Missing(key.to_string()))
    }

    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>, KvError>
    where
        T::Err: std::fmt::Display,
    {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((line, v)) => v.parse().map(Some).map_err(|e: T::Err| KvError::Value {
                line,
                key: key.to_string(),
                message: e.to_string(),
            }),
        }
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.entries.keys().any(|k| k.starts_with(prefix))
    }

    /// Fails on the first key that was never taken.
    pub fn finish(self) -> Result<(), KvError> {
        match self.entries.into_iter().min_by_key(|(_, (line, _))| *line) {
            Some((key, (line, _))) => Err(KvError::Unknown { line, key }),
            None => Ok(()),
        }
    }
}
