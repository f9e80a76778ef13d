//! `key=value` sidecar files written next to containers (`<file>.meta`).

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Ordered key/value pairs. Keys keep insertion order so files are diff-stable.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Sidecar {
    entries: Vec<(String, String)>,
}

impl Sidecar {
    pub fn new() -> Self {
        Self::default()
    }

    /// Sets `key`, replacing an existing value in place.
    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) -> &mut Self {
        let key = key.into();
        debug_assert!(!key.contains('=') && !key.contains('\n'));
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| *k == key) {
            Some(slot) => slot.1 = value,
            None => self.entries.push((key, value)),
        }
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            s.push_str(k);
            s.push('=');
            s.push_str(v);
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        let mut out = Sidecar::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: missing `=`", lineno + 1))?;
            if k.is_empty() {
                return Err(format!("line {}: empty key", lineno + 1));
            }
            out.set(k, v);
        }
        Ok(out)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Sidecar::parse(&text).map_err(|reason| Error::Metadata {
            path: path.to_path_buf(),
            reason,
        })
    }

    /// Parses a required key, reporting missing or malformed values against `path`.
    pub fn require<T: std::str::FromStr>(&self, key: &str, path: &Path) -> Result<T> {
        let raw = self.get(key).ok_or_else(|| Error::Metadata {
            path: path.to_path_buf(),
            reason: format!("missing key `{key}`"),
        })?;
        raw.parse().map_err(|_| Error::Metadata {
            path: path.to_path_buf(),
            reason: format!("cannot parse `{key}={raw}`"),
        })
    }
}

/// `model.epmc` -> `model.epmc.meta`
pub fn sidecar_path(path: impl AsRef<Path>) -> PathBuf {
    let mut s = path.as_ref().as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}
