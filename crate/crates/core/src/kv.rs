//! Flat `key = value` text files. `#` starts a comment line; blank lines are
//! skipped; keys are unique.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

pub fn parse(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!(
                "line {}: expected key = value, got {line:?}",
                n + 1
            ))
        })?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        if out.insert(k.to_string(), v.trim().to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key {k}", n + 1)));
        }
    }
    Ok(out)
}

/// Consumes typed values from a parsed map; leftovers are reported as
/// unknown keys by [`KvReader::finish`].
#[derive(Debug, Default)]
pub struct KvReader {
    entries: BTreeMap<String, String>,
}

impl KvReader {
    pub fn new(entries: BTreeMap<String, String>) -> Self {
        KvReader { entries }
    }

    pub fn parse(text: &str) -> Result<Self> {
        Ok(KvReader::new(parse(text)?))
    }

    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        match self.entries.remove(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|e| Error::Config(format!("{key} = {v:?}: {e}"))),
        }
    }

    /// Overwrites `slot` when `key` is present.
    pub fn set<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()>
    where
        T::Err: Display,
    {
        if let Some(v) = self.take(key)? {
            *slot = v;
        }
        Ok(())
    }

    /// Comma-separated triple.
    pub fn set_triple(&mut self, key: &str, slot: &mut [f64; 3]) -> Result<()> {
        if let Some(v) = self.take::<String>(key)? {
            let parts: Vec<&str> = v.split(',').map(str::trim).collect();
            if parts.len() != 3 {
                return Err(Error::Config(format!(
                    "{key} needs three comma-separated numbers, got {v:?}"
                )));
            }
            for (s, p) in slot.iter_mut().zip(parts) {
                *s = p
                    .parse()
                    .map_err(|e| Error::Config(format!("{key} = {v:?}: {e}")))?;
            }
        }
        Ok(())
    }

    pub fn finish(self) -> Result<()> {
        match self.entries.keys().next() {
            None => Ok(()),
            Some(k) => Err(Error::Config(format!("unknown key {k}"))),
        }
    }
}

pub fn triple(v: &[f64; 3]) -> String {
    format!("{},{},{}", v[0], v[1], v[2])
}
