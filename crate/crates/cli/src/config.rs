//! `key = value` run configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Keys are consumed
//! by the command that runs; any key left over is rejected so typos do not
//! pass silently.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use anyhow::{bail, Context, Result};

#[derive(Debug, Default)]
pub struct FileConfig {
    values: BTreeMap<String, (usize, String)>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                bail!("line {}: expected key = value, got {line:?}", i + 1);
            };
            let key = key.trim().to_string();
            if key.is_empty() {
                bail!("line {}: empty key", i + 1);
            }
            if values
                .insert(key.clone(), (i + 1, value.trim().to_string()))
                .is_some()
            {
                bail!("line {}: duplicate key {key:?}", i + 1);
            }
        }
        Ok(Self { values })
    }

    /// Removes and parses `key`.
    pub fn take<T>(&mut self, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        match self.values.remove(key) {
            None => Ok(None),
            Some((line, raw)) => raw.parse().map(Some).map_err(|e| {
                anyhow::anyhow!("config line {line}: bad value {raw:?} for {key}: {e}")
            }),
        }
    }

    /// Command-line value if given, else the config value, else `default`.
    pub fn resolve<T>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        let from_file = self.take(key)?;
        Ok(flag.or(from_file).unwrap_or(default))
    }

    /// Like [`resolve`](Self::resolve) for on/off switches: the flag can
    /// only turn the switch on.
    pub fn switch(&mut self, key: &str, flag: bool) -> Result<bool> {
        Ok(flag || self.take(key)?.unwrap_or(false))
    }

    pub fn finish(self, command: &str) -> Result<()> {
        if let Some((key, (line, _))) = self.values.into_iter().next() {
            bail!("config line {line}: key {key:?} is not used by {command}");
        }
        Ok(())
    }
}
