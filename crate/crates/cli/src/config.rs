//! `key = value` run files.
//!
//! One setting per line, keys are the long flag names without the leading
//! dashes, `#` starts a comment. Flags on the command line win over the file.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::CliError;

#[derive(Debug, Default)]
pub struct Config {
    entries: BTreeMap<String, (String, usize)>,
    source: String,
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::input(format!("cannot read config file {}: {e}", path.display())))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn parse(text: &str, source: &str) -> Result<Self, CliError> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::input(format!("{source}:{}: expected key = value, got {line:?}", i + 1))
            })?;
            let key = key.trim().trim_start_matches("--").to_string();
            if entries.insert(key.clone(), (value.trim().to_string(), i + 1)).is_some() {
                return Err(CliError::input(format!("{source}:{}: duplicate key {key:?}", i + 1)));
            }
        }
        Ok(Self {
            entries,
            source: source.to_string(),
        })
    }

    /// Rejects keys the current command does not understand.
    pub fn check_keys(&self, allowed: &[&str]) -> Result<(), CliError> {
        for (key, (_, line)) in &self.entries {
            if !allowed.contains(&key.as_str()) {
                return Err(CliError::input(format!(
                    "{}:{line}: unknown key {key:?} for this command (accepted: {})",
                    self.source,
                    allowed.join(", ")
                )));
            }
        }
        Ok(())
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        match self.entries.get(key) {
            None => Ok(None),
            Some((v, line)) => v.parse().map(Some).map_err(|e| {
                CliError::input(format!("{}:{line}: bad value {v:?} for {key}: {e}", self.source))
            }),
        }
    }

    /// The flag value if given, else the file value.
    pub fn pick<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        match flag {
            Some(v) => Ok(Some(v)),
            None => self.get(key),
        }
    }

    pub fn pick_or<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.pick(flag, key)?.unwrap_or(default))
    }
}
