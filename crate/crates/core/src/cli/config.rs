//! `key = value` run configuration merged with command-line flags.

use std::fmt::Display;
use std::str::FromStr;

/// One recognised configuration key. Keys share their spelling with the
/// corresponding `--flag`.
#[derive(Debug, Clone, Copy)]
pub struct KeySpec {
    pub name: &'static str,
    /// `None` marks a required key.
    pub default: Option<&'static str>,
    pub help: &'static str,
}

impl KeySpec {
    pub const fn required(name: &'static str, help: &'static str) -> Self {
        Self { name, default: None, help }
    }

    pub const fn with_default(name: &'static str, default: &'static str, help: &'static str) -> Self {
        Self { name, default: Some(default), help }
    }
}

/// Parses config text: one `key = value` per line, `#` starts a comment.
/// Duplicate keys are an error.
pub fn parse_config(text: &str) -> Result<Vec<(String, String)>, String> {
    let mut pairs: Vec<(String, String)> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected `key = value`, found `{line}`", n + 1))?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() {
            return Err(format!("line {}: empty key", n + 1));
        }
        if pairs.iter().any(|(k, _)| k == key) {
            return Err(format!("line {}: duplicate key `{key}`", n + 1));
        }
        pairs.push((key.to_string(), value.to_string()));
    }
    Ok(pairs)
}

/// A fully resolved configuration: every key of the table has a value.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    command: &'static str,
    values: Vec<(&'static str, String)>,
}

impl RunConfig {
    /// Merges `file` pairs with `flags` (flags win) and fills defaults.
    /// Unknown keys and missing required keys are errors.
    pub fn merge(
        command: &'static str,
        keys: &[KeySpec],
        file: &[(String, String)],
        flags: &[(&'static str, String)],
    ) -> Result<Self, String> {
        if let Some((k, _)) = file.iter().find(|(k, _)| !keys.iter().any(|s| s.name == k)) {
            return Err(format!("unknown config key `{k}` for {command}"));
        }
        let mut values = Vec::with_capacity(keys.len());
        for spec in keys {
            let value = flags
                .iter()
                .find(|(k, _)| *k == spec.name)
                .map(|(_, v)| v.clone())
                .or_else(|| file.iter().find(|(k, _)| k == spec.name).map(|(_, v)| v.clone()))
                .or_else(|| spec.default.map(str::to_string))
                .ok_or_else(|| format!("missing required key `{}` (flag --{0} or config)", spec.name))?;
            values.push((spec.name, value));
        }
        Ok(Self { command, values })
    }

    pub fn command(&self) -> &'static str {
        self.command
    }

    pub fn get(&self, key: &str) -> &str {
        self.values
            .iter()
            .find(|(k, _)| *k == key)
            .map(|(_, v)| v.as_str())
            .unwrap_or_else(|| panic!("key `{key}` is not in the {} table", self.command))
    }

    pub fn parse<T>(&self, key: &str) -> Result<T, String>
    where
        T: FromStr,
        T::Err: Display,
    {
        let raw = self.get(key);
        raw.parse().map_err(|e| format!("invalid value `{raw}` for `{key}`: {e}"))
    }

    /// Comma-separated list.
    pub fn parse_list<T>(&self, key: &str) -> Result<Vec<T>, String>
    where
        T: FromStr,
        T::Err: Display,
    {
        let raw = self.get(key);
        raw.split(',')
            .map(|s| s.trim())
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|e| format!("invalid entry `{s}` in `{key}`: {e}")))
            .collect()
    }

    /// The config as text that [`parse_config`] reads back to the same values.
    pub fn render(&self) -> String {
        let mut out = format!("# resolved configuration for {}\n", self.command);
        for (k, v) in &self.values {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }
}
