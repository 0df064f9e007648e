//! Flat `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Keys are normalized
//! so that `clip-norm` and `clip_norm` name the same setting.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use anyhow::{bail, Context, Result};

#[derive(Debug, Default, Clone, PartialEq)]
pub struct FlatConfig {
    values: BTreeMap<String, (usize, String)>,
    path: String,
}

fn normalize(key: &str) -> String {
    key.trim().replace('-', "_").to_ascii_lowercase()
}

impl FlatConfig {
    pub fn parse(text: &str, path: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                bail!("{path}:{}: expected `key = value`, got `{line}`", i + 1);
            };
            let key = normalize(k);
            if key.is_empty() {
                bail!("{path}:{}: empty key", i + 1);
            }
            if values
                .insert(key.clone(), (i + 1, v.trim().to_string()))
                .is_some()
            {
                bail!("{path}:{}: duplicate key `{key}`", i + 1);
            }
        }
        Ok(FlatConfig {
            values,
            path: path.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Parsed value of `key`, if present.
    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.values.get(key) {
            None => Ok(None),
            Some((line, v)) => v.parse().map(Some).map_err(|e| {
                anyhow::anyhow!("{}:{line}: bad value `{v}` for `{key}`: {e}", self.path)
            }),
        }
    }

    /// Fail on keys outside `known`, so typos do not pass silently.
    pub fn reject_unknown(&self, known: &[&str]) -> Result<()> {
        for (k, (line, _)) in &self.values {
            if !known.contains(&k.as_str()) {
                bail!(
                    "{}:{line}: unknown key `{k}` (known: {})",
                    self.path,
                    known.join(", ")
                );
            }
        }
        Ok(())
    }
}
