//! Flat `key = value` run configuration. File values are overridden by
//! command-line flags; the resolved map is echoed next to the outputs.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use anyhow::{Context, Result};

use crate::UsageError;

pub const KEYS: &[&str] = &[
    "alpha",
    "batch",
    "classes",
    "csv",
    "csv_labels",
    "curve_stride",
    "dim",
    "embeddings",
    "epochs",
    "eta",
    "eval_each_epoch",
    "head",
    "hidden",
    "k",
    "labeled_frac",
    "lambda_ent",
    "lambda_neg",
    "lambda_pos",
    "lr",
    "max_iter",
    "mode",
    "model",
    "n",
    "neg_labeled",
    "neg_unlabeled",
    "neighbors",
    "old_frac",
    "out",
    "pos_labeled",
    "pos_unlabeled",
    "pred",
    "protocol",
    "report",
    "restarts",
    "seed",
    "sep",
    "split",
    "steps",
    "tau1",
    "tau2",
    "threads",
    "tol",
];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

fn known(key: &str) -> Result<()> {
    if KEYS.contains(&key) {
        Ok(())
    } else {
        Err(UsageError(format!("unknown config key '{key}'")).into())
    }
}

impl RunConfig {
    /// Parses `key = value` lines. Blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| UsageError(format!("config line {}: expected 'key = value'", no + 1)))?;
            let key = key.trim();
            known(key)?;
            if cfg.values.insert(key.to_string(), value.trim().to_string()).is_some() {
                return Err(UsageError(format!("config key '{key}' given twice")).into());
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text)
    }

    /// Command-line override; `None` leaves the file value in place.
    pub fn set<T: Display>(&mut self, key: &str, value: Option<T>) {
        debug_assert!(KEYS.contains(&key), "{key}");
        if let Some(v) = value {
            self.values.insert(key.to_string(), v.to_string());
        }
    }

    pub fn get<T>(&self, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        debug_assert!(KEYS.contains(&key), "{key}");
        match self.values.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse()
                .map(Some)
                .map_err(|e| UsageError(format!("invalid value '{raw}' for {key}: {e}")).into()),
        }
    }

    /// Reads `key`, recording `default` as the resolved value when unset.
    pub fn get_or<T>(&mut self, key: &str, default: T) -> Result<T>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        match self.get(key)? {
            Some(v) => Ok(v),
            None => {
                self.values.insert(key.to_string(), default.to_string());
                Ok(default)
            }
        }
    }

    pub fn get_flag(&self, key: &str) -> Result<bool> {
        Ok(self.get::<bool>(key)?.unwrap_or(false))
    }

    pub fn render(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}
