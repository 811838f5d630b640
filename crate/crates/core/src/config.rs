//! Plain-text `key = value` configuration files.
//!
//! One pair per line. `#` starts a comment, blank lines are ignored and
//! keys are the long flag names without the leading dashes, so
//! `epochs = 2000` stands for `--epochs 2000`. A boolean flag is enabled
//! with `true` and left off with `false`. Keys may repeat; later lines win.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ConfigFile {
    pub pairs: Vec<(String, String)>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split_once('#').map_or(raw, |(l, _)| l).trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("line {}: expected `key = value`", lineno + 1)))?;
            let key = k.trim();
            if key.is_empty() || key.starts_with('-') || key.contains(char::is_whitespace) {
                return Err(Error::Parse(format!("line {}: bad key `{key}`", lineno + 1)));
            }
            pairs.push((key.to_string(), v.trim().to_string()));
        }
        Ok(Self { pairs })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    /// Last value given for `key`.
    pub fn get(&self, key: &str) -> Option<&str> {
        self.pairs.iter().rev().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Command-line tokens for the pairs whose key passes `accept`.
    /// `is_switch` marks boolean flags, which take no value.
    pub fn to_args(&self, accept: impl Fn(&str) -> bool, is_switch: impl Fn(&str) -> bool) -> Result<Vec<String>> {
        let mut args = Vec::new();
        for (k, v) in &self.pairs {
            if !accept(k) {
                continue;
            }
            if is_switch(k) {
                match v.as_str() {
                    "true" => args.push(format!("--{k}")),
                    "false" => {}
                    _ => return Err(Error::Parse(format!("`{k}` takes true or false, got `{v}`"))),
                }
            } else {
                args.push(format!("--{k}"));
                args.push(v.clone());
            }
        }
        Ok(args)
    }
}
