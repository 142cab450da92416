use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, Result};
use koa_core::harness::config::{resolve, resolve_data_root, ConfigFile, DATA_ROOT_ENV};

/// Resolves option values: flag, then config file, then default.
pub struct Settings {
    file: Option<ConfigFile>,
}

impl Settings {
    pub fn new(path: Option<&Path>) -> Result<Self> {
        let file = path.map(ConfigFile::load).transpose()?;
        Ok(Self { file })
    }

    pub fn get<T: FromStr>(&self, flag: Option<T>, section: &str, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        Ok(resolve(flag, self.file.as_ref(), section, key, default)?)
    }

    /// Like [`Settings::get`] for values without a default.
    pub fn optional<T: FromStr>(&self, flag: Option<T>, section: &str, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        if flag.is_some() {
            return Ok(flag);
        }
        match &self.file {
            Some(f) => Ok(f.get_parsed(section, key)?),
            None => Ok(None),
        }
    }

    pub fn data_root(&self, flag: Option<PathBuf>, section: &str) -> Result<PathBuf> {
        resolve_data_root(flag, self.file.as_ref(), section, std::env::var(DATA_ROOT_ENV).ok()).ok_or_else(|| {
            anyhow!("no data root: pass --data-root, set data_root in the config file, or export {DATA_ROOT_ENV}")
        })
    }
}
