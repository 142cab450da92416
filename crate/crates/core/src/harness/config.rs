//! `key = value` configuration with per-subcommand sections.
//!
//! Lookups check the named section first and then the unnamed top-level
//! section. Values resolve with the precedence: command-line flag, config
//! file, environment (`OA_DATA_ROOT`, data root only), built-in default.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use ini::Ini;

use super::HarnessError;

pub const DATA_ROOT_ENV: &str = "OA_DATA_ROOT";

#[derive(Debug, Clone, Default)]
pub struct ConfigFile {
    ini: Ini,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        Ini::load_from_str(text)
            .map(|ini| Self { ini })
            .map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(HarnessError::io(path))?;
        Self::parse(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.ini
            .section(Some(section))
            .and_then(|s| s.get(key))
            .or_else(|| self.ini.general_section().get(key))
    }

    pub fn get_parsed<T: FromStr>(&self, section: &str, key: &str) -> Result<Option<T>, HarnessError>
    where
        T::Err: std::fmt::Display,
    {
        self.get(section, key)
            .map(|raw| {
                raw.trim()
                    .parse()
                    .map_err(|e| HarnessError::Config(format!("[{section}] {key} = {raw:?}: {e}")))
            })
            .transpose()
    }
}

/// Flag value if given, else the config entry, else `default`.
pub fn resolve<T: FromStr>(
    flag: Option<T>,
    file: Option<&ConfigFile>,
    section: &str,
    key: &str,
    default: T,
) -> Result<T, HarnessError>
where
    T::Err: std::fmt::Display,
{
    if let Some(v) = flag {
        return Ok(v);
    }
    if let Some(file) = file {
        if let Some(v) = file.get_parsed(section, key)? {
            return Ok(v);
        }
    }
    Ok(default)
}

/// Data root: flag, then `data_root` in the config, then `env_value`
/// (normally `OA_DATA_ROOT`).
pub fn resolve_data_root(
    flag: Option<PathBuf>,
    file: Option<&ConfigFile>,
    section: &str,
    env_value: Option<String>,
) -> Option<PathBuf> {
    flag.or_else(|| file.and_then(|f| f.get(section, "data_root")).map(PathBuf::from))
        .or_else(|| env_value.filter(|v| !v.is_empty()).map(PathBuf::from))
}
