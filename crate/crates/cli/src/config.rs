//! TOML config files whose keys are the long flag names of a subcommand.
//! Values given on the command line win over the file.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

/// Overlay the flags (`None` fields already skipped) onto the file values.
pub fn resolve<T>(cmd: &clap::Command, args: &T, file: Option<&Path>) -> Result<T>
where
    T: Serialize + DeserializeOwned,
{
    let mut merged = match file {
        Some(path) => read_file(cmd, path)?,
        None => Map::new(),
    };
    let Value::Object(flags) = serde_json::to_value(args)? else {
        bail!("arguments did not serialize to a map");
    };
    merged.extend(flags.into_iter().filter(|(_, v)| !v.is_null()));
    serde_json::from_value(Value::Object(merged)).context("invalid configuration value")
}

fn read_file(cmd: &clap::Command, path: &Path) -> Result<Map<String, Value>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let table: toml::Table = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
    let known: Vec<&str> = cmd.get_arguments().filter_map(|a| a.get_long()).collect();
    for key in table.keys() {
        if key == "config" || !known.contains(&key.as_str()) {
            bail!("unknown key '{key}' in {} for `{}`", path.display(), cmd.get_name());
        }
    }
    match serde_json::to_value(table)? {
        Value::Object(m) => Ok(m),
        _ => unreachable!("a TOML table is a map"),
    }
}

/// SHA-256 of the canonical JSON form of the resolved configuration.
pub fn hash(resolved: &Value) -> String {
    let digest = Sha256::digest(resolved.to_string().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
