//! `--config` support. Keys of the JSON object become long flags placed
//! right after the subcommand name, ahead of the user's own arguments; since
//! every flag overrides earlier occurrences of itself, explicit flags win.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde_json::Value;

/// Global options that consume the following argument.
const VALUE_GLOBALS: [&str; 3] = ["--seed", "--precision", "--config"];

/// Position of the subcommand name in `argv`, skipping leading globals.
fn subcommand_index(argv: &[OsString]) -> Option<usize> {
    let mut i = 1;
    while i < argv.len() {
        let arg = argv[i].to_string_lossy();
        if !arg.starts_with('-') {
            return Some(i);
        }
        i += if VALUE_GLOBALS.contains(&arg.as_ref()) { 2 } else { 1 };
    }
    None
}

pub fn config_flags(json: &str) -> Result<Vec<OsString>> {
    let Value::Object(map) = serde_json::from_str::<Value>(json).context("config is not valid JSON")? else {
        bail!("config must be a JSON object");
    };
    let mut flags = Vec::new();
    for (key, value) in map {
        let flag = format!("--{}", key.replace('_', "-"));
        if flag == "--config" {
            bail!("config files cannot name another config");
        }
        let text = match value {
            Value::Bool(true) => {
                flags.push(flag.into());
                continue;
            }
            Value::Bool(false) | Value::Null => continue,
            Value::String(s) => s,
            Value::Number(n) => n.to_string(),
            Value::Array(items) => items
                .iter()
                .map(|v| match v {
                    Value::String(s) => s.clone(),
                    other => other.to_string(),
                })
                .collect::<Vec<_>>()
                .join(","),
            Value::Object(_) => bail!("config key {key:?} holds an object"),
        };
        flags.push(format!("{flag}={text}").into());
    }
    Ok(flags)
}

/// Value of `--config` in raw arguments, found before clap runs so that
/// required flags may come from the file.
pub fn find_config(argv: &[OsString]) -> Option<PathBuf> {
    let mut iter = argv.iter().skip(1);
    while let Some(arg) = iter.next() {
        let text = arg.to_string_lossy();
        if text == "--" {
            break;
        }
        if text == "--config" {
            return iter.next().map(PathBuf::from);
        }
        if let Some(path) = text.strip_prefix("--config=") {
            return Some(PathBuf::from(path));
        }
    }
    None
}

/// `argv` with the config file's flags spliced in after the subcommand.
pub fn merge(argv: Vec<OsString>, config: &Path) -> Result<Vec<OsString>> {
    let text = std::fs::read_to_string(config)
        .with_context(|| format!("reading config {}", config.display()))?;
    let flags = config_flags(&text).with_context(|| format!("in {}", config.display()))?;
    let Some(at) = subcommand_index(&argv) else {
        return Ok(argv);
    };
    let mut out = argv[..=at].to_vec();
    out.extend(flags);
    out.extend_from_slice(&argv[at + 1..]);
    Ok(out)
}
