//! Flat `key = value` config files, merged underneath command-line flags.
//!
//! Keys are the subcommand's long flag names (dashes or underscores).
//! Values may be strings, numbers, booleans or arrays of those; arrays turn
//! into comma-separated flag values. Flags given on the command line win.

use std::ffi::OsString;
use std::path::Path;

use anyhow::{bail, Context, Result};
use clap::Command;

fn scalar(key: &str, v: &toml::Value) -> Result<String> {
    Ok(match v {
        toml::Value::String(s) => s.clone(),
        toml::Value::Integer(i) => i.to_string(),
        toml::Value::Float(f) => f.to_string(),
        toml::Value::Boolean(b) => b.to_string(),
        _ => bail!("config key `{key}`: expected a string, number or boolean"),
    })
}

/// Turns the file at `path` into flags for subcommand `sub` of `root`.
pub fn config_args(root: &Command, sub: &str, path: &Path) -> Result<Vec<OsString>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config file {}", path.display()))?;
    let table: toml::Table = toml::from_str(&text).with_context(|| format!("parsing config file {}", path.display()))?;
    let cmd = root.find_subcommand(sub).with_context(|| format!("unknown subcommand `{sub}`"))?;
    let mut out = Vec::new();
    for (key, value) in &table {
        let long = key.replace('_', "-");
        let Some(arg) = cmd.get_arguments().find(|a| a.get_long() == Some(long.as_str())) else {
            bail!("config file {}: unknown key `{key}` for `{sub}`", path.display());
        };
        if long == "config" {
            bail!("config file {}: `config` cannot be nested", path.display());
        }
        let is_flag = matches!(arg.get_action(), clap::ArgAction::SetTrue);
        match value {
            toml::Value::Boolean(b) if is_flag => {
                if *b {
                    out.push(format!("--{long}").into());
                }
            }
            _ if is_flag => bail!("config key `{key}`: expected true or false"),
            toml::Value::Array(items) => {
                let parts = items.iter().map(|v| scalar(key, v)).collect::<Result<Vec<_>>>()?;
                out.push(format!("--{long}={}", parts.join(",")).into());
            }
            toml::Value::Table(_) => bail!("config key `{key}`: nested tables are not supported"),
            v => out.push(format!("--{long}={}", scalar(key, v)?).into()),
        }
    }
    Ok(out)
}

/// Splices config-file flags (from `--config PATH`) in front of the
/// explicit flags so that explicit flags override them.
pub fn expand_args(root: &Command, args: Vec<OsString>) -> Result<Vec<OsString>> {
    let Some(sub) = args.get(1).and_then(|s| s.to_str()).map(str::to_owned) else {
        return Ok(args);
    };
    if root.find_subcommand(&sub).is_none() {
        return Ok(args);
    }
    let mut rest = Vec::new();
    let mut config = None;
    let mut it = args[2..].iter();
    while let Some(a) = it.next() {
        match a.to_str() {
            Some("--config") => config = Some(it.next().context("--config needs a path")?.clone()),
            Some(s) if s.starts_with("--config=") => config = Some(OsString::from(&s["--config=".len()..])),
            _ => rest.push(a.clone()),
        }
    }
    let mut out = vec![args[0].clone(), args[1].clone()];
    if let Some(path) = config {
        out.extend(config_args(root, &sub, Path::new(&path))?);
    }
    out.extend(rest);
    Ok(out)
}
