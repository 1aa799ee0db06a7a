//! `key = value` configuration files whose keys are long flag names.
//!
//! File entries are spliced into the argument list right after the
//! subcommand, so flags given on the command line override them.

use std::ffi::OsString;
use std::path::Path;

use clap::Command;

use crate::CliError;

/// Parses `key = value` lines. Blank lines and `#` comments are skipped.
pub fn parse_config(text: &str) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("config line {}: expected `key = value`", n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(CliError::Usage(format!("config line {}: empty key", n + 1)));
        }
        out.push((k.replace('_', "-"), v.to_string()));
    }
    Ok(out)
}

fn config_path(args: &[OsString]) -> Option<OsString> {
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return it.next().cloned();
        }
        if let Some(p) = s.strip_prefix("--config=") {
            return Some(p.into());
        }
    }
    None
}

/// Returns `args` with the entries of the `--config` file, if any, inserted
/// after the subcommand name.
pub fn expand_args(cmd: &Command, args: Vec<OsString>) -> Result<Vec<OsString>, CliError> {
    let Some(path) = config_path(&args) else {
        return Ok(args);
    };
    let path = Path::new(&path);
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Run(gifsplat::Error::Io { path: path.into(), source: e }))?;
    let entries = parse_config(&text)?;
    let Some(pos) = args
        .iter()
        .position(|a| cmd.get_subcommands().any(|s| a.to_str() == Some(s.get_name())))
    else {
        return Ok(args);
    };
    let sub = cmd.find_subcommand(args[pos].to_str().unwrap_or_default()).expect("matched above");
    let mut injected: Vec<OsString> = Vec::new();
    for (key, value) in entries {
        if key == "config" {
            return Err(CliError::Usage("config files cannot include other config files".into()));
        }
        let arg = sub
            .get_arguments()
            .chain(cmd.get_arguments())
            .find(|a| a.get_long() == Some(key.as_str()))
            .ok_or_else(|| CliError::Usage(format!("unknown config key {key:?} for `{}`", sub.get_name())))?;
        if arg.get_action().takes_values() {
            injected.push(format!("--{key}={value}").into());
        } else {
            match value.as_str() {
                "true" => injected.push(format!("--{key}").into()),
                "false" => {}
                _ => return Err(CliError::Usage(format!("config key {key:?} takes true or false"))),
            }
        }
    }
    let mut out = args[..=pos].to_vec();
    out.extend(injected);
    out.extend_from_slice(&args[pos + 1..]);
    Ok(out)
}
