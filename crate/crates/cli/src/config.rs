//! `key=value` run configuration files.
//!
//! Keys are the long flag names of the subcommand (`-` or `_` both work).
//! Entries are spliced into the argument list in front of the user's own
//! flags, so flags given on the command line win.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{ArgAction, Command};

/// Parses a config file body into `(line, key, value)` triples.
pub fn parse(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!("line {}: expected key=value, got {raw:?}", i + 1);
        };
        let key = k.trim().replace('_', "-");
        if key.is_empty() {
            bail!("line {}: empty key", i + 1);
        }
        out.push((i + 1, key, v.trim().to_string()));
    }
    Ok(out)
}

/// Turns config entries into flags for `cmd`. Unknown keys are errors.
pub fn to_flags(cmd: &Command, entries: &[(usize, String, String)]) -> Result<Vec<OsString>> {
    let mut flags = Vec::new();
    for (line, key, value) in entries {
        let arg = cmd
            .get_arguments()
            .find(|a| a.get_long() == Some(key.as_str()) && key != "config")
            .with_context(|| format!("line {line}: unknown key {key:?} for `{}`", cmd.get_name()))?;
        match arg.get_action() {
            ArgAction::SetTrue => match value.as_str() {
                "true" | "1" | "yes" => flags.push(format!("--{key}").into()),
                "false" | "0" | "no" => {}
                other => bail!("line {line}: {key} expects true or false, got {other:?}"),
            },
            a if a.takes_values() => {
                flags.push(format!("--{key}").into());
                flags.push(value.into());
            }
            _ => bail!("line {line}: {key} cannot be set from a config file"),
        }
    }
    Ok(flags)
}

/// Locates the subcommand (one of `subs`) and the `--config` path given
/// after it, without a full parse: required flags may live in the file.
pub fn find(argv: &[OsString], subs: &[&str]) -> Option<(String, PathBuf)> {
    let pos = argv.iter().skip(1).position(|a| subs.iter().any(|s| a == *s))? + 1;
    let sub = argv[pos].to_string_lossy().into_owned();
    let rest = &argv[pos + 1..];
    for (i, a) in rest.iter().enumerate() {
        let a = a.to_string_lossy();
        if a == "--" {
            break;
        }
        if a == "--config" {
            return rest.get(i + 1).map(|p| (sub, PathBuf::from(p)));
        }
        if let Some(p) = a.strip_prefix("--config=") {
            return Some((sub, PathBuf::from(p)));
        }
    }
    None
}

/// Rewrites `argv` so that the entries of the `--config FILE` given to
/// subcommand `sub` come right after the subcommand name.
pub fn splice(argv: Vec<OsString>, root: &Command, sub: &str, file: &Path) -> Result<Vec<OsString>> {
    let text = std::fs::read_to_string(file).with_context(|| format!("reading config file {}", file.display()))?;
    let cmd = root.find_subcommand(sub).expect("subcommand exists");
    let flags = to_flags(cmd, &parse(&text).with_context(|| file.display().to_string())?)
        .with_context(|| file.display().to_string())?;
    let pos = argv.iter().position(|a| a == sub).expect("subcommand was parsed from argv");
    let mut out = argv[..=pos].to_vec();
    out.extend(flags);
    out.extend_from_slice(&argv[pos + 1..]);
    Ok(out)
}
