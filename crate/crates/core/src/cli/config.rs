//! Flat `key = value` configuration files.
//!
//! Keys are long flag names without the leading dashes. Values `true` and
//! `false` toggle switches. The entries are spliced into the argument list
//! ahead of the user's own flags, so anything given on the command line wins.

use std::ffi::OsString;
use std::path::Path;

use crate::error::{Error, Result};

pub fn parse(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::InvalidInput(format!("config line {}: expected key = value", n + 1)))?;
        let k = k.trim().trim_start_matches("--");
        if k.is_empty() {
            return Err(Error::InvalidInput(format!("config line {}: empty key", n + 1)));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn to_flags(entries: &[(String, String)]) -> Vec<OsString> {
    let mut flags = Vec::new();
    for (k, v) in entries {
        match v.as_str() {
            "true" => flags.push(format!("--{k}").into()),
            "false" => {}
            _ => flags.push(format!("--{k}={v}").into()),
        }
    }
    flags
}

/// Removes `--config <path>` from `args` and inserts the file's entries right
/// after the first argument naming one of `subcommands`.
pub fn expand(args: Vec<OsString>, subcommands: &[&str]) -> Result<Vec<OsString>> {
    let mut rest = Vec::with_capacity(args.len());
    let mut config = None;
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            let path = it
                .next()
                .ok_or_else(|| Error::InvalidInput("--config needs a file path".into()))?;
            config = Some(path);
        } else if let Some(p) = s.strip_prefix("--config=") {
            config = Some(p.into());
        } else {
            rest.push(a);
        }
    }
    let Some(path) = config else {
        return Ok(rest);
    };
    let path = Path::new(&path);
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let flags = to_flags(&parse(&text)?);
    let at = rest
        .iter()
        .skip(1)
        .position(|a| subcommands.contains(&a.to_string_lossy().as_ref()))
        .map_or(rest.len(), |i| i + 2);
    rest.splice(at..at, flags);
    Ok(rest)
}
