//! `--config file.json`: each key names a flag of the chosen subcommand.

use std::ffi::OsString;
use std::fs;
use std::path::Path;

use serde_json::Value;

use crate::args::SUBCOMMANDS;
use crate::{CliError, CliResult};

/// Expands the config file into flags placed right after the subcommand, so
/// that flags typed later on the command line override them.
pub fn merge_config_file(argv: Vec<OsString>) -> CliResult<Vec<OsString>> {
    let strs: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let Some(sub) = strs
        .iter()
        .skip(1)
        .position(|a| SUBCOMMANDS.contains(&a.as_str()))
        .map(|i| i + 1)
    else {
        return Ok(argv);
    };
    let mut path = None;
    for (i, a) in strs.iter().enumerate().skip(sub + 1) {
        if a == "--config" {
            path = strs.get(i + 1).cloned();
        } else if let Some(p) = a.strip_prefix("--config=") {
            path = Some(p.to_string());
        }
    }
    let Some(path) = path else {
        return Ok(argv);
    };
    let flags = config_flags(Path::new(&path))?;
    let mut out = argv;
    out.splice(sub + 1..sub + 1, flags.into_iter().map(OsString::from));
    Ok(out)
}

fn config_flags(path: &Path) -> CliResult<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let Value::Object(map) = serde_json::from_str::<Value>(&text)? else {
        return Err(CliError::Config("the config file must hold a JSON object".into()));
    };
    let mut flags = Vec::new();
    for (key, value) in map {
        if key == "config" {
            return Err(CliError::Config("config files cannot nest".into()));
        }
        let flag = format!("--{}", key.replace('_', "-"));
        match value {
            Value::Null | Value::Bool(false) => {}
            Value::Bool(true) => flags.push(flag),
            Value::Array(items) => {
                let parts: CliResult<Vec<String>> = items.iter().map(|v| scalar(&key, v)).collect();
                flags.push(flag);
                flags.push(parts?.join(","));
            }
            other => {
                flags.push(flag);
                flags.push(scalar(&key, &other)?);
            }
        }
    }
    Ok(flags)
}

fn scalar(key: &str, v: &Value) -> CliResult<String> {
    match v {
        Value::String(s) => Ok(s.clone()),
        Value::Number(n) => Ok(n.to_string()),
        Value::Bool(b) => Ok(b.to_string()),
        _ => Err(CliError::Config(format!(
            "`{key}` must be a scalar or a list of scalars"
        ))),
    }
}
