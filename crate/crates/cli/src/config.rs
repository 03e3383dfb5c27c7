use std::ffi::OsString;
use std::path::Path;

use crate::CliError;

/// Turns a TOML table into trailing `--key value` flags. Keys may use `_` or
/// `-`; booleans become bare flags when true; arrays repeat their values.
pub fn config_flags(path: &Path) -> Result<Vec<OsString>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let table: toml::Table =
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (key, value) in &table {
        let flag = format!("--{}", key.replace('_', "-"));
        push_value(&mut out, &flag, value)?;
    }
    Ok(out)
}

fn push_value(out: &mut Vec<OsString>, flag: &str, value: &toml::Value) -> Result<(), CliError> {
    match value {
        toml::Value::Boolean(true) => out.push(flag.into()),
        toml::Value::Boolean(false) => {}
        toml::Value::String(s) => {
            out.push(flag.into());
            out.push(s.into());
        }
        toml::Value::Integer(i) => {
            out.push(flag.into());
            out.push(i.to_string().into());
        }
        toml::Value::Float(f) => {
            out.push(flag.into());
            out.push(f.to_string().into());
        }
        toml::Value::Array(items) => {
            out.push(flag.into());
            for item in items {
                match item {
                    toml::Value::String(s) => out.push(s.into()),
                    other => out.push(other.to_string().into()),
                }
            }
        }
        other => return Err(CliError::Usage(format!("unsupported config value for {flag}: {other}"))),
    }
    Ok(())
}
