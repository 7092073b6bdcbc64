//! `--config <file>`: a JSON object whose keys are flag names.
//!
//! Values are appended to the argument vector as flags, so clap validates
//! them exactly like typed flags. A flag already on the command line wins.

use std::ffi::OsString;

use serde_json::Value;

fn config_path(args: &[OsString]) -> Option<OsString> {
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return it.next().cloned();
        }
        if let Some(rest) = s.strip_prefix("--config=") {
            return Some(rest.into());
        }
    }
    None
}

fn present(args: &[OsString], flag: &str) -> bool {
    args.iter().any(|a| {
        let s = a.to_string_lossy();
        s == flag || s.starts_with(&format!("{flag}="))
    })
}

fn scalar(v: &Value) -> Result<String, String> {
    match v {
        Value::String(s) => Ok(s.clone()),
        Value::Number(n) => Ok(n.to_string()),
        Value::Bool(b) => Ok(b.to_string()),
        other => Err(format!("unsupported config value {other}")),
    }
}

/// Returns `args` extended with the config file's flags.
pub fn merge(args: Vec<OsString>) -> Result<Vec<OsString>, String> {
    let Some(path) = config_path(&args) else { return Ok(args) };
    let text = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.to_string_lossy()))?;
    let value: Value = serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.to_string_lossy()))?;
    let Value::Object(map) = value else {
        return Err(format!("{}: expected a JSON object", path.to_string_lossy()));
    };
    let mut out = args.clone();
    for (key, v) in map {
        let flag = format!("--{}", key.replace('_', "-"));
        if flag == "--config" || present(&args, &flag) {
            continue;
        }
        match v {
            Value::Bool(true) => out.push(flag.into()),
            Value::Bool(false) | Value::Null => {}
            Value::Array(items) => {
                if !items.is_empty() {
                    out.push(flag.into());
                    for item in &items {
                        out.push(scalar(item)?.into());
                    }
                }
            }
            other => {
                out.push(flag.into());
                out.push(scalar(&other)?.into());
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(v: &[&str]) -> Vec<OsString> {
        v.iter().map(OsString::from).collect()
    }

    #[test]
    fn file_values_fill_missing_flags_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"seed": 9, "days": 5, "quiet": true, "log_json": false}"#).unwrap();
        let merged = merge(args(&["graffiti", "sim", "run", "--seed", "3", "--config", path.to_str().unwrap()])).unwrap();
        let merged: Vec<String> = merged.iter().map(|a| a.to_string_lossy().into_owned()).collect();
        assert_eq!(merged.iter().filter(|a| *a == "--seed").count(), 1);
        assert!(merged.windows(2).any(|w| w == ["--days", "5"]));
        assert!(merged.contains(&"--quiet".to_owned()));
        assert!(!merged.contains(&"--log-json".to_owned()));
    }

    #[test]
    fn arrays_become_repeated_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"publish": ["a.bin", "b.bin"]}"#).unwrap();
        let merged = merge(args(&["graffiti", "--config", path.to_str().unwrap()])).unwrap();
        assert_eq!(&merged[merged.len() - 3..], &args(&["--publish", "a.bin", "b.bin"])[..]);
    }
}
