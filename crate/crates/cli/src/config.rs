//! Run configuration plumbing: JSON config files under command-line flags,
//! timestamped run directories and the persisted `runconfig.json`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::Failure;

pub const RUNCONFIG: &str = "runconfig.json";

/// Overlays the flags actually given on top of the config file (if any).
///
/// A flag counts as given when it serializes to something other than `null`
/// or an empty list.
pub fn merge<T: Serialize + DeserializeOwned>(flags: &T, config: Option<&Path>, command: &str) -> Result<T, Failure> {
    let Some(path) = config else {
        return Ok(round_trip(flags)?);
    };
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::validation(format!("cannot read config {}: {e}", path.display())))?;
    let mut base: Map<String, Value> = match serde_json::from_str(&text) {
        Ok(Value::Object(m)) => m,
        Ok(_) => return Err(Failure::validation("config file must hold a JSON object")),
        Err(e) => return Err(Failure::validation(format!("config {}: {e}", path.display()))),
    };
    if let Some(found) = base.remove("command") {
        if found.as_str() != Some(command) {
            return Err(Failure::validation(format!("config is for command {found}, not {command:?}")));
        }
    }
    let Value::Object(given) = serde_json::to_value(flags).map_err(Failure::runtime)? else {
        unreachable!("argument structs serialize to objects")
    };
    for (k, v) in given {
        let unset = v.is_null() || v.as_array().is_some_and(|a| a.is_empty());
        if !unset {
            base.insert(k, v);
        }
    }
    serde_json::from_value(Value::Object(base)).map_err(|e| Failure::validation(format!("config: {e}")))
}

fn round_trip<T: Serialize + DeserializeOwned>(value: &T) -> Result<T, Failure> {
    serde_json::from_value(serde_json::to_value(value).map_err(Failure::runtime)?).map_err(Failure::runtime)
}

/// Creates `<root>/<command>-<timestamp>`, suffixing `-N` on collision.
pub fn run_dir(root: &Path, command: &str) -> Result<PathBuf, Failure> {
    fs::create_dir_all(root).map_err(Failure::runtime)?;
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    let base = format!("{command}-{stamp}");
    let mut dir = root.join(&base);
    let mut n = 1;
    while dir.exists() {
        dir = root.join(format!("{base}-{n}"));
        n += 1;
    }
    fs::create_dir(&dir).map_err(Failure::runtime)?;
    Ok(dir)
}

/// Writes the fully resolved configuration, tagged with its command, so the
/// run can be repeated with `--config <dir>/runconfig.json`.
pub fn write_runconfig<T: Serialize>(dir: &Path, command: &str, resolved: &T) -> Result<(), Failure> {
    let mut value = serde_json::to_value(resolved).map_err(Failure::runtime)?;
    if let Value::Object(m) = &mut value {
        m.insert("command".into(), Value::String(command.into()));
    }
    let text = serde_json::to_string_pretty(&value).map_err(Failure::runtime)?;
    fs::write(dir.join(RUNCONFIG), text + "\n").map_err(Failure::runtime)
}
