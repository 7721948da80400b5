//! Defaults, then the `--config` file, then explicit flags.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::Failure;

pub fn load_config_file(path: Option<&Path>) -> Result<Map<String, Value>, Failure> {
    let Some(path) = path else {
        return Ok(Map::new());
    };
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
    match serde_json::from_str(&text) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(_) => Err(Failure::Usage(format!("config {} must hold a JSON object", path.display()))),
        Err(e) => Err(Failure::Usage(format!("config {}: {e}", path.display()))),
    }
}

/// Unset flags serialize as `null` and do not override lower layers.
pub fn resolve<T: DeserializeOwned>(defaults: Value, file: &Map<String, Value>, flags: &impl Serialize) -> Result<T, Failure> {
    let Value::Object(mut merged) = defaults else {
        unreachable!("defaults are always objects")
    };
    for (k, v) in file {
        merged.insert(k.clone(), v.clone());
    }
    let flags = serde_json::to_value(flags).map_err(|e| Failure::Usage(e.to_string()))?;
    if let Value::Object(flags) = flags {
        for (k, v) in flags {
            if !v.is_null() && v != Value::Bool(false) && v != Value::Array(Vec::new()) {
                merged.insert(k, v);
            }
        }
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| {
        let msg = e.to_string();
        match msg.strip_prefix("missing field `").and_then(|m| m.split_once('`')) {
            Some((field, _)) => Failure::Usage(format!("missing required option --{}", field.replace('_', "-"))),
            None => Failure::Usage(msg),
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;
    use serde_json::json;

    #[derive(Serialize)]
    struct Flags {
        steps: Option<usize>,
        out: Option<String>,
        oracle: bool,
    }

    #[derive(Deserialize, Debug)]
    #[serde(deny_unknown_fields)]
    struct Cfg {
        steps: usize,
        out: String,
        oracle: bool,
    }

    #[test]
    fn flags_win_over_file_over_defaults() {
        let file = json!({"steps": 5, "out": "file.json", "oracle": true});
        let flags = Flags {
            steps: Some(9),
            out: None,
            oracle: false,
        };
        let cfg: Cfg = resolve(json!({"steps": 1, "out": null, "oracle": false}), file.as_object().unwrap(), &flags).unwrap();
        assert_eq!(cfg.steps, 9);
        assert_eq!(cfg.out, "file.json");
        assert!(cfg.oracle);
    }

    #[test]
    fn unknown_and_missing_keys_are_usage_errors() {
        let flags = Flags {
            steps: None,
            out: None,
            oracle: false,
        };
        let typo = json!({"stpes": 3, "out": "x"});
        let err = resolve::<Cfg>(json!({"steps": 1, "oracle": false}), typo.as_object().unwrap(), &flags).unwrap_err();
        assert!(matches!(err, Failure::Usage(_)));
        let missing = resolve::<Cfg>(json!({"steps": 1, "oracle": false}), &Map::new(), &flags).unwrap_err();
        assert!(matches!(missing, Failure::Usage(m) if m == "missing required option --out"));
    }
}
