//! Layering of a JSON config file under command-line flags.

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::CliError;

pub const COMMANDS: [&str; 6] = ["gen", "train", "eval", "predict", "transfer", "replay"];

/// The config may be flat (`{"epochs": 20}`) or sectioned per command
/// (`{"train": {"epochs": 20}}`). Returns the object that applies to `command`.
fn section(config: &Value, command: &str) -> Result<Map<String, Value>, CliError> {
    let Value::Object(top) = config else {
        return Err(CliError::usage("config file must hold a JSON object"));
    };
    let sectioned = top.keys().any(|k| COMMANDS.contains(&k.as_str()));
    let picked = if sectioned {
        top.get(command)
            .cloned()
            .unwrap_or(Value::Object(Map::new()))
    } else {
        config.clone()
    };
    match picked {
        Value::Object(m) => Ok(m),
        _ => Err(CliError::usage(format!(
            "config section `{command}` must be an object"
        ))),
    }
}

/// Values given on the command line replace those from the config.
pub fn layer<A: Serialize + DeserializeOwned>(
    flags: A,
    config: Option<&Value>,
    command: &str,
) -> Result<A, CliError> {
    let Some(config) = config else {
        return Ok(flags);
    };
    let mut merged = section(config, command)?;
    let Value::Object(given) = serde_json::to_value(&flags).map_err(CliError::internal)? else {
        return Err(CliError::internal("flags did not serialize to an object"));
    };
    for (k, v) in given {
        if !v.is_null() {
            merged.insert(k, v);
        }
    }
    serde_json::from_value(Value::Object(merged))
        .map_err(|e| CliError::usage(format!("config: {e}")))
}

pub fn read_config(path: &std::path::Path) -> Result<Value, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Serialize, Deserialize, Debug, PartialEq, Default)]
    #[serde(deny_unknown_fields)]
    struct A {
        #[serde(skip_serializing_if = "Option::is_none")]
        epochs: Option<usize>,
        #[serde(skip_serializing_if = "Option::is_none")]
        loss: Option<String>,
    }

    #[test]
    fn flags_win_over_config() {
        let cfg = serde_json::json!({"epochs": 5, "loss": "mse"});
        let a = layer(
            A {
                epochs: Some(9),
                loss: None,
            },
            Some(&cfg),
            "train",
        )
        .unwrap();
        assert_eq!(
            a,
            A {
                epochs: Some(9),
                loss: Some("mse".into())
            }
        );
    }

    #[test]
    fn sectioned_config_picks_the_command() {
        let cfg = serde_json::json!({"train": {"epochs": 3}, "gen": {"shots": 10}});
        let a = layer(A::default(), Some(&cfg), "train").unwrap();
        assert_eq!(a.epochs, Some(3));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let cfg = serde_json::json!({"epochz": 3});
        assert!(layer(A::default(), Some(&cfg), "train").is_err());
    }
}
