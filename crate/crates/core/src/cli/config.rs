//! Run configuration: flat JSON with dotted keys, overridable by
//! `--key=value` flags.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::decoding::DecodeConfig;
use crate::error::{ArpgError, Result};
use crate::model::ModelConfig;
use crate::training::TrainConfig;

/// Benchmark sweep options.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub steps: Vec<usize>,
    pub batch: usize,
    pub repeats: usize,
    /// Independent decode streams the batch is split into.
    pub streams: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            steps: vec![64, 32, 16, 8],
            batch: 16,
            repeats: 3,
            streams: 1,
        }
    }
}

/// Fully resolved configuration of one command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("out"),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            decode: DecodeConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

/// Configuration plus the dotted keys the user set explicitly.
#[derive(Clone, Debug)]
pub struct Resolved {
    pub config: RunConfig,
    pub explicit: BTreeSet<String>,
}

impl Resolved {
    /// Whether any `model.*` key was set by the user.
    pub fn sets_model(&self) -> bool {
        self.explicit.iter().any(|k| k.starts_with("model."))
    }
}

/// Flattens nested objects into dotted keys. Arrays and scalars are leaves.
pub fn flatten(value: &Value) -> Map<String, Value> {
    fn walk(prefix: &str, v: &Value, out: &mut Map<String, Value>) {
        match v {
            Value::Object(m) if !m.is_empty() => {
                for (k, x) in m {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&key, x, out);
                }
            }
            _ => {
                out.insert(prefix.to_string(), v.clone());
            }
        }
    }
    let mut out = Map::new();
    walk("", value, &mut out);
    out
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| ArpgError::Config(format!("unknown configuration key '{key}'")))?;
        if !obj.contains_key(*part) {
            return Err(ArpgError::Config(format!("unknown configuration key '{key}'")));
        }
        let next = obj.get_mut(*part).expect("checked");
        if i + 1 == parts.len() {
            *next = value;
            return Ok(());
        }
        if next.is_null() {
            break;
        }
        cur = next;
    }
    Err(ArpgError::Config(format!("unknown configuration key '{key}'")))
}

/// Parses a flag value: JSON when it parses as JSON, otherwise a string.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Splits `--key=value` / `key=value` overrides.
pub fn parse_overrides(args: &[String]) -> Result<Vec<(String, Value)>> {
    args.iter()
        .map(|a| {
            let body = a.trim_start_matches('-');
            let (k, v) = body
                .split_once('=')
                .ok_or_else(|| ArpgError::Config(format!("override '{a}' is not of the form --key=value")))?;
            Ok((k.to_string(), parse_value(v)))
        })
        .collect()
}

/// Merges defaults, an optional config file and overrides, in that order.
pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Resolved> {
    let mut root = serde_json::to_value(RunConfig::default()).expect("serializable defaults");
    let mut explicit = BTreeSet::new();
    let mut entries: Vec<(String, Value)> = Vec::new();
    if let Some(path) = file {
        let text = fs::read_to_string(path).map_err(|e| {
            ArpgError::Config(format!("cannot read config file {}: {e}", path.display()))
        })?;
        let parsed: Value = serde_json::from_str(&text)
            .map_err(|e| ArpgError::Config(format!("config file {}: {e}", path.display())))?;
        if !parsed.is_object() {
            return Err(ArpgError::Config(format!("config file {} is not a JSON object", path.display())));
        }
        entries.extend(flatten(&parsed));
    }
    entries.extend(parse_overrides(overrides)?);
    for (k, v) in entries {
        set_path(&mut root, &k, v)?;
        explicit.insert(k);
    }
    let config: RunConfig =
        serde_json::from_value(root).map_err(|e| ArpgError::Config(format!("configuration: {e}")))?;
    config.model.validate()?;
    config.train.validate()?;
    config.decode.validate()?;
    Ok(Resolved { config, explicit })
}

impl RunConfig {
    /// Flat dotted-key JSON of the whole configuration.
    pub fn to_flat_json(&self) -> String {
        let v = serde_json::to_value(self).expect("serializable");
        serde_json::to_string_pretty(&Value::Object(flatten(&v))).expect("serializable") + "\n"
    }
}
