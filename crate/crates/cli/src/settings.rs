//! Config resolution: preset or file, then `--set` overrides, then the
//! `GCPO_SEED` fallback.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use gcpo_core::TrainConfig;
use serde_json::Value;

pub const SEED_ENV: &str = "GCPO_SEED";

/// Strict parse with the offending field path in the message.
fn from_str_strict(text: &str) -> Result<TrainConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        anyhow!("at `{path}`: {}", e.into_inner())
    })
}

fn from_value_strict(value: Value) -> Result<TrainConfig> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        anyhow!("at `{path}`: {}", e.into_inner())
    })
}

/// Set `dotted.key` inside `root`. Array elements are addressed by index.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| anyhow!("override `{assignment}` is not of the form key=value"))?;
    if key.is_empty() {
        bail!("override `{assignment}` has an empty key");
    }
    // bare words such as `grpo_full` are taken as strings
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (depth, part) in parts.iter().enumerate() {
        let last = depth + 1 == parts.len();
        node = match node {
            Value::Object(map) => {
                if last {
                    map.insert(part.to_string(), value);
                    return Ok(());
                }
                map.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()))
            }
            Value::Array(items) => {
                let i: usize = part
                    .parse()
                    .map_err(|_| anyhow!("`{key}`: `{part}` is not an array index"))?;
                let len = items.len();
                let slot = items
                    .get_mut(i)
                    .ok_or_else(|| anyhow!("`{key}`: index {i} out of range for {len} elements"))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => bail!("`{key}`: `{part}` is not inside an object"),
        };
    }
    unreachable!("split always yields at least one part")
}

/// Build the run configuration.
///
/// `base` is used when no file is given. The seed falls back to `GCPO_SEED`
/// only when neither the file nor an override sets it.
pub fn resolve(file: Option<&Path>, base: TrainConfig, overrides: &[String]) -> Result<TrainConfig> {
    let mut seed_given = overrides.iter().any(|o| o.split('=').next() == Some("seed"));
    let cfg = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            let probe: Value =
                serde_json::from_str(&text).with_context(|| format!("{} is not valid JSON", path.display()))?;
            seed_given |= probe.get("seed").is_some();
            from_str_strict(&text).with_context(|| format!("invalid config {}", path.display()))?
        }
        None => base,
    };
    let mut value = serde_json::to_value(&cfg).context("serializing config")?;
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    if !seed_given {
        if let Ok(raw) = std::env::var(SEED_ENV) {
            let seed: u64 = raw
                .trim()
                .parse()
                .map_err(|_| anyhow!("{SEED_ENV}={raw:?} is not an unsigned integer"))?;
            value["seed"] = Value::from(seed);
        }
    }
    let cfg = from_value_strict(value).context("invalid override")?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_parse_json_or_fall_back_to_strings() {
        let mut v = serde_json::to_value(TrainConfig::default()).unwrap();
        apply_override(&mut v, "method=grpo_full").unwrap();
        apply_override(&mut v, "objective.beta=0.04").unwrap();
        apply_override(&mut v, "tasks.1.border=5").unwrap();
        let c = from_value_strict(v).unwrap();
        assert_eq!(c.method, gcpo_core::Method::GrpoFull);
        assert_eq!(c.objective.beta, 0.04);
        assert_eq!(
            c.tasks[1],
            gcpo_core::rewards::RewardSpec::BorderStructure { border: 5, interior: 4 }
        );
    }

    #[test]
    fn bad_overrides_rejected() {
        let mut v = serde_json::to_value(TrainConfig::default()).unwrap();
        assert!(apply_override(&mut v, "no_equals").is_err());
        assert!(apply_override(&mut v, "tasks.9.border=1").is_err());
        assert!(apply_override(&mut v, "steps.x=1").is_err());
        apply_override(&mut v, "selection.init_frac=0.2").unwrap();
        let err = from_value_strict(v).unwrap_err().to_string();
        assert!(err.contains("selection"), "{err}");
    }

    #[test]
    fn strict_parse_reports_path() {
        let err = from_str_strict(r#"{"objective":{"clip_eps":"big"}}"#).unwrap_err().to_string();
        assert!(err.contains("objective.clip_eps"), "{err}");
    }
}
