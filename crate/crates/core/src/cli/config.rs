//! Run configuration: built-in defaults, then a TOML file, then environment,
//! then `--set key=value` flags, each overriding the previous.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moe::{MoEConfig, RouterKind, SigmaMode};
use crate::numerics::Activation;
use crate::training::TrainConfig;
use crate::transformer::{MlpKind, ModelConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSection {
    /// Directory written by `ingest`.
    pub data: PathBuf,
    /// Output directory for checkpoints and logs.
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub run: RunSection,
}

impl Default for RunConfig {
    /// The chess setup: 8 layers, 8 heads, width 512, context 1023, 2-of-8
    /// ReLU experts of 2048 units with sparsity-aware routing.
    fn default() -> Self {
        Self {
            model: ModelConfig {
                n_layer: 8,
                n_head: 8,
                d_model: 512,
                vocab_size: 32,
                ctx_len: 1023,
                mlp: MlpKind::Moe(MoEConfig {
                    experts: 8,
                    k: 2,
                    expert_hidden: 2048,
                    width: 512,
                    router: RouterKind::SparsityAware,
                    activation: Activation::Relu,
                    balance_lambda: 0.001,
                    sigma_mode: SigmaMode::StdDev,
                    detach_router_stats: false,
                }),
                dropout: 0.0,
            },
            train: TrainConfig::default(),
            run: RunSection {
                data: PathBuf::from("data"),
                out: PathBuf::from("run"),
            },
        }
    }
}

/// Parse `value` as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Overlay `top` onto `base`. Tables merge key by key, except tables that
/// carry a `kind` tag, which replace the old table so fields of a different
/// variant do not linger.
fn merge(base: &mut toml::Value, top: toml::Value) {
    match (base, top) {
        (toml::Value::Table(b), toml::Value::Table(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) if v.as_table().is_some_and(|vt| !vt.contains_key("kind")) => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, t) => *b = t,
    }
}

fn set_dotted(root: &mut toml::Value, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad key '{key}'")));
    }
    let mut node = root;
    for p in &parts[..parts.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("'{key}' passes through a non-table value")))?;
        node = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    node.as_table_mut()
        .ok_or_else(|| Error::Config(format!("'{key}' passes through a non-table value")))?
        .insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Dotted paths present in `input` but absent from `known`.
fn unknown_keys(input: &toml::Value, known: &toml::Value, prefix: &str, out: &mut Vec<String>) {
    if let (Some(i), Some(k)) = (input.as_table(), known.as_table()) {
        for (key, v) in i {
            let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
            match k.get(key) {
                Some(kv) => unknown_keys(v, kv, &path, out),
                None => out.push(path),
            }
        }
    }
}

/// Merge defaults, `file`, `MOEX_SEED` and `overrides` (`key=value`).
pub fn load_run_config(file: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    load_run_config_over(RunConfig::default(), file, overrides)
}

/// As [`load_run_config`] with `base` in place of the built-in defaults.
pub fn load_run_config_over(base: RunConfig, file: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut value = toml::Value::try_from(base).map_err(|e| Error::Config(e.to_string()))?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| Error::format(path, e.to_string()))?;
        let parsed: toml::Table = text.parse().map_err(|e| Error::format(path, format!("{e}")))?;
        merge(&mut value, toml::Value::Table(parsed));
    }
    if let Some(seed) = seed_from_env()? {
        set_dotted(&mut value, "train.seed", toml::Value::Integer(seed as i64))?;
    }
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override '{o}' is not key=value")))?;
        let mut single = toml::Value::Table(Default::default());
        set_dotted(&mut single, k.trim(), parse_value(v.trim()))?;
        merge(&mut value, single);
    }
    let cfg: RunConfig = value.clone().try_into().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
    let known = toml::Value::try_from(&cfg).map_err(|e| Error::Config(e.to_string()))?;
    let mut unknown = Vec::new();
    unknown_keys(&value, &known, "", &mut unknown);
    if !unknown.is_empty() {
        return Err(Error::Config(format!("unknown configuration keys: {}", unknown.join(", "))));
    }
    cfg.model.validate()?;
    cfg.train.validate()?;
    Ok(cfg)
}

/// `MOEX_SEED`, if set.
pub fn seed_from_env() -> Result<Option<u64>> {
    match std::env::var("MOEX_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("MOEX_SEED = '{v}' is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}
