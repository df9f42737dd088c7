//! The experiment config file: TOML with one section per module.

use std::path::Path;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use serde_json::Value as Json;
use sha2::{Digest, Sha256};
use xvwm_core::dataset::DatasetConfig;
use xvwm_core::eval::EvalProtocol;
use xvwm_core::model::ModelConfig;
use xvwm_core::sim::{RenderConfig, WorldConfig};
use xvwm_core::training::{SchemeConfig, TrainConfig};
use xvwm_core::XvwmError;
use xvwm_serve::SessionConfig;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServeSection {
    pub host: String,
    pub port: u16,
    pub session: SessionConfig,
}

impl Default for ServeSection {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            port: 8765,
            session: SessionConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub version: u32,
    pub world: WorldConfig,
    pub render: RenderConfig,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub scheme: SchemeConfig,
    pub train: TrainConfig,
    pub eval: EvalProtocol,
    pub serve: ServeSection,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            world: WorldConfig::default(),
            render: RenderConfig::default(),
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            scheme: SchemeConfig::default(),
            train: TrainConfig::default(),
            eval: EvalProtocol::default(),
            serve: ServeSection::default(),
        }
    }
}

/// Dotted paths of keys in `user` that `known` does not have.
fn unknown_keys(user: &toml::Value, known: &Json, prefix: &str, out: &mut Vec<String>) {
    if let (toml::Value::Table(t), Json::Object(k)) = (user, known) {
        for (key, v) in t {
            let path = if prefix.is_empty() {
                key.clone()
            } else {
                format!("{prefix}.{key}")
            };
            match k.get(key) {
                Some(kv) => unknown_keys(v, kv, &path, out),
                None => out.push(path),
            }
        }
    }
}

/// Parse `value` as a TOML value, falling back to a bare string.
fn parse_value(value: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()))
}

/// Apply `section.key=value` overrides.
pub fn apply_override(root: &mut toml::Table, assignment: &str) -> anyhow::Result<()> {
    let Some((path, value)) = assignment.split_once('=') else {
        bail!(XvwmError::Usage(format!("override `{assignment}` is not key=value")));
    };
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        bail!(XvwmError::Usage(format!("bad override key `{path}`")));
    }
    let mut table = root;
    for k in &keys[..keys.len() - 1] {
        let entry = table
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = match entry {
            toml::Value::Table(t) => t,
            _ => bail!(XvwmError::Usage(format!("override `{path}`: `{k}` is not a section"))),
        };
    }
    table.insert(keys[keys.len() - 1].to_string(), parse_value(value.trim()));
    Ok(())
}

/// A resolved config plus what the user set explicitly.
#[derive(Clone, Debug)]
pub struct Loaded {
    pub config: Config,
    pub model_views_set: bool,
}

/// Read `path` (or start from defaults), apply overrides and validate.
pub fn load(path: Option<&Path>, overrides: &[String]) -> anyhow::Result<Loaded> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| XvwmError::Startup(format!("cannot read config {}: {e}", p.display())))?;
            toml::from_str::<toml::Table>(&text)
                .map_err(|e| XvwmError::Config(format!("{}: {}", p.display(), e.message())))?
        }
        None => toml::Table::new(),
    };
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let user = toml::Value::Table(table);
    let known = serde_json::to_value(Config::default()).expect("config serializes");
    let mut unknown = Vec::new();
    unknown_keys(&user, &known, "", &mut unknown);
    if !unknown.is_empty() {
        bail!(XvwmError::Config(format!("unknown config keys: {}", unknown.join(", "))));
    }
    let model_views_set = user
        .get("model")
        .and_then(|m| m.get("views"))
        .is_some();
    let size_set = user.get("model").and_then(|m| m.get("image_size")).is_some();
    let mut config: Config = user
        .try_into()
        .map_err(|e: toml::de::Error| XvwmError::Config(e.message().to_string()))?;
    if config.version != CONFIG_VERSION {
        bail!(XvwmError::Config(format!(
            "config version {} not supported (expected {CONFIG_VERSION})",
            config.version
        )));
    }
    if !model_views_set {
        config.model.views = config.scheme.views().to_vec();
    }
    if size_set && config.model.image_size != config.render.size {
        bail!(XvwmError::Config(format!(
            "model.image_size {} differs from render.size {}",
            config.model.image_size, config.render.size
        )));
    }
    config.model.image_size = config.render.size;
    validate(&config)?;
    Ok(Loaded {
        config,
        model_views_set,
    })
}

pub fn validate(c: &Config) -> anyhow::Result<()> {
    c.world.validate()?;
    c.render.validate()?;
    c.model.validate()?;
    c.scheme.validate()?;
    c.train.validate()?;
    c.eval.validate()?;
    Ok(())
}

impl Config {
    /// Canonical TOML of the resolved config.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// First 12 hex digits of SHA-256 over the canonical TOML.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        hex::encode(digest)[..12].to_string()
    }
}

/// First 16 hex digits of SHA-256 over a file's bytes.
pub fn file_hash(path: &Path) -> anyhow::Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes))[..16].to_string())
}
