//! Flat key-value run configuration and `key=value` overrides.
//!
//! Every key maps onto one field of the model, block or training settings; the
//! image geometry and attribute width come from the dataset instead.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::backbone::BackboneConfig;
use crate::block::{BlockConfig, KeptTokens, KvProjection};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::numerics::L1Reduction;
use crate::objectives::LossWeights;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub num_layers: usize,
    pub set_layers: Vec<usize>,
    pub gamma: f64,
    pub kappa: f64,
    pub kv_projection: KvProjection,
    pub kept_tokens: KeptTokens,
    pub bridge_hidden: usize,
    pub normalize_prototypes: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub cosine_decay: bool,
    pub grad_clip: f64,
    pub seed: u64,
    pub lambda_sr: f64,
    pub lambda_vr: f64,
    pub l1_reduction: L1Reduction,
    pub tau: f64,
    pub eval_every: usize,
    pub checkpoint_every: usize,
    pub divergence_threshold: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let b = BackboneConfig::default();
        let k = BlockConfig::default();
        let t = TrainConfig::default();
        RunConfig {
            patch_size: b.patch_size,
            embed_dim: b.embed_dim,
            num_heads: b.num_heads,
            mlp_ratio: b.mlp_ratio,
            num_layers: b.num_layers,
            set_layers: b.set_layers,
            gamma: k.gamma,
            kappa: k.kappa,
            kv_projection: k.kv_projection,
            kept_tokens: k.kept_tokens,
            bridge_hidden: k.bridge_hidden,
            normalize_prototypes: false,
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            adam_beta1: t.adam_beta1,
            adam_beta2: t.adam_beta2,
            adam_eps: t.adam_eps,
            cosine_decay: t.cosine_decay,
            grad_clip: t.grad_clip,
            seed: t.seed,
            lambda_sr: t.weights.lambda_sr,
            lambda_vr: t.weights.lambda_vr,
            l1_reduction: t.l1_reduction,
            tau: t.tau,
            eval_every: t.eval_every,
            checkpoint_every: t.checkpoint_every,
            divergence_threshold: t.divergence_threshold,
        }
    }
}

impl RunConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        parse_flat(text)
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies `key=value` pairs on top of `self`.
    pub fn with_overrides(&self, overrides: &[(String, String)]) -> Result<Self> {
        with_overrides(self, overrides)
    }

    pub fn model_config(&self, image_size: usize, channels: usize, attr_dim: usize) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            backbone: BackboneConfig {
                image_size,
                patch_size: self.patch_size,
                channels,
                embed_dim: self.embed_dim,
                num_heads: self.num_heads,
                mlp_ratio: self.mlp_ratio,
                num_layers: self.num_layers,
                set_layers: self.set_layers.clone(),
            },
            block: BlockConfig {
                gamma: self.gamma,
                kappa: self.kappa,
                kv_projection: self.kv_projection,
                kept_tokens: self.kept_tokens,
                bridge_hidden: self.bridge_hidden,
            },
            attr_dim,
            normalize_prototypes: self.normalize_prototypes,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            adam_beta1: self.adam_beta1,
            adam_beta2: self.adam_beta2,
            adam_eps: self.adam_eps,
            cosine_decay: self.cosine_decay,
            grad_clip: self.grad_clip,
            seed: self.seed,
            weights: LossWeights {
                lambda_sr: self.lambda_sr,
                lambda_vr: self.lambda_vr,
            },
            l1_reduction: self.l1_reduction,
            tau: self.tau,
            eval_every: self.eval_every,
            checkpoint_every: self.checkpoint_every,
            divergence_threshold: self.divergence_threshold,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Splits `key=value`.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    match s.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.trim().to_string())),
        _ => Err(Error::config(s, "expected key=value")),
    }
}

/// Reads a raw override value: a TOML literal when it parses as one, a comma
/// list for array-valued keys, a bare string otherwise.
fn override_value(current: Option<&Value>, raw: &str) -> Result<Value> {
    if let Some(Value::Array(_)) = current {
        let inner = raw.trim().trim_start_matches('[').trim_end_matches(']');
        return inner
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| literal(s).ok_or(()))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map(Value::Array)
            .map_err(|_| Error::config("", format!("{raw:?} is not a comma-separated list")));
    }
    Ok(literal(raw).unwrap_or_else(|| Value::String(raw.to_string())))
}

fn literal(raw: &str) -> Option<Value> {
    let t: Table = format!("v = {raw}").parse().ok()?;
    t.get("v").cloned()
}

/// Parses flat `key = value` text into any config type.
pub fn parse_flat<T>(text: &str) -> Result<T>
where
    T: DeserializeOwned + Serialize + Default,
{
    let table: Table = text
        .parse()
        .map_err(|e: toml::de::Error| Error::config("<file>", e.message().trim().to_string()))?;
    from_table(table)
}

/// Deserializes a flat table, naming the first offending key on failure.
pub fn from_table<T>(table: Table) -> Result<T>
where
    T: DeserializeOwned + Serialize + Default,
{
    let known = Table::try_from(T::default()).expect("defaults serialize");
    for key in table.keys() {
        if !known.contains_key(key) {
            return Err(Error::config(key.clone(), "unknown key"));
        }
    }
    for (key, value) in &table {
        let mut one = Table::new();
        one.insert(key.clone(), value.clone());
        if let Err(e) = T::deserialize(Value::Table(one)) {
            return Err(Error::config(key.clone(), e.message().trim().to_string()));
        }
    }
    T::deserialize(Value::Table(table)).map_err(|e| Error::config("<file>", e.message().trim().to_string()))
}

/// Applies `key=value` overrides to any flat config type.
pub fn with_overrides<T>(base: &T, overrides: &[(String, String)]) -> Result<T>
where
    T: DeserializeOwned + Serialize + Default,
{
    let mut table = Table::try_from(base).expect("config serializes");
    let known = Table::try_from(T::default()).expect("defaults serialize");
    for (key, raw) in overrides {
        if !known.contains_key(key) {
            return Err(Error::config(key.clone(), "unknown key"));
        }
        let value = override_value(known.get(key), raw).map_err(|e| match e {
            Error::Config { reason, .. } => Error::config(key.clone(), reason),
            other => other,
        })?;
        table.insert(key.clone(), value);
    }
    from_table(table)
}
