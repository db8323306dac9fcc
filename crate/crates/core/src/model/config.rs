use std::fmt;

use crate::attention::{head_width, AblationMode, Init};
use crate::error::{Error, Result};

/// Architecture of an encoder or encoder-decoder edge transformer.
///
/// Token-valued inputs use `vocab_size` rows; graph inputs use
/// `num_edge_labels` real labels plus one reserved null row. For
/// sequence-to-sequence models `num_output_labels` is the target vocabulary,
/// whose last two ids are `<bos>` and `<eos>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub d: usize,
    pub heads: usize,
    pub tied: bool,
    pub mode: AblationMode,
    pub ffn_residual: bool,
    pub init: Init,
    pub vocab_size: usize,
    pub num_edge_labels: usize,
    pub num_output_labels: usize,
    pub rel_clip: usize,
    /// Longest source sequence and longest decoder input accepted.
    pub max_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_layers: 4,
            d: 64,
            heads: 4,
            tied: true,
            mode: AblationMode::Base,
            ffn_residual: false,
            init: Init::FanIn,
            vocab_size: 0,
            num_edge_labels: 5,
            num_output_labels: 5,
            rel_clip: 16,
            max_len: 16,
        }
    }
}

/// Keys understood by [`ModelConfig::set`], in canonical (sorted) order.
pub const MODEL_KEYS: [&str; 12] = [
    "model.d",
    "model.ffn_residual",
    "model.heads",
    "model.init",
    "model.layers",
    "model.max_len",
    "model.mode",
    "model.num_edge_labels",
    "model.num_output_labels",
    "model.rel_clip",
    "model.tied",
    "model.vocab_size",
];

pub(crate) fn parse_value<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        head_width(self.d, self.heads)?;
        if self.rel_clip == 0 {
            return Err(Error::Config("model.rel_clip must be positive".into()));
        }
        if self.num_output_labels == 0 {
            return Err(Error::Config("model.num_output_labels must be positive".into()));
        }
        if self.max_len == 0 {
            return Err(Error::Config("model.max_len must be positive".into()));
        }
        Ok(())
    }

    /// Number of distinct layer parameter sets per stack.
    pub fn num_layer_params(&self) -> usize {
        if self.tied {
            self.num_layers.min(1)
        } else {
            self.num_layers
        }
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "model.d" => self.d.to_string(),
            "model.ffn_residual" => self.ffn_residual.to_string(),
            "model.heads" => self.heads.to_string(),
            "model.init" => self.init.to_string(),
            "model.layers" => self.num_layers.to_string(),
            "model.max_len" => self.max_len.to_string(),
            "model.mode" => self.mode.to_string(),
            "model.num_edge_labels" => self.num_edge_labels.to_string(),
            "model.num_output_labels" => self.num_output_labels.to_string(),
            "model.rel_clip" => self.rel_clip.to_string(),
            "model.tied" => self.tied.to_string(),
            "model.vocab_size" => self.vocab_size.to_string(),
            _ => return None,
        })
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "model.d" => self.d = parse_value(key, value)?,
            "model.ffn_residual" => self.ffn_residual = parse_value(key, value)?,
            "model.heads" => self.heads = parse_value(key, value)?,
            "model.init" => self.init = value.trim().parse()?,
            "model.layers" => self.num_layers = parse_value(key, value)?,
            "model.max_len" => self.max_len = parse_value(key, value)?,
            "model.mode" => self.mode = value.trim().parse()?,
            "model.num_edge_labels" => self.num_edge_labels = parse_value(key, value)?,
            "model.num_output_labels" => self.num_output_labels = parse_value(key, value)?,
            "model.rel_clip" => self.rel_clip = parse_value(key, value)?,
            "model.tied" => self.tied = parse_value(key, value)?,
            "model.vocab_size" => self.vocab_size = parse_value(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// All keys with their values, sorted by key.
    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        MODEL_KEYS.iter().map(|&k| (k, self.get(k).expect("every listed key is readable"))).collect()
    }

    /// Rebuilds a config from `key=value` pairs; every model key must be present.
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        let mut seen = Vec::new();
        for (k, v) in pairs {
            cfg.set(k, v)?;
            seen.push(k);
        }
        if let Some(missing) = MODEL_KEYS.iter().find(|k| !seen.contains(k)) {
            return Err(Error::Config(format!("missing key {missing}")));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in self.pairs() {
            writeln!(f, "{k}={v}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keys_are_sorted_and_round_trip() {
        let mut sorted = MODEL_KEYS;
        sorted.sort_unstable();
        assert_eq!(sorted, MODEL_KEYS);
        let mut cfg = ModelConfig::default();
        cfg.set("model.mode", "value_ablation").unwrap();
        cfg.set("model.tied", "false").unwrap();
        cfg.set("model.init", "glorot").unwrap();
        let pairs = cfg.pairs();
        let back = ModelConfig::from_pairs(pairs.iter().map(|(k, v)| (*k, v.as_str()))).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn rejects_bad_values() {
        let mut cfg = ModelConfig::default();
        assert!(cfg.set("model.dd", "3").is_err());
        assert!(cfg.set("model.d", "x").is_err());
        cfg.heads = 3;
        assert!(cfg.validate().is_err());
    }
}
