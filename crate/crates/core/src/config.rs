//! Training configuration and its `key = value` text form.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::objectives::{check_lambdas, Negatives};
use crate::seq_encoder::EncoderDims;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    #[default]
    None,
    /// Drop the user-dimension contrastive term.
    TCl,
    /// Drop the item-dimension contrastive term.
    CCl,
    /// Drop both contrastive terms.
    Cl,
    /// Replace ω and ψ by the constant 0.5.
    AdaptiveCl,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [Self::None, Self::TCl, Self::CCl, Self::Cl, Self::AdaptiveCl];

    pub fn tag(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::TCl => "t-cl",
            Self::CCl => "c-cl",
            Self::Cl => "cl",
            Self::AdaptiveCl => "adaptive-cl",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::None => "full",
            Self::TCl => "w/o T-CL",
            Self::CCl => "w/o C-CL",
            Self::Cl => "w/o CL",
            Self::AdaptiveCl => "w/o Adaptive-CL",
        }
    }

    pub fn keeps_user_cl(self) -> bool {
        !matches!(self, Self::TCl | Self::Cl)
    }

    pub fn keeps_item_cl(self) -> bool {
        !matches!(self, Self::CCl | Self::Cl)
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.tag() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation {s:?} (expected none, t-cl, c-cl, cl or adaptive-cl)")))
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub embed_dim: usize,
    pub transformer_layers: usize,
    pub gnn_layers: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub dropout: f64,
    pub t_max: usize,
    pub min_length: usize,
    pub top_k: usize,
    pub mu_c: f64,
    pub sigma: f64,
    pub tau: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub negatives: Negatives,
    pub lr: f64,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Treat ω as a constant in the contrastive terms.
    pub detach_conformity: bool,
    /// Graph encoders propagate the sequence encoder's item table.
    pub share_graph_base: bool,
    /// Train on a random prefix of each history every epoch instead of the
    /// full history.
    pub prefix_augment: bool,
    pub ablation: Ablation,
    pub memory_limit_mb: usize,
    /// Write per-epoch conformity CSVs.
    pub diagnostics: bool,
    pub cold_start_threshold: usize,
    pub sparsity_groups: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            embed_dim: 64,
            transformer_layers: 2,
            gnn_layers: 2,
            heads: 2,
            ffn_hidden: 256,
            dropout: 0.2,
            t_max: 50,
            min_length: 3,
            top_k: 4,
            mu_c: 0.5,
            sigma: 0.1,
            tau: 1.0,
            lambda1: 1e-3,
            lambda2: 1e-2,
            negatives: Negatives::FullCatalog,
            lr: 1e-3,
            batch_size: 256,
            eval_batch_size: 512,
            max_epochs: 50,
            patience: 5,
            seed: 42,
            detach_conformity: false,
            share_graph_base: true,
            prefix_augment: true,
            ablation: Ablation::None,
            memory_limit_mb: 8192,
            diagnostics: false,
            cold_start_threshold: 20,
            sparsity_groups: 5,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse {value:?}: {e}")))
}

impl TrainConfig {
    pub const KEYS: [&'static str; 29] = [
        "embed_dim",
        "transformer_layers",
        "gnn_layers",
        "heads",
        "ffn_hidden",
        "dropout",
        "t_max",
        "min_length",
        "top_k",
        "mu_c",
        "sigma",
        "tau",
        "lambda1",
        "lambda2",
        "negatives",
        "lr",
        "batch_size",
        "eval_batch_size",
        "max_epochs",
        "patience",
        "seed",
        "detach_conformity",
        "share_graph_base",
        "prefix_augment",
        "ablation",
        "memory_limit_mb",
        "diagnostics",
        "cold_start_threshold",
        "sparsity_groups",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "embed_dim" | "d" => self.embed_dim = parse(key, v)?,
            "transformer_layers" => self.transformer_layers = parse(key, v)?,
            "gnn_layers" => self.gnn_layers = parse(key, v)?,
            "heads" => self.heads = parse(key, v)?,
            "ffn_hidden" => self.ffn_hidden = parse(key, v)?,
            "dropout" => self.dropout = parse(key, v)?,
            "t_max" => self.t_max = parse(key, v)?,
            "min_length" => self.min_length = parse(key, v)?,
            "top_k" | "k" => self.top_k = parse(key, v)?,
            "mu_c" => self.mu_c = parse(key, v)?,
            "sigma" => self.sigma = parse(key, v)?,
            "tau" => self.tau = parse(key, v)?,
            "lambda1" => self.lambda1 = parse(key, v)?,
            "lambda2" => self.lambda2 = parse(key, v)?,
            "negatives" => self.negatives = v.parse()?,
            "lr" => self.lr = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "eval_batch_size" => self.eval_batch_size = parse(key, v)?,
            "max_epochs" => self.max_epochs = parse(key, v)?,
            "patience" => self.patience = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "detach_conformity" => self.detach_conformity = parse(key, v)?,
            "share_graph_base" => self.share_graph_base = parse(key, v)?,
            "prefix_augment" => self.prefix_augment = parse(key, v)?,
            "ablation" => self.ablation = v.parse()?,
            "memory_limit_mb" => self.memory_limit_mb = parse(key, v)?,
            "diagnostics" => self.diagnostics = parse(key, v)?,
            "cold_start_threshold" => self.cold_start_threshold = parse(key, v)?,
            "sparsity_groups" => self.sparsity_groups = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Parse `key = value` lines on top of the defaults. `#` starts a comment.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut config = TrainConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            config
                .set(key, value.trim().trim_matches('"'))
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    fn value_of(&self, key: &str) -> String {
        match key {
            "embed_dim" => self.embed_dim.to_string(),
            "transformer_layers" => self.transformer_layers.to_string(),
            "gnn_layers" => self.gnn_layers.to_string(),
            "heads" => self.heads.to_string(),
            "ffn_hidden" => self.ffn_hidden.to_string(),
            "dropout" => self.dropout.to_string(),
            "t_max" => self.t_max.to_string(),
            "min_length" => self.min_length.to_string(),
            "top_k" => self.top_k.to_string(),
            "mu_c" => self.mu_c.to_string(),
            "sigma" => self.sigma.to_string(),
            "tau" => self.tau.to_string(),
            "lambda1" => self.lambda1.to_string(),
            "lambda2" => self.lambda2.to_string(),
            "negatives" => self.negatives.to_string(),
            "lr" => self.lr.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "eval_batch_size" => self.eval_batch_size.to_string(),
            "max_epochs" => self.max_epochs.to_string(),
            "patience" => self.patience.to_string(),
            "seed" => self.seed.to_string(),
            "detach_conformity" => self.detach_conformity.to_string(),
            "share_graph_base" => self.share_graph_base.to_string(),
            "prefix_augment" => self.prefix_augment.to_string(),
            "ablation" => self.ablation.to_string(),
            "memory_limit_mb" => self.memory_limit_mb.to_string(),
            "diagnostics" => self.diagnostics.to_string(),
            "cold_start_threshold" => self.cold_start_threshold.to_string(),
            "sparsity_groups" => self.sparsity_groups.to_string(),
            _ => unreachable!("unlisted key {key}"),
        }
    }

    /// Canonical text, one `key = value` per line in a fixed key order.
    pub fn to_text(&self) -> String {
        Self::KEYS.iter().map(|k| format!("{k} = {}\n", self.value_of(k))).collect()
    }

    /// Hash of the canonical text without `seed` and `ablation`, so runs that
    /// differ only in those group together.
    pub fn config_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for k in Self::KEYS.iter().filter(|k| !matches!(**k, "seed" | "ablation")) {
            hasher.update(format!("{k} = {}\n", self.value_of(k)));
        }
        hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn encoder_dims(&self) -> EncoderDims {
        EncoderDims {
            embed_dim: self.embed_dim,
            heads: self.heads,
            blocks: self.transformer_layers,
            ffn_hidden: self.ffn_hidden,
            t_max: self.t_max,
            dropout: self.dropout,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        self.encoder_dims().validate()?;
        if self.embed_dim == 0 || self.ffn_hidden == 0 {
            return cfg("embed_dim and ffn_hidden must be positive".into());
        }
        if self.gnn_layers == 0 {
            return cfg("gnn_layers must be >= 1".into());
        }
        if self.top_k == 0 {
            return cfg("top_k must be >= 1".into());
        }
        if !(self.mu_c > 0.0 && self.mu_c < 1.0) {
            return cfg(format!("mu_c must lie in (0,1), got {}", self.mu_c));
        }
        if !(self.sigma > 0.0) {
            return cfg(format!("sigma must be > 0, got {}", self.sigma));
        }
        if !(self.tau > 0.0) {
            return cfg(format!("tau must be > 0, got {}", self.tau));
        }
        check_lambdas(self.lambda1, self.lambda2).map_err(|e| Error::Config(e.to_string()))?;
        if !(self.lr > 0.0) {
            return cfg(format!("lr must be > 0, got {}", self.lr));
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return cfg("batch sizes must be >= 1".into());
        }
        if self.max_epochs == 0 {
            return cfg("max_epochs must be >= 1".into());
        }
        if self.sparsity_groups == 0 {
            return cfg("sparsity_groups must be >= 1".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let c = TrainConfig::default();
        assert_eq!(TrainConfig::from_text(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn parses_comments_and_overrides() {
        let c = TrainConfig::from_text("# toy\nembed_dim = 32 # smaller\n\nablation = adaptive-cl\nnegatives=in_batch\n").unwrap();
        assert_eq!(c.embed_dim, 32);
        assert_eq!(c.ablation, Ablation::AdaptiveCl);
        assert_eq!(c.negatives, Negatives::InBatch);
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        assert!(matches!(TrainConfig::from_text("bogus = 1"), Err(Error::Config(_))));
        assert!(matches!(TrainConfig::from_text("heads = 3"), Err(Error::Config(_))));
        assert!(matches!(TrainConfig::from_text("mu_c = 1.5"), Err(Error::Config(_))));
        assert!(matches!(TrainConfig::from_text("tau"), Err(Error::Config(_))));
        assert!(matches!(TrainConfig::from_text("lambda1 = -1"), Err(Error::Config(_))));
    }

    #[test]
    fn hash_ignores_seed_and_ablation() {
        let a = TrainConfig::default();
        let mut b = a.clone();
        b.seed = 9;
        b.ablation = Ablation::Cl;
        assert_eq!(a.config_hash(), b.config_hash());
        b.tau = 0.5;
        assert_ne!(a.config_hash(), b.config_hash());
    }

    #[test]
    fn ablation_tags_round_trip() {
        for a in Ablation::ALL {
            assert_eq!(a.tag().parse::<Ablation>().unwrap(), a);
        }
        assert!("none-of-these".parse::<Ablation>().is_err());
    }
}
