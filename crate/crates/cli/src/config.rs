//! Flat TOML experiment config.
//!
//! Required keys: `classes`, `input_dim`, `n_max`, `n_min`, `epochs`,
//! `seeds`. Everything else has a default; see `configs/desk.toml` for the
//! full list with comments.

use std::path::{Path, PathBuf};

use breadcrumbs::analysis::{FitConfig, Optimality};
use breadcrumbs::classifier::StageTwoConfig;
use breadcrumbs::datagen::DatasetConfig;
use breadcrumbs::embedding::{Activation, StageOneConfig};
use breadcrumbs::{alignment_registry, strategy_registry};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Environment variable that overrides the configured output directory.
pub const OUT_ROOT_ENV: &str = "BREADCRUMBS_OUT_ROOT";

#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

fn config_err(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    // dataset
    pub classes: usize,
    pub input_dim: usize,
    pub n_max: usize,
    pub n_min: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pareto_alpha: Option<f64>,
    #[serde(default = "defaults::cluster_spread")]
    pub cluster_spread: f64,
    #[serde(default = "defaults::mean_range")]
    pub mean_range: f64,
    #[serde(default = "defaults::test_per_class")]
    pub test_per_class: usize,
    #[serde(default)]
    pub dataset_seed: u64,

    // stage one
    pub epochs: u32,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::momentum")]
    pub momentum: f64,
    #[serde(default = "defaults::weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "defaults::base_lr")]
    pub base_lr: f64,
    #[serde(default)]
    pub decay_bias: bool,
    #[serde(default = "defaults::hidden")]
    pub hidden: usize,
    #[serde(default = "defaults::feature_dim")]
    pub feature_dim: usize,
    #[serde(default = "defaults::activation")]
    pub activation: String,

    // stage two
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage2_epochs: Option<u32>,
    #[serde(default = "defaults::batch_size")]
    pub stage2_batch_size: usize,
    #[serde(default = "defaults::momentum")]
    pub stage2_momentum: f64,
    #[serde(default = "defaults::weight_decay")]
    pub stage2_weight_decay: f64,
    #[serde(default = "defaults::base_lr")]
    pub stage2_base_lr: f64,
    #[serde(default = "defaults::strategies")]
    pub strategies: Vec<String>,
    #[serde(default = "defaults::alignment")]
    pub alignment: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_b: Option<usize>,

    // evaluation
    #[serde(default = "defaults::many_threshold")]
    pub many_threshold: usize,
    #[serde(default = "defaults::few_threshold")]
    pub few_threshold: usize,
    #[serde(default = "defaults::hard_loss_threshold")]
    pub hard_loss_threshold: f64,

    // verification
    /// How many of the leading seeds get the lemma/theorem checks.
    #[serde(default = "defaults::verify_seeds")]
    pub verify_seeds: usize,
    #[serde(default = "defaults::lemma_pairs")]
    pub lemma_pairs: usize,
    #[serde(default = "defaults::lemma_tolerance")]
    pub lemma_tolerance: f64,
    #[serde(default = "defaults::lemma_min_rate")]
    pub lemma_min_rate: f64,
    #[serde(default = "defaults::optimality")]
    pub optimality: String,
    #[serde(default = "defaults::fit_grad_tol")]
    pub fit_grad_tol: f64,
    #[serde(default = "defaults::fit_max_iters")]
    pub fit_max_iters: usize,

    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

mod defaults {
    pub fn cluster_spread() -> f64 {
        1.0
    }
    pub fn mean_range() -> f64 {
        1.0
    }
    pub fn test_per_class() -> usize {
        20
    }
    pub fn batch_size() -> usize {
        64
    }
    pub fn momentum() -> f64 {
        0.9
    }
    pub fn weight_decay() -> f64 {
        0.0005
    }
    pub fn base_lr() -> f64 {
        0.025
    }
    pub fn hidden() -> usize {
        64
    }
    pub fn feature_dim() -> usize {
        32
    }
    pub fn activation() -> String {
        "tanh".into()
    }
    pub fn strategies() -> Vec<String> {
        breadcrumbs::strategy_registry().names().iter().map(|s| s.to_string()).collect()
    }
    pub fn alignment() -> String {
        "mean".into()
    }
    pub fn many_threshold() -> usize {
        100
    }
    pub fn few_threshold() -> usize {
        20
    }
    pub fn hard_loss_threshold() -> f64 {
        breadcrumbs::analysis::HARD_LOSS_THRESHOLD
    }
    pub fn verify_seeds() -> usize {
        1
    }
    pub fn lemma_pairs() -> usize {
        200
    }
    pub fn lemma_tolerance() -> f64 {
        breadcrumbs::analysis::LEMMA_TOLERANCE
    }
    pub fn lemma_min_rate() -> f64 {
        0.95
    }
    pub fn optimality() -> String {
        "shared".into()
    }
    pub fn fit_grad_tol() -> f64 {
        1e-5
    }
    pub fn fit_max_iters() -> usize {
        2000
    }
}

/// Command-line overrides, applied after parsing and before hashing.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    /// `all`, one strategy name, or a comma-separated list.
    pub strategy: Option<String>,
    pub n_b: Option<usize>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) -> anyhow::Result<()> {
        if let Some(seed) = o.seed {
            self.seeds = vec![seed];
        }
        if let Some(sel) = &o.strategy {
            if sel != "all" {
                self.strategies = sel.split(',').map(|s| s.trim().to_string()).collect();
            }
        }
        if o.n_b.is_some() {
            self.n_b = o.n_b;
        }
        self.validate()
    }

    /// `--out`, then the environment override, then `out_dir`, then `runs`.
    pub fn output_root(&self, cli_out: Option<&Path>) -> PathBuf {
        if let Some(p) = cli_out {
            return p.to_path_buf();
        }
        if let Some(p) = std::env::var_os(OUT_ROOT_ENV) {
            return PathBuf::from(p);
        }
        self.out_dir.clone().unwrap_or_else(|| PathBuf::from("runs"))
    }

    // negated comparisons also reject NaN
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> anyhow::Result<()> {
        self.dataset().validate().map_err(|e| config_err(e.to_string()))?;
        self.stage_one(0).validate().map_err(|e| config_err(e.to_string()))?;
        self.stage_two(0).sgd().validate().map_err(|e| config_err(e.to_string()))?;
        Activation::from_name(&self.activation).map_err(|e| config_err(e.to_string()))?;
        Optimality::from_name(&self.optimality).map_err(|e| config_err(e.to_string()))?;
        if self.seeds.is_empty() {
            return Err(config_err("`seeds` must list at least one seed"));
        }
        if self.strategies.is_empty() {
            return Err(config_err("`strategies` must name at least one strategy"));
        }
        let reg = strategy_registry();
        for s in &self.strategies {
            if !reg.contains(s) {
                return Err(config_err(format!(
                    "unknown strategy '{s}' (known: {})",
                    reg.names().join(", ")
                )));
            }
        }
        let aligns = alignment_registry();
        if !aligns.contains(&self.alignment) {
            return Err(config_err(format!(
                "unknown alignment '{}' (known: {})",
                self.alignment,
                aligns.names().join(", ")
            )));
        }
        if self.stage2_batch_size == 0 {
            return Err(config_err("`stage2_batch_size` must be >= 1"));
        }
        if self.stage2_epochs == Some(0) {
            return Err(config_err("`stage2_epochs` must be >= 1"));
        }
        if self.n_b == Some(0) {
            return Err(config_err("`n_b` must be >= 1"));
        }
        if self.few_threshold >= self.many_threshold {
            return Err(config_err("`few_threshold` must be below `many_threshold`"));
        }
        if !(self.lemma_tolerance >= 0.0) || !(0.0..=1.0).contains(&self.lemma_min_rate) {
            return Err(config_err("`lemma_tolerance` must be >= 0 and `lemma_min_rate` in [0, 1]"));
        }
        if !(self.fit_grad_tol > 0.0) || self.fit_max_iters == 0 {
            return Err(config_err("`fit_grad_tol` must be > 0 and `fit_max_iters` >= 1"));
        }
        Ok(())
    }

    pub fn dataset(&self) -> DatasetConfig {
        DatasetConfig {
            classes: self.classes,
            input_dim: self.input_dim,
            n_max: self.n_max,
            n_min: self.n_min,
            pareto_alpha: self.pareto_alpha,
            cluster_spread: self.cluster_spread,
            mean_range: self.mean_range,
            test_per_class: self.test_per_class,
            seed: self.dataset_seed,
        }
    }

    pub fn stage_one(&self, seed: u64) -> StageOneConfig {
        StageOneConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            base_lr: self.base_lr,
            decay_bias: self.decay_bias,
            hidden: self.hidden,
            feature_dim: self.feature_dim,
            activation: Activation::from_name(&self.activation).unwrap_or(Activation::Tanh),
            seed,
        }
    }

    pub fn stage_two(&self, seed: u64) -> StageTwoConfig {
        StageTwoConfig {
            epochs: self.stage2_epochs,
            batch_size: self.stage2_batch_size,
            momentum: self.stage2_momentum,
            weight_decay: self.stage2_weight_decay,
            base_lr: self.stage2_base_lr,
            decay_bias: self.decay_bias,
            seed,
        }
    }

    pub fn fit(&self) -> FitConfig {
        FitConfig {
            grad_tol: self.fit_grad_tol,
            max_iters: self.fit_max_iters,
            ..FitConfig::default()
        }
    }

    pub fn optimality_reading(&self) -> Optimality {
        Optimality::from_name(&self.optimality).unwrap_or(Optimality::Shared)
    }

    /// Seeds that get the lemma/theorem checks.
    pub fn verified_seeds(&self) -> &[u64] {
        &self.seeds[..self.verify_seeds.min(self.seeds.len())]
    }

    /// SHA-256 over the canonical JSON of everything that determines
    /// results. Which seeds and strategies are run, and where outputs go, are
    /// selections within one experiment and are left out.
    pub fn hash(&self) -> [u8; 32] {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(map) = v.as_object_mut() {
            for k in ["seeds", "strategies", "verify_seeds", "out_dir"] {
                map.remove(k);
            }
        }
        Sha256::digest(v.to_string().as_bytes()).into()
    }

    pub fn hash_hex(&self) -> String {
        hex::encode(self.hash())
    }
}
