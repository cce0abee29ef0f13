//! Experiment configuration: flat JSON file format, CLI overrides, and the
//! content hash that names each run's output directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use trigan_core::loss::KlDirection;
use trigan_core::train::{TrainerKind, UpdateOrder};

use crate::CliError;

/// Full hyperparameter and protocol record for one run or sweep. Field
/// names double as the JSON keys; CLI flags override file values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub trainer: String,
    pub tau: f64,
    pub alpha: f64,
    pub lambda: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub latent_dim: usize,
    pub image_size: usize,
    pub base_width: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub synthetic: bool,
    pub data_dir: Option<PathBuf>,
    pub n_train: usize,
    pub val_size: usize,
    /// Synthetic pool to subsample n_train from; defaults to n_train.
    pub pool_size: Option<usize>,
    /// Seed for the dataset itself (pool + validation split); defaults to
    /// `seed`. Sweeps pin it so every repeat sees the same data.
    pub data_seed: Option<u64>,
    pub train_sizes: Vec<usize>,
    pub repeats: usize,
    pub trainers: Vec<String>,
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    pub kl_direction: String,
    pub update_order: String,
    pub sample_every: usize,
    pub jobs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            trainer: "3ngan".into(),
            tau: 0.9,
            alpha: 0.3,
            lambda: 0.01,
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            latent_dim: 100,
            image_size: 64,
            base_width: 64,
            epochs: 100,
            batch_size: 10,
            synthetic: false,
            data_dir: None,
            n_train: 200,
            val_size: 400,
            pool_size: None,
            data_seed: None,
            train_sizes: vec![200, 500, 750, 1000, 2000],
            repeats: 5,
            trainers: vec![
                "vanilla".into(),
                "multitask".into(),
                "ecgan".into(),
                "3ngan".into(),
            ],
            seed: 1,
            out_dir: None,
            kl_direction: "real-to-fake".into(),
            update_order: "dgc".into(),
            sample_every: 10,
            jobs: 1,
        }
    }
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::new(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::new(format!("invalid config {}: {e}", path.display())))
    }

    pub fn trainer_kind(&self) -> Result<TrainerKind, CliError> {
        TrainerKind::parse(&self.trainer).map_err(CliError::from)
    }

    pub fn kl_direction(&self) -> Result<KlDirection, CliError> {
        match self.kl_direction.as_str() {
            "real-to-fake" => Ok(KlDirection::RealToFake),
            "fake-to-real" => Ok(KlDirection::FakeToReal),
            other => Err(CliError::new(format!(
                "kl_direction must be real-to-fake or fake-to-real, got {other:?}"
            ))),
        }
    }

    pub fn update_order(&self) -> Result<UpdateOrder, CliError> {
        UpdateOrder::parse(&self.update_order).map_err(CliError::from)
    }

    pub fn resolved_pool_size(&self) -> usize {
        self.pool_size.unwrap_or(self.n_train).max(self.n_train)
    }

    pub fn resolved_data_seed(&self) -> u64 {
        self.data_seed.unwrap_or(self.seed)
    }

    /// Reject bad fields by name before any compute.
    pub fn validate(&self) -> Result<(), CliError> {
        self.trainer_kind()?;
        self.kl_direction()?;
        self.update_order()?;
        for t in &self.trainers {
            TrainerKind::parse(t).map_err(CliError::from)?;
        }
        if self.batch_size == 0 {
            return Err(CliError::new("batch_size must be >= 1"));
        }
        if self.image_size < 32 || !self.image_size.is_power_of_two() {
            return Err(CliError::new(format!(
                "image_size must be a power of two >= 32, got {}",
                self.image_size
            )));
        }
        if !self.synthetic && self.data_dir.is_none() {
            return Err(CliError::new(
                "no dataset source: pass --synthetic or --data-dir",
            ));
        }
        if self.synthetic && self.n_train % 2 != 0 {
            return Err(CliError::new("n_train must be even for the synthetic set"));
        }
        if self.synthetic && self.val_size % 2 != 0 {
            return Err(CliError::new("val_size must be even for the synthetic set"));
        }
        if !(0.0..=1.0).contains(&self.tau) || self.alpha < 0.0 || self.lambda < 0.0 {
            return Err(CliError::new(
                "tau must lie in [0,1]; alpha and lambda must be >= 0",
            ));
        }
        if self.lr < 0.0 {
            return Err(CliError::new("lr must be >= 0"));
        }
        if self.repeats == 0 {
            return Err(CliError::new("repeats must be >= 1"));
        }
        if self.train_sizes.is_empty() {
            return Err(CliError::new("train_sizes must be non-empty"));
        }
        Ok(())
    }

    /// Stable content hash naming the output directory of this config.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        let mut out = String::with_capacity(12);
        for b in &digest[..6] {
            out.push_str(&format!("{b:02x}"));
        }
        out
    }

    /// Output root: explicit out_dir, then the TRIGAN_OUT environment
    /// variable, then ./runs.
    pub fn out_root(&self) -> PathBuf {
        if let Some(dir) = &self.out_dir {
            return dir.clone();
        }
        if let Ok(env) = std::env::var("TRIGAN_OUT") {
            if !env.is_empty() {
                return PathBuf::from(env);
            }
        }
        PathBuf::from("runs")
    }
}
