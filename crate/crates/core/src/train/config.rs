//! Flat key-value training configuration.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{DataConfig, PoseConstraints};
use crate::error::{Error, Result};
use crate::model::{Ablation, GeneratorConfig};
use crate::objectives::{GanReduction, LossWeights};

/// Every knob of a run. Serialized as a flat TOML table; unspecified keys
/// take the defaults below and unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Number of BGR + IA stages.
    pub stages: usize,
    pub channels: usize,
    pub nodes_b2a: usize,
    pub nodes_a2b: usize,
    pub state_dim: usize,
    pub height: usize,
    pub width: usize,
    pub batch_size: usize,
    pub lambda_gan: f64,
    pub lambda_l1: f64,
    pub lambda_per: f64,
    pub gan_reduction: GanReduction,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub steps: usize,
    pub seed: u64,
    pub perceptual_seed: u64,
    pub use_b2a: bool,
    pub use_a2b: bool,
    pub share_gcn: bool,
    pub use_aif: bool,
    pub n_train: usize,
    pub n_test: usize,
    /// Held-out samples used by evaluation.
    pub eval_samples: usize,
    pub heatmap_radius: f64,
    pub disc_width: usize,
    /// Stride-2 layers per discriminator.
    pub disc_layers: usize,
    /// Steps between checkpoints; 0 saves only at the start and the end.
    pub checkpoint_every: usize,
    /// Steps between held-out evaluations; 0 evaluates only at the end.
    pub eval_every: usize,
    /// Steps between progress lines; 0 is silent.
    pub log_every: usize,
    pub output_dir: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            stages: 3,
            channels: 32,
            nodes_b2a: 16,
            nodes_a2b: 16,
            state_dim: 32,
            height: 64,
            width: 32,
            batch_size: 8,
            lambda_gan: w.lambda_gan,
            lambda_l1: w.lambda_l1,
            lambda_per: w.lambda_per,
            gan_reduction: GanReduction::Average,
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            epsilon: 1e-8,
            steps: 2000,
            seed: 0,
            perceptual_seed: 7,
            use_b2a: true,
            use_a2b: true,
            share_gcn: false,
            use_aif: true,
            n_train: 200,
            n_test: 50,
            eval_samples: 50,
            heatmap_radius: 2.0,
            disc_width: 16,
            disc_layers: 3,
            checkpoint_every: 500,
            eval_every: 0,
            log_every: 100,
            output_dir: "runs/default".into(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config always serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("stages", self.stages),
            ("channels", self.channels),
            ("nodes_b2a", self.nodes_b2a),
            ("nodes_a2b", self.nodes_a2b),
            ("state_dim", self.state_dim),
            ("batch_size", self.batch_size),
            ("n_train", self.n_train),
            ("n_test", self.n_test),
            ("eval_samples", self.eval_samples),
            ("disc_width", self.disc_width),
            ("disc_layers", self.disc_layers),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.channels < 4 {
            return Err(Error::Config("channels must be at least 4".into()));
        }
        if self.share_gcn && self.nodes_b2a != self.nodes_a2b {
            return Err(Error::Config("share_gcn needs nodes_b2a == nodes_a2b".into()));
        }
        let unit = 1usize << self.disc_layers.max(2);
        if !self.height.is_multiple_of(unit) || !self.width.is_multiple_of(unit) {
            return Err(Error::Config(format!(
                "image size {}x{} must be divisible by {unit}",
                self.height, self.width
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1)")));
            }
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        self.loss_weights().validate()?;
        Ok(())
    }

    pub fn ablation(&self) -> Ablation {
        Ablation {
            use_b2a: self.use_b2a,
            use_a2b: self.use_a2b,
            share_gcn: self.share_gcn,
            use_aif: self.use_aif,
        }
    }

    pub fn with_ablation(mut self, a: Ablation) -> Self {
        self.use_b2a = a.use_b2a;
        self.use_a2b = a.use_a2b;
        self.share_gcn = a.share_gcn;
        self.use_aif = a.use_aif;
        self
    }

    pub fn generator(&self) -> GeneratorConfig {
        GeneratorConfig {
            stages: self.stages,
            channels: self.channels,
            nodes_b2a: self.nodes_b2a,
            nodes_a2b: self.nodes_a2b,
            state_dim: self.state_dim,
            ablation: self.ablation(),
        }
    }

    pub fn data(&self) -> DataConfig {
        DataConfig {
            height: self.height,
            width: self.width,
            n_train: self.n_train,
            n_test: self.n_test,
            seed: self.seed,
            heatmap_radius: self.heatmap_radius,
            constraints: PoseConstraints {
                height: self.height,
                width: self.width,
                ..PoseConstraints::default()
            },
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_gan: self.lambda_gan,
            lambda_l1: self.lambda_l1,
            lambda_per: self.lambda_per,
        }
    }

    /// SHA-256 of the configuration with the output location blanked, so
    /// the same experiment hashes equally wherever it is written.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir.clear();
        c.log_every = 0;
        hex::encode(Sha256::digest(c.to_toml().as_bytes()))
    }
}
