use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use eqmotion::model::{ModelConfig, NeighborRule, VelocityInjection};
use eqmotion::simulate::{SimConfig, SimMode};
use eqmotion::train::TrainConfig;
use serde::{Deserialize, Serialize};

/// Flat union of the model, simulation and training settings. Keys shared
/// between sections (`num_agents`, `past_len`, `future_len`, `space_dim`,
/// `seed`) feed every section that uses them.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub num_agents: usize,
    pub past_len: usize,
    pub future_len: usize,
    pub space_dim: usize,
    pub seed: u64,

    pub geo_channels: usize,
    pub pattern_dim: usize,
    pub hidden_dim: usize,
    pub num_categories: usize,
    pub num_layers: usize,
    pub temperature: f64,
    pub use_dct: bool,
    pub use_velocity_injection: bool,
    pub velocity_injection_mode: VelocityInjection,
    pub num_heads: usize,
    pub neighbor_rule: NeighborRule,

    pub mode: SimMode,
    pub dt: f64,
    pub downsample: usize,
    pub warmup_steps: usize,
    pub spring_constant: f64,
    pub coulomb_constant: f64,
    pub softening: f64,
    pub init_std: f64,

    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_interval: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,

    // Paths stay out of the echoed config so artifacts do not depend on
    // where they were written.
    #[serde(skip_serializing)]
    pub dataset: Option<PathBuf>,
    #[serde(skip_serializing)]
    pub checkpoint: Option<PathBuf>,
    #[serde(skip_serializing)]
    pub log_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let s = SimConfig::default();
        let t = TrainConfig::default();
        RunConfig {
            num_agents: m.num_agents,
            past_len: m.past_len,
            future_len: m.future_len,
            space_dim: m.space_dim,
            seed: t.seed,
            geo_channels: m.geo_channels,
            pattern_dim: m.pattern_dim,
            hidden_dim: m.hidden_dim,
            num_categories: m.num_categories,
            num_layers: m.num_layers,
            temperature: m.temperature,
            use_dct: m.use_dct,
            use_velocity_injection: m.use_velocity_injection,
            velocity_injection_mode: m.velocity_injection_mode,
            num_heads: m.num_heads,
            neighbor_rule: m.neighbor_rule,
            mode: s.mode,
            dt: s.dt,
            downsample: s.downsample,
            warmup_steps: s.warmup_steps,
            spring_constant: s.spring_constant,
            coulomb_constant: s.coulomb_constant,
            softening: s.softening,
            init_std: s.init_std,
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            lr_decay_factor: t.lr_decay_factor,
            lr_decay_interval: t.lr_decay_interval,
            beta1: t.beta1,
            beta2: t.beta2,
            adam_epsilon: t.adam_epsilon,
            dataset: None,
            checkpoint: None,
            log_dir: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let cfg: RunConfig =
            serde_json::from_str(&text).with_context(|| format!("invalid config {}", path.display()))?;
        Ok(cfg)
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            num_agents: self.num_agents,
            past_len: self.past_len,
            future_len: self.future_len,
            space_dim: self.space_dim,
            geo_channels: self.geo_channels,
            pattern_dim: self.pattern_dim,
            hidden_dim: self.hidden_dim,
            num_categories: self.num_categories,
            num_layers: self.num_layers,
            temperature: self.temperature,
            use_dct: self.use_dct,
            use_velocity_injection: self.use_velocity_injection,
            velocity_injection_mode: self.velocity_injection_mode,
            num_heads: self.num_heads,
            neighbor_rule: self.neighbor_rule,
        }
    }

    pub fn sim(&self) -> SimConfig {
        SimConfig {
            mode: self.mode,
            num_particles: self.num_agents,
            space_dim: self.space_dim,
            dt: self.dt,
            downsample: self.downsample,
            warmup_steps: self.warmup_steps,
            past_len: self.past_len,
            future_len: self.future_len,
            spring_constant: self.spring_constant,
            coulomb_constant: self.coulomb_constant,
            softening: self.softening,
            init_std: self.init_std,
            seed: self.seed,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            lr_decay_factor: self.lr_decay_factor,
            lr_decay_interval: self.lr_decay_interval,
            beta1: self.beta1,
            beta2: self.beta2,
            adam_epsilon: self.adam_epsilon,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        self.sim().validate()?;
        self.train().validate()?;
        Ok(())
    }

    /// The effective settings, without paths, for embedding in artifacts.
    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}
