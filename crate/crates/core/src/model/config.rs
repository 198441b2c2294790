use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How velocity magnitudes are injected into the geometric feature.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VelocityInjection {
    /// `G <- (1 + phi(rho)) * (G - mean) + mean`, equivariant.
    Scaling,
    /// `G <- phi(rho) + G`, the scalar added to every coordinate component.
    /// Not rotation equivariant; kept for comparison.
    Additive,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NeighborRule {
    #[serde(rename = "all-others")]
    AllOthers,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_agents: usize,
    pub past_len: usize,
    pub future_len: usize,
    pub space_dim: usize,
    /// Geometric coordinates per agent (C).
    pub geo_channels: usize,
    /// Pattern feature width (D).
    pub pattern_dim: usize,
    /// Hidden width of every two-layer MLP.
    pub hidden_dim: usize,
    /// Interaction categories (K).
    pub num_categories: usize,
    /// Feature learning layers (L).
    pub num_layers: usize,
    pub temperature: f64,
    pub use_dct: bool,
    pub use_velocity_injection: bool,
    pub velocity_injection_mode: VelocityInjection,
    pub num_heads: usize,
    pub neighbor_rule: NeighborRule,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_agents: 5,
            past_len: 20,
            future_len: 20,
            space_dim: 3,
            geo_channels: 64,
            pattern_dim: 64,
            hidden_dim: 64,
            num_categories: 2,
            num_layers: 4,
            temperature: 1.0,
            use_dct: false,
            use_velocity_injection: false,
            velocity_injection_mode: VelocityInjection::Scaling,
            num_heads: 1,
            neighbor_rule: NeighborRule::AllOthers,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_agents", self.num_agents),
            ("future_len", self.future_len),
            ("space_dim", self.space_dim),
            ("geo_channels", self.geo_channels),
            ("pattern_dim", self.pattern_dim),
            ("hidden_dim", self.hidden_dim),
            ("num_categories", self.num_categories),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
        ];
        for (key, value) in counts {
            if value == 0 {
                return Err(Error::param(format!("{key} must be >= 1")));
            }
        }
        if self.past_len < 2 {
            return Err(Error::param("past_len must be >= 2 to form velocities"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::param(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        Ok(())
    }

    /// Number of ordered neighbour pairs `(i, j)`, `i != j`.
    pub fn num_pairs(&self) -> usize {
        self.num_agents * (self.num_agents - 1)
    }
}
