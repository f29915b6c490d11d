use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{config_err, Result};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

/// Where classifier heads are attached.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Placement {
    /// Every second layer from layer 4 onwards.
    Anytime,
    /// Triangular-number layers 1, 3, 6, 10, ...; `count` caps the number
    /// of heads (the last one always sits on the final layer).
    Budgeted {
        #[serde(default)]
        count: Option<usize>,
    },
    /// Explicit 1-based layer indices; must be strictly increasing and end
    /// at the last layer.
    Explicit { layers: Vec<usize> },
}

/// Switches that remove one structural component each.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ablation {
    #[serde(default = "yes")]
    pub dense_connectivity: bool,
    #[serde(default = "yes")]
    pub multi_scale: bool,
    #[serde(default = "yes")]
    pub intermediate_classifiers: bool,
}

fn yes() -> bool {
    true
}

impl Default for Ablation {
    fn default() -> Self {
        Self { dense_connectivity: true, multi_scale: true, intermediate_classifiers: true }
    }
}

fn default_seed_multiplier() -> usize {
    2
}

fn default_bottleneck() -> usize {
    4
}

fn default_head_channels() -> usize {
    128
}

/// Full architecture recipe for one network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub input: InputShape,
    pub num_classes: usize,
    pub num_scales: usize,
    pub num_layers: usize,
    /// Channels each layer adds at each scale, finest first. Must be even.
    pub growth_rates: Vec<usize>,
    /// First-layer channels at scale `s` are `seed_multiplier * growth_rates[s]`.
    #[serde(default = "default_seed_multiplier")]
    pub seed_multiplier: usize,
    /// Bottleneck width of the 1x1 conv, as a multiple of the transform's
    /// output channels (capped at its input channels).
    #[serde(default = "default_bottleneck")]
    pub bottleneck_factor: usize,
    pub classifiers: Placement,
    /// Width of the two convolutions in every classifier head.
    #[serde(default = "default_head_channels")]
    pub head_channels: usize,
    /// Use the head's input channel count as its width instead.
    #[serde(default)]
    pub head_matches_input: bool,
    #[serde(default)]
    pub reduction: bool,
    #[serde(default)]
    pub ablation: Ablation,
    /// Double the growth rates after every transition layer.
    #[serde(default)]
    pub densenet_star: bool,
    /// Parameter initialisation seed.
    #[serde(default)]
    pub seed: u64,
}

impl NetworkConfig {
    /// Scales actually built (1 when multi-scale features are ablated).
    pub fn effective_scales(&self) -> usize {
        if self.ablation.multi_scale {
            self.num_scales
        } else {
            1
        }
    }

    pub fn effective_growth(&self) -> &[usize] {
        &self.growth_rates[..self.effective_scales()]
    }

    pub fn validate(&self) -> Result<()> {
        let InputShape { channels, height, width } = self.input;
        if channels == 0 || height == 0 || width == 0 {
            return Err(config_err("input: all dimensions must be positive"));
        }
        if self.num_classes < 2 {
            return Err(config_err("num_classes: need at least 2 classes"));
        }
        if self.num_scales == 0 {
            return Err(config_err("num_scales: must be at least 1"));
        }
        if self.num_layers == 0 {
            return Err(config_err("num_layers: must be at least 1"));
        }
        if self.growth_rates.len() != self.num_scales {
            return Err(config_err(format!(
                "growth_rates: expected {} entries (one per scale), got {}",
                self.num_scales,
                self.growth_rates.len()
            )));
        }
        if let Some(k) = self.growth_rates.iter().find(|&&k| k == 0 || k % 2 != 0) {
            return Err(config_err(format!("growth_rates: {k} is not a positive even number")));
        }
        if self.seed_multiplier == 0 {
            return Err(config_err("seed_multiplier: must be positive"));
        }
        if self.bottleneck_factor == 0 {
            return Err(config_err("bottleneck_factor: must be positive"));
        }
        if self.head_channels == 0 && !self.head_matches_input {
            return Err(config_err("head_channels: must be positive"));
        }
        if self.reduction && self.effective_scales() > self.num_layers {
            return Err(config_err(format!(
                "reduction: {} layers cannot be split into {} blocks",
                self.num_layers,
                self.effective_scales()
            )));
        }
        super::placement::resolve(&self.classifiers, self.num_layers)?;
        Ok(())
    }

    /// Classifier layers after applying the intermediate-classifier ablation.
    pub fn classifier_layers(&self) -> Result<Vec<usize>> {
        let layers = super::placement::resolve(&self.classifiers, self.num_layers)?;
        if self.ablation.intermediate_classifiers {
            Ok(layers)
        } else {
            Ok(vec![self.num_layers])
        }
    }

    /// Identifies the architecture: every field except the init seed.
    pub fn arch_hash(&self) -> String {
        let mut arch = self.clone();
        arch.seed = 0;
        let canonical = serde_json::to_string(&arch).expect("config serialises");
        let digest = Sha256::digest(canonical.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> NetworkConfig {
        NetworkConfig {
            input: InputShape { channels: 3, height: 32, width: 32 },
            num_classes: 10,
            num_scales: 3,
            num_layers: 24,
            growth_rates: vec![6, 12, 24],
            seed_multiplier: 2,
            bottleneck_factor: 4,
            classifiers: Placement::Anytime,
            head_channels: 128,
            head_matches_input: false,
            reduction: true,
            ablation: Ablation::default(),
            densenet_star: false,
            seed: 0,
        }
    }

    #[test]
    fn cifar_recipe_validates() {
        base().validate().unwrap();
    }

    #[test]
    fn odd_growth_rate_rejected() {
        let mut c = base();
        c.growth_rates[1] = 7;
        let err = c.validate().unwrap_err().to_string();
        assert!(err.contains("growth_rates"), "{err}");
    }

    #[test]
    fn growth_rate_count_must_match_scales() {
        let mut c = base();
        c.growth_rates.pop();
        assert!(c.validate().is_err());
    }

    #[test]
    fn hash_ignores_seed_only() {
        let a = base();
        let mut b = base();
        b.seed = 99;
        assert_eq!(a.arch_hash(), b.arch_hash());
        b.num_layers = 20;
        assert_ne!(a.arch_hash(), b.arch_hash());
    }
}
