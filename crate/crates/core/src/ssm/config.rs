//! Model shapes, per-layer variant schedule and named presets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Block kind used by a single layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockVariant {
    /// Per-channel diagonal selective SSM.
    Diagonal,
    /// One scalar decay per head, evaluated chunk-wise.
    ScalarPerHead,
    /// Sliding-window attention layer.
    SwaHybrid,
}

/// Layer schedule for the whole stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelVariant {
    Diagonal,
    ScalarPerHead,
    /// Diagonal SSM layers with attention on every odd layer.
    Hybrid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub preset_name: String,
    pub variant: ModelVariant,
    pub n_layers: usize,
    pub d_model: usize,
    /// State size per channel.
    pub state_size: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub expand: usize,
    pub conv_width: usize,
    /// Rank of the Δ projection in diagonal blocks.
    pub dt_rank: usize,
    /// Channels per head in scalar-head blocks.
    pub head_dim: usize,
    pub attn_heads: usize,
    pub swa_window: usize,
    pub chunk_len: usize,
    pub norm_eps: f64,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            preset_name: "mamba".into(),
            variant: ModelVariant::Diagonal,
            n_layers: 2,
            d_model: 128,
            state_size: 16,
            vocab_size: 512,
            max_seq_len: 2048,
            expand: 2,
            conv_width: 4,
            dt_rank: 4,
            head_dim: 16,
            attn_heads: 4,
            swa_window: 64,
            chunk_len: super::DEFAULT_CHUNK_LEN,
            norm_eps: 1e-5,
            init_seed: 0,
        }
    }
}

pub const PRESET_NAMES: [&str; 7] = ["mamba", "mamba2", "falcon", "jamba", "zamba", "samba", "hymba"];

impl ModelConfig {
    /// Toy-scale model for one of the named families. Mixture-of-experts, shared
    /// attention and meta tokens are not modelled; those families map onto the hybrid stack.
    pub fn preset(name: &str) -> Result<Self> {
        let base = ModelConfig {
            preset_name: name.to_string(),
            ..ModelConfig::default()
        };
        let cfg = match name {
            "mamba" | "falcon" => base,
            "mamba2" => ModelConfig {
                variant: ModelVariant::ScalarPerHead,
                ..base
            },
            "jamba" | "samba" | "hymba" => ModelConfig {
                variant: ModelVariant::Hybrid,
                ..base
            },
            "zamba" => ModelConfig {
                variant: ModelVariant::Hybrid,
                max_seq_len: 4096,
                ..base
            },
            other => {
                return Err(Error::invalid(format!(
                    "unknown preset `{other}` (expected one of {})",
                    PRESET_NAMES.join(", ")
                )))
            }
        };
        Ok(cfg)
    }

    pub fn inner_dim(&self) -> usize {
        self.expand * self.d_model
    }

    pub fn ssd_heads(&self) -> usize {
        self.inner_dim() / self.head_dim
    }

    pub fn block_variant(&self, layer: usize) -> BlockVariant {
        match self.variant {
            ModelVariant::Diagonal => BlockVariant::Diagonal,
            ModelVariant::ScalarPerHead => BlockVariant::ScalarPerHead,
            ModelVariant::Hybrid if layer % 2 == 1 => BlockVariant::SwaHybrid,
            ModelVariant::Hybrid => BlockVariant::Diagonal,
        }
    }

    pub fn layer_variants(&self) -> Vec<BlockVariant> {
        (0..self.n_layers).map(|i| self.block_variant(i)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if self.d_model == 0 || self.vocab_size == 0 || self.expand == 0 {
            return bad("d_model, vocab_size and expand must be positive".into());
        }
        if self.state_size < 1 {
            return bad("state size must be at least 1".into());
        }
        if self.max_seq_len < 1 {
            return bad("max_seq_len must be at least 1".into());
        }
        if self.conv_width < 1 || self.dt_rank < 1 || self.chunk_len < 1 {
            return bad("conv_width, dt_rank and chunk_len must be at least 1".into());
        }
        let layers = self.layer_variants();
        if layers.contains(&BlockVariant::ScalarPerHead)
            && (self.head_dim == 0 || self.inner_dim() % self.head_dim != 0)
        {
            return bad(format!(
                "inner dim {} is not a multiple of head_dim {}",
                self.inner_dim(),
                self.head_dim
            ));
        }
        if layers.contains(&BlockVariant::SwaHybrid) {
            if self.attn_heads == 0 || self.d_model % self.attn_heads != 0 {
                return bad(format!(
                    "d_model {} does not split into {} heads",
                    self.d_model, self.attn_heads
                ));
            }
            if self.swa_window < 1 {
                return bad("attention window must be at least 1".into());
            }
        }
        if !(self.norm_eps > 0.0) {
            return bad("norm_eps must be positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for name in PRESET_NAMES {
            ModelConfig::preset(name).unwrap().validate().unwrap();
        }
        assert_eq!(ModelConfig::preset("zamba").unwrap().max_seq_len, 4096);
        assert_eq!(ModelConfig::preset("mamba").unwrap().max_seq_len, 2048);
        assert!(ModelConfig::preset("gpt").is_err());
    }

    #[test]
    fn hybrid_schedule_alternates() {
        let cfg = ModelConfig {
            variant: ModelVariant::Hybrid,
            n_layers: 4,
            ..ModelConfig::default()
        };
        use BlockVariant::*;
        assert_eq!(cfg.layer_variants(), vec![Diagonal, SwaHybrid, Diagonal, SwaHybrid]);
    }

    #[test]
    fn rejects_zero_seq_len() {
        let cfg = ModelConfig {
            max_seq_len: 0,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
