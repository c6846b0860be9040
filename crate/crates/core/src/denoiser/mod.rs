//! A miniature joint-attention diffusion transformer.
//!
//! Image tokens carry the noisy latent patch concatenated channel-wise with
//! the background latent patch and the interaction-region value. Text,
//! identity and detail tokens form a second stream; both streams have their
//! own projections and meet in a joint attention per block. Time conditioning
//! enters through adaptive layer-norm shift, scale and gate vectors.

mod checkpoint;
mod forward;
mod params;
mod sample;
mod schedule;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use forward::{denoise_step, AttentionCapture, CapturedSlice, Denoiser, Modulation};
pub use params::{ParamKind, ParamStore};
pub use sample::{sample, SampleOptions, SampleOutput};
pub use schedule::NoiseSchedule;
pub use train::{
    prepare_example, pretrain, train, AppearanceSetup, PreparedExample, TrainBackends, TrainOptions,
    TrainOutcome, TrainState,
};

use serde::{Deserialize, Serialize};

use crate::attention::ModulationVariant;
use crate::conditioning::{Encoders, PatchCodec};
use crate::error::{Error, Result};

/// What the network predicts from a noisy latent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Epsilon,
    #[default]
    Velocity,
    Sample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModulationConfig {
    pub enabled: bool,
    pub variant: ModulationVariant,
    /// Half-open block range `[start, end)`; `None` means every block.
    pub layers: Option<(usize, usize)>,
}

impl Default for ModulationConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            variant: ModulationVariant::Residual,
            layers: None,
        }
    }
}

impl ModulationConfig {
    pub fn applies_to(&self, block: usize) -> bool {
        self.layers.map_or(true, |(s, e)| (s..e).contains(&block))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    /// Square image side in pixels.
    pub image_size: usize,
    /// Latent codec patch side; the token grid is `image_size / patch`.
    pub patch: usize,
    pub d_model: usize,
    pub heads: usize,
    pub blocks: usize,
    pub mlp_ratio: usize,
    pub adapter_rank: usize,
    pub guidance_scale: f64,
    /// Number of diffusion timesteps.
    pub schedule_steps: usize,
    pub target: Target,
    /// Probability of dropping text, identity and detail tokens during training.
    pub cond_dropout: f64,
    pub max_text_tokens: usize,
    /// Add learned positions to identity tokens (off keeps them permutation-equivariant).
    pub id_positions: bool,
    pub modulation: ModulationConfig,
    /// Train only the adapter matrices.
    pub freeze_base: bool,
    pub detail_sigma: f64,
    pub detail_depth: usize,
    /// Seed of the fixed toy encoders and of parameter initialization.
    pub seed: u64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch: 4,
            d_model: 64,
            heads: 4,
            blocks: 2,
            mlp_ratio: 2,
            adapter_rank: 16,
            guidance_scale: 3.5,
            schedule_steps: 100,
            target: Target::Velocity,
            cond_dropout: 0.1,
            max_text_tokens: 16,
            id_positions: false,
            modulation: ModulationConfig::default(),
            freeze_base: false,
            detail_sigma: crate::conditioning::DEFAULT_DETAIL_SIGMA,
            detail_depth: 3,
            seed: 0,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!("d_model {} is not divisible by heads {}", self.d_model, self.heads));
        }
        if self.adapter_rank == 0 {
            return bad("adapter_rank must be at least 1".into());
        }
        if self.patch == 0 || self.image_size == 0 || self.image_size % self.patch != 0 {
            return bad(format!("image_size {} is not a multiple of patch {}", self.image_size, self.patch));
        }
        if self.blocks == 0 || self.mlp_ratio == 0 || self.max_text_tokens == 0 {
            return bad("blocks, mlp_ratio and max_text_tokens must be positive".into());
        }
        if self.schedule_steps < 2 {
            return bad("schedule_steps must be at least 2".into());
        }
        if !(self.guidance_scale >= 0.0) {
            return Err(Error::Parameter(format!("guidance scale {} < 0", self.guidance_scale)));
        }
        if !(0.0..1.0).contains(&self.cond_dropout) {
            return bad(format!("cond_dropout {} outside [0, 1)", self.cond_dropout));
        }
        if let Some((s, e)) = self.modulation.layers {
            if s >= e || e > self.blocks {
                return bad(format!("modulation layers {s}..{e} outside 0..{}", self.blocks));
            }
        }
        if !(self.detail_sigma > 0.0) || self.detail_depth == 0 {
            return bad("detail_sigma and detail_depth must be positive".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        let g = self.image_size / self.patch;
        (g, g)
    }

    pub fn codec(&self) -> PatchCodec {
        PatchCodec { patch: self.patch }
    }

    pub fn latent_dim(&self) -> usize {
        self.codec().token_dim()
    }

    pub fn encoders(&self) -> Result<Encoders> {
        Encoders::toy(self.d_model, self.max_text_tokens, self.detail_depth, self.seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = DenoiserConfig::default();
        c.validate().unwrap();
        assert_eq!(c.grid(), (16, 16));
        assert_eq!(c.latent_dim(), 48);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad_heads = DenoiserConfig {
            heads: 5,
            ..Default::default()
        };
        assert!(matches!(bad_heads.validate(), Err(Error::Config(_))));
        let bad_rank = DenoiserConfig {
            adapter_rank: 0,
            ..Default::default()
        };
        assert!(bad_rank.validate().is_err());
        let bad_gs = DenoiserConfig {
            guidance_scale: -1.0,
            ..Default::default()
        };
        assert!(matches!(bad_gs.validate(), Err(Error::Parameter(_))));
    }
}

#[cfg(test)]
mod behaviour_tests;
