use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Two-stage pre-norm transformer encoder: strided patch embedding, stage-1
/// blocks over the fine token grid, a 2x strided merge, stage-2 blocks over
/// the coarse grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Input channels (post-contrast phases).
    pub in_channels: usize,
    /// Input extents (D, H, W) after preprocessing.
    pub in_extents: (usize, usize, usize),
    /// Patch extents (D, H, W).
    pub patch: (usize, usize, usize),
    /// Early / late embedding widths.
    pub d_s: usize,
    pub d_l: usize,
    pub blocks_per_stage: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            in_channels: 3,
            in_extents: (16, 32, 32),
            patch: (2, 4, 4),
            d_s: 16,
            d_l: 32,
            blocks_per_stage: 2,
            n_heads: 4,
            mlp_ratio: 2,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let (d, h, w) = self.in_extents;
        let (pd, ph, pw) = self.patch;
        if pd == 0 || ph == 0 || pw == 0 {
            return Err(Error::Usage("patch extents must be positive".into()));
        }
        if d % pd != 0 || h % ph != 0 || w % pw != 0 {
            return Err(Error::Usage(format!(
                "input extents {:?} not divisible by patch {:?}",
                self.in_extents, self.patch
            )));
        }
        let (gd, gh, gw) = (d / pd, h / ph, w / pw);
        if gd % 2 != 0 || gh % 2 != 0 || gw % 2 != 0 {
            return Err(Error::Usage(format!(
                "token grid {:?} not divisible by the 2x merge",
                (gd, gh, gw)
            )));
        }
        if self.d_s % self.n_heads != 0 || self.d_l % self.n_heads != 0 {
            return Err(Error::Usage(format!(
                "embedding widths ({}, {}) must be divisible by n_heads {}",
                self.d_s, self.d_l, self.n_heads
            )));
        }
        if self.blocks_per_stage == 0 || self.mlp_ratio == 0 {
            return Err(Error::Usage(
                "blocks_per_stage and mlp_ratio must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Early token grid (D_s, H_s, W_s).
    pub fn grid_early(&self) -> (usize, usize, usize) {
        (
            self.in_extents.0 / self.patch.0,
            self.in_extents.1 / self.patch.1,
            self.in_extents.2 / self.patch.2,
        )
    }

    /// Late token grid after the 2x merge.
    pub fn grid_late(&self) -> (usize, usize, usize) {
        let (gd, gh, gw) = self.grid_early();
        (gd / 2, gh / 2, gw / 2)
    }

    pub fn n_tokens_early(&self) -> usize {
        let (gd, gh, gw) = self.grid_early();
        gd * gh * gw
    }

    pub fn n_tokens_late(&self) -> usize {
        let (gd, gh, gw) = self.grid_late();
        gd * gh * gw
    }

    pub fn patch_volume(&self) -> usize {
        self.patch.0 * self.patch.1 * self.patch.2
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Encoded clinical vector length (K).
    pub clinical_dim: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.clinical_dim == 0 {
            return Err(Error::Usage("clinical_dim must be positive".into()));
        }
        Ok(())
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            clinical_dim: crate::phantom::ClinicalSchema::default().encoded_len(),
        }
    }
}
