use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::text::Vocab;
use crate::error::{CloverError, Result};

/// Model geometry. Every field that affects parameter shapes lives here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Maximum frames per clip; images are one-frame clips.
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch: usize,
    pub dim: usize,
    pub heads: usize,
    pub video_layers: usize,
    pub text_layers: usize,
    pub fusion_layers: usize,
    pub ffn_mult: usize,
    pub max_text_len: usize,
    pub vocab_size: usize,
    pub init_std: f64,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            frames: 4,
            height: 32,
            width: 32,
            channels: 3,
            patch: 8,
            dim: 64,
            heads: 4,
            video_layers: 2,
            text_layers: 2,
            fusion_layers: 2,
            ffn_mult: 4,
            max_text_len: 12,
            vocab_size: Vocab::default().len(),
            init_std: 0.02,
            ln_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    /// Tiny geometry used by gradient checks.
    pub fn micro() -> Self {
        ModelConfig {
            frames: 2,
            height: 8,
            width: 8,
            channels: 3,
            patch: 4,
            dim: 8,
            heads: 2,
            video_layers: 1,
            text_layers: 1,
            fusion_layers: 1,
            ffn_mult: 2,
            max_text_len: 12,
            init_std: 0.3,
            ..ModelConfig::default()
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch, self.width / self.patch)
    }

    /// Spatial patch positions per frame.
    pub fn spatial(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    /// Video tokens for a clip with `frames` frames.
    pub fn video_tokens(&self, frames: usize) -> usize {
        frames * self.spatial()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CloverError::Config(m));
        if self.patch == 0 || !self.height.is_multiple_of(self.patch) || !self.width.is_multiple_of(self.patch) {
            return bad(format!(
                "height {} and width {} must be positive multiples of patch {}",
                self.height, self.width, self.patch
            ));
        }
        if self.height == 0 || self.width == 0 || self.frames == 0 || self.channels == 0 {
            return bad("frames, height, width and channels must be positive".into());
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return bad(format!(
                "dim {} must be divisible by heads {}",
                self.dim, self.heads
            ));
        }
        if self.max_text_len < 2 {
            return bad("max_text_len must leave room for [CLS] and one word".into());
        }
        if self.vocab_size < 4 {
            return bad("vocab_size too small".into());
        }
        if !(self.init_std > 0.0) || !(self.ln_eps > 0.0) {
            return bad("init_std and ln_eps must be positive".into());
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let hash = Sha256::digest(json.as_bytes());
        hash.iter().map(|b| format!("{b:02x}")).collect()
    }
}
