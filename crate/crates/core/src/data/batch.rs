use serde::{Deserialize, Serialize};

use super::corpus::ManifestRecord;
use crate::encoders::{TokenizedText, VideoClip, Vocab};
use crate::error::{CloverError, Result};
use crate::masking::{
    apply_text_mask, make_text_mask_with, TextMaskSpec, TextMaskStrategy, VideoMaskSpec,
};
use crate::substrate::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskingConfig {
    /// Fraction of spatial patch positions replaced in every frame.
    pub video_ratio: f64,
    /// Fraction of eligible caption tokens replaced by `[MASK]`.
    pub text_ratio: f64,
    /// Set by the training objective rather than by configuration.
    #[serde(skip)]
    pub text_strategy: TextMaskStrategy,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        MaskingConfig {
            video_ratio: 0.2,
            text_ratio: 0.3,
            text_strategy: TextMaskStrategy::Semantic,
        }
    }
}

/// Inputs for one pair: the complete views and their masked counterparts.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSample {
    pub id: u64,
    pub clip: VideoClip,
    pub text: TokenizedText,
    pub video_mask: VideoMaskSpec,
    /// `None` when the caption has nothing eligible to mask.
    pub text_mask: Option<TextMaskSpec>,
    pub masked_text: Option<TokenizedText>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RawBatch {
    pub samples: Vec<RawSample>,
}

impl RawBatch {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn video_masks(&self) -> Vec<&VideoMaskSpec> {
        self.samples.iter().map(|s| &s.video_mask).collect()
    }

    pub fn text_masks(&self) -> Vec<&TextMaskSpec> {
        self.samples
            .iter()
            .filter_map(|s| s.text_mask.as_ref())
            .collect()
    }
}

/// Per-sample mask stream: a pure function of `(seed, epoch, step, id)`.
pub fn sample_rng(seed: u64, epoch: u64, step: u64, id: u64) -> Rng {
    Rng::derive(seed, &[epoch, step, id])
}

/// Builds the complete and masked views for a slice of records.
#[allow(clippy::too_many_arguments)]
pub fn make_batch<F>(
    records: &[&ManifestRecord],
    mut clip_of: F,
    vocab: &Vocab,
    grid: (usize, usize),
    masking: &MaskingConfig,
    seed: u64,
    epoch: u64,
    step: u64,
) -> Result<RawBatch>
where
    F: FnMut(&ManifestRecord) -> Result<VideoClip>,
{
    if records.is_empty() {
        return Err(CloverError::invalid("batch", "empty record slice"));
    }
    let mut samples = Vec::with_capacity(records.len());
    for r in records {
        let mut rng = sample_rng(seed, epoch, step, r.id);
        let video_mask = VideoMaskSpec::sample(grid.0, grid.1, masking.video_ratio, &mut rng)?;
        let text = vocab.encode(&r.caption, None)?;
        let text_mask =
            match make_text_mask_with(&text, masking.text_ratio, masking.text_strategy, &mut rng) {
                Ok(m) => Some(m),
                Err(CloverError::NoEligibleToken) => None,
                Err(e) => return Err(e),
            };
        let masked_text = text_mask
            .as_ref()
            .map(|m| apply_text_mask(&text, m))
            .transpose()?;
        samples.push(RawSample {
            id: r.id,
            clip: clip_of(r)?,
            text,
            video_mask,
            text_mask,
            masked_text,
        });
    }
    Ok(RawBatch { samples })
}
