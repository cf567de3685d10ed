//! Incomplete-view construction: block masks over video patch positions and
//! part-of-speech-driven masks over caption tokens.

mod tagger;

use serde::{Deserialize, Serialize};

use crate::encoders::text::{TokenizedText, CLS, MASK, PAD};
use crate::error::{CloverError, Result};
use crate::substrate::Rng;

pub use tagger::{pos_tag, Lexicon, PosTag, AUX_STOPLIST};

/// `round(ratio · n)` with halves rounded away from zero.
///
/// A tiny bias absorbs binary representation error so that, for example,
/// `0.3 · 5` counts as exactly one half.
pub fn nearest_count(ratio: f64, n: usize) -> usize {
    (ratio * n as f64 + 1e-9).round() as usize
}

fn check_ratio(ratio: f64) -> Result<()> {
    if ratio > 0.0 && ratio < 1.0 {
        Ok(())
    } else {
        Err(CloverError::invalid(
            "ratio",
            format!("{ratio} is not in (0, 1)"),
        ))
    }
}

/// Spatial patch positions masked identically in every frame.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoMaskSpec {
    pub grid_h: usize,
    pub grid_w: usize,
    /// Sorted row-major indices into the `grid_h × grid_w` patch grid.
    pub spatial_indices: Vec<usize>,
}

impl VideoMaskSpec {
    pub fn spatial_count(&self) -> usize {
        self.grid_h * self.grid_w
    }

    /// Masks every position.
    pub fn full(grid_h: usize, grid_w: usize) -> Self {
        VideoMaskSpec {
            grid_h,
            grid_w,
            spatial_indices: (0..grid_h * grid_w).collect(),
        }
    }

    /// Per-token flags for a clip of `frames` frames (frame-major token order).
    pub fn token_flags(&self, frames: usize) -> Vec<bool> {
        let s = self.spatial_count();
        let mut spatial = vec![false; s];
        for &i in &self.spatial_indices {
            spatial[i] = true;
        }
        (0..frames * s).map(|k| spatial[k % s]).collect()
    }

    /// Samples `nearest_count(ratio, gh·gw)` positions as a union of rectangular blocks.
    /// Grids with a single row or column fall back to independent cells.
    pub fn sample(grid_h: usize, grid_w: usize, ratio: f64, rng: &mut Rng) -> Result<Self> {
        check_ratio(ratio)?;
        let s = grid_h * grid_w;
        if s == 0 {
            return Err(CloverError::invalid("spatial positions", "grid is empty"));
        }
        let target = nearest_count(ratio, s);
        if target == 0 {
            return Err(CloverError::DegenerateMask(format!(
                "ratio {ratio} of {s} spatial positions rounds to zero"
            )));
        }
        let mut masked = vec![false; s];
        let mut count = 0;
        if grid_h > 1 && grid_w > 1 {
            for _ in 0..64 {
                if count == target {
                    break;
                }
                let remaining = target - count;
                let bh = 1 + rng.below(grid_h.min(remaining));
                let bw = 1 + rng.below(grid_w.min((remaining / bh).max(1)));
                let top = rng.below(grid_h - bh + 1);
                let left = rng.below(grid_w - bw + 1);
                for r in top..top + bh {
                    for c in left..left + bw {
                        let i = r * grid_w + c;
                        if !masked[i] && count < target {
                            masked[i] = true;
                            count += 1;
                        }
                    }
                }
            }
        }
        if count < target {
            let free: Vec<usize> = (0..s).filter(|&i| !masked[i]).collect();
            for k in rng.sample_distinct(free.len(), target - count) {
                masked[free[k]] = true;
            }
        }
        let spatial_indices = (0..s).filter(|&i| masked[i]).collect();
        Ok(VideoMaskSpec {
            grid_h,
            grid_w,
            spatial_indices,
        })
    }
}

/// Masks `S` spatial positions laid out on the squarest grid that factors `S`.
pub fn make_video_mask(spatial: usize, ratio: f64, rng: &mut Rng) -> Result<VideoMaskSpec> {
    let mut gh = (spatial as f64).sqrt() as usize;
    while gh > 1 && !spatial.is_multiple_of(gh) {
        gh -= 1;
    }
    let gh = gh.max(1);
    VideoMaskSpec::sample(gh, spatial / gh, ratio, rng)
}

/// Which tokens may be replaced by `[MASK]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TextMaskStrategy {
    /// Nouns, verbs and adjectives only.
    #[default]
    Semantic,
    /// Any non-special token (classical MLM masking).
    Random,
}

/// Masked caption positions and the ids they held.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextMaskSpec {
    pub positions: Vec<usize>,
    pub replaced_ids: Vec<usize>,
}

impl TextMaskSpec {
    pub fn empty() -> Self {
        TextMaskSpec {
            positions: Vec::new(),
            replaced_ids: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Puts the original ids back into a masked text.
    pub fn restore(&self, masked: &TokenizedText) -> Result<TokenizedText> {
        let mut out = masked.clone();
        for (&p, &id) in self.positions.iter().zip(&self.replaced_ids) {
            let slot = out
                .ids
                .get_mut(p)
                .ok_or_else(|| CloverError::invalid("positions", format!("{p} out of range")))?;
            *slot = id;
        }
        Ok(out)
    }
}

fn eligible(text: &TokenizedText, strategy: TextMaskStrategy) -> Vec<usize> {
    (0..text.len())
        .filter(|&p| {
            let id = text.ids[p];
            if id == CLS || id == PAD || id == MASK {
                return false;
            }
            match strategy {
                TextMaskStrategy::Semantic => text.tags[p].is_content(),
                TextMaskStrategy::Random => text.tags[p] != PosTag::Special,
            }
        })
        .collect()
}

/// Semantic text mask: content words only, never auxiliaries or specials.
pub fn make_text_mask(text: &TokenizedText, ratio: f64, rng: &mut Rng) -> Result<TextMaskSpec> {
    make_text_mask_with(text, ratio, TextMaskStrategy::Semantic, rng)
}

pub fn make_text_mask_with(
    text: &TokenizedText,
    ratio: f64,
    strategy: TextMaskStrategy,
    rng: &mut Rng,
) -> Result<TextMaskSpec> {
    check_ratio(ratio)?;
    let candidates = eligible(text, strategy);
    if candidates.is_empty() {
        return Err(CloverError::NoEligibleToken);
    }
    let count = nearest_count(ratio, candidates.len()).max(1);
    let mut positions: Vec<usize> = rng
        .sample_distinct(candidates.len(), count)
        .into_iter()
        .map(|k| candidates[k])
        .collect();
    positions.sort_unstable();
    let replaced_ids = positions.iter().map(|&p| text.ids[p]).collect();
    Ok(TextMaskSpec {
        positions,
        replaced_ids,
    })
}

/// Copy of `text` with `[MASK]` at every spec position.
pub fn apply_text_mask(text: &TokenizedText, spec: &TextMaskSpec) -> Result<TokenizedText> {
    let mut out = text.clone();
    for &p in &spec.positions {
        if p >= out.len() {
            return Err(CloverError::invalid(
                "positions",
                format!("position {p} out of range for {} tokens", out.len()),
            ));
        }
        out.ids[p] = MASK;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::text::Vocab;

    fn swan() -> TokenizedText {
        let v = Vocab::default();
        v.encode(
            &["a", "black", "swan", "swimming", "in", "a", "calm", "lake"],
            None,
        )
        .unwrap()
    }

    #[test]
    fn rounding_rule() {
        assert_eq!(nearest_count(0.2, 16), 3);
        assert_eq!(nearest_count(0.2, 10), 2);
        assert_eq!(nearest_count(0.3, 5), 2);
        assert_eq!(nearest_count(0.25, 2), 1);
        assert_eq!(nearest_count(0.2, 2), 0);
    }

    #[test]
    fn sixteen_positions_mask_three() {
        let spec = make_video_mask(16, 0.2, &mut Rng::new(3, 0)).unwrap();
        assert_eq!(spec.spatial_indices.len(), 3);
        assert_eq!((spec.grid_h, spec.grid_w), (4, 4));
    }

    #[test]
    fn same_position_in_every_frame() {
        let spec = make_video_mask(10, 0.2, &mut Rng::new(9, 1)).unwrap();
        let flags = spec.token_flags(4);
        assert_eq!(flags.len(), 40);
        assert_eq!(flags.iter().filter(|&&f| f).count(), 8);
        for f in 1..4 {
            assert_eq!(&flags[..10], &flags[f * 10..(f + 1) * 10]);
        }
    }

    #[test]
    fn degenerate_video_mask_is_an_error() {
        let err = make_video_mask(2, 0.2, &mut Rng::new(0, 0)).unwrap_err();
        assert!(matches!(err, CloverError::DegenerateMask(_)));
        assert!(make_video_mask(16, 1.0, &mut Rng::new(0, 0)).is_err());
    }

    #[test]
    fn video_mask_is_reproducible() {
        let a = make_video_mask(49, 0.2, &mut Rng::new(5, 2)).unwrap();
        let b = make_video_mask(49, 0.2, &mut Rng::new(5, 2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn swan_sentence_masks_two_content_words() {
        let text = swan();
        let spec = make_text_mask(&text, 0.3, &mut Rng::new(1, 0)).unwrap();
        assert_eq!(spec.positions.len(), 2);
        for &p in &spec.positions {
            assert!(text.tags[p].is_content());
        }
    }

    #[test]
    fn function_words_only_has_nothing_to_mask() {
        let v = Vocab::default();
        let t = v.encode(&["a", "the", "over", "is"], None).unwrap();
        assert!(matches!(
            make_text_mask(&t, 0.3, &mut Rng::new(0, 0)),
            Err(CloverError::NoEligibleToken)
        ));
    }

    #[test]
    fn apply_and_restore() {
        let text = swan();
        assert_eq!(
            apply_text_mask(&text, &TextMaskSpec::empty()).unwrap(),
            text
        );
        let spec = TextMaskSpec {
            positions: vec![3],
            replaced_ids: vec![text.ids[3]],
        };
        let masked = apply_text_mask(&text, &spec).unwrap();
        assert_eq!(masked.ids[3], MASK);
        for p in (0..text.len()).filter(|&p| p != 3) {
            assert_eq!(masked.ids[p], text.ids[p]);
        }
        assert_eq!(spec.restore(&masked).unwrap(), text);
        let bad = TextMaskSpec {
            positions: vec![99],
            replaced_ids: vec![0],
        };
        assert!(apply_text_mask(&text, &bad).is_err());
    }

    #[test]
    fn random_strategy_may_touch_function_words_but_not_specials() {
        let text = swan().padded(12);
        for seed in 0..50 {
            let spec =
                make_text_mask_with(&text, 0.5, TextMaskStrategy::Random, &mut Rng::new(seed, 0))
                    .unwrap();
            assert_eq!(spec.positions.len(), 4);
            assert!(spec.positions.iter().all(|&p| p > 0 && p < 9));
        }
    }
}
