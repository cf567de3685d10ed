use super::config::ModelConfig;
use super::layers::{layer_norm, linear, project, stack};
use super::params::{model_param_specs, Graph, ParamStore};
use super::text::TokenizedText;
use crate::error::{CloverError, Result};
use crate::masking::VideoMaskSpec;
use crate::substrate::{Real, Rng, Segment, Tensor, Var};

/// `frames × height × width × channels` pixels in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<f32>,
}

impl VideoClip {
    pub fn new(
        frames: usize,
        height: usize,
        width: usize,
        channels: usize,
        pixels: Vec<f32>,
    ) -> Result<Self> {
        if pixels.len() != frames * height * width * channels {
            return Err(CloverError::invalid(
                "pixels",
                format!(
                    "{} values for a {frames}×{height}×{width}×{channels} clip",
                    pixels.len()
                ),
            ));
        }
        if frames == 0 {
            return Err(CloverError::invalid(
                "frames",
                "a clip needs at least one frame",
            ));
        }
        Ok(VideoClip {
            frames,
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn zeros(frames: usize, height: usize, width: usize, channels: usize) -> Self {
        VideoClip {
            frames,
            height,
            width,
            channels,
            pixels: vec![0.0; frames * height * width * channels],
        }
    }

    pub fn index(&self, f: usize, y: usize, x: usize, c: usize) -> usize {
        ((f * self.height + y) * self.width + x) * self.channels + c
    }

    pub fn frame(&self, f: usize) -> &[f32] {
        let n = self.height * self.width * self.channels;
        &self.pixels[f * n..(f + 1) * n]
    }
}

/// Per-token outputs and pooled unit-norm projection of one encoder pass.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSequence<T: Real> {
    pub tokens: Tensor<T>,
    pub pooled: Vec<T>,
    /// Leading tokens visible as attention keys (all of them for video; non-padding for text).
    pub valid: usize,
}

/// Fusion-encoder output for one pair.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedSequence<T: Real> {
    pub tokens: Tensor<T>,
    pub pooled_fusion: Vec<T>,
    /// Row of the text `[CLS]` slot in `tokens`.
    pub cls_row: usize,
}

/// Batched encoder output recorded on a graph.
pub struct SeqOut<'g, T: Real> {
    /// All samples' tokens stacked, `Σ len × D`.
    pub tokens: Var<'g, T>,
    pub segments: Vec<Segment>,
    /// `B × D`, unit-norm rows.
    pub pooled: Var<'g, T>,
}

/// Batched fusion output recorded on a graph.
pub struct FusedOut<'g, T: Real> {
    pub tokens: Var<'g, T>,
    pub segments: Vec<Segment>,
    /// Row of each pair's `[CLS]` slot.
    pub cls_rows: Vec<usize>,
    /// Fused `[CLS]` rows before projection, `B × D`.
    pub cls: Var<'g, T>,
    /// Projected, unit-norm `[CLS]` rows, `B × D`.
    pub pooled: Var<'g, T>,
}

impl<T: Real> FusedOut<'_, T> {
    /// Packed row holding text position `pos` of pair `pair`.
    pub fn text_row(&self, pair: usize, pos: usize) -> usize {
        self.cls_rows[pair] + pos
    }
}

/// Video encoder, text encoder and fusion encoder with their projection heads.
#[derive(Debug, Clone, PartialEq)]
pub struct CloverModel<T: Real> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

impl<T: Real> CloverModel<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = ParamStore::init(&model_param_specs(&config), &mut Rng::new(seed, 0x1417));
        Ok(CloverModel { config, params })
    }

    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        for (name, shape, _) in model_param_specs(&config) {
            match params.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(CloverError::Checkpoint(format!(
                        "parameter `{name}` has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                None => {
                    return Err(CloverError::Checkpoint(format!(
                        "missing parameter `{name}`"
                    )))
                }
            }
        }
        Ok(CloverModel { config, params })
    }

    pub fn graph(&self) -> Graph<'_, T> {
        Graph::new(&self.params)
    }

    pub fn check_clip(&self, clip: &VideoClip) -> Result<()> {
        let c = &self.config;
        if clip.height != c.height {
            return Err(CloverError::invalid(
                "height",
                format!("{} != configured {}", clip.height, c.height),
            ));
        }
        if clip.width != c.width {
            return Err(CloverError::invalid(
                "width",
                format!("{} != configured {}", clip.width, c.width),
            ));
        }
        if clip.channels != c.channels {
            return Err(CloverError::invalid(
                "channels",
                format!("{} != configured {}", clip.channels, c.channels),
            ));
        }
        if clip.frames == 0 || clip.frames > c.frames {
            return Err(CloverError::invalid(
                "frames",
                format!("{} not in 1..={}", clip.frames, c.frames),
            ));
        }
        if clip.pixels.len() != clip.frames * clip.height * clip.width * clip.channels {
            return Err(CloverError::invalid(
                "pixels",
                "length does not match clip geometry",
            ));
        }
        Ok(())
    }

    pub fn check_mask(&self, mask: &VideoMaskSpec) -> Result<()> {
        let (gh, gw) = self.config.grid();
        if (mask.grid_h, mask.grid_w) != (gh, gw) {
            return Err(CloverError::invalid(
                "mask",
                format!(
                    "grid {}×{} does not match the {gh}×{gw} patch grid",
                    mask.grid_h, mask.grid_w
                ),
            ));
        }
        if let Some(&bad) = mask.spatial_indices.iter().find(|&&i| i >= gh * gw) {
            return Err(CloverError::invalid(
                "mask",
                format!("spatial index {bad} out of range"),
            ));
        }
        Ok(())
    }

    pub fn check_text(&self, text: &TokenizedText) -> Result<()> {
        text.validate(self.config.vocab_size, self.config.max_text_len)
    }

    /// Encodes a batch of clips, optionally masking spatial positions of each.
    pub fn encode_videos<'g>(
        &self,
        g: &'g Graph<'_, T>,
        clips: &[&VideoClip],
        masks: &[Option<&VideoMaskSpec>],
    ) -> Result<SeqOut<'g, T>> {
        if clips.len() != masks.len() {
            return Err(CloverError::invalid(
                "masks",
                "one (optional) mask per clip",
            ));
        }
        let mut pixels = Vec::new();
        for clip in clips {
            self.check_clip(clip)?;
            pixels.extend(clip.pixels.iter().map(|&p| T::c(p as f64)));
        }
        let frames: Vec<usize> = clips.iter().map(|c| c.frames).collect();
        let n = pixels.len();
        let pixels = g.constant(Tensor::new(vec![1, n], pixels)?);
        self.encode_video_pixels(g, pixels, &frames, masks)
    }

    /// Video encoder over a pixel variable holding the clips back to back.
    pub fn encode_video_pixels<'g>(
        &self,
        g: &'g Graph<'_, T>,
        pixels: Var<'g, T>,
        frames: &[usize],
        masks: &[Option<&VideoMaskSpec>],
    ) -> Result<SeqOut<'g, T>> {
        let c = &self.config;
        let (gh, gw) = c.grid();
        let s = gh * gw;
        let p = c.patch;
        if frames.is_empty() {
            return Err(CloverError::invalid("clips", "empty batch"));
        }
        let expected: usize = frames
            .iter()
            .map(|f| f * c.height * c.width * c.channels)
            .sum();
        if pixels.value().len() != expected {
            return Err(CloverError::invalid(
                "pixels",
                "length does not match clip geometry",
            ));
        }
        let mut patch_idx = Vec::new();
        let mut masked_rows = Vec::new();
        let mut space_ids = Vec::new();
        let mut time_ids = Vec::new();
        let mut segments = Vec::new();
        let mut base = 0;
        let mut row = 0;
        for (&nf, mask) in frames.iter().zip(masks) {
            if nf == 0 || nf > c.frames {
                return Err(CloverError::invalid(
                    "frames",
                    format!("{nf} not in 1..={}", c.frames),
                ));
            }
            let flags = match mask {
                Some(m) => {
                    self.check_mask(m)?;
                    m.token_flags(nf)
                }
                None => vec![false; nf * s],
            };
            let k = nf * s;
            for tok in 0..k {
                let (f, sp) = (tok / s, tok % s);
                let (r, col) = (sp / gw, sp % gw);
                for py in 0..p {
                    for px in 0..p {
                        let y = r * p + py;
                        let x = col * p + px;
                        let pix = ((f * c.height + y) * c.width + x) * c.channels;
                        patch_idx.extend((0..c.channels).map(|ch| base + pix + ch));
                    }
                }
                masked_rows.push(flags[tok]);
                space_ids.push(sp);
                time_ids.push(f);
            }
            segments.push(Segment {
                start: row,
                len: k,
                keys: k,
            });
            row += k;
            base += nf * c.height * c.width * c.channels;
        }
        let patches = pixels.gather(patch_idx, vec![row, c.patch_dim()]);
        let mut x = linear(g, patches, "video.patch");
        if masked_rows.iter().any(|&m| m) {
            let with_token = crate::substrate::Var::concat_rows(&[x, g.param("video.mask_token")]);
            let pick: Vec<usize> = masked_rows
                .iter()
                .enumerate()
                .map(|(i, &m)| if m { row } else { i })
                .collect();
            x = with_token.rows_at(&pick);
        }
        x = x
            .add(g.param("video.pos_space").rows_at(&space_ids))
            .add(g.param("video.pos_time").rows_at(&time_ids));
        let tokens = stack(g, x, "video", c.video_layers, &segments, c.heads, c.ln_eps);
        let means = tokens.segment_mean(segments.iter().map(|s| (s.start, s.len)).collect());
        let pooled = project(g, means, "proj.video").l2_normalize();
        Ok(SeqOut {
            tokens,
            segments,
            pooled,
        })
    }

    /// Encodes a batch of texts; `[PAD]` positions are never attended to.
    pub fn encode_texts<'g>(
        &self,
        g: &'g Graph<'_, T>,
        texts: &[&TokenizedText],
    ) -> Result<SeqOut<'g, T>> {
        if texts.is_empty() {
            return Err(CloverError::invalid("texts", "empty batch"));
        }
        let mut ids = Vec::new();
        let mut pos = Vec::new();
        let mut segments = Vec::new();
        for t in texts {
            self.check_text(t)?;
            segments.push(Segment {
                start: ids.len(),
                len: t.len(),
                keys: t.valid_len(),
            });
            ids.extend_from_slice(&t.ids);
            pos.extend(0..t.len());
        }
        let table = g.param("text.tok_embed");
        let x = table.rows_at(&ids).add(g.param("text.pos").rows_at(&pos));
        self.encode_text_embeddings(g, x, segments)
    }

    /// Text encoder from already-looked-up input embeddings.
    pub fn encode_text_embeddings<'g>(
        &self,
        g: &'g Graph<'_, T>,
        x: Var<'g, T>,
        segments: Vec<Segment>,
    ) -> Result<SeqOut<'g, T>> {
        let c = &self.config;
        let tokens = stack(g, x, "text", c.text_layers, &segments, c.heads, c.ln_eps);
        let cls: Vec<usize> = segments.iter().map(|s| s.start).collect();
        let pooled = project(g, tokens.rows_at(&cls), "proj.text").l2_normalize();
        Ok(SeqOut {
            tokens,
            segments,
            pooled,
        })
    }

    /// Fuses `(video index, text index)` pairs: video tokens first, then text tokens.
    pub fn fuse<'g>(
        &self,
        g: &'g Graph<'_, T>,
        video: &SeqOut<'g, T>,
        text: &SeqOut<'g, T>,
        pairs: &[(usize, usize)],
    ) -> Result<FusedOut<'g, T>> {
        self.fuse_tokens(
            g,
            video.tokens,
            &video.segments,
            text.tokens,
            &text.segments,
            pairs,
        )
    }

    pub fn fuse_tokens<'g>(
        &self,
        g: &'g Graph<'_, T>,
        video_tokens: Var<'g, T>,
        video_segments: &[Segment],
        text_tokens: Var<'g, T>,
        text_segments: &[Segment],
        pairs: &[(usize, usize)],
    ) -> Result<FusedOut<'g, T>> {
        let c = &self.config;
        if video_tokens.cols() != text_tokens.cols() {
            return Err(CloverError::invalid(
                "dim",
                format!(
                    "video width {} != text width {}",
                    video_tokens.cols(),
                    text_tokens.cols()
                ),
            ));
        }
        if video_tokens.cols() != c.dim {
            return Err(CloverError::invalid(
                "dim",
                format!("{} != configured {}", video_tokens.cols(), c.dim),
            ));
        }
        if pairs.is_empty() {
            return Err(CloverError::invalid("pairs", "empty batch"));
        }
        let video_rows = video_tokens.rows();
        let both = Var::concat_rows(&[video_tokens, text_tokens]);
        let mut rows = Vec::new();
        let mut types = Vec::new();
        let mut segments = Vec::new();
        let mut cls_rows = Vec::new();
        for &(vi, ti) in pairs {
            let vs = video_segments.get(vi).ok_or_else(|| {
                CloverError::invalid("pairs", format!("video index {vi} out of range"))
            })?;
            let ts = text_segments.get(ti).ok_or_else(|| {
                CloverError::invalid("pairs", format!("text index {ti} out of range"))
            })?;
            let start = rows.len();
            rows.extend(vs.start..vs.start + vs.len);
            types.extend(std::iter::repeat_n(0, vs.len));
            cls_rows.push(rows.len());
            rows.extend((ts.start..ts.start + ts.len).map(|r| video_rows + r));
            types.extend(std::iter::repeat_n(1, ts.len));
            segments.push(Segment {
                start,
                len: vs.len + ts.len,
                keys: vs.len + ts.keys,
            });
        }
        let x = both
            .rows_at(&rows)
            .add(g.param("fusion.type_embed").rows_at(&types));
        let tokens = stack(
            g,
            x,
            "fusion",
            c.fusion_layers,
            &segments,
            c.heads,
            c.ln_eps,
        );
        let cls = tokens.rows_at(&cls_rows);
        let pooled = project(g, cls, "proj.fusion").l2_normalize();
        Ok(FusedOut {
            tokens,
            segments,
            cls_rows,
            cls,
            pooled,
        })
    }

    /// Vocabulary logits at the given packed fused rows.
    pub fn mlm_logits<'g>(
        &self,
        g: &'g Graph<'_, T>,
        fused: &FusedOut<'g, T>,
        rows: &[usize],
    ) -> Var<'g, T> {
        let h = linear(g, fused.tokens.rows_at(rows), "mlm.dense").gelu();
        let h = layer_norm(g, h, "mlm.ln", self.config.ln_eps);
        linear(g, h, "mlm.decoder")
    }

    /// Single-clip video encoding.
    pub fn encode_video(
        &self,
        clip: &VideoClip,
        mask: Option<&VideoMaskSpec>,
    ) -> Result<EmbeddingSequence<T>> {
        let g = self.graph();
        let out = self.encode_videos(&g, &[clip], &[mask])?;
        let tokens = out.tokens.value().clone();
        let valid = tokens.rows();
        let pooled = out.pooled.value().data().to_vec();
        Ok(EmbeddingSequence {
            tokens,
            pooled,
            valid,
        })
    }

    /// Single-text encoding.
    pub fn encode_text(&self, text: &TokenizedText) -> Result<EmbeddingSequence<T>> {
        let g = self.graph();
        let out = self.encode_texts(&g, &[text])?;
        let tokens = out.tokens.value().clone();
        let pooled = out.pooled.value().data().to_vec();
        Ok(EmbeddingSequence {
            tokens,
            pooled,
            valid: text.valid_len(),
        })
    }

    /// Fuses one video and one text embedding sequence.
    pub fn fuse_pair(
        &self,
        video: &EmbeddingSequence<T>,
        text: &EmbeddingSequence<T>,
    ) -> Result<FusedSequence<T>> {
        if video.tokens.cols() != text.tokens.cols() {
            return Err(CloverError::invalid(
                "dim",
                format!(
                    "video width {} != text width {}",
                    video.tokens.cols(),
                    text.tokens.cols()
                ),
            ));
        }
        let g = self.graph();
        let vt = g.constant(video.tokens.clone());
        let tt = g.constant(text.tokens.clone());
        let vs = [Segment {
            start: 0,
            len: video.tokens.rows(),
            keys: video.valid,
        }];
        let ts = [Segment {
            start: 0,
            len: text.tokens.rows(),
            keys: text.valid,
        }];
        let out = self.fuse_tokens(&g, vt, &vs, tt, &ts, &[(0, 0)])?;
        let tokens = out.tokens.value().clone();
        let pooled_fusion = out.pooled.value().data().to_vec();
        Ok(FusedSequence {
            tokens,
            pooled_fusion,
            cls_row: out.cls_rows[0],
        })
    }
}
