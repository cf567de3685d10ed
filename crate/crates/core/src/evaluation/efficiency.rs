use std::cell::Cell;

use serde::{Deserialize, Serialize};

use crate::data::{generate_corpus, ClipSource, CorpusConfig};
use crate::encoders::VideoClip;
use crate::encoders::{
    CloverModel, EmbeddingSequence, FusedSequence, ModelConfig, TokenizedText, Vocab,
};
use crate::error::{CloverError, Result};
use crate::substrate::Real;

/// Work done by one retrieval path.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathCounts {
    /// Uni-modal (video or text) encoder forwards, one per sequence.
    pub encoder_forwards: usize,
    /// Fusion encoder forwards, one per video-text pair.
    pub fusion_forwards: usize,
    pub dot_products: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EfficiencyReport {
    pub n: usize,
    pub m: usize,
    pub k: usize,
    /// Two-tower retrieval over all N queries and M videos.
    pub dual: PathCounts,
    /// Cross-encoder scoring of every query-video pair.
    pub exhaustive: PathCounts,
    /// Cross-encoder rescoring of each query's top k two-tower hits (beyond the two-tower stage).
    pub rescoring: PathCounts,
}

/// Model wrapper that counts every forward it runs.
pub struct InstrumentedModel<'m, T: Real> {
    model: &'m CloverModel<T>,
    encoder: Cell<usize>,
    fusion: Cell<usize>,
    dots: Cell<usize>,
}

impl<'m, T: Real> InstrumentedModel<'m, T> {
    pub fn new(model: &'m CloverModel<T>) -> Self {
        InstrumentedModel {
            model,
            encoder: Cell::new(0),
            fusion: Cell::new(0),
            dots: Cell::new(0),
        }
    }

    pub fn encode_video(&self, clip: &VideoClip) -> Result<EmbeddingSequence<T>> {
        self.encoder.set(self.encoder.get() + 1);
        self.model.encode_video(clip, None)
    }

    pub fn encode_text(&self, text: &TokenizedText) -> Result<EmbeddingSequence<T>> {
        self.encoder.set(self.encoder.get() + 1);
        self.model.encode_text(text)
    }

    pub fn fuse_pair(
        &self,
        video: &EmbeddingSequence<T>,
        text: &EmbeddingSequence<T>,
    ) -> Result<FusedSequence<T>> {
        self.fusion.set(self.fusion.get() + 1);
        self.model.fuse_pair(video, text)
    }

    pub fn dot(&self, a: &[T], b: &[T]) -> f64 {
        self.dots.set(self.dots.get() + 1);
        a.iter().zip(b).map(|(x, y)| x.f64() * y.f64()).sum()
    }

    /// Counts since construction or the last take, then resets them.
    pub fn take(&self) -> PathCounts {
        PathCounts {
            encoder_forwards: self.encoder.replace(0),
            fusion_forwards: self.fusion.replace(0),
            dot_products: self.dots.replace(0),
        }
    }
}

/// Cross-encoder score: the text embedding against the fused pair embedding.
fn cross_score<T: Real>(
    m: &InstrumentedModel<'_, T>,
    v: &EmbeddingSequence<T>,
    t: &EmbeddingSequence<T>,
) -> Result<f64> {
    let fused = m.fuse_pair(v, t)?;
    Ok(t.pooled
        .iter()
        .zip(&fused.pooled_fusion)
        .map(|(a, b)| a.f64() * b.f64())
        .sum())
}

/// Indices of the `k` largest scores, ties to the lower index.
fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Runs the three retrieval paths on `texts` x `clips` and returns what each one cost.
pub fn measure_paths<T: Real>(
    model: &CloverModel<T>,
    texts: &[TokenizedText],
    clips: &[VideoClip],
    k: usize,
) -> Result<EfficiencyReport> {
    let (n, m) = (texts.len(), clips.len());
    if k > m {
        return Err(CloverError::invalid(
            "k",
            format!("rescoring depth {k} exceeds {m} videos"),
        ));
    }
    let im = InstrumentedModel::new(model);
    let t_seq: Vec<_> = texts
        .iter()
        .map(|t| im.encode_text(t))
        .collect::<Result<_>>()?;
    let v_seq: Vec<_> = clips
        .iter()
        .map(|c| im.encode_video(c))
        .collect::<Result<_>>()?;
    let dual_scores: Vec<Vec<f64>> = t_seq
        .iter()
        .map(|t| v_seq.iter().map(|v| im.dot(&t.pooled, &v.pooled)).collect())
        .collect();
    let dual = im.take();

    // The cross-encoder paths reuse the uni-modal token sequences computed above.
    for t in &t_seq {
        for v in &v_seq {
            cross_score(&im, v, t)?;
        }
    }
    let exhaustive = im.take();

    for (t, scores) in t_seq.iter().zip(&dual_scores) {
        for j in top_k(scores, k) {
            cross_score(&im, &v_seq[j], t)?;
        }
    }
    let rescoring = im.take();
    Ok(EfficiencyReport {
        n,
        m,
        k,
        dual,
        exhaustive,
        rescoring,
    })
}

/// Counts forwards for N queries against M videos on a freshly initialized micro model.
pub fn efficiency_probe(n: usize, m: usize, k: usize, seed: u64) -> Result<EfficiencyReport> {
    if n == 0 || m == 0 {
        return Err(CloverError::invalid(
            "n",
            "need at least one query and one video",
        ));
    }
    let config = ModelConfig::micro();
    let corpus = generate_corpus(&CorpusConfig {
        n: n.max(m),
        seed,
        frames: config.frames,
        height: config.height,
        width: config.width,
        image_fraction: 0.0,
    })?;
    let vocab = Vocab::default();
    let records = &corpus.manifest.records;
    let texts: Vec<TokenizedText> = records[..n]
        .iter()
        .map(|r| vocab.encode(&r.caption, None))
        .collect::<Result<_>>()?;
    let clips: Vec<VideoClip> = records[..m]
        .iter()
        .map(|r| ClipSource::Render.load(r))
        .collect::<Result<_>>()?;
    let model = CloverModel::<f64>::new(config, seed)?;
    measure_paths(&model, &texts, &clips, k)
}
