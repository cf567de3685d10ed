use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::{
    retrieval_metrics, similarity_diagnostics, similarity_matrix, RetrievalMetrics,
    SimilarityMatrix,
};
use crate::data::{append_jsonl, ClipSource, ManifestRecord, QaMode, Split};
use crate::encoders::{CloverModel, TokenizedText, VideoClip, Vocab};
use crate::error::Result;
use crate::substrate::Real;

/// Pooled unit-norm embeddings of each record's caption and clip, in record order.
pub fn embed_records<T: Real>(
    model: &CloverModel<T>,
    records: &[&ManifestRecord],
    source: &ClipSource,
    batch: usize,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let vocab = Vocab::default();
    let (mut text, mut video) = (Vec::new(), Vec::new());
    for chunk in records.chunks(batch.max(1)) {
        let texts: Vec<TokenizedText> = chunk
            .iter()
            .map(|r| vocab.encode(&r.caption, None))
            .collect::<Result<_>>()?;
        let clips: Vec<VideoClip> = chunk
            .iter()
            .map(|r| source.load(r))
            .collect::<Result<_>>()?;
        let g = model.graph();
        let v = model.encode_videos(
            &g,
            &clips.iter().collect::<Vec<_>>(),
            &vec![None; clips.len()],
        )?;
        let t = model.encode_texts(&g, &texts.iter().collect::<Vec<_>>())?;
        for (out, var) in [(&mut video, v.pooled), (&mut text, t.pooled)] {
            let value = var.value();
            let d = value.cols();
            out.extend(
                value
                    .data()
                    .chunks(d)
                    .map(|row| row.iter().map(|x| x.f64()).collect::<Vec<f64>>()),
            );
        }
    }
    Ok((text, video))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub split: Split,
    pub pairs: usize,
    /// R@1 of a uniformly random ranking.
    pub chance_r1: f64,
    pub text_to_video: RetrievalMetrics,
    pub video_to_text: RetrievalMetrics,
    pub mean_positive: f64,
    pub margin: f64,
}

impl RetrievalReport {
    /// Scores paired rows: text `i` belongs with video `i`.
    pub fn from_similarities(split: Split, s: &SimilarityMatrix) -> Result<Self> {
        let truth: Vec<usize> = (0..s.rows).collect();
        let (mean_positive, margin) = similarity_diagnostics(s, &truth)?;
        Ok(RetrievalReport {
            split,
            pairs: s.rows,
            chance_r1: 1.0 / s.cols as f64,
            text_to_video: retrieval_metrics(s, &truth)?,
            video_to_text: retrieval_metrics(&s.transpose(), &truth)?,
            mean_positive,
            margin,
        })
    }

    pub fn table(&self) -> String {
        let mut out = format!(
            "retrieval on {:?} ({} pairs, chance R@1 {:.4})\n",
            self.split, self.pairs, self.chance_r1
        );
        let _ = writeln!(
            out,
            "{:<14} {:>7} {:>7} {:>7} {:>7}",
            "direction", "R@1", "R@5", "R@10", "MedR"
        );
        for (name, m) in [
            ("text->video", &self.text_to_video),
            ("video->text", &self.video_to_text),
        ] {
            let _ = writeln!(
                out,
                "{name:<14} {:>7.4} {:>7.4} {:>7.4} {:>7.1}",
                m.r1, m.r5, m.r10, m.medr
            );
        }
        let _ = writeln!(
            out,
            "mean positive similarity {:.4}, margin {:.4}",
            self.mean_positive, self.margin
        );
        out
    }
}

/// Embeds the split and scores text-to-video and video-to-text retrieval.
pub fn evaluate_retrieval<T: Real>(
    model: &CloverModel<T>,
    records: &[&ManifestRecord],
    split: Split,
    source: &ClipSource,
    batch: usize,
) -> Result<RetrievalReport> {
    let (text, video) = embed_records(model, records, source, batch)?;
    RetrievalReport::from_similarities(split, &similarity_matrix(&text, &video)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VqaReport {
    pub split: Split,
    pub mode: QaMode,
    pub questions: usize,
    pub accuracy: f64,
}

impl VqaReport {
    pub fn table(&self) -> String {
        format!(
            "vqa {:?} on {:?}: {} questions, accuracy {:.4}\n",
            self.mode, self.split, self.questions, self.accuracy
        )
    }
}

/// Appends a report to a JSON-lines file.
pub fn append_report<S: Serialize>(path: &Path, report: &S) -> Result<()> {
    append_jsonl(path, report)
}
