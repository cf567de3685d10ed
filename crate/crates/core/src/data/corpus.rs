use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::scene::{caption, image_caption, render, Color, Motion, SceneSpec, Shape, Size};
use crate::encoders::{write_atomic, VideoClip};
use crate::error::{CloverError, Result};
use crate::substrate::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = CloverError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(CloverError::invalid(
                "split",
                format!("`{s}` is not one of train, val, test"),
            )),
        }
    }
}

/// One paired clip and caption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: u64,
    pub split: Split,
    /// One-frame still treated as a video.
    pub image: bool,
    pub scene: SceneSpec,
    pub caption: Vec<String>,
}

impl ManifestRecord {
    /// Caption implied by the scene, used to check manifests read from disk.
    pub fn expected_caption(&self) -> Vec<String> {
        if self.image {
            image_caption(&self.scene)
        } else {
            caption(&self.scene)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn split(&self, split: Split) -> Vec<&ManifestRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        for r in &self.records {
            if !ids.insert(r.id) {
                return Err(CloverError::invalid(
                    "id",
                    format!("duplicate record id {}", r.id),
                ));
            }
            r.scene.validate()?;
            if r.caption != r.expected_caption() {
                return Err(CloverError::invalid(
                    "caption",
                    format!("record {} does not match its scene", r.id),
                ));
            }
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_jsonl(path, &self.records)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let m = Manifest {
            records: read_jsonl(path)?,
        };
        m.validate()?;
        Ok(m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QaMode {
    /// Classify the answer over a fixed answer vocabulary.
    Open,
    /// Pick one of several candidate answers.
    MultipleChoice,
}

impl std::str::FromStr for QaMode {
    type Err = CloverError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "open" => Ok(QaMode::Open),
            "mc" | "multiple_choice" => Ok(QaMode::MultipleChoice),
            _ => Err(CloverError::invalid(
                "mode",
                format!("`{s}` is not one of open, mc"),
            )),
        }
    }
}

/// A question about one scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QaRecord {
    pub scene_id: u64,
    pub split: Split,
    pub mode: QaMode,
    pub question: Vec<String>,
    /// Index into [`OPEN_ANSWERS`] (open mode) or into `candidates`.
    pub answer: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub candidates: Vec<Vec<String>>,
}

/// Answer vocabulary of the open-ended questions: the palette.
pub const OPEN_ANSWERS: [&str; 8] = [
    "red", "green", "blue", "yellow", "purple", "orange", "white", "black",
];

pub const MC_CANDIDATES: usize = 4;

pub fn write_qa(path: &Path, qa: &[QaRecord]) -> Result<()> {
    write_jsonl(path, qa)
}

pub fn read_qa(path: &Path) -> Result<Vec<QaRecord>> {
    let qa: Vec<QaRecord> = read_jsonl(path)?;
    for q in &qa {
        let limit = match q.mode {
            QaMode::Open => OPEN_ANSWERS.len(),
            QaMode::MultipleChoice => q.candidates.len(),
        };
        if q.answer >= limit {
            return Err(CloverError::invalid(
                "answer",
                format!("scene {}: {} out of range", q.scene_id, q.answer),
            ));
        }
    }
    Ok(qa)
}

/// Corpus generation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub n: usize,
    pub seed: u64,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Fraction of records rendered as one-frame stills.
    pub image_fraction: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            n: 2000,
            seed: 0,
            frames: 4,
            height: 32,
            width: 32,
            image_fraction: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub manifest: Manifest,
    pub qa: Vec<QaRecord>,
}

/// Distinct video scenes available at the given geometry.
pub fn video_capacity() -> usize {
    Shape::ALL.len()
        * Color::ALL.len()
        * (Color::ALL.len() - 1)
        * Motion::ALL.len()
        * Size::ALL.len()
}

/// Distinct still images (motion plays no part in a still).
pub fn image_capacity() -> usize {
    Shape::ALL.len() * Color::ALL.len() * (Color::ALL.len() - 1) * Size::ALL.len()
}

fn scene_pool(cfg: &CorpusConfig, image: bool) -> Vec<SceneSpec> {
    let motions: &[Motion] = if image {
        &[Motion::Still]
    } else {
        &Motion::ALL
    };
    let mut out = Vec::new();
    for &shape in &Shape::ALL {
        for &color in &Color::ALL {
            for &background in Color::ALL.iter().filter(|&&b| b != color) {
                for &motion in motions {
                    for &size in &Size::ALL {
                        out.push(SceneSpec {
                            shape,
                            color,
                            motion,
                            background,
                            size,
                            frames: if image { 1 } else { cfg.frames },
                            height: cfg.height,
                            width: cfg.width,
                        });
                    }
                }
            }
        }
    }
    out
}

/// Samples `n` distinct scenes, splits them 80/10/10 and attaches questions.
pub fn generate_corpus(cfg: &CorpusConfig) -> Result<Corpus> {
    if cfg.n == 0 {
        return Err(CloverError::invalid("n", "must be at least 1"));
    }
    if !(0.0..=1.0).contains(&cfg.image_fraction) {
        return Err(CloverError::invalid("image_fraction", "must lie in [0, 1]"));
    }
    let n_images = (cfg.image_fraction * cfg.n as f64).round() as usize;
    let n_videos = cfg.n - n_images;
    if n_videos > video_capacity() || n_images > image_capacity() {
        return Err(CloverError::Capacity(format!(
            "requested {n_videos} videos and {n_images} images; capacity is {} distinct videos and {} distinct images",
            video_capacity(),
            image_capacity()
        )));
    }
    let mut rng = Rng::new(cfg.seed, 0xC0);
    let mut videos = scene_pool(cfg, false);
    rng.shuffle(&mut videos);
    let mut images = scene_pool(cfg, true);
    rng.shuffle(&mut images);
    let mut chosen: Vec<(bool, SceneSpec)> = videos
        .into_iter()
        .take(n_videos)
        .map(|s| (false, s))
        .chain(images.into_iter().take(n_images).map(|s| (true, s)))
        .collect();
    rng.shuffle(&mut chosen);

    let n_train = (cfg.n as f64 * 0.8).round() as usize;
    let n_val = (cfg.n as f64 * 0.1).round() as usize;
    let mut records = Vec::with_capacity(cfg.n);
    let mut qa = Vec::new();
    for (k, (image, scene)) in chosen.into_iter().enumerate() {
        let split = if k < n_train {
            Split::Train
        } else if k < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
        let id = k as u64;
        let caption = if image {
            image_caption(&scene)
        } else {
            caption(&scene)
        };
        qa.push(open_question(id, split, &scene));
        if !image {
            qa.push(choice_question(
                id,
                split,
                &scene,
                &mut Rng::derive(cfg.seed, &[0x9A, id]),
            ));
        }
        records.push(ManifestRecord {
            id,
            split,
            image,
            scene,
            caption,
        });
    }
    Ok(Corpus {
        manifest: Manifest { records },
        qa,
    })
}

fn words(s: &[&str]) -> Vec<String> {
    s.iter().map(|w| w.to_string()).collect()
}

fn open_question(id: u64, split: Split, scene: &SceneSpec) -> QaRecord {
    QaRecord {
        scene_id: id,
        split,
        mode: QaMode::Open,
        question: words(&["what", "color", "is", "the", scene.shape.word()]),
        answer: scene.color.index(),
        candidates: Vec::new(),
    }
}

fn choice_question(id: u64, split: Split, scene: &SceneSpec, rng: &mut Rng) -> QaRecord {
    let others: Vec<Motion> = Motion::ALL
        .iter()
        .copied()
        .filter(|&m| m != scene.motion)
        .collect();
    let mut picks: Vec<Motion> = rng
        .sample_distinct(others.len(), MC_CANDIDATES - 1)
        .into_iter()
        .map(|k| others[k])
        .collect();
    let answer = rng.below(MC_CANDIDATES);
    picks.insert(answer, scene.motion);
    QaRecord {
        scene_id: id,
        split,
        mode: QaMode::MultipleChoice,
        question: words(&["what", "is", "the", scene.shape.word(), "doing"]),
        answer,
        candidates: picks.iter().map(|m| words(m.phrase())).collect(),
    }
}

/// Header stored next to each raw clip file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipHeader {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Always `"f32le"`.
    pub dtype: String,
}

pub fn clip_paths(dir: &Path, id: u64) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("{id:06}.f32")),
        dir.join(format!("{id:06}.json")),
    )
}

/// Writes `clip` as raw little-endian `f32` plus a JSON shape header.
pub fn write_clip(dir: &Path, id: u64, clip: &VideoClip) -> Result<()> {
    let (data, header) = clip_paths(dir, id);
    let bytes: Vec<u8> = clip.pixels.iter().flat_map(|v| v.to_le_bytes()).collect();
    write_atomic(&data, &bytes)?;
    let h = ClipHeader {
        frames: clip.frames,
        height: clip.height,
        width: clip.width,
        channels: clip.channels,
        dtype: "f32le".into(),
    };
    write_atomic(&header, serde_json::to_string(&h)?.as_bytes())
}

pub fn read_clip(dir: &Path, id: u64) -> Result<VideoClip> {
    let (data, header) = clip_paths(dir, id);
    let text = std::fs::read_to_string(&header).map_err(|e| CloverError::io(&header, e))?;
    let h: ClipHeader = serde_json::from_str(&text)?;
    if h.dtype != "f32le" {
        return Err(CloverError::invalid(
            "dtype",
            format!("unsupported clip dtype `{}`", h.dtype),
        ));
    }
    let bytes = std::fs::read(&data).map_err(|e| CloverError::io(&data, e))?;
    if bytes.len() % 4 != 0 {
        return Err(CloverError::invalid(
            "pixels",
            format!("{} is not a whole number of f32 values", data.display()),
        ));
    }
    let pixels = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    VideoClip::new(h.frames, h.height, h.width, h.channels, pixels)
}

/// Where clip pixels come from.
#[derive(Debug, Clone, PartialEq)]
pub enum ClipSource {
    /// Re-render from the scene spec.
    Render,
    /// Raw files written by [`write_clip`].
    Files(PathBuf),
}

impl ClipSource {
    pub fn load(&self, record: &ManifestRecord) -> Result<VideoClip> {
        match self {
            ClipSource::Render => render(&record.scene),
            ClipSource::Files(dir) => read_clip(dir, record.id),
        }
    }
}

pub fn write_jsonl<S: Serialize>(path: &Path, items: &[S]) -> Result<()> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.push(b'\n');
    }
    write_atomic(path, &out)
}

/// Appends one JSON line and flushes.
pub fn append_jsonl<S: Serialize>(path: &Path, item: &S) -> Result<()> {
    let f = File::options()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| CloverError::io(path, e))?;
    let mut w = BufWriter::new(f);
    serde_json::to_writer(&mut w, item)?;
    w.write_all(b"\n").map_err(|e| CloverError::io(path, e))?;
    w.flush().map_err(|e| CloverError::io(path, e))
}

pub fn read_jsonl<D: DeserializeOwned>(path: &Path) -> Result<Vec<D>> {
    let f = File::open(path).map_err(|e| CloverError::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| CloverError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line)
            .map_err(|e| CloverError::Config(format!("{}:{}: {e}", path.display(), n + 1)))?;
        out.push(item);
    }
    Ok(out)
}
