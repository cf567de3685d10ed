//! Synthetic paired corpus: procedurally rendered single-object scenes with
//! template captions, question records, JSON-lines manifests and batch assembly.

mod batch;
mod corpus;
mod scene;

pub use batch::{make_batch, sample_rng, MaskingConfig, RawBatch, RawSample};
pub use corpus::{
    append_jsonl, clip_paths, generate_corpus, image_capacity, read_clip, read_jsonl, read_qa,
    video_capacity, write_clip, write_jsonl, write_qa, ClipHeader, ClipSource, Corpus,
    CorpusConfig, Manifest, ManifestRecord, QaMode, QaRecord, Split, MC_CANDIDATES, OPEN_ANSWERS,
};
pub use scene::{caption, image_caption, render, Color, Motion, SceneSpec, Shape, Size};
