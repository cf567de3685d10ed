use std::path::Path;

use serde_json::Map;

use super::optim::AdamW;
use super::state::load_model;
use super::trainer::{check_vocab, load_clips, run_loop, LoopSpec, TrainOutcome};
use crate::config::RunConfig;
use crate::data::{ClipSource, Manifest, ManifestRecord, QaMode, QaRecord, Split, OPEN_ANSWERS};
use crate::encoders::{linear, CloverModel, Graph, Init, TokenizedText, VideoClip, Vocab};
use crate::error::{CloverError, Result};
use crate::losses::{grouped_cross_entropy_var, info_nce_halves_var};
use crate::substrate::{Real, Rng, Var};

/// Parameters left untouched by retrieval fine-tuning.
pub const RETRIEVAL_FROZEN: [&str; 4] = ["fusion.", "proj.fusion.", "mlm.", "vqa."];

fn resolved(run: &RunConfig, model: &CloverModel<impl Real>) -> Result<RunConfig> {
    let mut run = run.clone();
    run.model = model.config.clone();
    run.validate()?;
    Ok(run)
}

/// Fine-tunes the video and text encoders with symmetric InfoNCE on complete pairs.
pub fn finetune_retrieval<T: Real>(
    run: &RunConfig,
    manifest: &Manifest,
    source: &ClipSource,
    init: &Path,
    out: &Path,
) -> Result<TrainOutcome> {
    let model = load_model::<T>(init)?;
    let run = resolved(run, &model)?;
    run.persist(out)?;
    let records = manifest.split(Split::Train);
    let clips = load_clips(&records, source)?;
    let vocab = check_vocab(model.config.vocab_size)?;
    let t = &run.train;
    let opt = AdamW::new(t.beta1, t.beta2, t.adam_eps, t.weight_decay);
    let spec = LoopSpec {
        kind: "finetune-retrieval",
        run: &run,
        n_items: records.len(),
        frozen: &RETRIEVAL_FROZEN,
        out,
        vqa_mode: None,
    };
    let tau = run.loss.tau;
    run_loop(spec, model, opt, 0, |model, g, idx, _, _| {
        let recs: Vec<&ManifestRecord> = idx.iter().map(|&i| records[i]).collect();
        let texts: Vec<TokenizedText> = recs
            .iter()
            .map(|r| vocab.encode(&r.caption, None))
            .collect::<Result<_>>()?;
        let clip_refs: Vec<&VideoClip> = recs.iter().map(|r| &clips[&r.id]).collect();
        let video = model.encode_videos(g, &clip_refs, &vec![None; recs.len()])?;
        let text = model.encode_texts(g, &texts.iter().collect::<Vec<_>>())?;
        let (v2t, t2v) = info_nce_halves_var(video.pooled, text.pooled, tau);
        let total = v2t.add(t2v);
        let mut m = Map::new();
        m.insert("l_v2t".into(), v2t.item().f64().into());
        m.insert("l_t2v".into(), t2v.item().f64().into());
        m.insert("total".into(), total.item().f64().into());
        Ok((total, m))
    })
}

fn mode_key(mode: QaMode) -> &'static str {
    match mode {
        QaMode::Open => "vqa.open",
        QaMode::MultipleChoice => "vqa.mc",
    }
}

/// Classifier head parameters for a question mode.
pub fn vqa_head_specs(dim: usize, mode: QaMode) -> Vec<(String, Vec<usize>, Init)> {
    let k = mode_key(mode);
    let outputs = match mode {
        QaMode::Open => OPEN_ANSWERS.len(),
        QaMode::MultipleChoice => 1,
    };
    let std = 1.0 / (dim as f64).sqrt();
    vec![
        (
            format!("{k}.dense.weight"),
            vec![dim, dim],
            Init::Normal(std),
        ),
        (format!("{k}.dense.bias"), vec![dim], Init::Zeros),
        (
            format!("{k}.out.weight"),
            vec![dim, outputs],
            Init::Normal(std),
        ),
        (format!("{k}.out.bias"), vec![outputs], Init::Zeros),
    ]
}

/// Adds the head for `mode` if the model does not carry one yet.
pub fn ensure_vqa_head<T: Real>(model: &mut CloverModel<T>, mode: QaMode, seed: u64) {
    let specs = vqa_head_specs(model.config.dim, mode);
    if !model.params.contains(&specs[0].0) {
        model.params.extend_init(&specs, &mut Rng::new(seed, 0x7A));
    }
}

/// Checks that every answer indexes a valid class or candidate.
pub fn check_answers(items: &[&QaRecord]) -> Result<()> {
    for q in items {
        let limit = match q.mode {
            QaMode::Open => OPEN_ANSWERS.len(),
            QaMode::MultipleChoice => q.candidates.len(),
        };
        if q.answer >= limit {
            return Err(CloverError::invalid(
                "answer",
                format!(
                    "scene {}: class {} outside 0..{limit}",
                    q.scene_id, q.answer
                ),
            ));
        }
    }
    Ok(())
}

/// Scores for a batch of questions: a column of logits plus, per question,
/// the flat indices of its answer classes (open) or candidates (multiple choice).
pub fn vqa_scores<'g, T: Real>(
    model: &CloverModel<T>,
    g: &'g Graph<'_, T>,
    vocab: &Vocab,
    items: &[&QaRecord],
    clips: &[&VideoClip],
    mode: QaMode,
) -> Result<(Var<'g, T>, Vec<Vec<usize>>)> {
    if items.iter().any(|q| q.mode != mode) {
        return Err(CloverError::invalid("mode", "batch mixes question modes"));
    }
    let video = model.encode_videos(g, clips, &vec![None; clips.len()])?;
    let mut texts = Vec::new();
    let mut pairs = Vec::new();
    let mut groups = Vec::new();
    for (i, q) in items.iter().enumerate() {
        match mode {
            QaMode::Open => {
                pairs.push((i, texts.len()));
                texts.push(vocab.encode(&q.question, None)?);
                let n = OPEN_ANSWERS.len();
                groups.push((i * n..(i + 1) * n).collect());
            }
            QaMode::MultipleChoice => {
                if q.candidates.is_empty() {
                    return Err(CloverError::invalid(
                        "candidates",
                        format!("scene {} has none", q.scene_id),
                    ));
                }
                let mut grp = Vec::new();
                for c in &q.candidates {
                    let words: Vec<&str> = q.question.iter().chain(c).map(String::as_str).collect();
                    grp.push(pairs.len());
                    pairs.push((i, texts.len()));
                    texts.push(vocab.encode(&words, None)?);
                }
                groups.push(grp);
            }
        }
    }
    let text = model.encode_texts(g, &texts.iter().collect::<Vec<_>>())?;
    let fused = model.fuse(g, &video, &text, &pairs)?;
    let k = mode_key(mode);
    if !model.params.contains(&format!("{k}.dense.weight")) {
        return Err(CloverError::Checkpoint(format!(
            "model has no `{k}` head; fine-tune it first"
        )));
    }
    let h = linear(g, fused.cls, &format!("{k}.dense")).gelu();
    Ok((linear(g, h, &format!("{k}.out")), groups))
}

/// Fine-tunes the whole model end to end on questions of one mode.
pub fn finetune_vqa<T: Real>(
    run: &RunConfig,
    manifest: &Manifest,
    qa: &[QaRecord],
    source: &ClipSource,
    init: &Path,
    mode: QaMode,
    out: &Path,
) -> Result<TrainOutcome> {
    let mut model = load_model::<T>(init)?;
    let run = resolved(run, &model)?;
    run.persist(out)?;
    ensure_vqa_head(&mut model, mode, run.train.seed);
    let items: Vec<&QaRecord> = qa
        .iter()
        .filter(|q| q.split == Split::Train && q.mode == mode)
        .collect();
    check_answers(&items)?;
    let by_id: std::collections::HashMap<u64, &ManifestRecord> =
        manifest.records.iter().map(|r| (r.id, r)).collect();
    let records: Vec<&ManifestRecord> = items
        .iter()
        .map(|q| {
            by_id.get(&q.scene_id).copied().ok_or_else(|| {
                CloverError::invalid("scene_id", format!("{} not in manifest", q.scene_id))
            })
        })
        .collect::<Result<_>>()?;
    let clips = load_clips(&records, source)?;
    let vocab = check_vocab(model.config.vocab_size)?;
    let t = &run.train;
    let opt = AdamW::new(t.beta1, t.beta2, t.adam_eps, t.weight_decay);
    let spec = LoopSpec {
        kind: "finetune-vqa",
        run: &run,
        n_items: items.len(),
        frozen: &[],
        out,
        vqa_mode: Some(mode),
    };
    run_loop(spec, model, opt, 0, |model, g, idx, _, _| {
        let batch: Vec<&QaRecord> = idx.iter().map(|&i| items[i]).collect();
        let clip_refs: Vec<&VideoClip> = batch.iter().map(|q| &clips[&q.scene_id]).collect();
        let (scores, groups) = vqa_scores(model, g, &vocab, &batch, &clip_refs, mode)?;
        let answers: Vec<usize> = batch.iter().map(|q| q.answer).collect();
        let loss = grouped_cross_entropy_var(scores, &groups, &answers);
        let mut m = Map::new();
        m.insert("l_qa".into(), loss.item().f64().into());
        m.insert("total".into(), loss.item().f64().into());
        Ok((loss, m))
    })
}

/// Predicted answer index per question (ties go to the lower index).
pub fn predict_vqa<T: Real>(
    model: &CloverModel<T>,
    items: &[&QaRecord],
    clips: &[&VideoClip],
    mode: QaMode,
    batch: usize,
) -> Result<Vec<usize>> {
    let vocab = check_vocab(model.config.vocab_size)?;
    let mut out = Vec::with_capacity(items.len());
    for (qs, cs) in items.chunks(batch.max(1)).zip(clips.chunks(batch.max(1))) {
        let g = model.graph();
        let (scores, groups) = vqa_scores(model, &g, &vocab, qs, cs, mode)?;
        let s = scores.value();
        let flat = s.data();
        for grp in groups {
            let mut best = 0;
            for (k, &i) in grp.iter().enumerate() {
                if flat[i] > flat[grp[best]] {
                    best = k;
                }
            }
            out.push(best);
        }
    }
    Ok(out)
}
