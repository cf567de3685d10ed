use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde_json::{Map, Value};

use super::forward::pretrain_loss;
use super::optim::{warmup_cosine, AdamW};
use super::state::{epoch_order, load_checkpoint, save_checkpoint, CheckpointMeta};
use crate::config::RunConfig;
use crate::data::{
    append_jsonl, make_batch, read_jsonl, write_jsonl, ClipSource, Manifest, ManifestRecord,
    MaskingConfig, QaMode, Split,
};
use crate::encoders::{write_atomic, CloverModel, Graph, VideoClip, Vocab};
use crate::error::{CloverError, Result};
use crate::substrate::{Real, Var};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const LAST_CHECKPOINT: &str = "last.ckpt";

/// Result of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Completed optimizer steps, including those before a resume.
    pub steps: usize,
    pub total_steps: usize,
    pub checkpoint: PathBuf,
    pub last_metrics: Option<Value>,
}

impl TrainOutcome {
    pub fn finished(&self) -> bool {
        self.steps == self.total_steps
    }
}

pub(crate) struct LoopSpec<'a> {
    pub kind: &'static str,
    pub run: &'a RunConfig,
    pub n_items: usize,
    pub frozen: &'a [&'a str],
    pub out: &'a Path,
    pub vqa_mode: Option<QaMode>,
}

fn prepare_metrics(path: &Path, start: usize) -> Result<()> {
    if start == 0 || !path.exists() {
        return write_atomic(path, b"");
    }
    // Drop anything logged after the checkpoint being resumed.
    let kept: Vec<Value> = read_jsonl::<Value>(path)?
        .into_iter()
        .filter(|v| {
            v.get("step")
                .and_then(Value::as_u64)
                .is_some_and(|s| (s as usize) < start)
        })
        .collect();
    write_jsonl(path, &kept)
}

/// Runs optimizer steps `start..stop`, logging and checkpointing as configured.
pub(crate) fn run_loop<T, F>(
    spec: LoopSpec<'_>,
    mut model: CloverModel<T>,
    mut opt: AdamW<T>,
    start: usize,
    mut loss_fn: F,
) -> Result<TrainOutcome>
where
    T: Real,
    F: for<'g, 'p> FnMut(
        &CloverModel<T>,
        &'g Graph<'p, T>,
        &[usize],
        usize,
        usize,
    ) -> Result<(Var<'g, T>, Map<String, Value>)>,
{
    let t = &spec.run.train;
    let b = t.batch_size;
    let per_epoch = spec.n_items / b;
    if per_epoch == 0 {
        return Err(CloverError::Config(format!(
            "{} training items cannot fill one batch of {b}",
            spec.n_items
        )));
    }
    let total = t.epochs * per_epoch;
    let warmup = t.warmup_epochs * per_epoch;
    let stop = t.max_steps.map_or(total, |m| m.min(total));
    std::fs::create_dir_all(spec.out.join("checkpoints"))
        .map_err(|e| CloverError::io(spec.out, e))?;
    let metrics_path = spec.out.join(METRICS_FILE);
    prepare_metrics(&metrics_path, start)?;
    let last_path = spec.out.join(LAST_CHECKPOINT);

    let save = |model: &CloverModel<T>, opt: &AdamW<T>, done: usize| -> Result<()> {
        let meta = CheckpointMeta {
            kind: spec.kind.to_string(),
            step: done,
            epoch: done / per_epoch,
            precision: t.precision,
            model: model.config.clone(),
            run: spec.run.clone(),
            rng: epoch_order(t.seed, done / per_epoch, spec.n_items).1,
            adam_steps: opt.steps.clone(),
            vqa_mode: spec.vqa_mode,
        };
        save_checkpoint(
            &spec
                .out
                .join("checkpoints")
                .join(format!("step-{done:07}.ckpt")),
            model,
            opt,
            &meta,
        )?;
        save_checkpoint(&last_path, model, opt, &meta)
    };
    if start == 0 {
        save(&model, &opt, 0)?;
    }

    let mut order: Option<(usize, Vec<usize>)> = None;
    let mut last_metrics = None;
    for step in start..stop {
        let epoch = step / per_epoch;
        if order.as_ref().is_none_or(|(e, _)| *e != epoch) {
            order = Some((epoch, epoch_order(t.seed, epoch, spec.n_items).0));
        }
        let within = step % per_epoch;
        let idx = &order.as_ref().expect("order set").1[within * b..(within + 1) * b];
        let lr = warmup_cosine(step, warmup, total, t.peak_lr);
        let (grads, mut record) = {
            let g = Graph::new(&model.params).with_frozen(spec.frozen);
            let (loss, record) = loss_fn(&model, &g, idx, epoch, step).map_err(|e| match e {
                CloverError::NonFinite(m) => CloverError::NonFinite(format!(
                    "{m} at step {step}; last good checkpoint kept at {}",
                    last_path.display()
                )),
                other => other,
            })?;
            let value = loss.item().f64();
            if !value.is_finite() {
                return Err(CloverError::NonFinite(format!(
                    "loss is {value} at step {step}; last good checkpoint kept at {}",
                    last_path.display()
                )));
            }
            let grads = g.param_grads(&g.backward(loss));
            if let Some((name, _)) = grads.iter().find(|(_, g)| !g.all_finite()) {
                return Err(CloverError::NonFinite(format!(
                    "gradient of `{name}` at step {step}; last good checkpoint kept at {}",
                    last_path.display()
                )));
            }
            (grads, record)
        };
        opt.step(&mut model.params, &grads, lr);
        record.insert("step".into(), step.into());
        record.insert("epoch".into(), epoch.into());
        record.insert("lr".into(), lr.into());
        let record = Value::Object(record);
        append_jsonl(&metrics_path, &record)?;
        log::debug!("{record}");
        last_metrics = Some(record);
        let done = step + 1;
        let every = t.checkpoint_every > 0 && done % t.checkpoint_every == 0;
        if done % per_epoch == 0 || every || done == stop {
            save(&model, &opt, done)?;
        }
    }
    Ok(TrainOutcome {
        steps: stop.max(start),
        total_steps: total,
        checkpoint: last_path,
        last_metrics,
    })
}

/// Loads every clip of `records`, keyed by record id.
pub fn load_clips(
    records: &[&ManifestRecord],
    source: &ClipSource,
) -> Result<HashMap<u64, VideoClip>> {
    records
        .iter()
        .map(|r| Ok((r.id, source.load(r)?)))
        .collect()
}

pub(crate) fn check_vocab(model_vocab: usize) -> Result<Vocab> {
    let vocab = Vocab::default();
    if vocab.len() != model_vocab {
        return Err(CloverError::Config(format!(
            "model vocab_size {model_vocab} differs from the built-in vocabulary size {}",
            vocab.len()
        )));
    }
    Ok(vocab)
}

/// Pre-trains from scratch, or resumes from a checkpoint written by an earlier run.
pub fn pretrain<T: Real>(
    run: &RunConfig,
    manifest: &Manifest,
    source: &ClipSource,
    out: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    let (run, model, opt, start) = match resume {
        Some(path) => {
            let (model, opt, meta) = load_checkpoint::<T>(path)?;
            if meta.kind != "pretrain" {
                return Err(CloverError::Checkpoint(format!(
                    "cannot resume pre-training from a `{}` checkpoint",
                    meta.kind
                )));
            }
            let mut resumed = meta.run.clone();
            resumed.train.max_steps = run.train.max_steps;
            (resumed, model, opt, meta.step)
        }
        None => {
            let t = &run.train;
            let model = CloverModel::<T>::new(run.model.clone(), t.seed)?;
            (
                run.clone(),
                model,
                AdamW::new(t.beta1, t.beta2, t.adam_eps, t.weight_decay),
                0,
            )
        }
    };
    run.validate()?;
    run.persist(out)?;
    let records = manifest.split(Split::Train);
    let clips = load_clips(&records, source)?;
    let vocab = check_vocab(model.config.vocab_size)?;
    let grid = model.config.grid();
    let objective = run.train.objective;
    let masking = MaskingConfig {
        text_strategy: objective.text_strategy(),
        ..run.masking
    };
    let per_epoch = records.len() / run.train.batch_size.max(1);
    if let Some(path) = resume {
        let (_, _, meta) = load_checkpoint::<T>(path)?;
        if per_epoch > 0
            && meta.rng != epoch_order(run.train.seed, start / per_epoch, records.len()).1
        {
            return Err(CloverError::Checkpoint(
                "data-order state does not match this manifest".into(),
            ));
        }
    }
    let spec = LoopSpec {
        kind: "pretrain",
        run: &run,
        n_items: records.len(),
        frozen: &[],
        out,
        vqa_mode: None,
    };
    let seed = run.train.seed;
    let loss = run.loss;
    run_loop(spec, model, opt, start, |model, g, idx, epoch, step| {
        let recs: Vec<&ManifestRecord> = idx.iter().map(|&i| records[i]).collect();
        let batch = make_batch(
            &recs,
            |r| Ok(clips[&r.id].clone()),
            &vocab,
            grid,
            &masking,
            seed,
            epoch as u64,
            step as u64,
        )?;
        let (total, breakdown) = pretrain_loss(model, g, &batch, &loss, objective)?;
        let Value::Object(map) = serde_json::to_value(breakdown)? else {
            unreachable!("struct serializes to an object")
        };
        Ok((total, map))
    })
}
