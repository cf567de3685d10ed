use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use clover_core::config::RunConfig;
use clover_core::data::{
    generate_corpus, read_qa, write_clip, write_qa, ClipSource, CorpusConfig, Manifest, QaMode,
    QaRecord, Split,
};
use clover_core::encoders::{write_atomic, CloverModel, VideoClip};
use clover_core::evaluation::{
    append_report, efficiency_probe, evaluate_retrieval, gradient_checks, oracle_check,
    vqa_accuracy, Component, VqaReport,
};
use clover_core::substrate::Real;
use clover_core::training::{
    finetune_retrieval, finetune_vqa, load_model, predict_vqa, pretrain, read_meta, Objective,
    Precision, TrainOutcome,
};
use clover_core::CloverError;
use serde::de::DeserializeOwned;
use serde::Serialize;

const MANIFEST_FILE: &str = "manifest.jsonl";
const QA_FILE: &str = "qa.jsonl";
const CLIPS_DIR: &str = "clips";
const CORPUS_CONFIG: &str = "corpus_config.toml";
const REPORT_FILE: &str = "reports.jsonl";

#[derive(Debug, Parser)]
#[command(
    name = "clover",
    version,
    about = "Video-language pre-training on a synthetic desk-scale corpus"
)]
struct Cli {
    /// Log filter, e.g. `info` or `clover_core=debug`.
    #[arg(long, global = true, default_value = "warn")]
    log: String,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Render a synthetic corpus: manifest, raw clips and questions.
    GenData(GenData),
    /// Pre-train from scratch or resume from a checkpoint.
    Pretrain(Pretrain),
    /// Fine-tune the two encoders for retrieval.
    FinetuneRetrieval(Finetune),
    /// Fine-tune the model with a question-answering head.
    FinetuneVqa(FinetuneVqa),
    /// Text-to-video and video-to-text retrieval on a split.
    EvalRetrieval(EvalRetrieval),
    /// Question-answering accuracy on a split.
    EvalVqa(EvalVqa),
    /// Central-difference checks of loss and model gradients.
    GradCheck(GradCheck),
    /// Batched losses against nested-loop references.
    OracleCheck(OracleCheck),
    /// Forward and dot-product counts for two-tower versus cross-encoder retrieval.
    Efficiency(Efficiency),
}

#[derive(Debug, Args)]
struct GenData {
    #[arg(long, default_value_t = 2000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    frames: usize,
    #[arg(long, default_value_t = 32)]
    height: usize,
    #[arg(long, default_value_t = 32)]
    width: usize,
    #[arg(long, default_value_t = 0.0)]
    image_fraction: f64,
}

/// Flags that override values from `--config`.
#[derive(Debug, Args)]
struct Overrides {
    /// TOML run configuration; flags take precedence over it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    clips: Option<PathBuf>,
    #[arg(long)]
    qa: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    warmup_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    peak_lr: Option<f64>,
    /// `clover`, `tma` or `baseline`.
    #[arg(long, value_parser = parse_enum::<Objective>)]
    objective: Option<Objective>,
    /// `float32` or `float64`.
    #[arg(long, value_parser = parse_enum::<Precision>)]
    precision: Option<Precision>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

#[derive(Debug, Args)]
struct Pretrain {
    #[command(flatten)]
    over: Overrides,
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint to continue from; its run configuration is reused.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct Finetune {
    #[command(flatten)]
    over: Overrides,
    #[arg(long)]
    init: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct FinetuneVqa {
    #[command(flatten)]
    inner: Finetune,
    /// `open` or `mc`.
    #[arg(long, value_parser = parse_mode)]
    mode: QaMode,
}

#[derive(Debug, Args)]
struct EvalData {
    #[arg(long)]
    ckpt: PathBuf,
    /// `train`, `val` or `test`.
    #[arg(long, default_value = "test", value_parser = parse_split)]
    split: Split,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    clips: Option<PathBuf>,
    /// Directory for the JSON-lines report; printed only when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    batch: usize,
}

#[derive(Debug, Args)]
struct EvalRetrieval {
    #[command(flatten)]
    data: EvalData,
}

#[derive(Debug, Args)]
struct EvalVqa {
    #[command(flatten)]
    data: EvalData,
    /// Defaults to the mode the checkpoint was fine-tuned for.
    #[arg(long, value_parser = parse_mode)]
    mode: Option<QaMode>,
    #[arg(long)]
    qa: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GradCheck {
    /// `losses`, `encoders` or `all`.
    #[arg(long, default_value = "all", value_parser = parse_component)]
    component: Component,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct OracleCheck {
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct Efficiency {
    #[arg(long, default_value_t = 10)]
    n: usize,
    #[arg(long, default_value_t = 20)]
    m: usize,
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_enum<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

fn parse_mode(s: &str) -> Result<QaMode, String> {
    s.parse().map_err(|e: CloverError| e.to_string())
}

fn parse_split(s: &str) -> Result<Split, String> {
    s.parse().map_err(|e: CloverError| e.to_string())
}

fn parse_component(s: &str) -> Result<Component, String> {
    s.parse().map_err(|e: CloverError| e.to_string())
}

/// A failure with the exit code it maps to.
struct Failure {
    code: u8,
    kind: String,
    message: String,
}

impl From<CloverError> for Failure {
    fn from(e: CloverError) -> Self {
        Failure {
            code: if e.is_numerical() { 2 } else { 1 },
            kind: e.kind().to_string(),
            message: e.to_string(),
        }
    }
}

impl Failure {
    fn check(message: String) -> Self {
        Failure {
            code: 2,
            kind: "check_failed".into(),
            message,
        }
    }
}

type Outcome = Result<(), Failure>;

impl Overrides {
    /// Defaults, then the config file, then flags.
    fn resolve(&self) -> Result<RunConfig, CloverError> {
        let mut run = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let d = &mut run.data;
        for (slot, flag) in [
            (&mut d.manifest, &self.manifest),
            (&mut d.clips, &self.clips),
            (&mut d.qa, &self.qa),
        ] {
            if flag.is_some() {
                slot.clone_from(flag);
            }
        }
        let t = &mut run.train;
        t.seed = self.seed.unwrap_or(t.seed);
        t.epochs = self.epochs.unwrap_or(t.epochs);
        t.warmup_epochs = self.warmup_epochs.unwrap_or(t.warmup_epochs);
        t.batch_size = self.batch_size.unwrap_or(t.batch_size);
        t.peak_lr = self.peak_lr.unwrap_or(t.peak_lr);
        t.objective = self.objective.unwrap_or(t.objective);
        t.precision = self.precision.unwrap_or(t.precision);
        t.checkpoint_every = self.checkpoint_every.unwrap_or(t.checkpoint_every);
        if self.max_steps.is_some() {
            t.max_steps = self.max_steps;
        }
        run.validate()?;
        Ok(run)
    }
}

fn manifest_of(run: &RunConfig) -> Result<Manifest, CloverError> {
    let path = run.data.manifest.as_deref().ok_or_else(|| {
        CloverError::Config("no manifest: set data.manifest or pass --manifest".into())
    })?;
    Manifest::read(path)
}

fn source_of(clips: Option<&Path>) -> ClipSource {
    clips.map_or(ClipSource::Render, |d| ClipSource::Files(d.to_path_buf()))
}

fn emit<S: Serialize>(value: &S) -> Result<(), CloverError> {
    println!("{}", serde_json::to_string(value)?);
    Ok(())
}

fn report_outcome(out: &TrainOutcome) -> Result<(), CloverError> {
    emit(&serde_json::json!({
        "steps": out.steps,
        "total_steps": out.total_steps,
        "finished": out.finished(),
        "checkpoint": out.checkpoint,
        "last_metrics": out.last_metrics,
    }))
}

fn gen_data(a: &GenData) -> Outcome {
    let cfg = CorpusConfig {
        n: a.n,
        seed: a.seed,
        frames: a.frames,
        height: a.height,
        width: a.width,
        image_fraction: a.image_fraction,
    };
    let corpus = generate_corpus(&cfg)?;
    let clips = a.out.join(CLIPS_DIR);
    std::fs::create_dir_all(&clips).map_err(|e| CloverError::io(&clips, e))?;
    for r in &corpus.manifest.records {
        write_clip(&clips, r.id, &ClipSource::Render.load(r)?)?;
    }
    corpus.manifest.write(&a.out.join(MANIFEST_FILE))?;
    write_qa(&a.out.join(QA_FILE), &corpus.qa)?;
    let text = toml::to_string(&cfg).map_err(|e| CloverError::Config(e.to_string()))?;
    write_atomic(&a.out.join(CORPUS_CONFIG), text.as_bytes())?;
    emit(&serde_json::json!({
        "records": corpus.manifest.records.len(),
        "questions": corpus.qa.len(),
        "manifest": a.out.join(MANIFEST_FILE),
        "qa": a.out.join(QA_FILE),
        "clips": clips,
    }))?;
    Ok(())
}

fn pretrain_cmd(a: &Pretrain) -> Outcome {
    let mut run = a.over.resolve()?;
    if let Some(ckpt) = &a.resume {
        // Data locations come from the checkpoint unless given explicitly.
        let meta = read_meta(ckpt)?;
        run.data.manifest = a.over.manifest.clone().or(meta.run.data.manifest);
        run.data.clips = a.over.clips.clone().or(meta.run.data.clips);
        run.train.precision = meta.precision;
    }
    let manifest = manifest_of(&run)?;
    let source = source_of(run.data.clips.as_deref());
    let resume = a.resume.as_deref();
    let out = match run.train.precision {
        Precision::Float32 => pretrain::<f32>(&run, &manifest, &source, &a.out, resume)?,
        Precision::Float64 => pretrain::<f64>(&run, &manifest, &source, &a.out, resume)?,
    };
    report_outcome(&out)?;
    Ok(())
}

/// Resolves a fine-tuning config, borrowing data paths from the initial checkpoint when unset.
fn finetune_run(a: &Finetune) -> Result<RunConfig, CloverError> {
    let mut run = a.over.resolve()?;
    let meta = read_meta(&a.init)?;
    let d = &mut run.data;
    d.manifest = d.manifest.take().or(meta.run.data.manifest);
    d.clips = d.clips.take().or(meta.run.data.clips);
    d.qa = d.qa.take().or(meta.run.data.qa);
    Ok(run)
}

fn finetune_retrieval_cmd(a: &Finetune) -> Outcome {
    let run = finetune_run(a)?;
    let manifest = manifest_of(&run)?;
    let source = source_of(run.data.clips.as_deref());
    let out = match run.train.precision {
        Precision::Float32 => finetune_retrieval::<f32>(&run, &manifest, &source, &a.init, &a.out)?,
        Precision::Float64 => finetune_retrieval::<f64>(&run, &manifest, &source, &a.init, &a.out)?,
    };
    report_outcome(&out)?;
    Ok(())
}

fn qa_of(path: Option<&Path>) -> Result<Vec<QaRecord>, CloverError> {
    let path = path
        .ok_or_else(|| CloverError::Config("no question file: set data.qa or pass --qa".into()))?;
    read_qa(path)
}

fn finetune_vqa_cmd(a: &FinetuneVqa) -> Outcome {
    let run = finetune_run(&a.inner)?;
    let manifest = manifest_of(&run)?;
    let qa = qa_of(run.data.qa.as_deref())?;
    let source = source_of(run.data.clips.as_deref());
    let (init, out_dir) = (&a.inner.init, &a.inner.out);
    let out = match run.train.precision {
        Precision::Float32 => {
            finetune_vqa::<f32>(&run, &manifest, &qa, &source, init, a.mode, out_dir)?
        }
        Precision::Float64 => {
            finetune_vqa::<f64>(&run, &manifest, &qa, &source, init, a.mode, out_dir)?
        }
    };
    report_outcome(&out)?;
    Ok(())
}

/// Writes a report line under `out` (if given) and prints the table and JSON.
fn publish<S: Serialize>(out: Option<&Path>, report: &S, table: &str) -> Result<(), CloverError> {
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| CloverError::io(dir, e))?;
        append_report(&dir.join(REPORT_FILE), report)?;
    }
    eprint!("{table}");
    emit(report)
}

struct EvalInputs {
    manifest: Manifest,
    source: ClipSource,
    meta: clover_core::training::CheckpointMeta,
}

fn eval_inputs(d: &EvalData) -> Result<EvalInputs, CloverError> {
    let meta = read_meta(&d.ckpt)?;
    let mut run = meta.run.clone();
    if d.manifest.is_some() {
        run.data.manifest.clone_from(&d.manifest);
    }
    if d.clips.is_some() {
        run.data.clips.clone_from(&d.clips);
    }
    Ok(EvalInputs {
        manifest: manifest_of(&run)?,
        source: source_of(run.data.clips.as_deref()),
        meta,
    })
}

fn eval_retrieval_with<T: Real>(d: &EvalData, inputs: &EvalInputs) -> Result<(), CloverError> {
    let model = load_model::<T>(&d.ckpt)?;
    let records = inputs.manifest.split(d.split);
    if records.is_empty() {
        return Err(CloverError::Config(format!("split {:?} is empty", d.split)));
    }
    let report = evaluate_retrieval(&model, &records, d.split, &inputs.source, d.batch)?;
    publish(d.out.as_deref(), &report, &report.table())
}

fn eval_retrieval_cmd(a: &EvalRetrieval) -> Outcome {
    let inputs = eval_inputs(&a.data)?;
    match inputs.meta.precision {
        Precision::Float32 => eval_retrieval_with::<f32>(&a.data, &inputs)?,
        Precision::Float64 => eval_retrieval_with::<f64>(&a.data, &inputs)?,
    }
    Ok(())
}

fn eval_vqa_with<T: Real>(
    a: &EvalVqa,
    inputs: &EvalInputs,
    mode: QaMode,
) -> Result<(), CloverError> {
    let d = &a.data;
    let model: CloverModel<T> = load_model(&d.ckpt)?;
    let qa_path = a.qa.clone().or(inputs.meta.run.data.qa.clone());
    let qa = qa_of(qa_path.as_deref())?;
    let items: Vec<&QaRecord> = qa
        .iter()
        .filter(|q| q.split == d.split && q.mode == mode)
        .collect();
    if items.is_empty() {
        return Err(CloverError::Config(format!(
            "no {mode:?} questions in split {:?}",
            d.split
        )));
    }
    clover_core::training::check_answers(&items)?;
    let by_id: std::collections::HashMap<u64, _> =
        inputs.manifest.records.iter().map(|r| (r.id, r)).collect();
    let clips: Vec<VideoClip> = items
        .iter()
        .map(|q| {
            let r = by_id.get(&q.scene_id).ok_or_else(|| {
                CloverError::invalid("scene_id", format!("{} not in manifest", q.scene_id))
            })?;
            inputs.source.load(r)
        })
        .collect::<Result<_, _>>()?;
    let preds = predict_vqa(
        &model,
        &items,
        &clips.iter().collect::<Vec<_>>(),
        mode,
        d.batch,
    )?;
    let answers: Vec<usize> = items.iter().map(|q| q.answer).collect();
    let report = VqaReport {
        split: d.split,
        mode,
        questions: items.len(),
        accuracy: vqa_accuracy(&preds, &answers)?,
    };
    publish(d.out.as_deref(), &report, &report.table())
}

fn eval_vqa_cmd(a: &EvalVqa) -> Outcome {
    let inputs = eval_inputs(&a.data)?;
    let mode = a.mode.or(inputs.meta.vqa_mode).ok_or_else(|| {
        CloverError::Config(
            "checkpoint has no question-answering head; pass --mode after fine-tuning one".into(),
        )
    })?;
    match inputs.meta.precision {
        Precision::Float32 => eval_vqa_with::<f32>(a, &inputs, mode)?,
        Precision::Float64 => eval_vqa_with::<f64>(a, &inputs, mode)?,
    }
    Ok(())
}

fn grad_check_cmd(a: &GradCheck) -> Outcome {
    let rows = gradient_checks(a.component)?;
    let mut table = format!(
        "{:<52} {:>7} {:>12} {:>8} {}\n",
        "check", "coords", "max rel err", "tol", "result"
    );
    for r in &rows {
        let verdict = if r.pass { "pass" } else { "FAIL" };
        table += &format!(
            "{:<52} {:>7} {:>12.3e} {:>8.0e} {verdict}\n",
            r.name, r.coords, r.max_rel_err, r.tol
        );
    }
    publish(a.out.as_deref(), &rows, &table)?;
    let failed: Vec<&str> = rows
        .iter()
        .filter(|r| !r.pass)
        .map(|r| r.name.as_str())
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::check(format!(
            "gradient checks failed: {}",
            failed.join(", ")
        )))
    }
}

fn oracle_check_cmd(a: &OracleCheck) -> Outcome {
    let rows = oracle_check(a.trials, &[2, 4, 8], a.seed)?;
    let mut table = format!(
        "{:<10} {:>5} {:>7} {:>12} {}\n",
        "loss", "B", "trials", "max abs err", "result"
    );
    for r in &rows {
        let verdict = if r.pass { "pass" } else { "FAIL" };
        table += &format!(
            "{:<10} {:>5} {:>7} {:>12.3e} {verdict}\n",
            r.loss, r.batch, r.trials, r.max_abs_err
        );
    }
    publish(a.out.as_deref(), &rows, &table)?;
    if rows.iter().all(|r| r.pass) {
        Ok(())
    } else {
        Err(Failure::check(
            "batched losses disagree with their references".into(),
        ))
    }
}

fn efficiency_cmd(a: &Efficiency) -> Outcome {
    let r = efficiency_probe(a.n, a.m, a.k, a.seed)?;
    let mut table = format!(
        "N={} queries, M={} videos, rescoring depth k={}\n",
        r.n, r.m, r.k
    );
    table += &format!(
        "{:<12} {:>16} {:>16} {:>13}\n",
        "path", "encoder fwd", "fusion fwd", "dot products"
    );
    for (name, c) in [
        ("two-tower", r.dual),
        ("exhaustive", r.exhaustive),
        ("rescoring", r.rescoring),
    ] {
        table += &format!(
            "{name:<12} {:>16} {:>16} {:>13}\n",
            c.encoder_forwards, c.fusion_forwards, c.dot_products
        );
    }
    publish(a.out.as_deref(), &r, &table)?;
    Ok(())
}

fn run(cli: &Cli) -> Outcome {
    match &cli.cmd {
        Cmd::GenData(a) => gen_data(a),
        Cmd::Pretrain(a) => pretrain_cmd(a),
        Cmd::FinetuneRetrieval(a) => finetune_retrieval_cmd(a),
        Cmd::FinetuneVqa(a) => finetune_vqa_cmd(a),
        Cmd::EvalRetrieval(a) => eval_retrieval_cmd(a),
        Cmd::EvalVqa(a) => eval_vqa_cmd(a),
        Cmd::GradCheck(a) => grad_check_cmd(a),
        Cmd::OracleCheck(a) => oracle_check_cmd(a),
        Cmd::Efficiency(a) => efficiency_cmd(a),
    }
}

fn fail(f: &Failure) -> ExitCode {
    let line = serde_json::json!({ "error": f.kind, "exit_code": f.code, "message": f.message.replace('\n', " ") });
    eprintln!("{line}");
    ExitCode::from(f.code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let message = e
                .to_string()
                .lines()
                .next()
                .unwrap_or_default()
                .trim_start_matches("error: ")
                .to_string();
            return fail(&Failure {
                code: 1,
                kind: "usage".into(),
                message,
            });
        }
    };
    env_logger::Builder::new()
        .parse_filters(&cli.log)
        .format_timestamp(None)
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => fail(&f),
    }
}
