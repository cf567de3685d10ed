use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn clover(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_clover"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn last_json(o: &Output) -> Value {
    let out = String::from_utf8_lossy(&o.stdout);
    serde_json::from_str(out.lines().last().expect("stdout line")).expect("json line")
}

/// The error line is one JSON object on stderr.
fn error_line(o: &Output) -> Value {
    let err = stderr(o);
    let lines: Vec<&str> = err.lines().collect();
    assert_eq!(lines.len(), 1, "{err}");
    serde_json::from_str(lines[0]).expect("json error line")
}

const MICRO: &str = "[model]
frames = 2
height = 8
width = 8
patch = 4
dim = 8
heads = 2
video_layers = 1
text_layers = 1
fusion_layers = 1
ffn_mult = 2
init_std = 0.3

[train]
batch_size = 4
epochs = 3
warmup_epochs = 1
peak_lr = 0.003
";

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    data: PathBuf,
    config: PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let data = root.join("data");
    let o = clover(&[
        "gen-data",
        "--n",
        "40",
        "--seed",
        "7",
        "--out",
        p(&data),
        "--frames",
        "2",
        "--height",
        "8",
        "--width",
        "8",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let config = root.join("run.toml");
    let text = format!(
        "{MICRO}\n[data]\nmanifest = {:?}\nclips = {:?}\nqa = {:?}\n",
        p(&data.join("manifest.jsonl")),
        p(&data.join("clips")),
        p(&data.join("qa.jsonl"))
    );
    std::fs::write(&config, text).unwrap();
    Fixture {
        _dir: dir,
        root,
        data,
        config,
    }
}

#[test]
fn help_succeeds_and_bad_usage_exits_one() {
    assert_eq!(code(&clover(&["--help"])), 0);
    let o = clover(&["no-such-command"]);
    assert_eq!(code(&o), 1);
    assert_eq!(error_line(&o)["error"], "usage");
    let o = clover(&["efficiency", "--n", "ten"]);
    assert_eq!(code(&o), 1);
    assert_eq!(error_line(&o)["exit_code"], 1);
}

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = clover(&[
            "gen-data",
            "--n",
            "100",
            "--seed",
            "7",
            "--out",
            p(out),
            "--frames",
            "2",
            "--height",
            "8",
            "--width",
            "8",
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert_eq!(last_json(&o)["records"], 100);
    }
    for f in [
        "manifest.jsonl",
        "qa.jsonl",
        "corpus_config.toml",
        "clips/000042.f32",
        "clips/000042.json",
    ] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn gen_data_beyond_capacity_is_a_config_failure() {
    let dir = tempfile::tempdir().unwrap();
    let o = clover(&["gen-data", "--n", "100000", "--out", p(dir.path())]);
    assert_eq!(code(&o), 1);
    assert_eq!(error_line(&o)["error"], "capacity");
}

#[test]
fn config_errors_exit_one_with_a_single_line() {
    let f = fixture();
    let bad = f.root.join("bad.toml");
    std::fs::write(&bad, "[train]\nepoch = 3\n").unwrap();
    let o = clover(&[
        "pretrain",
        "--config",
        p(&bad),
        "--out",
        p(&f.root.join("x")),
    ]);
    assert_eq!(code(&o), 1);
    let e = error_line(&o);
    assert_eq!(e["error"], "config");
    assert!(e["message"].as_str().unwrap().contains("epoch"));

    let o = clover(&["pretrain", "--out", p(&f.root.join("y"))]);
    assert_eq!(code(&o), 1);
    assert!(error_line(&o)["message"]
        .as_str()
        .unwrap()
        .contains("manifest"));

    let o = clover(&[
        "pretrain",
        "--config",
        p(&f.config),
        "--batch-size",
        "1",
        "--out",
        p(&f.root.join("z")),
    ]);
    assert_eq!(code(&o), 1);
    assert!(error_line(&o)["message"]
        .as_str()
        .unwrap()
        .contains("batch_size"));

    let o = clover(&[
        "pretrain",
        "--config",
        p(&f.root.join("missing.toml")),
        "--out",
        p(&f.root.join("w")),
    ]);
    assert_eq!(code(&o), 1);
    assert_eq!(error_line(&o)["error"], "io");
}

#[test]
fn divergence_exits_two() {
    let f = fixture();
    let out = f.root.join("nan");
    let o = clover(&[
        "pretrain",
        "--config",
        p(&f.config),
        "--peak-lr",
        "1e30",
        "--warmup-epochs",
        "0",
        "--out",
        p(&out),
    ]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert_eq!(error_line(&o)["error"], "non_finite");
    assert!(out.join("last.ckpt").exists());
}

#[test]
fn full_pipeline_runs_end_to_end() {
    let f = fixture();
    let pre = f.root.join("pre");
    // The flag overrides the file's three epochs.
    let o = clover(&[
        "pretrain",
        "--config",
        p(&f.config),
        "--epochs",
        "2",
        "--out",
        p(&pre),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let summary = last_json(&o);
    assert_eq!(summary["steps"], 16);
    assert_eq!(summary["finished"], true);
    let resolved = std::fs::read_to_string(pre.join("resolved_config.toml")).unwrap();
    assert!(
        resolved.contains("epochs = 2") && resolved.contains("dim = 8"),
        "{resolved}"
    );
    let log = std::fs::read_to_string(pre.join("metrics.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 16);
    let ckpt = pre.join("last.ckpt");

    let eval = f.root.join("eval");
    let o = clover(&[
        "eval-retrieval",
        "--ckpt",
        p(&ckpt),
        "--split",
        "test",
        "--out",
        p(&eval),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r = last_json(&o);
    assert_eq!(r["pairs"], 4);
    assert!(stderr(&o).contains("R@10"));
    assert!(std::fs::read_to_string(eval.join("reports.jsonl"))
        .unwrap()
        .contains("text_to_video"));

    let ret = f.root.join("ret");
    let o = clover(&[
        "finetune-retrieval",
        "--config",
        p(&f.config),
        "--epochs",
        "2",
        "--init",
        p(&ckpt),
        "--out",
        p(&ret),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let o = clover(&["eval-vqa", "--ckpt", p(&ckpt)]);
    assert_eq!(code(&o), 1);
    assert!(error_line(&o)["message"]
        .as_str()
        .unwrap()
        .contains("--mode"));

    let vqa = f.root.join("vqa");
    let o = clover(&[
        "finetune-vqa",
        "--config",
        p(&f.config),
        "--epochs",
        "2",
        "--init",
        p(&ckpt),
        "--mode",
        "mc",
        "--out",
        p(&vqa),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = clover(&[
        "eval-vqa",
        "--ckpt",
        p(&vqa.join("last.ckpt")),
        "--split",
        "val",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r = last_json(&o);
    assert_eq!(r["mode"], "multiple_choice");
    let acc = r["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert!(f.data.join("qa.jsonl").exists());
}

#[test]
fn resume_through_the_cli_matches_an_uninterrupted_run() {
    let f = fixture();
    let (full, part) = (f.root.join("full"), f.root.join("part"));
    let base = [
        "pretrain",
        "--config",
        p(&f.config),
        "--precision",
        "float64",
    ];
    let o = clover(&[&base[..], &["--out", p(&full)]].concat());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = clover(&[&base[..], &["--max-steps", "5", "--out", p(&part)]].concat());
    assert_eq!(last_json(&o)["finished"], false);
    let ckpt = part.join("last.ckpt");
    let o = clover(&["pretrain", "--resume", p(&ckpt), "--out", p(&part)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(
        std::fs::read(full.join("metrics.jsonl")).unwrap(),
        std::fs::read(part.join("metrics.jsonl")).unwrap()
    );
    assert_eq!(
        std::fs::read(full.join("last.ckpt")).unwrap(),
        std::fs::read(part.join("last.ckpt")).unwrap()
    );
}

#[test]
fn check_commands_pass_on_a_fresh_tree() {
    let o = clover(&["grad-check", "--component", "losses"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows = last_json(&o);
    assert!(rows
        .as_array()
        .unwrap()
        .iter()
        .all(|r| r["max_rel_err"].as_f64().unwrap() <= 1e-4));
    assert!(stderr(&o).contains("pass"));

    let o = clover(&["oracle-check", "--trials", "5"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(last_json(&o).as_array().unwrap().len(), 18);

    let o = clover(&["grad-check", "--component", "nothing"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn efficiency_reports_exact_counts() {
    let o = clover(&["efficiency", "--n", "10", "--m", "20", "--k", "5"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r = last_json(&o);
    assert_eq!(r["dual"]["encoder_forwards"], 30);
    assert_eq!(r["dual"]["dot_products"], 200);
    assert_eq!(r["exhaustive"]["fusion_forwards"], 200);
    assert_eq!(r["rescoring"]["fusion_forwards"], 50);
}
