use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use clap::Parser;
use gridprompt::checkpoint::{load_mae, mae_checkpoint, vq_checkpoint, Checkpoint};
use gridprompt::forge::{sample_task, TaskKind};
use gridprompt::mae::{MaeConfig, MaeModel};
use gridprompt::vq::{VqConfig, VqModel};
use gridprompt_cli::commands::{Cli, Command as Sub, EvalRun};
use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_gridprompt"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

/// The single `error: {...}` line a failing command prints.
fn error_line(out: &Output) -> Value {
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    let lines: Vec<&str> = stderr.lines().collect();
    assert_eq!(lines.len(), 1, "{stderr}");
    serde_json::from_str(lines[0].strip_prefix("error: ").expect("error prefix")).expect("JSON error")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn files_under(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn tiny_mae(vocab: usize) -> MaeConfig {
    MaeConfig {
        grid_rows: 4,
        grid_cols: 4,
        enc_dim: 16,
        enc_depth: 1,
        enc_heads: 2,
        dec_dim: 16,
        dec_depth: 1,
        dec_heads: 2,
        vocab,
        ..MaeConfig::default()
    }
}

fn tiny_vq(codebook_size: usize) -> VqConfig {
    VqConfig { codebook_size, dim: 8, widths: vec![8, 8], ..VqConfig::default() }
}

fn write_pair(dir: &Path, mae_vocab: usize, vq_size: usize) -> (PathBuf, PathBuf) {
    let mae = dir.join("mae.ckpt");
    let vq = dir.join("vq.ckpt");
    mae_checkpoint(&MaeModel::new(tiny_mae(mae_vocab), 1).unwrap(), BTreeMap::new()).save(&mae).unwrap();
    vq_checkpoint(&VqModel::new(tiny_vq(vq_size), 2).unwrap(), BTreeMap::new()).save(&vq).unwrap();
    (mae, vq)
}

fn write_task_pngs(dir: &Path) -> (String, String) {
    let inst = sample_task(TaskKind::ColorChange, 1, 11).unwrap();
    let (i, o, q) = (dir.join("in.png"), dir.join("out.png"), dir.join("query.png"));
    inst.examples[0].input.save_png(&i).unwrap();
    inst.examples[0].output.save_png(&o).unwrap();
    inst.query.save_png(&q).unwrap();
    (format!("{},{}", s(&i), s(&o)), s(&q).to_string())
}

#[test]
fn gen_data_is_byte_identical_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        ok(&["gen-data", "--count", "12", "--seed", "5", "--out", s(dir)]);
    }
    let (fa, fb) = (files_under(&a), files_under(&b));
    assert!(fa.len() > 12);
    assert_eq!(fa, fb);
    let c = tmp.path().join("c");
    ok(&["gen-data", "--count", "12", "--seed", "6", "--out", s(&c)]);
    assert_ne!(files_under(&c), fa);
}

#[test]
fn eval_is_byte_identical_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let outs: Vec<PathBuf> = (0..2).map(|i| tmp.path().join(format!("r{i}.json"))).collect();
    for out in &outs {
        ok(&["eval", "--model", "copy", "--task", "color,seg,det", "--instances", "6", "--seed", "3", "--out", s(out)]);
    }
    let (a, b) = (std::fs::read(&outs[0]).unwrap(), std::fs::read(&outs[1]).unwrap());
    assert_eq!(a, b);
    let run: EvalRun = serde_json::from_slice(&a).unwrap();
    assert_eq!(run.reports.len(), 3);
    assert!(run.reports.iter().all(|r| r.scores.len() == 6));
}

#[test]
fn ensemble_flag_reports_cumulative_rows() {
    let out = ok(&["eval", "--model", "oracle", "--task", "color", "--instances", "3", "--ensemble", "horizontal,vertical,vertical-rowswap"]);
    let table = String::from_utf8_lossy(&out.stdout);
    for row in ["[horizontal]", "[horizontal+vertical]", "[horizontal+vertical+vertical-rowswap]"] {
        assert!(table.contains(row), "{table}");
    }
}

#[test]
fn prompt_writes_outputs_for_a_matching_pair() {
    let tmp = tempfile::tempdir().unwrap();
    let (mae, vq) = write_pair(tmp.path(), 16, 16);
    let (example, query) = write_task_pngs(tmp.path());
    let out = tmp.path().join("out");
    ok(&["prompt", "--mae", s(&mae), "--vq", s(&vq), "--example", &example, "--query", &query, "--palette", "black-white", "--out", s(&out)]);
    for f in ["prompt.png", "completed.png", "answer.png", "answer-rounded.png"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let completed = gridprompt::Image::load_png(out.join("completed.png")).unwrap();
    assert_eq!(completed.dims(), (32, 32));
}

#[test]
fn prompt_with_mismatched_checkpoints_is_a_geometry_error() {
    let tmp = tempfile::tempdir().unwrap();
    let (mae, vq) = write_pair(tmp.path(), 16, 32);
    let (example, query) = write_task_pngs(tmp.path());
    let out = run(&["prompt", "--mae", s(&mae), "--vq", s(&vq), "--example", &example, "--query", &query, "--out", s(&tmp.path().join("o"))]);
    let err = error_line(&out);
    assert_eq!(err["code"], "geometry");
    assert!(err["message"].as_str().unwrap().contains("32"), "{err}");
}

#[test]
fn bad_arguments_fail_with_one_parseable_line() {
    let err = error_line(&run(&["eval", "--no-such-flag"]));
    assert_eq!(err["code"], "usage");
    let err = error_line(&run(&["eval", "--task", "juggling"]));
    assert_eq!(err["code"], "usage");
    let err = error_line(&run(&["train-vq", "--manifest", "/nonexistent/manifest.jsonl", "--quiet"]));
    assert_eq!(err["code"], "io");
    let err = error_line(&run(&["train-vq", "--set", "epochs=zero", "--quiet"]));
    assert_eq!(err["code"], "config");
}

#[test]
fn serve_binds_loopback_by_default() {
    let cli = Cli::try_parse_from(["gridprompt", "serve", "--models-dir", "m"]).unwrap();
    let Sub::Serve(a) = cli.command else { panic!("not serve") };
    assert!(a.host.is_loopback());
    assert_eq!(a.parallelism, 1);
}

const TINY_CONFIG: &str = "\
# small enough for a smoke test
epochs = 4
batch_size = 4
base_lr = 1e-2
patches_per_image = 8
vq.codebook_size = 16
vq.dim = 8
vq.widths = 8,8
mae.enc_dim = 16
mae.enc_depth = 1
mae.enc_heads = 2
mae.dec_dim = 16
mae.dec_depth = 1
mae.dec_heads = 2
mae.vocab = 16
";

fn log_records(path: &Path) -> Vec<Value> {
    std::fs::read_to_string(path).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn training_smoke_run_is_deterministic_and_keeps_tokenizer_frozen() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(&["gen-data", "--count", "12", "--seed", "1", "--out", s(&data)]);
    let manifest = data.join("manifest.jsonl");
    let config = tmp.path().join("tiny.cfg");
    std::fs::write(&config, TINY_CONFIG).unwrap();

    let train = |dir: &Path| {
        let common = ["--config", s(&config), "--manifest", s(&manifest), "--checkpoint-dir", s(dir), "--epochs", "1", "--quiet"];
        ok(&[&["train-vq"], &common[..]].concat());
        let vq_before = std::fs::read(dir.join("vq.ckpt")).unwrap();
        ok(&[&["train-mae"], &common[..]].concat());
        assert_eq!(std::fs::read(dir.join("vq.ckpt")).unwrap(), vq_before, "tokenizer changed during MAE training");
    };
    // Checkpoints record their config, paths included, so rerun in place.
    let a = tmp.path().join("a");
    train(&a);
    let first = files_under(&a);
    train(&a);
    assert_eq!(files_under(&a), first, "retraining with the same seed changed the outputs");
    // --epochs on the command line beats the config file.
    for log in ["vq.log.jsonl", "mae.log.jsonl"] {
        let records = log_records(&a.join(log));
        assert!(!records.is_empty());
        for r in &records {
            assert_eq!(r["epoch"], 1, "{r}");
            for key in ["split", "loss", "lr"] {
                assert!(!r[key].is_null(), "{key} missing from {r}");
            }
            assert!(r["loss"].as_f64().unwrap().is_finite());
        }
    }
    let ck = Checkpoint::load(a.join("mae.ckpt")).unwrap();
    assert!(ck.tensors.iter().all(|t| !t.name.contains("codebook")));
    assert_eq!(Checkpoint::from_bytes(&ck.to_bytes()).unwrap().to_bytes(), std::fs::read(a.join("mae.ckpt")).unwrap());
    load_mae(a.join("mae.ckpt")).unwrap();

    // The trained pair loads as a models directory.
    let models = gridprompt_cli::models::load_models_dir(&a).unwrap();
    assert_eq!(models.len(), 1);
}
