//! End-to-end checks of the `distill` binary: dataset generation,
//! textualization, a full (tiny) training run, and checkpoint evaluation.

use std::path::Path;
use std::process::Command;

fn distill() -> Command {
    Command::new(env!("CARGO_BIN_EXE_distill"))
}

fn write_tiny_config(path: &Path, data: &Path, out: &Path) {
    let text = format!(
        r#"
preset = "layer_ac_kd"
seed = 3

[student]
layers = 3
hidden_dim = 16
heads = 2
vocab_size = 64
max_seq = 64
seed = 1

[teacher]
layers = 4
hidden_dim = 24
heads = 2
vocab_size = 64
max_seq = 64
seed = 2

[optimizer]
steps = 3
batch_size = 4

[teacher_training]
steps = 6
batch_size = 4

[eval]
max_new_tokens = 24
generate = true

[data]
train_audio = "{data}/train.audio.jsonl"
train_text = "{data}/train.text.jsonl"
eval_audio = "{data}/eval.audio.jsonl"
eval_text = "{data}/eval.text.jsonl"
vocab = "{data}/vocab.json"
out_dir = "{out}"
"#,
        data = data.display(),
        out = out.display()
    );
    std::fs::write(path, text).unwrap();
}

#[test]
fn gen_synth_run_eval_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let out = tmp.path().join("run");

    let status = distill()
        .args(["gen-synth", "--n", "24", "--eval-n", "8", "--seed", "5"])
        .arg("--out")
        .arg(&data)
        .status()
        .unwrap();
    assert!(status.success());
    for f in [
        "train.audio.jsonl",
        "train.text.jsonl",
        "eval.audio.jsonl",
        "eval.text.jsonl",
        "vocab.json",
        "eval.key.json",
    ] {
        assert!(data.join(f).exists(), "gen-synth did not write {f}");
    }

    let config = tmp.path().join("run.toml");
    write_tiny_config(&config, &data, &out);
    let output = distill().arg("run").arg("--config").arg(&config).output().unwrap();
    assert!(
        output.status.success(),
        "run failed: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("mean_top_divergence="));
    assert!(stdout.contains("accuracy="));
    for f in ["metrics.jsonl", "steps.csv", "student.ckpt.json", "teacher.ckpt.json"] {
        assert!(out.join(f).exists(), "run did not write {f}");
    }

    let output = distill()
        .arg("eval")
        .arg("--ckpt")
        .arg(out.join("student.ckpt.json"))
        .arg("--data")
        .arg(data.join("eval.audio.jsonl"))
        .output()
        .unwrap();
    assert!(
        output.status.success(),
        "eval failed: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("items=8"), "got: {stdout}");
    assert!(stdout.contains("unweighted_accuracy="));
}

#[test]
fn textualize_subcommand_with_mock_client() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let status = distill()
        .args(["gen-synth", "--n", "10", "--eval-n", "0", "--seed", "9"])
        .arg("--out")
        .arg(&data)
        .status()
        .unwrap();
    assert!(status.success());

    let out = tmp.path().join("textualized.jsonl");
    let status = distill()
        .arg("textualize")
        .arg("--in")
        .arg(data.join("train.audio.jsonl"))
        .arg("--out")
        .arg(&out)
        .args(["--client", "mock", "--seed", "4"])
        .status()
        .unwrap();
    assert!(status.success());
    let records: Vec<distill::data::TextRecord> = distill::data::read_jsonl(&out).unwrap();
    assert_eq!(records.len(), 10);
    assert!(records.iter().all(|r| !r.description.is_empty()));
}

#[test]
fn contradictory_config_is_rejected_before_compute() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("bad.toml");
    std::fs::write(
        &config,
        r#"
preset = "sft_only"
layers = "all"

[data]
train_audio = "x"
train_text = "x"
eval_audio = "x"
eval_text = "x"
vocab = "x"
out_dir = "x"
"#,
    )
    .unwrap();
    let output = distill().arg("run").arg("--config").arg(&config).output().unwrap();
    assert!(!output.status.success());
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("does not use a layer schedule"), "got: {stderr}");
}
