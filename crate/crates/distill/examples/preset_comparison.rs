//! Head-to-head preset comparison on one seed: fine-tuning alone versus
//! layer-wise distillation versus layer-wise plus acoustic preservation.
//! Shows the two directional effects the framework is built around.

use distill::harness::config::{DataConfig, EvalConfig, OptimizerConfig, TeacherTrainingConfig};
use distill::harness::{run_experiment, RunConfig};
use distill::model::{ModelSpec, SamplingParams};
use distill::pipeline::{gen_synthetic, synthetic_vocab};
use std::path::{Path, PathBuf};

fn config(preset: &str, dir: &Path, teacher_load: Option<PathBuf>) -> RunConfig {
    RunConfig {
        preset: preset.into(),
        seed: 17,
        student: ModelSpec {
            layers: 7,
            hidden_dim: 32,
            heads: 2,
            vocab_size: 64,
            max_seq: 128,
            seed: 1,
        },
        teacher: ModelSpec {
            layers: 9,
            hidden_dim: 48,
            heads: 3,
            vocab_size: 64,
            max_seq: 128,
            seed: 2,
        },
        weights: Default::default(),
        divergence: Default::default(),
        layers: None,
        optimizer: OptimizerConfig {
            steps: Some(100),
            batch_size: 8,
            ..Default::default()
        },
        sampling: SamplingParams::default(),
        data: DataConfig {
            train_audio: dir.join("data/train.audio.jsonl"),
            train_text: dir.join("data/train.text.jsonl"),
            eval_audio: dir.join("data/eval.audio.jsonl"),
            eval_text: dir.join("data/eval.text.jsonl"),
            vocab: dir.join("data/vocab.json"),
            out_dir: dir.join(format!("run_{preset}")),
        },
        teacher_training: TeacherTrainingConfig {
            steps: Some(200),
            load: teacher_load,
            ..Default::default()
        },
        eval: EvalConfig {
            max_new_tokens: 24,
            generate: false,
        },
    }
}

fn main() -> anyhow::Result<()> {
    let dir = std::env::temp_dir().join("distill_example_presets");
    let data_dir = dir.join("data");
    std::fs::create_dir_all(&data_dir)?;
    let vocab = synthetic_vocab();
    let data = gen_synthetic(1000, &vocab, 99)?;
    vocab.save(&data_dir.join("vocab.json"))?;
    distill::data::write_jsonl(&data.audio_records[..800], &data_dir.join("train.audio.jsonl"))?;
    distill::data::write_jsonl(&data.text_records[..800], &data_dir.join("train.text.jsonl"))?;
    distill::data::write_jsonl(&data.audio_records[800..], &data_dir.join("eval.audio.jsonl"))?;
    distill::data::write_jsonl(&data.text_records[800..], &data_dir.join("eval.text.jsonl"))?;

    // The first run trains the teacher; the others reuse its checkpoint.
    let mut results = Vec::new();
    let mut teacher: Option<PathBuf> = None;
    for preset in ["sft_only", "layer_kd", "layer_ac_kd"] {
        let cfg = config(preset, &dir, teacher.clone());
        let artifacts = run_experiment(&cfg.resolve()?)?;
        teacher.get_or_insert(dir.join(format!("run_{preset}/teacher.ckpt.json")));
        let eval = artifacts.metrics.evals.last().unwrap().clone();
        results.push((preset, eval));
    }

    println!("\n{:<12} {:>22} {:>26}", "preset", "top divergence (eval)", "acoustic KD / audio token");
    for (preset, eval) in &results {
        println!(
            "{:<12} {:>22.5} {:>26.6}",
            preset, eval.mean_top_divergence, eval.mean_ac_per_audio_token
        );
    }
    println!(
        "\nlayer-wise KD pulls the student toward the teacher's output distribution, and \
         adding acoustic KD keeps the audio-position hidden states near the pre-distillation \
         snapshot."
    );
    Ok(())
}
