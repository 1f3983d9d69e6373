//! End-to-end distillation run: generate data, train the textual teacher,
//! snapshot the student, optimize the full joint objective, and evaluate.
//! Build with --release; the run takes well under a minute.

use distill::harness::config::{
    DataConfig, EvalConfig, OptimizerConfig, TeacherTrainingConfig,
};
use distill::harness::{run_experiment, RunConfig};
use distill::losses::LossWeights;
use distill::model::{ModelSpec, SamplingParams};
use distill::pipeline::{gen_synthetic, synthetic_vocab};

fn main() -> anyhow::Result<()> {
    let dir = std::env::temp_dir().join("distill_example_train");
    let data_dir = dir.join("data");
    std::fs::create_dir_all(&data_dir)?;

    let vocab = synthetic_vocab();
    let data = gen_synthetic(500, &vocab, 1)?;
    vocab.save(&data_dir.join("vocab.json"))?;
    distill::data::write_jsonl(&data.audio_records[..400], &data_dir.join("train.audio.jsonl"))?;
    distill::data::write_jsonl(&data.text_records[..400], &data_dir.join("train.text.jsonl"))?;
    distill::data::write_jsonl(&data.audio_records[400..], &data_dir.join("eval.audio.jsonl"))?;
    distill::data::write_jsonl(&data.text_records[400..], &data_dir.join("eval.text.jsonl"))?;

    let cfg = RunConfig {
        preset: "layer_ac_kd".into(),
        seed: 7,
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
        weights: LossWeights::default(),
        divergence: Default::default(),
        layers: None,
        optimizer: OptimizerConfig {
            steps: Some(80),
            batch_size: 8,
            ..Default::default()
        },
        sampling: SamplingParams::default(),
        data: DataConfig {
            train_audio: data_dir.join("train.audio.jsonl"),
            train_text: data_dir.join("train.text.jsonl"),
            eval_audio: data_dir.join("eval.audio.jsonl"),
            eval_text: data_dir.join("eval.text.jsonl"),
            vocab: data_dir.join("vocab.json"),
            out_dir: dir.join("run"),
        },
        teacher_training: TeacherTrainingConfig {
            steps: Some(150),
            ..Default::default()
        },
        eval: EvalConfig {
            max_new_tokens: 24,
            generate: true,
        },
    };

    let artifacts = run_experiment(&cfg.resolve()?)?;

    println!("\nloss trajectory (every 10th step):");
    println!("{:>5} {:>9} {:>9} {:>9} {:>9} {:>9}", "step", "joint", "top", "layer", "ac", "sft");
    for s in artifacts.metrics.steps.iter().step_by(10) {
        println!(
            "{:>5} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>9.4}",
            s.step, s.joint, s.top, s.layer, s.ac, s.sft
        );
    }
    let eval = artifacts.metrics.evals.last().unwrap();
    println!("\nfinal evaluation:");
    println!("  mean top-layer divergence to teacher : {:.5}", eval.mean_top_divergence);
    println!("  mean acoustic KD per audio token     : {:.5}", eval.mean_ac_per_audio_token);
    if let (Some(acc), Some(ua)) = (eval.accuracy, eval.unweighted_accuracy) {
        println!("  generation accuracy                  : {acc:.1}%");
        println!("  unweighted accuracy                  : {ua:.1}%");
    }
    println!("\nartifacts (checkpoints, metrics.jsonl, steps.csv) in {}", dir.join("run").display());
    Ok(())
}
