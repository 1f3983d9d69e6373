//! Thin command-line front end over the library: dataset generation,
//! textualization, experiment runs, and checkpoint evaluation.

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use distill::data::{read_jsonl, write_jsonl, AudioRecord, Vocab};
use distill::harness::{evaluate, run_experiment, RunConfig};
use distill::model::{load_checkpoint, SamplingParams};
use distill::pipeline::{
    gen_synthetic, synthetic_vocab, textualize, AnswerKey, DescriptionClient, ExternalService,
    MockDeterministic, PromptTemplate,
};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "distill", version, about = "Layer-wise and source-wise distillation runner")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run an experiment preset from a TOML config.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Convert audio records to text records via a description client.
    Textualize {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// "mock" or "http:<url>".
        #[arg(long, default_value = "mock")]
        client: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        concurrency: usize,
    },
    /// Generate the synthetic audio-classification dataset.
    GenSynth {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Held-out set size; defaults to n / 5.
        #[arg(long)]
        eval_n: Option<usize>,
    },
    /// Evaluate a student checkpoint on a JSONL dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Vocabulary file; defaults to vocab.json next to the data file.
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long, default_value_t = 0.6)]
        temperature: f64,
        #[arg(long, default_value_t = 5)]
        top_k: usize,
        #[arg(long, default_value_t = 0.5)]
        top_p: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 24)]
        max_new_tokens: usize,
    },
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Run { config } => {
            let cfg = RunConfig::load(&config)
                .with_context(|| format!("loading {}", config.display()))?;
            let resolved = cfg.resolve()?;
            let artifacts = run_experiment(&resolved)?;
            let eval = artifacts.metrics.evals.last().context("no eval record")?;
            println!(
                "preset={} steps={} mean_top_divergence={:.6} mean_ac_per_audio_token={:.6}{}",
                resolved.preset.name(),
                artifacts.metrics.steps.len(),
                eval.mean_top_divergence,
                eval.mean_ac_per_audio_token,
                match (eval.accuracy, eval.unweighted_accuracy) {
                    (Some(a), Some(u)) => format!(" accuracy={a:.2}% ua={u:.2}%"),
                    _ => String::new(),
                }
            );
            println!("artifacts written to {}", resolved.raw.data.out_dir.display());
        }
        Cmd::Textualize {
            input,
            out,
            client,
            seed,
            concurrency,
        } => {
            let records: Vec<AudioRecord> = read_jsonl(&input)?;
            let template = PromptTemplate::default();
            let boxed: Box<dyn DescriptionClient> = if client == "mock" {
                Box::new(MockDeterministic::new(seed))
            } else if client.starts_with("http://") || client.starts_with("https://") {
                Box::new(ExternalService::new(client.as_str()))
            } else if let Some(url) = client.strip_prefix("http:") {
                Box::new(ExternalService::new(url))
            } else {
                bail!("client must be \"mock\" or \"http:<url>\", got {client:?}");
            };
            let outcome = textualize(&records, boxed.as_ref(), &template, concurrency)?;
            write_jsonl(&outcome.records, &out)?;
            println!(
                "textualized {} of {} records -> {}",
                outcome.records.len(),
                records.len(),
                out.display()
            );
            for (idx, err) in &outcome.failures {
                eprintln!("record {idx}: {err}");
            }
            if !outcome.failures.is_empty() {
                bail!("{} records failed", outcome.failures.len());
            }
        }
        Cmd::GenSynth { n, seed, out, eval_n } => {
            let eval_n = eval_n.unwrap_or(n / 5);
            let vocab = synthetic_vocab();
            let data = gen_synthetic(n + eval_n, &vocab, seed)?;
            std::fs::create_dir_all(&out)?;
            vocab.save(&out.join("vocab.json"))?;
            write_jsonl(&data.audio_records[..n], &out.join("train.audio.jsonl"))?;
            write_jsonl(&data.text_records[..n], &out.join("train.text.jsonl"))?;
            write_jsonl(&data.audio_records[n..], &out.join("eval.audio.jsonl"))?;
            write_jsonl(&data.text_records[n..], &out.join("eval.text.jsonl"))?;
            let eval_key = AnswerKey {
                options: data.key.options.clone(),
                correct: data.key.correct[n..].to_vec(),
            };
            std::fs::write(
                out.join("eval.key.json"),
                serde_json::to_string_pretty(&eval_key)?,
            )?;
            println!(
                "wrote {n} train and {eval_n} eval records to {}",
                out.display()
            );
        }
        Cmd::Eval {
            ckpt,
            data,
            vocab,
            temperature,
            top_k,
            top_p,
            seed,
            max_new_tokens,
        } => {
            let vocab_path = vocab.unwrap_or_else(|| {
                data.parent().unwrap_or(std::path::Path::new(".")).join("vocab.json")
            });
            let vocab = Vocab::load(&vocab_path)
                .with_context(|| format!("loading vocabulary {}", vocab_path.display()))?;
            let (student, _) = load_checkpoint(&ckpt)?;
            let records: Vec<AudioRecord> = read_jsonl(&data)?;
            let key = AnswerKey::from_records(&records)?;
            let sampling = SamplingParams {
                temperature,
                top_k,
                top_p,
            };
            let scores = evaluate(
                &student,
                &records,
                &key,
                &vocab,
                &sampling,
                seed,
                max_new_tokens,
            )?;
            println!(
                "items={} accuracy={:.2}% unweighted_accuracy={:.2}%",
                records.len(),
                scores.accuracy,
                scores.unweighted_accuracy
            );
        }
    }
    Ok(())
}
