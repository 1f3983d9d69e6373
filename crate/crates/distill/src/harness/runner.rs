//! Experiment driver: train or load the textual teacher, snapshot the
//! student before distillation, run the preset's joint objective with Adam,
//! then evaluate and write metrics, breakdown CSVs, and checkpoints.

use crate::align::ProjectionBank;
use crate::data::{
    read_jsonl, tokenize_student, tokenize_teacher, AudioRecord, Stage, TextRecord,
    TokenizedSample, Vocab,
};
use crate::harness::config::ResolvedConfig;
use crate::harness::eval::{evaluate, mean_acoustic_per_token, mean_top_divergence};
use crate::harness::metrics::{EvalRecord, MetricsLog, StepRecord};
use crate::harness::optim::{Adam, AdamConfig};
use crate::harness::HarnessError;
use crate::losses::{
    evaluate_joint, joint_with_grads, BankGrads, DistillSetup, LossBreakdown, LossError,
    SamplePair, TermFlags,
};
use crate::model::{load_checkpoint, save_checkpoint, Model, Params};
use crate::pipeline::AnswerKey;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

const TEACHER_SEED_SALT: u64 = 0x7e0c;
const DATA_SEED_SALT: u64 = 0xda7a;
const BANK_SEED_SALT: u64 = 0xba9c;

/// Everything a run needs from disk.
pub struct Datasets {
    pub vocab: Vocab,
    pub train_audio: Vec<AudioRecord>,
    pub train_text: Vec<TextRecord>,
    pub eval_audio: Vec<AudioRecord>,
    pub eval_text: Vec<TextRecord>,
}

pub fn load_datasets(cfg: &ResolvedConfig) -> Result<Datasets, HarnessError> {
    let data = &cfg.raw.data;
    Ok(Datasets {
        vocab: Vocab::load(&data.vocab)?,
        train_audio: read_jsonl(&data.train_audio)?,
        train_text: read_jsonl(&data.train_text)?,
        eval_audio: read_jsonl(&data.eval_audio)?,
        eval_text: read_jsonl(&data.eval_text)?,
    })
}

/// Final state of a run.
pub struct RunArtifacts {
    pub metrics: MetricsLog,
    pub student: Model,
    pub teacher: Model,
    /// Frozen copy of the student taken before distillation; acoustic
    /// teacher when the preset uses it, diagnostic reference otherwise.
    pub snapshot: Model,
    pub bank: Option<ProjectionBank>,
}

/// Deterministic shuffled index stream over a dataset.
struct BatchStream {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchStream {
    fn new(n: usize, seed: u64) -> Self {
        let mut s = Self {
            order: (0..n).collect(),
            pos: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        s.order.shuffle(&mut s.rng);
        s
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut batch = Vec::with_capacity(size);
        for _ in 0..size {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            batch.push(self.order[self.pos]);
            self.pos += 1;
        }
        batch
    }
}

/// One optimizer step worth of per-sample work, fanned out over the batch
/// and reduced in index order so parallelism never changes the result.
#[allow(clippy::too_many_arguments)]
fn distill_batch(
    setup: &DistillSetup,
    student: &Model,
    teacher: Option<&Model>,
    snapshot: Option<&Model>,
    bank: Option<&ProjectionBank>,
    batch: &[usize],
    student_samples: &[TokenizedSample],
    teacher_samples: &[TokenizedSample],
    stage_tags: &[Vec<Stage>],
) -> Result<(Vec<LossBreakdown>, Params, Option<BankGrads>), HarnessError> {
    type PerSample = (LossBreakdown, Params, Option<BankGrads>);
    let results: Vec<Result<PerSample, HarnessError>> = batch
        .par_iter()
        .map(|&idx| {
            let s_sample = &student_samples[idx];
            let (s_trace, cache) = student.forward_cached(s_sample)?;
            let needs_teacher = setup.flags.top || setup.flags.layer;
            let t_pair = if needs_teacher {
                let t_sample = &teacher_samples[idx];
                let t_trace = teacher
                    .ok_or_else(|| HarnessError::Config("teacher required".into()))?
                    .forward(t_sample)?;
                Some((t_trace, t_sample))
            } else {
                None
            };
            let snap_trace = if setup.flags.ac {
                Some(
                    snapshot
                        .ok_or_else(|| HarnessError::Config("snapshot required".into()))?
                        .forward(s_sample)?,
                )
            } else {
                None
            };
            let pair = SamplePair {
                student_trace: &s_trace,
                student_sample: s_sample,
                teacher_trace: t_pair.as_ref().map(|(t, _)| t),
                teacher_sample: t_pair.as_ref().map(|(_, s)| *s),
                snapshot_trace: snap_trace.as_ref(),
                stage_tags: Some(&stage_tags[idx]),
            };
            let (breakdown, upstream, bank_grads) = joint_with_grads(setup, bank, &pair)?;
            let grads = student.backward(&cache, &upstream);
            Ok((breakdown, grads, bank_grads))
        })
        .collect();

    let inv = 1.0 / batch.len().max(1) as f64;
    let mut breakdowns = Vec::with_capacity(batch.len());
    let mut grad_acc = Params::zeros(&student.spec);
    let mut bank_acc: Option<BankGrads> = None;
    for r in results {
        let (breakdown, grads, bank_grads) = r?;
        breakdowns.push(breakdown);
        grad_acc.add_scaled(&grads, inv);
        if let Some(bg) = bank_grads {
            match &mut bank_acc {
                None => {
                    let mut scaled = bg;
                    for m in &mut scaled {
                        for v in m.iter_mut() {
                            *v *= inv;
                        }
                    }
                    bank_acc = Some(scaled);
                }
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(&bg) {
                        for (x, y) in a.iter_mut().zip(b) {
                            *x += inv * y;
                        }
                    }
                }
            }
        }
    }
    Ok((breakdowns, grad_acc, bank_acc))
}

/// Supervised pre-training of the textual teacher on the textualized set.
pub fn train_teacher(
    mut teacher: Model,
    samples: &[TokenizedSample],
    adam_cfg: AdamConfig,
    steps: usize,
    batch_size: usize,
    seed: u64,
) -> Result<Model, HarnessError> {
    let setup = DistillSetup {
        flags: TermFlags {
            top: false,
            layer: false,
            ac: false,
            sft: true,
        },
        weights: crate::losses::LossWeights {
            alpha_layer: 0.0,
            alpha_ac: 0.0,
            alpha_sft: 1.0,
        },
        kd: crate::divergence::DivergenceKind::Jsd,
        hidden: crate::divergence::HiddenLossKind::SoftmaxJsd,
        map: crate::align::build_layer_map(teacher.spec.layers, teacher.spec.layers)
            .map_err(|e| HarnessError::Config(e.to_string()))?,
        schedule: crate::align::build_schedule(
            crate::align::ScheduleKind::TopOnly,
            teacher.spec.layers,
        )
        .map_err(|e| HarnessError::Config(e.to_string()))?,
    };
    let mut adam = Adam::new(adam_cfg);
    let mut stream = BatchStream::new(samples.len(), seed);
    let empty_tags: Vec<Vec<Stage>> = vec![Vec::new(); samples.len()];
    for step in 0..steps {
        let batch = stream.next_batch(batch_size);
        let (breakdowns, grads, _) = distill_batch(
            &setup, &teacher, None, None, None, &batch, samples, samples, &empty_tags,
        )
        .map_err(|e| annotate_step(e, step))?;
        let _ = breakdowns;
        let tensors: Vec<(String, &mut [f64], &[f64])> = {
            let grad_named = grads.named();
            teacher
                .params
                .named_mut()
                .into_iter()
                .zip(grad_named)
                .map(|((name, p), (_, g))| (name, p.as_mut_slice(), g.as_slice()))
                .collect()
        };
        adam.step(tensors);
    }
    Ok(teacher)
}

fn annotate_step(err: HarnessError, step: usize) -> HarnessError {
    match err {
        HarnessError::Loss(LossError::NonFinite { term, .. }) => HarnessError::NonFiniteLoss {
            step,
            term: term.to_string(),
        },
        other => other,
    }
}

/// Run one experiment end to end. The sequence is: load or train the
/// teacher, initialize the student, snapshot it before any update, optimize
/// the enabled joint loss, then evaluate. Deterministic given the seeds.
pub fn run_experiment(cfg: &ResolvedConfig) -> Result<RunArtifacts, HarnessError> {
    let started = std::time::Instant::now();
    let data = load_datasets(cfg)?;
    run_with_datasets(cfg, &data, started)
}

pub fn run_with_datasets(
    cfg: &ResolvedConfig,
    data: &Datasets,
    started: std::time::Instant,
) -> Result<RunArtifacts, HarnessError> {
    let raw = &cfg.raw;
    std::fs::create_dir_all(&raw.data.out_dir)?;
    let vocab = &data.vocab;
    if vocab.len() > raw.student.vocab_size {
        return Err(HarnessError::Config(format!(
            "vocabulary has {} symbols, model vocab_size is {}",
            vocab.len(),
            raw.student.vocab_size
        )));
    }

    let student_samples: Vec<TokenizedSample> = data
        .train_audio
        .iter()
        .map(|r| tokenize_student(r, vocab))
        .collect::<Result<_, _>>()?;
    let teacher_samples: Vec<TokenizedSample> = data
        .train_text
        .iter()
        .map(|r| tokenize_teacher(r, vocab))
        .collect::<Result<_, _>>()?;
    if student_samples.len() != teacher_samples.len() {
        return Err(HarnessError::Config(format!(
            "train sets differ in size: {} audio vs {} text records",
            student_samples.len(),
            teacher_samples.len()
        )));
    }
    if student_samples.is_empty() {
        return Err(HarnessError::Config("training set is empty".into()));
    }
    let stage_tags: Vec<Vec<Stage>> = student_samples
        .iter()
        .map(|s| s.output_stage_tags(vocab))
        .collect();

    // 1. Teacher: load a checkpoint or pre-train on the textualized set.
    let teacher = match &raw.teacher_training.load {
        Some(path) => {
            let (model, _) = load_checkpoint(path)?;
            model.snapshot()
        }
        None => {
            let fresh = Model::new(raw.teacher)?;
            let steps = cfg.teacher_steps(teacher_samples.len());
            eprintln!(
                "[{}] training teacher: {} steps over {} records",
                cfg.preset.name(),
                steps,
                teacher_samples.len()
            );
            train_teacher(
                fresh,
                &teacher_samples,
                raw.teacher_adam(),
                steps,
                raw.teacher_training.batch_size,
                crate::harness::eval::derive_seed(raw.seed, TEACHER_SEED_SALT),
            )?
            .snapshot()
        }
    };
    save_checkpoint(&teacher, None, &raw.data.out_dir.join("teacher.ckpt.json"))?;

    // 2. Student from its spec seed; 3. snapshot before any update.
    let mut student = Model::new(raw.student)?;
    let snapshot = student.snapshot();

    let mut bank = cfg.flags.layer.then(|| {
        ProjectionBank::init(
            &cfg.schedule,
            raw.student.hidden_dim,
            raw.teacher.hidden_dim,
            crate::harness::eval::derive_seed(raw.seed, BANK_SEED_SALT),
        )
    });

    let setup = DistillSetup {
        flags: cfg.flags,
        weights: raw.weights,
        kd: cfg.kd,
        hidden: cfg.hidden,
        map: cfg.map.clone(),
        schedule: cfg.schedule.clone(),
    };

    let mut metrics = MetricsLog::new(
        serde_json::to_value(raw).map_err(|e| HarnessError::Config(e.to_string()))?,
        raw.weights,
    );

    // 4. Optimize the enabled joint loss.
    let steps = cfg.train_steps(student_samples.len());
    let mut adam = Adam::new(raw.adam());
    let mut stream = BatchStream::new(
        student_samples.len(),
        crate::harness::eval::derive_seed(raw.seed, DATA_SEED_SALT),
    );
    eprintln!(
        "[{}] distilling student: {} steps, batch {}",
        cfg.preset.name(),
        steps,
        raw.optimizer.batch_size
    );
    let mut last_batch: Vec<usize> = Vec::new();
    for step in 0..steps {
        let batch = stream.next_batch(raw.optimizer.batch_size);
        let (breakdowns, grads, bank_grads) = distill_batch(
            &setup,
            &student,
            Some(&teacher),
            Some(&snapshot),
            bank.as_ref(),
            &batch,
            &student_samples,
            &teacher_samples,
            &stage_tags,
        )
        .map_err(|e| annotate_step(e, step))?;
        metrics.steps.push(StepRecord::from_batch(step, &breakdowns));

        let grad_named = grads.named();
        let mut tensors: Vec<(String, &mut [f64], &[f64])> = student
            .params
            .named_mut()
            .into_iter()
            .zip(grad_named)
            .map(|((name, p), (_, g))| (name, p.as_mut_slice(), g.as_slice()))
            .collect();
        let bank_grads_owned;
        if let (Some(b), Some(bg)) = (bank.as_mut(), bank_grads) {
            bank_grads_owned = bg;
            for ((name, w), g) in b.named_tensors_mut().into_iter().zip(&bank_grads_owned) {
                tensors.push((name, w.as_mut_slice(), g.as_slice()));
            }
            adam.step(tensors);
        } else {
            adam.step(tensors);
        }
        last_batch = batch;
        if steps >= 10 && step % (steps / 10).max(1) == 0 {
            let s = metrics.steps.last().unwrap();
            eprintln!(
                "[{}] step {step}/{steps} joint {:.4} (top {:.4} layer {:.4} ac {:.4} sft {:.4})",
                cfg.preset.name(),
                s.joint,
                s.top,
                s.layer,
                s.ac,
                s.sft
            );
        }
    }

    // 5. Evaluate: divergence diagnostics always, generation when enabled.
    let mean_top = mean_top_divergence(
        cfg.kd,
        &student,
        &teacher,
        &data.eval_audio,
        &data.eval_text,
        vocab,
    )?;
    let mean_ac =
        mean_acoustic_per_token(cfg.hidden, &student, &snapshot, &data.eval_audio, vocab)?;
    let (accuracy, unweighted) = if raw.eval.generate {
        let key = AnswerKey::from_records(&data.eval_audio)?;
        let scores = evaluate(
            &student,
            &data.eval_audio,
            &key,
            vocab,
            &raw.sampling,
            raw.seed,
            raw.eval.max_new_tokens,
        )?;
        (Some(scores.accuracy), Some(scores.unweighted_accuracy))
    } else {
        (None, None)
    };
    metrics.evals.push(EvalRecord {
        step: steps,
        accuracy,
        unweighted_accuracy: unweighted,
        mean_top_divergence: mean_top,
        mean_ac_per_audio_token: mean_ac,
    });

    // 6. Persist checkpoints, logs, and the final per-step breakdown.
    save_checkpoint(
        &student,
        bank.as_ref(),
        &raw.data.out_dir.join("student.ckpt.json"),
    )?;
    metrics.wall_clock_secs = started.elapsed().as_secs_f64();
    metrics.write_jsonl(&raw.data.out_dir.join("metrics.jsonl"))?;
    metrics.write_steps_csv(&raw.data.out_dir.join("steps.csv"))?;
    if let Some(&idx) = last_batch.first() {
        let s_sample = &student_samples[idx];
        let (s_trace, _) = student.forward_cached(s_sample)?;
        let t_trace = teacher.forward(&teacher_samples[idx])?;
        let snap_trace = snapshot.forward(s_sample)?;
        let pair = SamplePair {
            student_trace: &s_trace,
            student_sample: s_sample,
            teacher_trace: Some(&t_trace),
            teacher_sample: Some(&teacher_samples[idx]),
            snapshot_trace: Some(&snap_trace),
            stage_tags: Some(&stage_tags[idx]),
        };
        // Full-term breakdown of one sample for plotting, regardless of
        // the preset's gating.
        let full = DistillSetup {
            flags: TermFlags {
                top: true,
                layer: cfg.flags.layer,
                ac: true,
                sft: true,
            },
            ..setup.clone()
        };
        if let Ok(breakdown) = evaluate_joint(&full, bank.as_ref(), &pair) {
            breakdown.write_csv(&raw.data.out_dir.join("breakdown_final.csv"))?;
        }
    }
    eprintln!(
        "[{}] done in {:.1}s: mean top divergence {:.5}, mean acoustic/token {:.5}{}",
        cfg.preset.name(),
        metrics.wall_clock_secs,
        mean_top,
        mean_ac,
        match (accuracy, unweighted) {
            (Some(a), Some(u)) => format!(", accuracy {a:.1}%, UA {u:.1}%"),
            _ => String::new(),
        }
    );

    Ok(RunArtifacts {
        metrics,
        student,
        teacher,
        snapshot,
        bank,
    })
}

impl AnswerKey {
    /// Derive the key from the records' answer letters.
    pub fn from_records(records: &[AudioRecord]) -> Result<Self, HarnessError> {
        let options: Vec<String> = crate::pipeline::CLASS_NAMES
            .iter()
            .map(|s| s.to_string())
            .collect();
        let correct = records
            .iter()
            .map(|r| {
                crate::pipeline::OPTION_LETTERS
                    .iter()
                    .position(|l| *l == r.answer)
                    .ok_or_else(|| {
                        HarnessError::Config(format!(
                            "answer {:?} is not an option letter",
                            r.answer
                        ))
                    })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { options, correct })
    }
}
