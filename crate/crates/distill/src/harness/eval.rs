//! Generation-based evaluation: sample a reasoning trace and answer,
//! standardize the final answer onto one of the options, and score accuracy
//! plus unweighted (per-class mean) accuracy. Also hosts the divergence
//! diagnostics used by the directional checks.

use crate::data::{tokenize_student, tokenize_teacher, AudioRecord, TextRecord, Vocab, MARK_ANSWER};
use crate::divergence::{DivergenceKind, HiddenLossKind};
use crate::harness::HarnessError;
use crate::losses::{loss_acoustic, loss_top};
use crate::model::{sample_next, Model, SamplingParams};
use crate::pipeline::{AnswerKey, OPTION_LETTERS};
use rayon::prelude::*;

/// Outcome of answer standardization: a matched option index, or nothing
/// usable (scored incorrect).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StandardizedAnswer {
    Option(usize),
    Unanswered,
}

/// Map generated text onto an option. The scan covers the text after the
/// final answer delimiter (the whole text when no delimiter appears) and
/// matches option labels and option texts; the last match wins, with longer
/// matches preferred at the same end position.
pub fn standardize_answer(generated: &str, options: &[String]) -> StandardizedAnswer {
    let words: Vec<&str> = generated.split_whitespace().collect();
    let start = words
        .iter()
        .rposition(|w| *w == MARK_ANSWER)
        .map(|p| p + 1)
        .unwrap_or(0);
    let region = &words[start..];
    let mut best: Option<(usize, usize, usize)> = None; // (end, len, option)
    let mut consider = |end: usize, len: usize, option: usize| {
        let better = match best {
            None => true,
            Some((e, l, _)) => end > e || (end == e && len > l),
        };
        if better {
            best = Some((end, len, option));
        }
    };
    for (i, w) in region.iter().enumerate() {
        for (option, label) in OPTION_LETTERS.iter().enumerate().take(options.len()) {
            if w.eq_ignore_ascii_case(label) {
                consider(i, 1, option);
            }
        }
    }
    for (option, text) in options.iter().enumerate() {
        let target: Vec<&str> = text.split_whitespace().collect();
        if target.is_empty() {
            continue;
        }
        for i in 0..region.len().saturating_sub(target.len() - 1) {
            if region[i..i + target.len()] == target[..] {
                consider(i + target.len() - 1, target.len(), option);
            }
        }
    }
    match best {
        Some((_, _, option)) => StandardizedAnswer::Option(option),
        None => StandardizedAnswer::Unanswered,
    }
}

/// Splitmix-style seed derivation so parallel per-item sampling never
/// depends on scheduling order.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Decoding loop: sample until the sequence terminator or the length cap,
/// then return the generated ids (prefix excluded).
pub fn generate(
    model: &Model,
    prefix: &[u32],
    vocab: &Vocab,
    sampling: &SamplingParams,
    seed: u64,
    max_new_tokens: usize,
) -> Result<Vec<u32>, HarnessError> {
    let mut tokens = prefix.to_vec();
    let mut generated = Vec::new();
    let cap = max_new_tokens.min(model.spec.max_seq.saturating_sub(prefix.len()));
    for step in 0..cap {
        let next = sample_next(model, &tokens, sampling, derive_seed(seed, step as u64))?;
        if next == vocab.eos_id() {
            break;
        }
        tokens.push(next);
        generated.push(next);
    }
    Ok(generated)
}

/// Accuracy results, in percent.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalScores {
    pub accuracy: f64,
    pub unweighted_accuracy: f64,
    pub answers: Vec<StandardizedAnswer>,
}

/// Generate an answer for every evaluation record and score it against the
/// key. Items run in parallel with per-item seeds derived from the global
/// seed and item index, so parallelism never changes results. Generations
/// that exceed the length cap without a usable answer count as incorrect.
pub fn evaluate(
    student: &Model,
    eval_records: &[AudioRecord],
    key: &AnswerKey,
    vocab: &Vocab,
    sampling: &SamplingParams,
    seed: u64,
    max_new_tokens: usize,
) -> Result<EvalScores, HarnessError> {
    if eval_records.len() != key.correct.len() {
        return Err(HarnessError::Config(format!(
            "answer key covers {} items, evaluation set has {}",
            key.correct.len(),
            eval_records.len()
        )));
    }
    let answers: Vec<StandardizedAnswer> = eval_records
        .par_iter()
        .enumerate()
        .map(|(i, record)| -> Result<StandardizedAnswer, HarnessError> {
            let mut prefix = record.audio.clone();
            prefix.extend(vocab.encode_text(&record.question));
            let generated = generate(
                student,
                &prefix,
                vocab,
                sampling,
                derive_seed(seed, (i as u64) << 20),
                max_new_tokens,
            )?;
            let text = vocab.decode_text(&generated);
            Ok(standardize_answer(&text, &key.options))
        })
        .collect::<Result<_, _>>()?;

    Ok(score(&answers, key))
}

/// Score pre-standardized answers against the key.
pub fn score(answers: &[StandardizedAnswer], key: &AnswerKey) -> EvalScores {
    let n = answers.len().max(1) as f64;
    let mut correct = 0usize;
    let mut class_total = vec![0usize; key.options.len()];
    let mut class_correct = vec![0usize; key.options.len()];
    for (answer, &truth) in answers.iter().zip(&key.correct) {
        class_total[truth] += 1;
        if *answer == StandardizedAnswer::Option(truth) {
            correct += 1;
            class_correct[truth] += 1;
        }
    }
    let accuracy = 100.0 * correct as f64 / n;
    let mut recalls = Vec::new();
    for (c, &total) in class_total.iter().enumerate() {
        if total > 0 {
            recalls.push(class_correct[c] as f64 / total as f64);
        }
    }
    let unweighted_accuracy = if recalls.is_empty() {
        0.0
    } else {
        100.0 * recalls.iter().sum::<f64>() / recalls.len() as f64
    };
    EvalScores {
        accuracy,
        unweighted_accuracy,
        answers: answers.to_vec(),
    }
}

/// Held-out mean per-output-step top-layer divergence between teacher and
/// student predictions.
pub fn mean_top_divergence(
    kind: DivergenceKind,
    student: &Model,
    teacher: &Model,
    audio_records: &[AudioRecord],
    text_records: &[TextRecord],
    vocab: &Vocab,
) -> Result<f64, HarnessError> {
    let totals: Vec<(f64, usize)> = audio_records
        .par_iter()
        .zip(text_records.par_iter())
        .map(|(a, t)| -> Result<(f64, usize), HarnessError> {
            let s_sample = tokenize_student(a, vocab)?;
            let t_sample = tokenize_teacher(t, vocab)?;
            let s_trace = student.forward(&s_sample)?;
            let t_trace = teacher.forward(&t_sample)?;
            let per_step = loss_top(kind, &t_trace, &t_sample, &s_trace, &s_sample)?;
            Ok((per_step.iter().sum(), per_step.len()))
        })
        .collect::<Result<_, _>>()?;
    let (sum, count) = totals
        .iter()
        .fold((0.0, 0usize), |(s, c), &(v, n)| (s + v, c + n));
    Ok(sum / count.max(1) as f64)
}

/// Held-out acoustic KD per audio token: the layer-summed hidden divergence
/// between the snapshot and the student, averaged over audio tokens.
pub fn mean_acoustic_per_token(
    kind: HiddenLossKind,
    student: &Model,
    snapshot: &Model,
    audio_records: &[AudioRecord],
    vocab: &Vocab,
) -> Result<f64, HarnessError> {
    let totals: Vec<(f64, usize)> = audio_records
        .par_iter()
        .map(|a| -> Result<(f64, usize), HarnessError> {
            let sample = tokenize_student(a, vocab)?;
            let s_trace = student.forward(&sample)?;
            let snap_trace = snapshot.forward(&sample)?;
            let triples = loss_acoustic(kind, &snap_trace, &s_trace, &sample)?;
            let sum: f64 = triples.iter().map(|&(_, _, v)| v).sum();
            Ok((sum, sample.audio_positions().len()))
        })
        .collect::<Result<_, _>>()?;
    let (sum, count) = totals
        .iter()
        .fold((0.0, 0usize), |(s, c), &(v, n)| (s + v, c + n));
    Ok(sum / count.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn options() -> Vec<String> {
        ["siren", "drum", "violin", "thunder"]
            .iter()
            .map(|s| s.to_string())
            .collect()
    }

    #[test]
    fn marker_then_label_resolves() {
        let got = standardize_answer("noise words <answer> B", &options());
        assert_eq!(got, StandardizedAnswer::Option(1));
    }

    #[test]
    fn option_text_resolves_without_marker() {
        let got = standardize_answer("the answer is the violin", &options());
        assert_eq!(got, StandardizedAnswer::Option(2));
    }

    #[test]
    fn last_match_wins_after_final_marker() {
        let got = standardize_answer("A early words actually <answer> C", &options());
        assert_eq!(got, StandardizedAnswer::Option(2));
    }

    #[test]
    fn later_match_overrides_earlier_one() {
        let got = standardize_answer("<answer> A no wait drum", &options());
        assert_eq!(got, StandardizedAnswer::Option(1));
    }

    #[test]
    fn no_match_is_unanswered() {
        let got = standardize_answer("nothing useful here", &options());
        assert_eq!(got, StandardizedAnswer::Unanswered);
        assert_eq!(
            standardize_answer("", &options()),
            StandardizedAnswer::Unanswered
        );
    }

    #[test]
    fn multiword_option_text_matches_whole_phrase() {
        let opts = vec!["bass drum".to_string(), "snare".to_string()];
        let got = standardize_answer("i heard a bass drum", &opts);
        assert_eq!(got, StandardizedAnswer::Option(0));
    }

    #[test]
    fn scoring_all_correct_is_hundred() {
        let key = AnswerKey {
            options: options(),
            correct: vec![0, 1, 2, 3],
        };
        let answers: Vec<StandardizedAnswer> =
            key.correct.iter().map(|&c| StandardizedAnswer::Option(c)).collect();
        let s = score(&answers, &key);
        assert_eq!(s.accuracy, 100.0);
        assert_eq!(s.unweighted_accuracy, 100.0);
    }

    #[test]
    fn one_class_always_wrong_gives_seventy_five() {
        // 4 balanced classes, class 3 always wrong.
        let correct: Vec<usize> = (0..100).map(|i| i % 4).collect();
        let answers: Vec<StandardizedAnswer> = correct
            .iter()
            .map(|&c| {
                if c == 3 {
                    StandardizedAnswer::Unanswered
                } else {
                    StandardizedAnswer::Option(c)
                }
            })
            .collect();
        let key = AnswerKey {
            options: options(),
            correct,
        };
        let s = score(&answers, &key);
        assert_eq!(s.accuracy, 75.0);
        assert_eq!(s.unweighted_accuracy, 75.0);
    }

    #[test]
    fn derive_seed_is_stable_and_spreads() {
        assert_eq!(derive_seed(1, 2), derive_seed(1, 2));
        assert_ne!(derive_seed(1, 2), derive_seed(1, 3));
        assert_ne!(derive_seed(1, 2), derive_seed(2, 2));
    }
}
