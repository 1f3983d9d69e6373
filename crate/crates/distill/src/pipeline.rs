//! Textualization of audio records into text records via a pluggable
//! description client, plus a synthetic multiple-choice task generator with
//! a known ground-truth mapping from audio tokens to answers.

use crate::data::{AudioRecord, DataError, ReasoningTrace, TextRecord, Vocab};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::hash::{Hash, Hasher};
use std::time::Duration;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("question must be non-empty")]
    EmptyQuestion,
    #[error("description client failed: {0}")]
    ClientFailed(String),
    #[error("client returned an empty description")]
    EmptyDescription,
    #[error("client returned the raw question instead of a description")]
    DescriptionEqualsQuestion,
    #[error("{requested} records exceed the {capacity} distinct audio patterns available")]
    TooManyRecords { requested: usize, capacity: usize },
    #[error("vocabulary is missing the required word {0:?}")]
    MissingVocabWord(String),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Placeholder substituted with the record's question.
pub const QUESTION_PLACEHOLDER: &str = "**Question**";
/// Placeholder substituted with the serialized reasoning trace.
pub const TRACE_PLACEHOLDER: &str = "**Reasoning trace**";

/// Fixed instruction text with the two placeholders. The default is the
/// golden template shipped under `assets/`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    text: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self {
            text: include_str!("../assets/prompt_template.txt").to_string(),
        }
    }
}

impl PromptTemplate {
    pub fn new(text: String) -> Self {
        Self { text }
    }

    pub fn text(&self) -> &str {
        &self.text
    }
}

/// Byte-exact substitution of the two placeholders. The trace is serialized
/// as its four labeled stages in order.
pub fn render_prompt(
    template: &PromptTemplate,
    question: &str,
    trace: &ReasoningTrace,
) -> Result<String, PipelineError> {
    if question.trim().is_empty() {
        return Err(PipelineError::EmptyQuestion);
    }
    trace.validate()?;
    let trace_text = format!(
        "planning: {}\ncaption: {}\nreasoning: {}\nsummary: {}",
        trace.planning, trace.caption, trace.reasoning, trace.summary
    );
    Ok(template
        .text
        .replace(QUESTION_PLACEHOLDER, question)
        .replace(TRACE_PLACEHOLDER, &trace_text))
}

/// Produces an audio description for one record. `prompt` is the rendered
/// instruction; implementations may use it or work from the record directly.
pub trait DescriptionClient: Sync {
    fn describe(&self, prompt: &str, record: &AudioRecord) -> Result<String, PipelineError>;
}

/// Rule-based stand-in for the external captioning model. Output depends
/// only on the record contents and the seed.
#[derive(Debug, Clone, Copy)]
pub struct MockDeterministic {
    pub seed: u64,
}

impl MockDeterministic {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }
}

impl DescriptionClient for MockDeterministic {
    fn describe(&self, _prompt: &str, record: &AudioRecord) -> Result<String, PipelineError> {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        record.audio.hash(&mut h);
        record.question.hash(&mut h);
        record.trace.caption.hash(&mut h);
        self.seed.hash(&mut h);
        let text = match h.finish() % 3 {
            0 => record.trace.caption.clone(),
            1 => format!("{} {}", record.trace.caption, record.trace.reasoning),
            _ => format!("audio contains {}", record.trace.caption),
        };
        Ok(text)
    }
}

#[derive(Serialize)]
struct DescribeRequest<'a> {
    prompt: &'a str,
    audio: &'a [u32],
}

#[derive(Deserialize)]
struct DescribeResponse {
    description: String,
}

/// HTTP client for an external description model. Sends
/// `{"prompt": ..., "audio": [...]}` and expects `{"description": ...}`.
pub struct ExternalService {
    pub url: String,
    pub timeout: Duration,
    pub retries: usize,
}

impl ExternalService {
    pub fn new(url: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            timeout: Duration::from_secs(30),
            retries: 2,
        }
    }

    fn call_once(&self, prompt: &str, record: &AudioRecord) -> Result<String, PipelineError> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .build()
            .into();
        let mut response = agent
            .post(&self.url)
            .send_json(DescribeRequest {
                prompt,
                audio: &record.audio,
            })
            .map_err(|e| PipelineError::ClientFailed(e.to_string()))?;
        let body: DescribeResponse = response
            .body_mut()
            .read_json()
            .map_err(|e| PipelineError::ClientFailed(e.to_string()))?;
        Ok(body.description)
    }
}

impl DescriptionClient for ExternalService {
    fn describe(&self, prompt: &str, record: &AudioRecord) -> Result<String, PipelineError> {
        let mut last = None;
        for _ in 0..=self.retries {
            match self.call_once(prompt, record) {
                Ok(d) => return Ok(d),
                Err(e) => last = Some(e),
            }
        }
        Err(last.expect("at least one attempt"))
    }
}

/// Result of a textualization run: one text record per successful input, in
/// input order, plus the failed indices with their errors.
#[derive(Debug)]
pub struct TextualizeOutcome {
    pub records: Vec<TextRecord>,
    pub failures: Vec<(usize, String)>,
}

/// Convert audio records into text records, preserving question, trace, and
/// answer verbatim and attaching the client-produced description. Client
/// failures are collected per record; the run continues. `concurrency`
/// bounds the fan-out; output order always equals input order.
pub fn textualize(
    records: &[AudioRecord],
    client: &dyn DescriptionClient,
    template: &PromptTemplate,
    concurrency: usize,
) -> Result<TextualizeOutcome, PipelineError> {
    let describe_one = |record: &AudioRecord| -> Result<TextRecord, PipelineError> {
        record.validate()?;
        let prompt = render_prompt(template, &record.question, &record.trace)?;
        let description = client.describe(&prompt, record)?;
        if description.trim().is_empty() {
            return Err(PipelineError::EmptyDescription);
        }
        if description == record.question {
            return Err(PipelineError::DescriptionEqualsQuestion);
        }
        Ok(TextRecord {
            description,
            question: record.question.clone(),
            trace: record.trace.clone(),
            answer: record.answer.clone(),
        })
    };

    let results: Vec<Result<TextRecord, PipelineError>> = if concurrency > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(concurrency)
            .build()
            .expect("thread pool");
        pool.install(|| {
            use rayon::prelude::*;
            records.par_iter().map(describe_one).collect()
        })
    } else {
        records.iter().map(describe_one).collect()
    };

    let mut out = TextualizeOutcome {
        records: Vec::with_capacity(records.len()),
        failures: Vec::new(),
    };
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(t) => out.records.push(t),
            Err(e) => out.failures.push((i, e.to_string())),
        }
    }
    Ok(out)
}

pub const CLASS_NAMES: [&str; 4] = ["siren", "drum", "violin", "thunder"];
pub const OPTION_LETTERS: [&str; 4] = ["A", "B", "C", "D"];
const AUDIO_ALPHABET: usize = 8;
const AUDIO_LEN: usize = 8;
const SIGNATURE_COUNT: usize = 5;

/// Correct option index per record plus the option texts shared by every
/// question of the synthetic task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerKey {
    pub options: Vec<String>,
    pub correct: Vec<usize>,
}

/// A generated dataset triple: audio records, their textualized twins, and
/// the ground-truth key.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub audio_records: Vec<AudioRecord>,
    pub text_records: Vec<TextRecord>,
    pub key: AnswerKey,
}

/// The closed vocabulary covering every word the synthetic task emits.
pub fn synthetic_vocab() -> Vocab {
    let mut words: Vec<String> = (0..AUDIO_ALPHABET).map(|i| format!("<a{i}>")).collect();
    for w in OPTION_LETTERS {
        words.push(w.into());
    }
    for w in CLASS_NAMES {
        words.push(w.into());
    }
    for w in [
        "which", "sound", "dominates", "?", "options", ":", "find", "the", "main", "mostly",
        "here", "maps", "to", "answer", "is", "this", "clip", "contains", "audio", "option",
    ] {
        words.push(w.into());
    }
    Vocab::new(words).expect("no duplicates in the fixed word list")
}

fn audio_token_id(vocab: &Vocab, index: usize) -> Result<u32, PipelineError> {
    let word = format!("<a{index}>");
    vocab
        .id_of(&word)
        .ok_or(PipelineError::MissingVocabWord(word))
}

/// Number of distinct audio patterns the generator can emit.
pub fn synthetic_capacity() -> usize {
    // 4 classes x C(8,3) filler placements x 4^3 filler choices.
    let choose_8_3 = 56;
    4 * choose_8_3 * 4usize.pow(3)
}

/// Majority audio token decides the class: the construction places the
/// class signature token in most positions, so a lookup table over token
/// counts recovers the hidden attribute with certainty.
pub fn lookup_oracle(audio: &[u32], vocab: &Vocab) -> Option<usize> {
    let mut counts = [0usize; 4];
    for &t in audio {
        for (class, count) in counts.iter_mut().enumerate() {
            if audio_token_id(vocab, class).ok()? == t {
                *count += 1;
            }
        }
    }
    let (best, &n) = counts.iter().enumerate().max_by_key(|(_, &n)| n)?;
    (n > audio.len() / 2).then_some(best)
}

/// Generate `n` records whose audio token pattern encodes one of four sound
/// classes. The question asks which class dominates; the trace derives the
/// answer in four templated stages; the description verbalizes the class.
/// Audio patterns are unique across the dataset and the mapping from audio
/// to answer is recoverable by [`lookup_oracle`]. Deterministic given seed.
pub fn gen_synthetic(
    n: usize,
    vocab: &Vocab,
    seed: u64,
) -> Result<SyntheticDataset, PipelineError> {
    if n > synthetic_capacity() {
        return Err(PipelineError::TooManyRecords {
            requested: n,
            capacity: synthetic_capacity(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let question = format!(
        "which sound dominates ? options : A {} B {} C {} D {}",
        CLASS_NAMES[0], CLASS_NAMES[1], CLASS_NAMES[2], CLASS_NAMES[3]
    );
    let mut seen: HashSet<Vec<u32>> = HashSet::with_capacity(n);
    let mut audio_records = Vec::with_capacity(n);
    let mut text_records = Vec::with_capacity(n);
    let mut correct = Vec::with_capacity(n);
    while audio_records.len() < n {
        let class = rng.gen_range(0..4usize);
        let mut audio = Vec::with_capacity(AUDIO_LEN);
        for _ in 0..SIGNATURE_COUNT {
            audio.push(audio_token_id(vocab, class)?);
        }
        for _ in SIGNATURE_COUNT..AUDIO_LEN {
            audio.push(audio_token_id(vocab, 4 + rng.gen_range(0..4usize))?);
        }
        audio.shuffle(&mut rng);
        if !seen.insert(audio.clone()) {
            continue;
        }
        let name = CLASS_NAMES[class];
        let letter = OPTION_LETTERS[class];
        let trace = ReasoningTrace {
            planning: "find the main sound".into(),
            caption: format!("mostly {name} here"),
            reasoning: format!("{name} maps to {letter}"),
            summary: format!("answer is {letter}"),
        };
        let description = format!("this clip contains mostly {name}");
        audio_records.push(AudioRecord {
            audio,
            question: question.clone(),
            trace: trace.clone(),
            answer: letter.to_string(),
        });
        text_records.push(TextRecord {
            description,
            question: question.clone(),
            trace,
            answer: letter.to_string(),
        });
        correct.push(class);
    }
    Ok(SyntheticDataset {
        audio_records,
        text_records,
        key: AnswerKey {
            options: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
            correct,
        },
    })
}
