//! Canonical sample types, the shared vocabulary, token-role masks, and JSONL
//! serialization used by every other module.
//!
//! Audio is an opaque integer-token sequence: all downstream math operates on
//! token positions and hidden states, never on waveforms. Teacher and student
//! share one vocabulary so their output distributions are directly comparable.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("field {0:?} must be non-empty")]
    EmptyField(&'static str),
    #[error("audio token sequence must contain at least one token")]
    EmptyAudio,
    #[error("line {line}: {source}")]
    MalformedLine {
        line: usize,
        source: serde_json::Error,
    },
    #[error("line {line}: {source}")]
    InvalidRecord {
        line: usize,
        source: Box<DataError>,
    },
    #[error("token id {0} is outside the vocabulary")]
    UnknownTokenId(u32),
    #[error("invalid sample: {0}")]
    InvalidSample(&'static str),
    #[error("duplicate vocabulary symbol {0:?}")]
    DuplicateSymbol(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// The four-stage structured output that precedes the final answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasoningTrace {
    pub planning: String,
    pub caption: String,
    pub reasoning: String,
    pub summary: String,
}

impl ReasoningTrace {
    pub fn validate(&self) -> Result<(), DataError> {
        for (name, text) in [
            ("planning", &self.planning),
            ("caption", &self.caption),
            ("reasoning", &self.reasoning),
            ("summary", &self.summary),
        ] {
            if text.trim().is_empty() {
                return Err(DataError::EmptyField(name));
            }
        }
        Ok(())
    }

    /// Stage texts in their fixed order.
    pub fn stages(&self) -> [(&'static str, &str); 4] {
        [
            ("planning", &self.planning),
            ("caption", &self.caption),
            ("reasoning", &self.reasoning),
            ("summary", &self.summary),
        ]
    }
}

/// One training sample before textualization: opaque audio tokens plus the
/// question, reasoning trace, and final answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AudioRecord {
    pub audio: Vec<u32>,
    pub question: String,
    pub trace: ReasoningTrace,
    pub answer: String,
}

impl AudioRecord {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.audio.is_empty() {
            return Err(DataError::EmptyAudio);
        }
        if self.question.trim().is_empty() {
            return Err(DataError::EmptyField("question"));
        }
        self.trace.validate()?;
        if self.answer.trim().is_empty() {
            return Err(DataError::EmptyField("answer"));
        }
        Ok(())
    }
}

/// The textualized counterpart: the audio is replaced by a description so a
/// text-only teacher can condition on it. Question, trace, and answer are
/// carried over verbatim.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextRecord {
    pub description: String,
    pub question: String,
    pub trace: ReasoningTrace,
    pub answer: String,
}

impl TextRecord {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.description.trim().is_empty() {
            return Err(DataError::EmptyField("description"));
        }
        if self.question.trim().is_empty() {
            return Err(DataError::EmptyField("question"));
        }
        self.trace.validate()?;
        if self.answer.trim().is_empty() {
            return Err(DataError::EmptyField("answer"));
        }
        Ok(())
    }
}

/// Role of each token position within a tokenized sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    AudioInput,
    TextPrompt,
    Output,
}

/// Reasoning stage owning an output token, used for per-stage breakdowns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    Planning,
    Caption,
    Reasoning,
    Summary,
    Answer,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::Planning,
        Stage::Caption,
        Stage::Reasoning,
        Stage::Summary,
        Stage::Answer,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Stage::Planning => "planning",
            Stage::Caption => "caption",
            Stage::Reasoning => "reasoning",
            Stage::Summary => "summary",
            Stage::Answer => "answer",
        }
    }
}

pub const UNK: &str = "<unk>";
pub const MARK_PLANNING: &str = "<planning>";
pub const MARK_CAPTION: &str = "<caption>";
pub const MARK_REASONING: &str = "<reasoning>";
pub const MARK_SUMMARY: &str = "<summary>";
pub const MARK_ANSWER: &str = "<answer>";
pub const EOS: &str = "<eos>";

const SPECIALS: [&str; 7] = [
    UNK,
    MARK_PLANNING,
    MARK_CAPTION,
    MARK_REASONING,
    MARK_SUMMARY,
    MARK_ANSWER,
    EOS,
];

/// Dense id-to-string table with reserved markers for the stage boundaries
/// and the answer delimiter. Words are whitespace-delimited symbols.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    symbols: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Builds a vocabulary from plain words; the seven special markers occupy
    /// ids 0..7 and must not reappear in `words`.
    pub fn new<I, S>(words: I) -> Result<Self, DataError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut symbols: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, u32> = symbols
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i as u32))
            .collect();
        for w in words {
            let w = w.into();
            if index.contains_key(&w) {
                return Err(DataError::DuplicateSymbol(w));
            }
            index.insert(w.clone(), symbols.len() as u32);
            symbols.push(w);
        }
        Ok(Self { symbols, index })
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn unk_id(&self) -> u32 {
        0
    }

    pub fn eos_id(&self) -> u32 {
        self.index[EOS]
    }

    pub fn answer_marker_id(&self) -> u32 {
        self.index[MARK_ANSWER]
    }

    pub fn stage_marker_id(&self, stage: Stage) -> u32 {
        let sym = match stage {
            Stage::Planning => MARK_PLANNING,
            Stage::Caption => MARK_CAPTION,
            Stage::Reasoning => MARK_REASONING,
            Stage::Summary => MARK_SUMMARY,
            Stage::Answer => MARK_ANSWER,
        };
        self.index[sym]
    }

    /// Id of a word, or the reserved UNK id when absent.
    pub fn id_or_unk(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(0)
    }

    pub fn id_of(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn symbol(&self, id: u32) -> Option<&str> {
        self.symbols.get(id as usize).map(|s| s.as_str())
    }

    /// Encode whitespace-separated text; unknown words map to UNK.
    pub fn encode_text(&self, text: &str) -> Vec<u32> {
        text.split_whitespace().map(|w| self.id_or_unk(w)).collect()
    }

    /// Decode ids to a space-joined string; ids outside the table render as
    /// the UNK marker so decoding is total.
    pub fn decode_text(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for (i, &id) in ids.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            let _ = write!(out, "{}", self.symbol(id).unwrap_or(UNK));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(file, &self.symbols)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let file = std::fs::File::open(path)?;
        let symbols: Vec<String> = serde_json::from_reader(file)?;
        let mut index = HashMap::new();
        for (i, s) in symbols.iter().enumerate() {
            if index.insert(s.clone(), i as u32).is_some() {
                return Err(DataError::DuplicateSymbol(s.clone()));
            }
        }
        Ok(Self { symbols, index })
    }
}

/// Conditioning layout for tokenization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenizeMode {
    /// Audio tokens as AudioInput, question as TextPrompt.
    StudentAudio,
    /// Description plus question as TextPrompt; the audio-input set is empty.
    TeacherText,
}

/// Token ids with per-position roles. Positions labeled `AudioInput` form the
/// contiguous audio-input set; positions labeled `Output` form the predicted
/// set, and `output_targets` holds the id expected at each Output position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizedSample {
    pub tokens: Vec<u32>,
    pub roles: Vec<Role>,
    pub output_targets: Vec<u32>,
}

impl TokenizedSample {
    /// Positions labeled AudioInput (the audio-token set).
    pub fn audio_positions(&self) -> Vec<usize> {
        self.roles
            .iter()
            .enumerate()
            .filter(|(_, r)| **r == Role::AudioInput)
            .map(|(i, _)| i)
            .collect()
    }

    /// Positions labeled Output (the predicted set).
    pub fn output_positions(&self) -> Vec<usize> {
        self.roles
            .iter()
            .enumerate()
            .filter(|(_, r)| **r == Role::Output)
            .map(|(i, _)| i)
            .collect()
    }

    /// First Output position, if any.
    pub fn output_start(&self) -> Option<usize> {
        self.roles.iter().position(|r| *r == Role::Output)
    }

    pub fn output_len(&self) -> usize {
        self.output_targets.len()
    }

    /// Position whose logits predict output step `j` (the preceding position).
    pub fn prediction_position(&self, step: usize) -> Option<usize> {
        let start = self.output_start()?;
        if step >= self.output_len() || start + step == 0 {
            return None;
        }
        Some(start + step - 1)
    }

    /// The output token ids y (identical across the two modes of one record).
    pub fn output_tokens(&self) -> &[u32] {
        let start = self.output_start().unwrap_or(self.tokens.len());
        &self.tokens[start..]
    }

    /// Stage owning each output step, derived from the boundary markers.
    pub fn output_stage_tags(&self, vocab: &Vocab) -> Vec<Stage> {
        let mut stage = Stage::Planning;
        self.output_tokens()
            .iter()
            .map(|&id| {
                for s in Stage::ALL {
                    if id == vocab.stage_marker_id(s) {
                        stage = s;
                        break;
                    }
                }
                stage
            })
            .collect()
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.tokens.len() != self.roles.len() {
            return Err(DataError::InvalidSample("roles length differs from tokens"));
        }
        let outputs = self.output_positions();
        if outputs.len() != self.output_targets.len() {
            return Err(DataError::InvalidSample(
                "every output position needs a target id",
            ));
        }
        let audio = self.audio_positions();
        if let (Some(&first), Some(&last)) = (audio.first(), audio.last()) {
            if last - first + 1 != audio.len() {
                return Err(DataError::InvalidSample("audio positions not contiguous"));
            }
        }
        Ok(())
    }
}

fn encode_output(trace: &ReasoningTrace, answer: &str, vocab: &Vocab) -> Vec<u32> {
    let mut y = Vec::new();
    for (stage, (_, text)) in [
        Stage::Planning,
        Stage::Caption,
        Stage::Reasoning,
        Stage::Summary,
    ]
    .into_iter()
    .zip(trace.stages())
    {
        y.push(vocab.stage_marker_id(stage));
        y.extend(vocab.encode_text(text));
    }
    y.push(vocab.answer_marker_id());
    y.extend(vocab.encode_text(answer));
    y.push(vocab.eos_id());
    y
}

/// Tokenize an audio record for the student: audio ids, then the question,
/// then the trace-and-answer output sequence with next-token targets.
pub fn tokenize_student(record: &AudioRecord, vocab: &Vocab) -> Result<TokenizedSample, DataError> {
    record.validate()?;
    let mut tokens = record.audio.clone();
    let mut roles = vec![Role::AudioInput; tokens.len()];
    let question = vocab.encode_text(&record.question);
    roles.extend(std::iter::repeat_n(Role::TextPrompt, question.len()));
    tokens.extend(question);
    let y = encode_output(&record.trace, &record.answer, vocab);
    roles.extend(std::iter::repeat_n(Role::Output, y.len()));
    tokens.extend(y.iter().copied());
    Ok(TokenizedSample {
        tokens,
        roles,
        output_targets: y,
    })
}

/// Tokenize a text record for the teacher: description and question as the
/// prompt, no audio-input positions, and the same output sequence.
pub fn tokenize_teacher(record: &TextRecord, vocab: &Vocab) -> Result<TokenizedSample, DataError> {
    record.validate()?;
    let mut tokens = vocab.encode_text(&record.description);
    tokens.extend(vocab.encode_text(&record.question));
    let mut roles = vec![Role::TextPrompt; tokens.len()];
    let y = encode_output(&record.trace, &record.answer, vocab);
    roles.extend(std::iter::repeat_n(Role::Output, y.len()));
    tokens.extend(y.iter().copied());
    Ok(TokenizedSample {
        tokens,
        roles,
        output_targets: y,
    })
}

/// Re-segment an output token sequence into the four stage texts and the
/// answer. Returns None when the marker layout is broken.
pub fn parse_output(tokens: &[u32], vocab: &Vocab) -> Option<(ReasoningTrace, String)> {
    let marker_ids = [
        vocab.stage_marker_id(Stage::Planning),
        vocab.stage_marker_id(Stage::Caption),
        vocab.stage_marker_id(Stage::Reasoning),
        vocab.stage_marker_id(Stage::Summary),
        vocab.answer_marker_id(),
    ];
    let mut bounds = Vec::new();
    for id in marker_ids {
        bounds.push(tokens.iter().position(|&t| t == id)?);
    }
    if !bounds.windows(2).all(|w| w[0] < w[1]) {
        return None;
    }
    let end = tokens
        .iter()
        .position(|&t| t == vocab.eos_id())
        .unwrap_or(tokens.len());
    let seg = |from: usize, to: usize| vocab.decode_text(&tokens[from + 1..to]);
    let trace = ReasoningTrace {
        planning: seg(bounds[0], bounds[1]),
        caption: seg(bounds[1], bounds[2]),
        reasoning: seg(bounds[2], bounds[3]),
        summary: seg(bounds[3], bounds[4]),
    };
    let answer = seg(bounds[4], end.max(bounds[4] + 1));
    Some((trace, answer))
}

/// Rebuild the record text fields from a student-mode sample.
pub fn detokenize_student(sample: &TokenizedSample, vocab: &Vocab) -> Option<AudioRecord> {
    let audio: Vec<u32> = sample
        .audio_positions()
        .iter()
        .map(|&i| sample.tokens[i])
        .collect();
    let question_ids: Vec<u32> = sample
        .roles
        .iter()
        .zip(&sample.tokens)
        .filter(|(r, _)| **r == Role::TextPrompt)
        .map(|(_, &t)| t)
        .collect();
    let (trace, answer) = parse_output(sample.output_tokens(), vocab)?;
    Some(AudioRecord {
        audio,
        question: vocab.decode_text(&question_ids),
        trace,
        answer,
    })
}

/// Read JSONL records, one object per line. Blank lines are rejected as
/// malformed; every error carries its 1-based line number.
pub fn read_jsonl<T>(path: &Path) -> Result<Vec<T>, DataError>
where
    T: for<'de> Deserialize<'de> + Validated,
{
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let record: T =
            serde_json::from_str(&line).map_err(|source| DataError::MalformedLine {
                line: i + 1,
                source,
            })?;
        record.validate().map_err(|source| DataError::InvalidRecord {
            line: i + 1,
            source: Box::new(source),
        })?;
        records.push(record);
    }
    Ok(records)
}

/// Write records as JSONL; inverse of [`read_jsonl`] on valid records.
pub fn write_jsonl<T: Serialize>(records: &[T], path: &Path) -> Result<(), DataError> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut file, r)?;
        file.write_all(b"\n")?;
    }
    file.flush()?;
    Ok(())
}

/// Record types that carry their own invariant checks.
pub trait Validated {
    fn validate(&self) -> Result<(), DataError>;
}

impl Validated for AudioRecord {
    fn validate(&self) -> Result<(), DataError> {
        AudioRecord::validate(self)
    }
}

impl Validated for TextRecord {
    fn validate(&self) -> Result<(), DataError> {
        TextRecord::validate(self)
    }
}
