//! Source-wise and layer-wise knowledge distillation for small decoder
//! transformers.
//!
//! The crate trains a student model that consumes opaque audio tokens under
//! two complementary teachers: a text-only teacher supervising token
//! distributions and projected hidden states over the output span, and a
//! frozen snapshot of the student itself preserving hidden states at the
//! audio positions. A synthetic multiple-choice task, a textualization
//! pipeline, and a training/evaluation harness make the whole loop runnable
//! on a laptop.
//!
//! Start with the runnable examples:
//!
//! ```text
//! cargo run --release --example divergence_zoo
//! cargo run --release --example layer_alignment
//! cargo run --release --example synthetic_data
//! cargo run --release --example textualize
//! cargo run --release --example gradient_check
//! cargo run --release --example sampling_decode
//! cargo run --release --example train_distillation
//! cargo run --release --example preset_comparison
//! ```
//!
//! The same functionality is scriptable through the thin `distill` binary
//! (`gen-synth`, `textualize`, `run`, `eval` subcommands).

pub mod align;
pub mod data;
pub mod divergence;
pub mod harness;
pub mod losses;
pub mod model;
pub mod pipeline;

pub use align::{build_layer_map, build_schedule, LayerMap, LayerSchedule, ProjectionBank, ScheduleKind};
pub use data::{AudioRecord, ReasoningTrace, Role, Stage, TextRecord, TokenizedSample, Vocab};
pub use divergence::{divergence, hidden_divergence, Categorical, DivergenceKind, HiddenLossKind};
pub use losses::{LossBreakdown, LossWeights};
pub use model::{sample_next, Model, ModelSpec, SamplingParams};
pub use pipeline::{gen_synthetic, textualize, DescriptionClient, MockDeterministic};
