//! Append-only run metrics: per-step loss breakdowns and evaluation rows,
//! exported as JSONL plus a per-layer CSV for plotting.
//!
//! Wall-clock time is kept on the in-memory log only; the serialized files
//! contain nothing volatile, so identical configs and seeds produce
//! byte-identical logs.

use crate::losses::{LossBreakdown, LossWeights, Term};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

/// Batch-mean loss summary for one optimizer step, with per-layer
/// sub-tables for the hidden-state terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub top: f64,
    pub layer: f64,
    pub ac: f64,
    pub sft: f64,
    pub joint: f64,
    /// Batch-mean layer-wise KD sum per student layer.
    pub layer_table: Vec<(usize, f64)>,
    /// Batch-mean acoustic KD sum per student layer.
    pub ac_table: Vec<(usize, f64)>,
}

impl StepRecord {
    /// Average per-sample breakdowns into one step record.
    pub fn from_batch(step: usize, batch: &[LossBreakdown]) -> Self {
        let n = batch.len().max(1) as f64;
        let mut rec = StepRecord {
            step,
            top: batch.iter().map(|b| b.top_sum).sum::<f64>() / n,
            layer: batch.iter().map(|b| b.layer_sum).sum::<f64>() / n,
            ac: batch.iter().map(|b| b.ac_sum).sum::<f64>() / n,
            sft: batch.iter().map(|b| b.sft).sum::<f64>() / n,
            joint: batch.iter().map(|b| b.joint).sum::<f64>() / n,
            layer_table: Vec::new(),
            ac_table: Vec::new(),
        };
        for b in batch {
            for (layer, v) in b.per_layer_sums(Term::Layer) {
                accumulate(&mut rec.layer_table, layer, v / n);
            }
            for (layer, v) in b.per_layer_sums(Term::Acoustic) {
                accumulate(&mut rec.ac_table, layer, v / n);
            }
        }
        rec
    }
}

fn accumulate(table: &mut Vec<(usize, f64)>, layer: usize, v: f64) {
    match table.iter_mut().find(|(l, _)| *l == layer) {
        Some((_, acc)) => *acc += v,
        None => table.push((layer, v)),
    }
}

/// Accuracy and divergence diagnostics after an evaluation pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    /// Percent correct under generation-based scoring; absent when the
    /// config disabled generation.
    pub accuracy: Option<f64>,
    /// Mean per-class recall, percent.
    pub unweighted_accuracy: Option<f64>,
    /// Held-out mean per-output-step top-layer divergence to the teacher.
    pub mean_top_divergence: f64,
    /// Held-out mean acoustic KD per audio token against the snapshot of
    /// the initial student.
    pub mean_ac_per_audio_token: f64,
}

#[derive(Debug, Clone, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum LogLine<'a> {
    Config {
        config: &'a serde_json::Value,
        weights: &'a LossWeights,
    },
    Step(&'a StepRecord),
    Eval(&'a EvalRecord),
}

/// Per-step breakdowns, evaluation rows, wall-clock, and a config echo.
#[derive(Debug, Clone)]
pub struct MetricsLog {
    pub config_echo: serde_json::Value,
    pub weights: LossWeights,
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    /// Not serialized; reported on the console.
    pub wall_clock_secs: f64,
}

impl MetricsLog {
    pub fn new(config_echo: serde_json::Value, weights: LossWeights) -> Self {
        Self {
            config_echo,
            weights,
            steps: Vec::new(),
            evals: Vec::new(),
            wall_clock_secs: 0.0,
        }
    }

    /// Check that re-composing each logged step from its sub-tables and
    /// weights reproduces the logged joint to the stated tolerance.
    pub fn recomposition_error(&self) -> f64 {
        let w = self.weights;
        self.steps
            .iter()
            .map(|s| {
                let joint = s.top + w.alpha_layer * s.layer + w.alpha_ac * s.ac + w.alpha_sft * s.sft;
                (joint - s.joint).abs()
            })
            .fold(0.0, f64::max)
    }

    pub fn write_jsonl(&self, path: &Path) -> std::io::Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        let header = LogLine::Config {
            config: &self.config_echo,
            weights: &self.weights,
        };
        writeln!(f, "{}", serde_json::to_string(&header)?)?;
        for s in &self.steps {
            writeln!(f, "{}", serde_json::to_string(&LogLine::Step(s))?)?;
        }
        for e in &self.evals {
            writeln!(f, "{}", serde_json::to_string(&LogLine::Eval(e))?)?;
        }
        f.flush()
    }

    /// CSV with columns (step, layer, term, value) over training steps.
    pub fn write_steps_csv(&self, path: &Path) -> std::io::Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "step,layer,term,value")?;
        for s in &self.steps {
            writeln!(f, "{},,top,{}", s.step, s.top)?;
            writeln!(f, "{},,sft,{}", s.step, s.sft)?;
            writeln!(f, "{},,joint,{}", s.step, s.joint)?;
            for (layer, v) in &s.layer_table {
                writeln!(f, "{},{},layer,{}", s.step, layer, v)?;
            }
            for (layer, v) in &s.ac_table {
                writeln!(f, "{},{},acoustic,{}", s.step, layer, v)?;
            }
        }
        f.flush()
    }
}
