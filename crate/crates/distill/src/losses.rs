//! Assembles the distillation objective from forward traces: top-layer
//! distribution matching over the output span, projected hidden-state
//! matching at scheduled layers, hidden-state preservation at audio
//! positions against the frozen snapshot, and cross-entropy fine-tuning.
//! Every term is reported in an auditable per-step/per-layer breakdown, and
//! the differentiable path routes gradients into the student and the
//! projection bank while leaving teacher and snapshot untouched.
//!
//! Reductions over steps and layers are sums, matching the per-sequence
//! summation the losses are defined with; the batch dimension is averaged by
//! the caller.

use crate::align::{project, AlignError, LayerMap, LayerSchedule, ProjectionBank};
use crate::data::{Stage, TokenizedSample};
use crate::divergence::{
    divergence, divergence_grad, hidden_divergence, hidden_divergence_grad, Categorical,
    DivergenceError, DivergenceKind, HiddenLossKind,
};
use crate::model::{ForwardTrace, UpstreamGrads};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("teacher and student output lengths differ: {teacher} vs {student}")]
    MismatchedOutputLengths { teacher: usize, student: usize },
    #[error("no logits at position {0}")]
    MissingLogits(usize),
    #[error("output step {0} has no target")]
    MissingTarget(usize),
    #[error("layer map covers {expected} student layers but trace has {actual}")]
    MapMismatch { expected: usize, actual: usize },
    #[error("schedule selects layer {0} but the projection bank does not cover it")]
    ScheduleBankMismatch(usize),
    #[error("snapshot and student architectures differ: {0}")]
    ArchitectureMismatch(String),
    #[error("{0} input is required by the enabled loss terms")]
    MissingInput(&'static str),
    #[error("loss term {term:?} is non-finite at step {step}")]
    NonFinite { term: &'static str, step: usize },
    #[error(transparent)]
    Divergence(#[from] DivergenceError),
    #[error(transparent)]
    Align(#[from] AlignError),
}

/// Scaling coefficients of the joint objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha_layer: f64,
    pub alpha_ac: f64,
    pub alpha_sft: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha_layer: 0.05,
            alpha_ac: 0.05,
            alpha_sft: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        for (name, v) in [
            ("alpha_layer", self.alpha_layer),
            ("alpha_ac", self.alpha_ac),
            ("alpha_sft", self.alpha_sft),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(LossError::NonFinite {
                    term: match name {
                        "alpha_layer" => "alpha_layer",
                        "alpha_ac" => "alpha_ac",
                        _ => "alpha_sft",
                    },
                    step: 0,
                });
            }
        }
        Ok(())
    }
}

/// Which loss terms are active. Presets map onto these flags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TermFlags {
    pub top: bool,
    pub layer: bool,
    pub ac: bool,
    pub sft: bool,
}

/// One loss term in the breakdown tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Term {
    Top,
    Layer,
    Acoustic,
    Sft,
}

impl Term {
    pub fn name(&self) -> &'static str {
        match self {
            Term::Top => "top",
            Term::Layer => "layer",
            Term::Acoustic => "acoustic",
            Term::Sft => "sft",
        }
    }
}

/// One row of the per-step/per-layer sub-tables. For output-span terms
/// `step` is the output-step index; for acoustic terms it is the audio token
/// position in the student sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BreakdownEntry {
    pub step: usize,
    pub layer: Option<usize>,
    pub term: Term,
    pub value: f64,
}

/// Per-term decomposition of the joint objective. The scalar `joint` is
/// reproducible from the sub-tables: sum entries per term, apply weights.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub top_sum: f64,
    pub layer_sum: f64,
    pub ac_sum: f64,
    pub sft: f64,
    pub joint: f64,
    pub weights: Option<LossWeights>,
    pub entries: Vec<BreakdownEntry>,
    /// Per-reasoning-stage totals of the output-span terms (top plus
    /// weighted layer), when stage tags were supplied.
    pub stage_sums: Vec<(Stage, f64)>,
}

impl LossBreakdown {
    /// Re-derive each term sum from the entry table.
    pub fn resum(&self) -> (f64, f64, f64, f64) {
        let mut sums = [0.0f64; 4];
        for e in &self.entries {
            let idx = match e.term {
                Term::Top => 0,
                Term::Layer => 1,
                Term::Acoustic => 2,
                Term::Sft => 3,
            };
            sums[idx] += e.value;
        }
        (sums[0], sums[1], sums[2], sums[3])
    }

    /// Recompute the joint scalar from the entry table and stored weights.
    pub fn resum_joint(&self) -> f64 {
        let w = self.weights.unwrap_or_default();
        let (top, layer, ac, sft) = self.resum();
        top + w.alpha_layer * layer + w.alpha_ac * ac + w.alpha_sft * sft
    }

    /// Per-layer totals of a term, for step-level metrics logging.
    pub fn per_layer_sums(&self, term: Term) -> Vec<(usize, f64)> {
        let mut acc: Vec<(usize, f64)> = Vec::new();
        for e in self.entries.iter().filter(|e| e.term == term) {
            let Some(layer) = e.layer else { continue };
            match acc.iter_mut().find(|(l, _)| *l == layer) {
                Some((_, v)) => *v += e.value,
                None => acc.push((layer, e.value)),
            }
        }
        acc
    }

    /// CSV export with columns (step, layer, term, value); layer is empty
    /// for terms without a layer index.
    pub fn write_csv(&self, path: &std::path::Path) -> std::io::Result<()> {
        use std::io::Write;
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "step,layer,term,value")?;
        for e in &self.entries {
            let layer = e.layer.map(|l| l.to_string()).unwrap_or_default();
            writeln!(f, "{},{},{},{}", e.step, layer, e.term.name(), e.value)?;
        }
        f.flush()
    }
}

/// Gradient buffers for the projection bank, parallel to its layer list.
pub type BankGrads = Vec<Vec<f64>>;

/// Everything fixed across samples: term gating, weights, divergence
/// choices, and the layer correspondence.
#[derive(Debug, Clone)]
pub struct DistillSetup {
    pub flags: TermFlags,
    pub weights: LossWeights,
    pub kd: DivergenceKind,
    pub hidden: HiddenLossKind,
    pub map: LayerMap,
    pub schedule: LayerSchedule,
}

/// Traces and samples entering the joint loss for one record.
pub struct SamplePair<'a> {
    pub student_trace: &'a ForwardTrace,
    pub student_sample: &'a TokenizedSample,
    pub teacher_trace: Option<&'a ForwardTrace>,
    pub teacher_sample: Option<&'a TokenizedSample>,
    pub snapshot_trace: Option<&'a ForwardTrace>,
    pub stage_tags: Option<&'a [Stage]>,
}

fn logits_at<'t>(
    trace: &'t ForwardTrace,
    sample: &TokenizedSample,
    step: usize,
) -> Result<&'t Vec<f64>, LossError> {
    let pos = sample
        .prediction_position(step)
        .ok_or(LossError::MissingTarget(step))?;
    trace.logits[pos].as_ref().ok_or(LossError::MissingLogits(pos))
}

/// Top-layer distribution loss summed over output steps. Teacher and
/// student are aligned by output-step index relative to the start of the
/// shared target sequence, since their prompt lengths differ.
pub fn loss_top(
    kind: DivergenceKind,
    teacher_trace: &ForwardTrace,
    teacher_sample: &TokenizedSample,
    student_trace: &ForwardTrace,
    student_sample: &TokenizedSample,
) -> Result<Vec<f64>, LossError> {
    if teacher_sample.output_len() != student_sample.output_len() {
        return Err(LossError::MismatchedOutputLengths {
            teacher: teacher_sample.output_len(),
            student: student_sample.output_len(),
        });
    }
    let mut per_step = Vec::with_capacity(student_sample.output_len());
    for step in 0..student_sample.output_len() {
        let t_logits = logits_at(teacher_trace, teacher_sample, step)?;
        let s_logits = logits_at(student_trace, student_sample, step)?;
        per_step.push(divergence(
            kind,
            &Categorical::from_logits(t_logits),
            &Categorical::from_logits(s_logits),
        )?);
    }
    Ok(per_step)
}

/// Projected hidden-state loss over output steps and scheduled layers.
/// Returns (step, student_layer, value) triples.
#[allow(clippy::too_many_arguments)]
pub fn loss_layerwise(
    hidden_kind: HiddenLossKind,
    teacher_trace: &ForwardTrace,
    teacher_sample: &TokenizedSample,
    student_trace: &ForwardTrace,
    student_sample: &TokenizedSample,
    map: &LayerMap,
    schedule: &LayerSchedule,
    bank: &ProjectionBank,
) -> Result<Vec<(usize, usize, f64)>, LossError> {
    check_layerwise_shapes(teacher_trace, student_trace, map, schedule, bank)?;
    if teacher_sample.output_len() != student_sample.output_len() {
        return Err(LossError::MismatchedOutputLengths {
            teacher: teacher_sample.output_len(),
            student: student_sample.output_len(),
        });
    }
    let t_start = teacher_sample.output_start().unwrap_or(0);
    let s_start = student_sample.output_start().unwrap_or(0);
    let mut out = Vec::new();
    for step in 0..student_sample.output_len() {
        for &layer in schedule.selected() {
            let t_layer = map.teacher_layer(layer).expect("map covers layer");
            let h_teacher = &teacher_trace.hidden[t_layer - 1][t_start + step];
            let h_student = &student_trace.hidden[layer - 1][s_start + step];
            let projected = project(bank, layer, h_teacher)?;
            out.push((
                step,
                layer,
                hidden_divergence(hidden_kind, &projected, h_student)?,
            ));
        }
    }
    Ok(out)
}

fn check_layerwise_shapes(
    teacher_trace: &ForwardTrace,
    student_trace: &ForwardTrace,
    map: &LayerMap,
    schedule: &LayerSchedule,
    bank: &ProjectionBank,
) -> Result<(), LossError> {
    if map.student_layers != student_trace.hidden.len() {
        return Err(LossError::MapMismatch {
            expected: map.student_layers,
            actual: student_trace.hidden.len(),
        });
    }
    if map.teacher_layers != teacher_trace.hidden.len() {
        return Err(LossError::MapMismatch {
            expected: map.teacher_layers,
            actual: teacher_trace.hidden.len(),
        });
    }
    for &layer in schedule.selected() {
        if bank.matrix(layer).is_none() {
            return Err(LossError::ScheduleBankMismatch(layer));
        }
    }
    Ok(())
}

/// Hidden-state preservation at audio token positions, against the frozen
/// snapshot, summed over all student layers. No projection: the snapshot
/// shares the student's architecture. Returns (position, layer, value).
pub fn loss_acoustic(
    hidden_kind: HiddenLossKind,
    snapshot_trace: &ForwardTrace,
    student_trace: &ForwardTrace,
    student_sample: &TokenizedSample,
) -> Result<Vec<(usize, usize, f64)>, LossError> {
    if snapshot_trace.hidden.len() != student_trace.hidden.len() {
        return Err(LossError::ArchitectureMismatch(format!(
            "layer counts {} vs {}",
            snapshot_trace.hidden.len(),
            student_trace.hidden.len()
        )));
    }
    let mut out = Vec::new();
    for &pos in &student_sample.audio_positions() {
        for layer in 1..=student_trace.hidden.len() {
            let h_snap = &snapshot_trace.hidden[layer - 1][pos];
            let h_student = &student_trace.hidden[layer - 1][pos];
            if h_snap.len() != h_student.len() {
                return Err(LossError::ArchitectureMismatch(format!(
                    "hidden dims {} vs {}",
                    h_snap.len(),
                    h_student.len()
                )));
            }
            out.push((
                pos,
                layer,
                hidden_divergence(hidden_kind, h_snap, h_student)?,
            ));
        }
    }
    Ok(out)
}

/// Cross-entropy of the student against the output targets, summed over
/// output steps.
pub fn loss_sft(
    student_trace: &ForwardTrace,
    student_sample: &TokenizedSample,
) -> Result<Vec<f64>, LossError> {
    let mut per_step = Vec::with_capacity(student_sample.output_len());
    for (step, &target) in student_sample.output_targets.iter().enumerate() {
        let logits = logits_at(student_trace, student_sample, step)?;
        let probs = crate::divergence::softmax(logits);
        let p = probs[target as usize];
        // Underflow floors at a large finite loss; NaN has to surface.
        per_step.push(if p.is_nan() { f64::NAN } else { -p.max(1e-300).ln() });
    }
    Ok(per_step)
}

/// Output-span objective: top-layer sum plus the weighted layer-wise sum.
/// The skip-layer variant is the same composition with a sparser schedule;
/// there is no separate code path.
pub fn loss_txt(top_sum: f64, layer_sum: f64, alpha_layer: f64) -> f64 {
    top_sum + alpha_layer * layer_sum
}

/// Raw (unweighted) term sums entering the joint objective.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct JointParts {
    pub top_sum: f64,
    pub layer_sum: f64,
    pub ac_sum: f64,
    pub sft: f64,
}

/// Weighted total: txt + alpha_ac * ac + alpha_sft * sft.
pub fn loss_joint(parts: JointParts, weights: LossWeights) -> f64 {
    loss_txt(parts.top_sum, parts.layer_sum, weights.alpha_layer)
        + weights.alpha_ac * parts.ac_sum
        + weights.alpha_sft * parts.sft
}

fn finite_or(term: &'static str, step: usize, v: f64) -> Result<f64, LossError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(LossError::NonFinite { term, step })
    }
}

/// Forward-only evaluation of the enabled terms into a breakdown.
pub fn evaluate_joint(
    setup: &DistillSetup,
    bank: Option<&ProjectionBank>,
    pair: &SamplePair,
) -> Result<LossBreakdown, LossError> {
    let (breakdown, _, _) = assemble(setup, bank, pair, false)?;
    Ok(breakdown)
}

/// Differentiable evaluation: the breakdown plus the gradients of the joint
/// scalar w.r.t. the student's logits and hidden states and w.r.t. the
/// projection matrices. Teacher and snapshot sides contribute no gradients.
pub fn joint_with_grads(
    setup: &DistillSetup,
    bank: Option<&ProjectionBank>,
    pair: &SamplePair,
) -> Result<(LossBreakdown, UpstreamGrads, Option<BankGrads>), LossError> {
    let (breakdown, upstream, bank_grads) = assemble(setup, bank, pair, true)?;
    Ok((breakdown, upstream.expect("grads requested"), bank_grads))
}

fn assemble(
    setup: &DistillSetup,
    bank: Option<&ProjectionBank>,
    pair: &SamplePair,
    want_grads: bool,
) -> Result<(LossBreakdown, Option<UpstreamGrads>, Option<BankGrads>), LossError> {
    setup.weights.validate()?;
    let student_trace = pair.student_trace;
    let student_sample = pair.student_sample;
    let t_len = student_trace.logits.len();
    let mut upstream = want_grads.then(|| UpstreamGrads {
        d_logits: vec![None; t_len],
        d_hidden: student_trace
            .hidden
            .iter()
            .map(|layer| layer.iter().map(|h| vec![0.0; h.len()]).collect())
            .collect(),
    });
    let mut bank_grads = (want_grads && setup.flags.layer).then(|| {
        bank.map(|b| b.zero_grads()).unwrap_or_default()
    });
    let mut entries = Vec::new();
    let mut parts = JointParts::default();
    let mut stage_acc: Vec<(Stage, f64)> = Stage::ALL.iter().map(|s| (*s, 0.0)).collect();
    let add_stage = |tags: Option<&[Stage]>, step: usize, v: f64, acc: &mut Vec<(Stage, f64)>| {
        if let Some(tags) = tags {
            if let Some(tag) = tags.get(step) {
                if let Some((_, sum)) = acc.iter_mut().find(|(s, _)| s == tag) {
                    *sum += v;
                }
            }
        }
    };

    if setup.flags.top || setup.flags.layer {
        let teacher_trace = pair
            .teacher_trace
            .ok_or(LossError::MissingInput("teacher trace"))?;
        let teacher_sample = pair
            .teacher_sample
            .ok_or(LossError::MissingInput("teacher sample"))?;

        if setup.flags.top {
            let per_step = loss_top(
                setup.kd,
                teacher_trace,
                teacher_sample,
                student_trace,
                student_sample,
            )?;
            for (step, &v) in per_step.iter().enumerate() {
                finite_or("top", step, v)?;
                parts.top_sum += v;
                add_stage(pair.stage_tags, step, v, &mut stage_acc);
                entries.push(BreakdownEntry {
                    step,
                    layer: None,
                    term: Term::Top,
                    value: v,
                });
            }
            if let Some(up) = upstream.as_mut() {
                for step in 0..student_sample.output_len() {
                    let t_logits = logits_at(teacher_trace, teacher_sample, step)?;
                    let s_logits = logits_at(student_trace, student_sample, step)?;
                    let (_, d_student) = divergence_grad(setup.kd, t_logits, s_logits)?;
                    let pos = student_sample.prediction_position(step).unwrap();
                    up.add_logit_grad(pos, &d_student);
                }
            }
        }

        if setup.flags.layer {
            let bank = bank.ok_or(LossError::MissingInput("projection bank"))?;
            let triples = loss_layerwise(
                setup.hidden,
                teacher_trace,
                teacher_sample,
                student_trace,
                student_sample,
                &setup.map,
                &setup.schedule,
                bank,
            )?;
            for &(step, layer, v) in &triples {
                finite_or("layer", step, v)?;
                parts.layer_sum += v;
                add_stage(
                    pair.stage_tags,
                    step,
                    setup.weights.alpha_layer * v,
                    &mut stage_acc,
                );
                entries.push(BreakdownEntry {
                    step,
                    layer: Some(layer),
                    term: Term::Layer,
                    value: v,
                });
            }
            if let Some(up) = upstream.as_mut() {
                let bg = bank_grads.as_mut().expect("bank grads allocated");
                let t_start = teacher_sample.output_start().unwrap_or(0);
                let s_start = student_sample.output_start().unwrap_or(0);
                let alpha = setup.weights.alpha_layer;
                for step in 0..student_sample.output_len() {
                    for &layer in setup.schedule.selected() {
                        let t_layer = setup.map.teacher_layer(layer).expect("mapped");
                        let h_teacher = &teacher_trace.hidden[t_layer - 1][t_start + step];
                        let h_student = &student_trace.hidden[layer - 1][s_start + step];
                        let projected = project(bank, layer, h_teacher)?;
                        let (d_proj, d_student) =
                            hidden_divergence_grad(setup.hidden, &projected, h_student)?;
                        let d_proj_scaled: Vec<f64> =
                            d_proj.iter().map(|g| alpha * g).collect();
                        bank.accumulate_grad(bg, layer, &d_proj_scaled, h_teacher);
                        let d_student_scaled: Vec<f64> =
                            d_student.iter().map(|g| alpha * g).collect();
                        up.add_hidden_grad(layer, s_start + step, &d_student_scaled);
                    }
                }
            }
        }
    }

    if setup.flags.ac {
        let snapshot_trace = pair
            .snapshot_trace
            .ok_or(LossError::MissingInput("snapshot trace"))?;
        let triples = loss_acoustic(setup.hidden, snapshot_trace, student_trace, student_sample)?;
        for &(pos, layer, v) in &triples {
            finite_or("acoustic", pos, v)?;
            parts.ac_sum += v;
            entries.push(BreakdownEntry {
                step: pos,
                layer: Some(layer),
                term: Term::Acoustic,
                value: v,
            });
        }
        if let Some(up) = upstream.as_mut() {
            let alpha = setup.weights.alpha_ac;
            for &pos in &student_sample.audio_positions() {
                for layer in 1..=student_trace.hidden.len() {
                    let h_snap = &snapshot_trace.hidden[layer - 1][pos];
                    let h_student = &student_trace.hidden[layer - 1][pos];
                    let (_, d_student) =
                        hidden_divergence_grad(setup.hidden, h_snap, h_student)?;
                    let scaled: Vec<f64> = d_student.iter().map(|g| alpha * g).collect();
                    up.add_hidden_grad(layer, pos, &scaled);
                }
            }
        }
    }

    if setup.flags.sft {
        let per_step = loss_sft(student_trace, student_sample)?;
        for (step, &v) in per_step.iter().enumerate() {
            finite_or("sft", step, v)?;
            parts.sft += v;
            entries.push(BreakdownEntry {
                step,
                layer: None,
                term: Term::Sft,
                value: v,
            });
        }
        if let Some(up) = upstream.as_mut() {
            let alpha = setup.weights.alpha_sft;
            for (step, &target) in student_sample.output_targets.iter().enumerate() {
                let logits = logits_at(student_trace, student_sample, step)?;
                let mut d = crate::divergence::softmax(logits);
                d[target as usize] -= 1.0;
                for g in d.iter_mut() {
                    *g *= alpha;
                }
                let pos = student_sample.prediction_position(step).unwrap();
                up.add_logit_grad(pos, &d);
            }
        }
    }

    let joint = loss_joint(parts, setup.weights);
    finite_or("joint", 0, joint)?;
    let stage_sums = if pair.stage_tags.is_some() {
        stage_acc
    } else {
        Vec::new()
    };
    let breakdown = LossBreakdown {
        top_sum: parts.top_sum,
        layer_sum: parts.layer_sum,
        ac_sum: parts.ac_sum,
        sft: parts.sft,
        joint,
        weights: Some(setup.weights),
        entries,
        stage_sums,
    };
    Ok((breakdown, upstream, bank_grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::align::{build_layer_map, build_schedule, ProjectionBank, ScheduleKind};
    use crate::data::Role;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Hand-built sample: `audio` audio ids, one prompt token, then outputs.
    fn fake_sample(audio: usize, outputs: usize) -> TokenizedSample {
        let mut tokens = Vec::new();
        let mut roles = Vec::new();
        for i in 0..audio {
            tokens.push(i as u32);
            roles.push(Role::AudioInput);
        }
        tokens.push(50);
        roles.push(Role::TextPrompt);
        let targets: Vec<u32> = (0..outputs as u32).collect();
        for &t in &targets {
            tokens.push(t);
            roles.push(Role::Output);
        }
        TokenizedSample {
            tokens,
            roles,
            output_targets: targets,
        }
    }

    /// Trace with the given layer count, hidden dim, and logits at the
    /// prediction positions of `sample`.
    fn fake_trace(
        sample: &TokenizedSample,
        layers: usize,
        dim: usize,
        vocab: usize,
        rng: &mut ChaCha8Rng,
    ) -> ForwardTrace {
        let t_len = sample.tokens.len();
        let hidden = (0..layers)
            .map(|_| {
                (0..t_len)
                    .map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
                    .collect()
            })
            .collect();
        let mut logits = vec![None; t_len];
        for step in 0..sample.output_len() {
            let pos = sample.prediction_position(step).unwrap();
            logits[pos] = Some((0..vocab).map(|_| rng.gen_range(-2.0..2.0)).collect());
        }
        ForwardTrace { hidden, logits }
    }

    #[test]
    fn top_loss_is_zero_when_traces_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = fake_sample(2, 4);
        let trace = fake_trace(&s, 2, 4, 6, &mut rng);
        let per_step =
            loss_top(DivergenceKind::Jsd, &trace, &s, &trace, &s).unwrap();
        assert!(per_step.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn top_loss_single_step_disjoint_distributions_is_ln_two() {
        let s = fake_sample(1, 1);
        let mut teacher = fake_trace(&s, 1, 2, 2, &mut ChaCha8Rng::seed_from_u64(2));
        let mut student = teacher.clone();
        let pos = s.prediction_position(0).unwrap();
        teacher.logits[pos] = Some(vec![60.0, -60.0]);
        student.logits[pos] = Some(vec![-60.0, 60.0]);
        let per_step =
            loss_top(DivergenceKind::Jsd, &teacher, &s, &student, &s).unwrap();
        assert!((per_step[0] - std::f64::consts::LN_2).abs() < 1e-9);
    }

    #[test]
    fn top_loss_sums_independent_per_step_divergences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = fake_sample(2, 3);
        let teacher = fake_trace(&s, 1, 4, 7, &mut rng);
        let student = fake_trace(&s, 1, 4, 7, &mut rng);
        let per_step =
            loss_top(DivergenceKind::Jsd, &teacher, &s, &student, &s).unwrap();
        assert_eq!(per_step.len(), 3);
        for (step, &v) in per_step.iter().enumerate() {
            let pos = s.prediction_position(step).unwrap();
            let oracle = divergence(
                DivergenceKind::Jsd,
                &Categorical::from_logits(teacher.logits[pos].as_ref().unwrap()),
                &Categorical::from_logits(student.logits[pos].as_ref().unwrap()),
            )
            .unwrap();
            assert_eq!(v, oracle);
        }
    }

    #[test]
    fn mismatched_output_lengths_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s1 = fake_sample(1, 3);
        let s2 = fake_sample(1, 4);
        let t1 = fake_trace(&s1, 1, 4, 5, &mut rng);
        let t2 = fake_trace(&s2, 1, 4, 5, &mut rng);
        assert!(matches!(
            loss_top(DivergenceKind::Jsd, &t1, &s1, &t2, &s2),
            Err(LossError::MismatchedOutputLengths { teacher: 3, student: 4 })
        ));
    }

    fn layerwise_fixture(
        student_layers: usize,
        teacher_layers: usize,
        d_s: usize,
        d_t: usize,
        outputs: usize,
        seed: u64,
    ) -> (
        TokenizedSample,
        ForwardTrace,
        ForwardTrace,
        LayerMap,
        ProjectionBank,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = fake_sample(2, outputs);
        let teacher = fake_trace(&s, teacher_layers, d_t, 5, &mut rng);
        let student = fake_trace(&s, student_layers, d_s, 5, &mut rng);
        let map = build_layer_map(student_layers, teacher_layers).unwrap();
        let schedule = build_schedule(ScheduleKind::All, student_layers).unwrap();
        let bank = ProjectionBank::init(&schedule, d_s, d_t, seed);
        (s, teacher, student, map, bank)
    }

    #[test]
    fn layerwise_empty_schedule_contributes_nothing() {
        let (s, teacher, student, map, bank) = layerwise_fixture(3, 4, 4, 6, 2, 5);
        let schedule = build_schedule(ScheduleKind::TopOnly, 3).unwrap();
        let triples = loss_layerwise(
            HiddenLossKind::SoftmaxJsd,
            &teacher,
            &s,
            &student,
            &s,
            &map,
            &schedule,
            &bank,
        )
        .unwrap();
        assert!(triples.is_empty());
    }

    #[test]
    fn layerwise_identity_projection_with_matching_hiddens_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = fake_sample(1, 2);
        let teacher = fake_trace(&s, 2, 4, 5, &mut rng);
        let student = ForwardTrace {
            hidden: teacher.hidden.clone(),
            logits: fake_trace(&s, 2, 4, 5, &mut rng).logits,
        };
        let map = build_layer_map(2, 2).unwrap();
        let schedule = build_schedule(ScheduleKind::All, 2).unwrap();
        let bank = ProjectionBank::init(&schedule, 4, 4, 0);
        let triples = loss_layerwise(
            HiddenLossKind::SoftmaxJsd,
            &teacher,
            &s,
            &student,
            &s,
            &map,
            &schedule,
            &bank,
        )
        .unwrap();
        assert!(triples.iter().all(|&(_, _, v)| v == 0.0));
    }

    #[test]
    fn skip_schedule_equals_subset_of_all_breakdown() {
        // 28-layer student, 36-layer teacher, as in the layer-map anchors.
        let (s, teacher, student, map, bank) = layerwise_fixture(28, 36, 4, 6, 2, 7);
        let all = build_schedule(ScheduleKind::All, 28).unwrap();
        let skip = build_schedule(ScheduleKind::OneInK(7), 28).unwrap();
        let all_triples = loss_layerwise(
            HiddenLossKind::SoftmaxJsd,
            &teacher,
            &s,
            &student,
            &s,
            &map,
            &all,
            &bank,
        )
        .unwrap();
        let skip_triples = loss_layerwise(
            HiddenLossKind::SoftmaxJsd,
            &teacher,
            &s,
            &student,
            &s,
            &map,
            &skip,
            &bank,
        )
        .unwrap();
        let skip_sum: f64 = skip_triples.iter().map(|&(_, _, v)| v).sum();
        let subset_sum: f64 = all_triples
            .iter()
            .filter(|&&(_, l, _)| [7, 14, 21, 28].contains(&l))
            .map(|&(_, _, v)| v)
            .sum();
        assert!((skip_sum - subset_sum).abs() <= 1e-12);
    }

    #[test]
    fn acoustic_loss_is_zero_when_student_equals_snapshot() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s = fake_sample(3, 2);
        let student = fake_trace(&s, 2, 4, 5, &mut rng);
        let triples =
            loss_acoustic(HiddenLossKind::SoftmaxJsd, &student, &student, &s).unwrap();
        assert_eq!(triples.len(), 3 * 2);
        assert!(triples.iter().all(|&(_, _, v)| v == 0.0));
    }

    #[test]
    fn acoustic_loss_empty_audio_is_empty_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut s = fake_sample(1, 2);
        // Relabel the audio position as prompt: a teacher-text style sample.
        s.roles[0] = Role::TextPrompt;
        let a = fake_trace(&s, 2, 4, 5, &mut rng);
        let b = fake_trace(&s, 2, 4, 5, &mut rng);
        let triples = loss_acoustic(HiddenLossKind::SoftmaxJsd, &a, &b, &s).unwrap();
        assert!(triples.is_empty());
    }

    #[test]
    fn acoustic_loss_matches_per_term_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let s = fake_sample(2, 1);
        let snap = fake_trace(&s, 2, 4, 5, &mut rng);
        let student = fake_trace(&s, 2, 4, 5, &mut rng);
        let triples =
            loss_acoustic(HiddenLossKind::SoftmaxJsd, &snap, &student, &s).unwrap();
        assert_eq!(triples.len(), 4);
        let total: f64 = triples.iter().map(|&(_, _, v)| v).sum();
        let mut oracle = 0.0;
        for pos in 0..2 {
            for layer in 0..2 {
                oracle += hidden_divergence(
                    HiddenLossKind::SoftmaxJsd,
                    &snap.hidden[layer][pos],
                    &student.hidden[layer][pos],
                )
                .unwrap();
            }
        }
        assert!((total - oracle).abs() < 1e-15);
    }

    #[test]
    fn acoustic_architecture_mismatch_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s = fake_sample(2, 1);
        let snap = fake_trace(&s, 3, 4, 5, &mut rng);
        let student = fake_trace(&s, 2, 4, 5, &mut rng);
        assert!(matches!(
            loss_acoustic(HiddenLossKind::SoftmaxJsd, &snap, &student, &s),
            Err(LossError::ArchitectureMismatch(_))
        ));
    }

    #[test]
    fn sft_perfect_prediction_is_zero() {
        let s = fake_sample(1, 2);
        let mut trace = fake_trace(&s, 1, 2, 4, &mut ChaCha8Rng::seed_from_u64(12));
        for step in 0..s.output_len() {
            let pos = s.prediction_position(step).unwrap();
            let target = s.output_targets[step] as usize;
            let mut logits = vec![-2000.0; 4];
            logits[target] = 2000.0;
            trace.logits[pos] = Some(logits);
        }
        let per_step = loss_sft(&trace, &s).unwrap();
        assert!(per_step.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sft_uniform_student_is_steps_times_log_vocab() {
        let vocab = 64;
        let s = fake_sample(1, 3);
        let mut trace = fake_trace(&s, 1, 2, vocab, &mut ChaCha8Rng::seed_from_u64(13));
        for step in 0..s.output_len() {
            let pos = s.prediction_position(step).unwrap();
            trace.logits[pos] = Some(vec![0.25; vocab]);
        }
        let total: f64 = loss_sft(&trace, &s).unwrap().iter().sum();
        let expected = 3.0 * (vocab as f64).ln();
        assert!((expected - 12.4766).abs() < 1e-3);
        assert!((total - expected).abs() < 1e-9);
    }

    #[test]
    fn sft_matches_direct_oracle_on_random_trace() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let s = fake_sample(2, 4);
        let trace = fake_trace(&s, 1, 2, 9, &mut rng);
        let total: f64 = loss_sft(&trace, &s).unwrap().iter().sum();
        let mut oracle = 0.0;
        for (step, &target) in s.output_targets.iter().enumerate() {
            let pos = s.prediction_position(step).unwrap();
            let probs = crate::divergence::softmax(trace.logits[pos].as_ref().unwrap());
            oracle -= probs[target as usize].ln();
        }
        assert!((total - oracle).abs() < 1e-12);
    }

    #[test]
    fn txt_composition_and_joint_arithmetic() {
        assert_eq!(loss_txt(2.0, 10.0, 0.0), 2.0);
        assert_eq!(loss_txt(2.0, 10.0, 0.05), 2.5);
        // Doubling alpha_layer doubles the layer contribution.
        let base = loss_txt(2.0, 10.0, 0.05) - 2.0;
        let doubled = loss_txt(2.0, 10.0, 0.10) - 2.0;
        assert!((doubled - 2.0 * base).abs() < 1e-12);

        let parts = JointParts {
            top_sum: 2.0,
            layer_sum: 10.0,
            ac_sum: 4.0,
            sft: 3.0,
        };
        let weights = LossWeights::default();
        assert!((loss_joint(parts, weights) - 4.2).abs() < 1e-12);

        let zero = LossWeights {
            alpha_layer: 0.0,
            alpha_ac: 0.0,
            alpha_sft: 0.0,
        };
        let silent = JointParts {
            top_sum: 0.0,
            layer_sum: 5.0,
            ac_sum: 5.0,
            sft: 5.0,
        };
        assert_eq!(loss_joint(silent, zero), 0.0);
    }

    #[test]
    fn joint_is_linear_in_each_alpha() {
        let parts = JointParts {
            top_sum: 1.2,
            layer_sum: 3.4,
            ac_sum: 0.7,
            sft: 2.1,
        };
        let base = LossWeights::default();
        for pick in 0..3 {
            let with = |f: f64| {
                let mut w = base;
                match pick {
                    0 => w.alpha_layer *= f,
                    1 => w.alpha_ac *= f,
                    _ => w.alpha_sft *= f,
                }
                loss_joint(parts, w)
            };
            let lhs = with(2.0) - with(1.0);
            let rhs = with(1.0) - with(0.0);
            assert!((lhs - rhs).abs() < 1e-12, "alpha #{pick} not linear");
        }
    }

    #[test]
    fn breakdown_entries_recompose_the_joint() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let s = fake_sample(2, 3);
        let teacher = fake_trace(&s, 3, 6, 8, &mut rng);
        let student = fake_trace(&s, 2, 4, 8, &mut rng);
        let snapshot = fake_trace(&s, 2, 4, 8, &mut rng);
        let map = build_layer_map(2, 3).unwrap();
        let schedule = build_schedule(ScheduleKind::All, 2).unwrap();
        let bank = ProjectionBank::init(&schedule, 4, 6, 1);
        let setup = DistillSetup {
            flags: TermFlags {
                top: true,
                layer: true,
                ac: true,
                sft: true,
            },
            weights: LossWeights::default(),
            kd: DivergenceKind::Jsd,
            hidden: HiddenLossKind::SoftmaxJsd,
            map,
            schedule,
        };
        let pair = SamplePair {
            student_trace: &student,
            student_sample: &s,
            teacher_trace: Some(&teacher),
            teacher_sample: Some(&s),
            snapshot_trace: Some(&snapshot),
            stage_tags: None,
        };
        let breakdown = evaluate_joint(&setup, Some(&bank), &pair).unwrap();
        let (top, layer, ac, sft) = breakdown.resum();
        assert!((top - breakdown.top_sum).abs() < 1e-9);
        assert!((layer - breakdown.layer_sum).abs() < 1e-9);
        assert!((ac - breakdown.ac_sum).abs() < 1e-9);
        assert!((sft - breakdown.sft).abs() < 1e-9);
        assert!((breakdown.resum_joint() - breakdown.joint).abs() < 1e-9);
        assert!(breakdown.joint > 0.0);
    }

    #[test]
    fn disabled_terms_are_exactly_zero_with_no_entries() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let s = fake_sample(2, 2);
        let student = fake_trace(&s, 2, 4, 6, &mut rng);
        let setup = DistillSetup {
            flags: TermFlags {
                top: false,
                layer: false,
                ac: false,
                sft: true,
            },
            weights: LossWeights::default(),
            kd: DivergenceKind::Jsd,
            hidden: HiddenLossKind::SoftmaxJsd,
            map: build_layer_map(2, 3).unwrap(),
            schedule: build_schedule(ScheduleKind::All, 2).unwrap(),
        };
        let pair = SamplePair {
            student_trace: &student,
            student_sample: &s,
            teacher_trace: None,
            teacher_sample: None,
            snapshot_trace: None,
            stage_tags: None,
        };
        let breakdown = evaluate_joint(&setup, None, &pair).unwrap();
        assert_eq!(breakdown.top_sum, 0.0);
        assert_eq!(breakdown.layer_sum, 0.0);
        assert_eq!(breakdown.ac_sum, 0.0);
        assert!(breakdown.sft > 0.0);
        assert!(breakdown
            .entries
            .iter()
            .all(|e| e.term == Term::Sft));
    }

    #[test]
    fn stage_sums_partition_the_output_span_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let s = fake_sample(1, 5);
        let teacher = fake_trace(&s, 2, 4, 6, &mut rng);
        let student = fake_trace(&s, 2, 4, 6, &mut rng);
        let map = build_layer_map(2, 2).unwrap();
        let schedule = build_schedule(ScheduleKind::All, 2).unwrap();
        let bank = ProjectionBank::init(&schedule, 4, 4, 2);
        let setup = DistillSetup {
            flags: TermFlags {
                top: true,
                layer: true,
                ac: false,
                sft: false,
            },
            weights: LossWeights::default(),
            kd: DivergenceKind::Jsd,
            hidden: HiddenLossKind::SoftmaxJsd,
            map,
            schedule,
        };
        // Tag the five output steps across stages.
        let tags = [
            Stage::Planning,
            Stage::Caption,
            Stage::Reasoning,
            Stage::Summary,
            Stage::Answer,
        ];
        let pair = SamplePair {
            student_trace: &student,
            student_sample: &s,
            teacher_trace: Some(&teacher),
            teacher_sample: Some(&s),
            snapshot_trace: None,
            stage_tags: Some(&tags),
        };
        let breakdown = evaluate_joint(&setup, Some(&bank), &pair).unwrap();
        assert_eq!(breakdown.stage_sums.len(), Stage::ALL.len());
        let total: f64 = breakdown.stage_sums.iter().map(|(_, v)| v).sum();
        let txt = loss_txt(
            breakdown.top_sum,
            breakdown.layer_sum,
            setup.weights.alpha_layer,
        );
        assert!((total - txt).abs() < 1e-9, "stage sums {total} vs txt {txt}");
    }

    #[test]
    fn csv_export_has_the_documented_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let s = fake_sample(1, 2);
        let student = fake_trace(&s, 1, 2, 4, &mut rng);
        let setup = DistillSetup {
            flags: TermFlags {
                top: false,
                layer: false,
                ac: false,
                sft: true,
            },
            weights: LossWeights::default(),
            kd: DivergenceKind::Jsd,
            hidden: HiddenLossKind::SoftmaxJsd,
            map: build_layer_map(1, 1).unwrap(),
            schedule: build_schedule(ScheduleKind::TopOnly, 1).unwrap(),
        };
        let pair = SamplePair {
            student_trace: &student,
            student_sample: &s,
            teacher_trace: None,
            teacher_sample: None,
            snapshot_trace: None,
            stage_tags: None,
        };
        let breakdown = evaluate_joint(&setup, None, &pair).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("breakdown.csv");
        breakdown.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "step,layer,term,value");
        assert_eq!(lines.count(), breakdown.entries.len());
    }
}
