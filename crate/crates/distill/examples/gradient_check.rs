//! Finite-difference verification of the full joint objective on a tiny
//! model pair: every student parameter and every projection matrix entry is
//! perturbed and compared against the analytic reverse-mode gradient.

use distill::align::{build_layer_map, build_schedule, ProjectionBank, ScheduleKind};
use distill::data::{tokenize_student, tokenize_teacher, AudioRecord, ReasoningTrace, TextRecord, Vocab};
use distill::divergence::{DivergenceKind, HiddenLossKind};
use distill::losses::{evaluate_joint, joint_with_grads, DistillSetup, LossWeights, SamplePair, TermFlags};
use distill::model::{Model, ModelSpec};

#[allow(clippy::needless_range_loop)]
fn main() -> anyhow::Result<()> {
    let vocab = Vocab::new("a b c d e f g h i j".split_whitespace())?;
    let record = AudioRecord {
        audio: vec![7, 8, 9],
        question: "a b".into(),
        trace: ReasoningTrace {
            planning: "c".into(),
            caption: "d e".into(),
            reasoning: "f".into(),
            summary: "g".into(),
        },
        answer: "h".into(),
    };
    let text = TextRecord {
        description: "i j".into(),
        question: record.question.clone(),
        trace: record.trace.clone(),
        answer: record.answer.clone(),
    };
    let s_sample = tokenize_student(&record, &vocab)?;
    let t_sample = tokenize_teacher(&text, &vocab)?;

    let mut student = Model::new(ModelSpec {
        layers: 2,
        hidden_dim: 8,
        heads: 2,
        vocab_size: 17,
        max_seq: 32,
        seed: 1,
    })?;
    let teacher = Model::new(ModelSpec {
        layers: 3,
        hidden_dim: 12,
        heads: 2,
        vocab_size: 17,
        max_seq: 32,
        seed: 2,
    })?;
    let snapshot = Model::new(ModelSpec { seed: 3, ..student.spec })?.snapshot();
    // Larger weights keep every gradient well above finite-difference noise.
    for (name, tensor) in student.params.named_mut() {
        if !name.ends_with("norm") {
            tensor.iter_mut().for_each(|v| *v *= 6.0);
        }
    }

    let schedule = build_schedule(ScheduleKind::All, student.spec.layers)?;
    let mut bank = ProjectionBank::init(&schedule, 8, 12, 5);
    let setup = DistillSetup {
        flags: TermFlags { top: true, layer: true, ac: true, sft: true },
        weights: LossWeights::default(),
        kd: DivergenceKind::Jsd,
        hidden: HiddenLossKind::SoftmaxJsd,
        map: build_layer_map(student.spec.layers, teacher.spec.layers)?,
        schedule,
    };

    let t_trace = teacher.forward(&t_sample)?;
    let snap_trace = snapshot.forward(&s_sample)?;
    let joint_of = |student: &Model, bank: &ProjectionBank| -> f64 {
        let s_trace = student.forward(&s_sample).unwrap();
        let pair = SamplePair {
            student_trace: &s_trace,
            student_sample: &s_sample,
            teacher_trace: Some(&t_trace),
            teacher_sample: Some(&t_sample),
            snapshot_trace: Some(&snap_trace),
            stage_tags: None,
        };
        evaluate_joint(&setup, Some(bank), &pair).unwrap().joint
    };

    let (s_trace, cache) = student.forward_cached(&s_sample)?;
    let pair = SamplePair {
        student_trace: &s_trace,
        student_sample: &s_sample,
        teacher_trace: Some(&t_trace),
        teacher_sample: Some(&t_sample),
        snapshot_trace: Some(&snap_trace),
        stage_tags: None,
    };
    let (breakdown, upstream, bank_grads) = joint_with_grads(&setup, Some(&bank), &pair)?;
    let analytic = student.backward(&cache, &upstream);
    println!(
        "joint = {:.6} (top {:.4}, layer {:.4}, ac {:.4}, sft {:.4})",
        breakdown.joint, breakdown.top_sum, breakdown.layer_sum, breakdown.ac_sum, breakdown.sft
    );

    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    let names: Vec<(String, usize)> = student
        .params
        .named()
        .iter()
        .map(|(n, v)| (n.clone(), v.len()))
        .collect();
    for (name, len) in names {
        for idx in 0..len {
            let nudge = |m: &mut Model, d: f64| {
                for (n, t) in m.params.named_mut() {
                    if n == name {
                        t[idx] += d;
                    }
                }
            };
            nudge(&mut student, h);
            let plus = joint_of(&student, &bank);
            nudge(&mut student, -2.0 * h);
            let minus = joint_of(&student, &bank);
            nudge(&mut student, h);
            let fd = (plus - minus) / (2.0 * h);
            let a = analytic
                .named()
                .iter()
                .find(|(n, _)| *n == name)
                .map(|(_, v)| v[idx])
                .unwrap();
            worst = worst.max((a - fd).abs() / (a.abs() + fd.abs()).max(1e-7));
            checked += 1;
        }
    }
    let bank_grads = bank_grads.expect("layer term enabled");
    for (li, &layer) in bank.layers().to_vec().iter().enumerate() {
        for idx in 0..bank_grads[li].len() {
            bank.matrix_mut(layer).unwrap()[idx] += h;
            let plus = joint_of(&student, &bank);
            bank.matrix_mut(layer).unwrap()[idx] -= 2.0 * h;
            let minus = joint_of(&student, &bank);
            bank.matrix_mut(layer).unwrap()[idx] += h;
            let fd = (plus - minus) / (2.0 * h);
            let a = bank_grads[li][idx];
            worst = worst.max((a - fd).abs() / (a.abs() + fd.abs()).max(1e-7));
            checked += 1;
        }
    }
    println!("checked {checked} parameters: worst relative error {worst:.3e}");
    assert!(worst < 1e-4);
    println!("analytic gradients match central finite differences");
    Ok(())
}
