//! Proportional layer alignment between a shallow student and a deeper
//! teacher, the skip-layer schedules, and the learnable projection that
//! carries teacher hidden states into student dimensionality.

use distill::align::{build_layer_map, build_schedule, project, ProjectionBank, ScheduleKind};

fn main() -> anyhow::Result<()> {
    println!("Paper-scale alignment, 28 student layers onto 36 teacher layers:");
    let map = build_layer_map(28, 36)?;
    for &(s, t) in map.pairs() {
        if s == 1 || s % 7 == 0 {
            println!("  student layer {s:>2} -> teacher layer {t:>2}");
        }
    }

    println!("\nDesk-scale alignment, 7 onto 9 (the defaults used by the harness):");
    let map = build_layer_map(7, 9)?;
    for &(s, t) in map.pairs() {
        println!("  student layer {s} -> teacher layer {t}");
    }

    println!("\nSchedules over 28 student layers:");
    for kind in [ScheduleKind::All, ScheduleKind::OneInK(7), ScheduleKind::TopOnly] {
        let schedule = build_schedule(kind, 28)?;
        println!("  {:<12} selects {:?}", kind.name(), schedule.selected());
    }

    println!("\nProjection bank (student dim 4, teacher dim 6), first layer matrix:");
    let schedule = build_schedule(ScheduleKind::OneInK(7), 28)?;
    let bank = ProjectionBank::init(&schedule, 4, 6, 42);
    let w = bank.matrix(7).unwrap();
    for row in 0..4 {
        let cells: Vec<String> = (0..6).map(|c| format!("{:+.3}", w[row * 6 + c])).collect();
        println!("  [{}]", cells.join(", "));
    }
    let teacher_hidden = vec![0.5, -0.2, 1.0, 0.0, 0.3, -0.7];
    let projected = project(&bank, 7, &teacher_hidden)?;
    println!("  project(layer 7, h_teacher) = {projected:?}");
    Ok(())
}
