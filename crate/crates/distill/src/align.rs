//! Student-to-teacher layer correspondence, skip-layer schedules, and the
//! per-layer learnable projection matrices that map teacher hidden states
//! into the student's dimensionality.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AlignError {
    #[error("layer counts must be positive, got student {0}, teacher {1}")]
    NonPositiveLayers(usize, usize),
    #[error("skip stride k must be at least 1")]
    ZeroStride,
    #[error("stride {k} exceeds student depth {layers}: no layer selected")]
    EmptySchedule { k: usize, layers: usize },
    #[error("unknown schedule name: {0:?}")]
    UnknownSchedule(String),
    #[error("layer {0} is not in the distillation schedule")]
    UnselectedLayer(usize),
    #[error("hidden vector has dim {got}, projection expects {want}")]
    DimensionMismatch { got: usize, want: usize },
}

/// Proportional student-layer to teacher-layer correspondence.
///
/// Layers are 1-indexed; the embedding output is layer 0 and never mapped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerMap {
    pub student_layers: usize,
    pub teacher_layers: usize,
    pairs: Vec<(usize, usize)>,
}

impl LayerMap {
    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    /// Teacher layer mapped to the given student layer.
    pub fn teacher_layer(&self, student_layer: usize) -> Option<usize> {
        self.pairs
            .iter()
            .find(|(s, _)| *s == student_layer)
            .map(|(_, t)| *t)
    }
}

/// Maps every student layer to floor((l_s - 1) / L_s * L_t) + 1, computed in
/// integer arithmetic so endpoints and identity cases are exact.
pub fn build_layer_map(student_layers: usize, teacher_layers: usize) -> Result<LayerMap, AlignError> {
    if student_layers == 0 || teacher_layers == 0 {
        return Err(AlignError::NonPositiveLayers(student_layers, teacher_layers));
    }
    let pairs = (1..=student_layers)
        .map(|l_s| (l_s, (l_s - 1) * teacher_layers / student_layers + 1))
        .collect();
    Ok(LayerMap {
        student_layers,
        teacher_layers,
        pairs,
    })
}

/// Which student layers receive hidden-state supervision.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ScheduleKind {
    /// Every layer 1..=L_s.
    All,
    /// Every k-th layer: k, 2k, ..., floor(L_s/k)*k.
    OneInK(usize),
    /// No hidden-state terms; only the top-layer logit loss applies.
    TopOnly,
}

impl ScheduleKind {
    /// Parse the config-schema name: "all", "top", "one_in_k:<k>".
    pub fn parse(name: &str) -> Result<Self, AlignError> {
        match name {
            "all" => Ok(Self::All),
            "top" => Ok(Self::TopOnly),
            other => {
                if let Some(k) = other.strip_prefix("one_in_k:") {
                    let k: usize = k
                        .parse()
                        .map_err(|_| AlignError::UnknownSchedule(other.into()))?;
                    Ok(Self::OneInK(k))
                } else {
                    Err(AlignError::UnknownSchedule(other.into()))
                }
            }
        }
    }

    pub fn name(&self) -> String {
        match self {
            Self::All => "all".into(),
            Self::OneInK(k) => format!("one_in_k:{k}"),
            Self::TopOnly => "top".into(),
        }
    }
}

/// Ordered set of student layers selected for hidden-state distillation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSchedule {
    pub kind: ScheduleKind,
    selected: Vec<usize>,
}

impl LayerSchedule {
    pub fn selected(&self) -> &[usize] {
        &self.selected
    }

    pub fn contains(&self, layer: usize) -> bool {
        self.selected.contains(&layer)
    }
}

pub fn build_schedule(kind: ScheduleKind, student_layers: usize) -> Result<LayerSchedule, AlignError> {
    let selected = match kind {
        ScheduleKind::All => (1..=student_layers).collect(),
        ScheduleKind::TopOnly => Vec::new(),
        ScheduleKind::OneInK(k) => {
            if k == 0 {
                return Err(AlignError::ZeroStride);
            }
            if k > student_layers {
                return Err(AlignError::EmptySchedule {
                    k,
                    layers: student_layers,
                });
            }
            (1..=student_layers / k).map(|i| i * k).collect()
        }
    };
    Ok(LayerSchedule { kind, selected })
}

/// One learnable matrix per scheduled student layer, shaped
/// (student_dim x teacher_dim) so `w * h_teacher` lands in student space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionBank {
    pub student_dim: usize,
    pub teacher_dim: usize,
    pub trainable: bool,
    /// Parallel to the schedule's selected layers; row-major matrices.
    layers: Vec<usize>,
    matrices: Vec<Vec<f64>>,
}

impl ProjectionBank {
    /// Identity when the dims agree, otherwise uniform in
    /// +-sqrt(6 / (teacher_dim + student_dim)).
    pub fn init(
        schedule: &LayerSchedule,
        student_dim: usize,
        teacher_dim: usize,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = (6.0 / (teacher_dim + student_dim) as f64).sqrt();
        let matrices = schedule
            .selected()
            .iter()
            .map(|_| {
                if student_dim == teacher_dim {
                    let mut w = vec![0.0; student_dim * teacher_dim];
                    for i in 0..student_dim {
                        w[i * teacher_dim + i] = 1.0;
                    }
                    w
                } else {
                    (0..student_dim * teacher_dim)
                        .map(|_| rng.gen_range(-bound..bound))
                        .collect()
                }
            })
            .collect();
        Self {
            student_dim,
            teacher_dim,
            trainable: true,
            layers: schedule.selected().to_vec(),
            matrices,
        }
    }

    pub fn layers(&self) -> &[usize] {
        &self.layers
    }

    pub fn matrix(&self, layer: usize) -> Option<&[f64]> {
        self.index_of(layer).map(|i| self.matrices[i].as_slice())
    }

    pub fn matrix_mut(&mut self, layer: usize) -> Option<&mut [f64]> {
        let i = self.index_of(layer)?;
        Some(self.matrices[i].as_mut_slice())
    }

    fn index_of(&self, layer: usize) -> Option<usize> {
        self.layers.iter().position(|&l| l == layer)
    }

    /// Named flat views for the optimizer, in schedule order.
    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Vec<f64>)> {
        self.layers
            .iter()
            .zip(self.matrices.iter_mut())
            .map(|(l, w)| (format!("proj.{l}"), w))
            .collect()
    }

    pub fn named_tensors(&self) -> Vec<(String, &Vec<f64>)> {
        self.layers
            .iter()
            .zip(self.matrices.iter())
            .map(|(l, w)| (format!("proj.{l}"), w))
            .collect()
    }

    /// Zero-filled gradient buffers matching this bank's shapes.
    pub fn zero_grads(&self) -> Vec<Vec<f64>> {
        self.matrices.iter().map(|w| vec![0.0; w.len()]).collect()
    }

    /// Accumulate `d_out (x) h_teacher` into the gradient buffer for `layer`.
    pub fn accumulate_grad(
        &self,
        grads: &mut [Vec<f64>],
        layer: usize,
        d_out: &[f64],
        h_teacher: &[f64],
    ) {
        let idx = self
            .index_of(layer)
            .expect("gradient for a layer outside the bank");
        let g = &mut grads[idx];
        for (r, &d) in d_out.iter().enumerate() {
            let row = &mut g[r * self.teacher_dim..(r + 1) * self.teacher_dim];
            for (cell, &h) in row.iter_mut().zip(h_teacher) {
                *cell += d * h;
            }
        }
    }

    /// Pull a gradient on the projected output back to the teacher vector.
    /// Teacher parameters stay frozen; this only exists for completeness of
    /// chain checks in tests.
    pub fn backward_input(&self, layer: usize, d_out: &[f64]) -> Option<Vec<f64>> {
        let w = self.matrix(layer)?;
        let mut d_in = vec![0.0; self.teacher_dim];
        for (r, &d) in d_out.iter().enumerate() {
            for c in 0..self.teacher_dim {
                d_in[c] += d * w[r * self.teacher_dim + c];
            }
        }
        Some(d_in)
    }
}

/// Matrix-vector product `W_layer * h_teacher` into student space.
pub fn project(bank: &ProjectionBank, layer: usize, h_teacher: &[f64]) -> Result<Vec<f64>, AlignError> {
    if h_teacher.len() != bank.teacher_dim {
        return Err(AlignError::DimensionMismatch {
            got: h_teacher.len(),
            want: bank.teacher_dim,
        });
    }
    let w = bank
        .matrix(layer)
        .ok_or(AlignError::UnselectedLayer(layer))?;
    let mut out = vec![0.0; bank.student_dim];
    for (r, o) in out.iter_mut().enumerate() {
        *o = w[r * bank.teacher_dim..(r + 1) * bank.teacher_dim]
            .iter()
            .zip(h_teacher)
            .map(|(a, b)| a * b)
            .sum();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn paper_scale_map_hits_hand_computed_anchors() {
        // floor((l-1)/28 * 36) + 1 evaluated by hand for 28 -> 36.
        let map = build_layer_map(28, 36).unwrap();
        assert_eq!(map.teacher_layer(1), Some(1));
        assert_eq!(map.teacher_layer(14), Some(17));
        assert_eq!(map.teacher_layer(28), Some(35));
    }

    #[test]
    fn desk_scale_map_hits_hand_computed_anchors() {
        let map = build_layer_map(7, 9).unwrap();
        assert_eq!(map.teacher_layer(1), Some(1));
        assert_eq!(map.teacher_layer(4), Some(4));
        assert_eq!(map.teacher_layer(7), Some(8));
    }

    #[test]
    fn equal_depths_give_identity_map() {
        for n in [1, 2, 5, 28] {
            let map = build_layer_map(n, n).unwrap();
            for l in 1..=n {
                assert_eq!(map.teacher_layer(l), Some(l));
            }
        }
    }

    #[test]
    fn zero_layer_counts_are_rejected() {
        assert!(build_layer_map(0, 4).is_err());
        assert!(build_layer_map(4, 0).is_err());
    }

    #[test]
    fn schedule_all_selects_every_layer() {
        let s = build_schedule(ScheduleKind::All, 28).unwrap();
        assert_eq!(s.selected().len(), 28);
        assert_eq!(s.selected()[0], 1);
        assert_eq!(*s.selected().last().unwrap(), 28);
    }

    #[test]
    fn one_in_seven_selects_the_skip_layers() {
        let s = build_schedule(ScheduleKind::OneInK(7), 28).unwrap();
        assert_eq!(s.selected(), &[7, 14, 21, 28]);
    }

    #[test]
    fn one_in_one_equals_all() {
        let one = build_schedule(ScheduleKind::OneInK(1), 13).unwrap();
        let all = build_schedule(ScheduleKind::All, 13).unwrap();
        assert_eq!(one.selected(), all.selected());
    }

    #[test]
    fn top_only_selects_nothing() {
        let s = build_schedule(ScheduleKind::TopOnly, 9).unwrap();
        assert!(s.selected().is_empty());
    }

    #[test]
    fn stride_beyond_depth_is_an_error() {
        assert_eq!(
            build_schedule(ScheduleKind::OneInK(8), 7),
            Err(AlignError::EmptySchedule { k: 8, layers: 7 })
        );
        assert_eq!(build_schedule(ScheduleKind::OneInK(0), 7), Err(AlignError::ZeroStride));
    }

    #[test]
    fn schedule_names_round_trip() {
        for name in ["all", "top", "one_in_k:7"] {
            assert_eq!(ScheduleKind::parse(name).unwrap().name(), name);
        }
        assert!(ScheduleKind::parse("bottom").is_err());
    }

    #[test]
    fn identity_projection_is_a_no_op() {
        let s = build_schedule(ScheduleKind::All, 2).unwrap();
        let bank = ProjectionBank::init(&s, 4, 4, 0);
        let h = vec![0.5, -1.0, 2.0, 0.25];
        assert_eq!(project(&bank, 1, &h).unwrap(), h);
    }

    #[test]
    fn zero_matrix_projects_to_zero() {
        let s = build_schedule(ScheduleKind::All, 1).unwrap();
        let mut bank = ProjectionBank::init(&s, 3, 5, 0);
        bank.matrix_mut(1).unwrap().fill(0.0);
        assert_eq!(project(&bank, 1, &[1.0; 5]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn projection_matches_naive_triple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = build_schedule(ScheduleKind::All, 1).unwrap();
        let mut bank = ProjectionBank::init(&s, 3, 5, 7);
        for w in bank.matrix_mut(1).unwrap() {
            *w = rng.gen_range(-1.0..1.0);
        }
        let h: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w = bank.matrix(1).unwrap().to_vec();
        let mut oracle = vec![0.0; 3];
        for r in 0..3 {
            for c in 0..5 {
                oracle[r] += w[r * 5 + c] * h[c];
            }
        }
        assert_eq!(project(&bank, 1, &h).unwrap(), oracle);
    }

    #[test]
    fn unselected_layer_and_bad_dims_are_errors() {
        let s = build_schedule(ScheduleKind::OneInK(2), 4).unwrap();
        let bank = ProjectionBank::init(&s, 3, 5, 0);
        assert_eq!(
            project(&bank, 1, &[0.0; 5]),
            Err(AlignError::UnselectedLayer(1))
        );
        assert_eq!(
            project(&bank, 2, &[0.0; 4]),
            Err(AlignError::DimensionMismatch { got: 4, want: 5 })
        );
    }

    #[test]
    fn projection_is_linear() {
        let s = build_schedule(ScheduleKind::All, 1).unwrap();
        let bank = ProjectionBank::init(&s, 4, 6, 21);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let u: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (a, b) = (1.7, -0.4);
        let combined: Vec<f64> = u.iter().zip(&v).map(|(x, y)| a * x + b * y).collect();
        let lhs = project(&bank, 1, &combined).unwrap();
        let pu = project(&bank, 1, &u).unwrap();
        let pv = project(&bank, 1, &v).unwrap();
        for i in 0..4 {
            assert!((lhs[i] - (a * pu[i] + b * pv[i])).abs() < 1e-9);
        }
    }

    proptest! {
        #[test]
        fn prop_layer_map_monotone_and_in_range(ls in 1usize..512, lt in 1usize..512) {
            let map = build_layer_map(ls, lt).unwrap();
            let pairs = map.pairs();
            prop_assert_eq!(pairs[0], (1, 1));
            let mut prev = 0usize;
            for &(s, t) in pairs {
                prop_assert!(t >= 1 && t <= lt, "layer {} maps out of range: {}", s, t);
                prop_assert!(t >= prev, "map must be nondecreasing");
                prev = t;
            }
        }
    }
}
