//! Divergence measures between categorical distributions and between
//! hidden-state vectors, with analytic gradients w.r.t. pre-softmax logits.
//!
//! All arithmetic is f64. Probabilities are clamped at [`PROB_EPS`] inside
//! logarithms; the forward/reverse KL support violation (mass on a zero bin)
//! is detected before clamping and reported as `+inf`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Clamp floor applied to probabilities inside logs and denominators.
pub const PROB_EPS: f64 = 1e-12;

/// Tolerance for "entries sum to 1" validation of [`Categorical`].
pub const SUM_TOL: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum DivergenceError {
    #[error("distribution length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("vector dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("invalid categorical: {0}")]
    InvalidCategorical(String),
    #[error("skew parameter must lie strictly inside (0, 1), got {0}")]
    InvalidSkew(f64),
    #[error("unknown divergence name: {0:?}")]
    UnknownName(String),
}

/// A validated categorical distribution: non-negative entries summing to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Categorical {
    probs: Vec<f64>,
}

impl Categorical {
    pub fn new(probs: Vec<f64>) -> Result<Self, DivergenceError> {
        if probs.is_empty() {
            return Err(DivergenceError::InvalidCategorical("empty".into()));
        }
        let mut sum = 0.0;
        for &p in &probs {
            if !p.is_finite() {
                return Err(DivergenceError::InvalidCategorical(format!(
                    "non-finite entry {p}"
                )));
            }
            if p < 0.0 {
                return Err(DivergenceError::InvalidCategorical(format!(
                    "negative entry {p}"
                )));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > SUM_TOL {
            return Err(DivergenceError::InvalidCategorical(format!(
                "entries sum to {sum}, expected 1"
            )));
        }
        Ok(Self { probs })
    }

    /// Softmax of arbitrary finite logits; always a valid distribution.
    pub fn from_logits(logits: &[f64]) -> Self {
        Self {
            probs: softmax(logits),
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

/// Which divergence is used for token-level distillation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum DivergenceKind {
    ForwardKl,
    ReverseKl,
    Jsd,
    /// KL(p || lambda*p + (1-lambda)*q) with lambda strictly inside (0, 1).
    SkewKl(f64),
}

impl DivergenceKind {
    /// Parse the config-schema name: "kl", "rkl", "jsd", "skl:<lambda>".
    pub fn parse(name: &str) -> Result<Self, DivergenceError> {
        match name {
            "kl" => Ok(Self::ForwardKl),
            "rkl" => Ok(Self::ReverseKl),
            "jsd" => Ok(Self::Jsd),
            other => {
                if let Some(lambda) = other.strip_prefix("skl:") {
                    let lambda: f64 = lambda
                        .parse()
                        .map_err(|_| DivergenceError::UnknownName(other.into()))?;
                    Self::skew(lambda)
                } else {
                    Err(DivergenceError::UnknownName(other.into()))
                }
            }
        }
    }

    pub fn skew(lambda: f64) -> Result<Self, DivergenceError> {
        if !(lambda > 0.0 && lambda < 1.0) {
            return Err(DivergenceError::InvalidSkew(lambda));
        }
        Ok(Self::SkewKl(lambda))
    }

    pub fn name(&self) -> String {
        match self {
            Self::ForwardKl => "kl".into(),
            Self::ReverseKl => "rkl".into(),
            Self::Jsd => "jsd".into(),
            Self::SkewKl(l) => format!("skl:{l}"),
        }
    }
}

/// Which loss compares hidden-state vectors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum HiddenLossKind {
    /// Softmax each vector over its dimension, then JSD.
    SoftmaxJsd,
    /// Mean squared difference.
    Mse,
}

impl HiddenLossKind {
    /// Parse the config-schema name: "softmax_jsd" or "mse".
    pub fn parse(name: &str) -> Result<Self, DivergenceError> {
        match name {
            "softmax_jsd" => Ok(Self::SoftmaxJsd),
            "mse" => Ok(Self::Mse),
            other => Err(DivergenceError::UnknownName(other.into())),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::SoftmaxJsd => "softmax_jsd",
            Self::Mse => "mse",
        }
    }
}

fn ln_clamped(x: f64) -> f64 {
    x.max(PROB_EPS).ln()
}

/// KL(p || q) = sum p_i ln(p_i / q_i), with 0 * ln(0/..) = 0.
///
/// Returns `+inf` when q has a zero bin where p has mass. Checked on the raw
/// values before clamping so the support violation is never masked as a
/// finite number or a NaN.
fn forward_kl(p: &[f64], q: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return f64::INFINITY;
        }
        acc += pi * (ln_clamped(pi) - ln_clamped(qi));
    }
    clamp_rounding(acc)
}

// Tiny negative sums are rounding; NaN must pass through untouched.
fn clamp_rounding(acc: f64) -> f64 {
    if acc < 0.0 {
        0.0
    } else {
        acc
    }
}

fn jsd(p: &[f64], q: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        let mi = 0.5 * (pi + qi);
        if pi > 0.0 {
            acc += 0.5 * pi * (ln_clamped(pi) - ln_clamped(mi));
        }
        if qi > 0.0 {
            acc += 0.5 * qi * (ln_clamped(qi) - ln_clamped(mi));
        }
    }
    clamp_rounding(acc)
}

fn skew_kl(p: &[f64], q: &[f64], lambda: f64) -> f64 {
    let mut acc = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi == 0.0 {
            continue;
        }
        let si = lambda * pi + (1.0 - lambda) * qi;
        acc += pi * (ln_clamped(pi) - ln_clamped(si));
    }
    clamp_rounding(acc)
}

/// The KD(p || q) operator over categorical distributions, in nats.
pub fn divergence(
    kind: DivergenceKind,
    p: &Categorical,
    q: &Categorical,
) -> Result<f64, DivergenceError> {
    if p.len() != q.len() {
        return Err(DivergenceError::LengthMismatch(p.len(), q.len()));
    }
    let (p, q) = (p.probs(), q.probs());
    Ok(match kind {
        DivergenceKind::ForwardKl => forward_kl(p, q),
        DivergenceKind::ReverseKl => forward_kl(q, p),
        DivergenceKind::Jsd => jsd(p, q),
        DivergenceKind::SkewKl(lambda) => skew_kl(p, q, lambda),
    })
}

/// Divergence between two hidden-state vectors of the same dimension.
pub fn hidden_divergence(
    kind: HiddenLossKind,
    u: &[f64],
    v: &[f64],
) -> Result<f64, DivergenceError> {
    if u.len() != v.len() {
        return Err(DivergenceError::DimensionMismatch(u.len(), v.len()));
    }
    Ok(match kind {
        HiddenLossKind::SoftmaxJsd => jsd(&softmax(u), &softmax(v)),
        HiddenLossKind::Mse => {
            let n = u.len() as f64;
            u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n
        }
    })
}

/// Pulls a gradient w.r.t. probabilities back through the softmax that
/// produced them: dL/da_j = p_j * (dL/dp_j - sum_k p_k dL/dp_k).
pub fn softmax_backward(probs: &[f64], d_probs: &[f64]) -> Vec<f64> {
    let dot: f64 = probs.iter().zip(d_probs).map(|(p, d)| p * d).sum();
    probs
        .iter()
        .zip(d_probs)
        .map(|(p, d)| p * (d - dot))
        .collect()
}

/// Gradient of `divergence(kind, softmax(a), softmax(b))` w.r.t. the two
/// logit vectors. Probabilities are clamped inside logs and denominators so
/// the result is always finite.
pub fn divergence_grad(
    kind: DivergenceKind,
    p_logits: &[f64],
    q_logits: &[f64],
) -> Result<(Vec<f64>, Vec<f64>), DivergenceError> {
    if p_logits.len() != q_logits.len() {
        return Err(DivergenceError::LengthMismatch(
            p_logits.len(),
            q_logits.len(),
        ));
    }
    let p = softmax(p_logits);
    let q = softmax(q_logits);
    let (dp, dq) = divergence_grad_wrt_probs(kind, &p, &q);
    Ok((softmax_backward(&p, &dp), softmax_backward(&q, &dq)))
}

/// Gradient of the divergence w.r.t. the probability vectors themselves.
/// Additive constants are irrelevant once pulled through `softmax_backward`.
pub(crate) fn divergence_grad_wrt_probs(
    kind: DivergenceKind,
    p: &[f64],
    q: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let n = p.len();
    let mut dp = vec![0.0; n];
    let mut dq = vec![0.0; n];
    match kind {
        DivergenceKind::ForwardKl => {
            for i in 0..n {
                dp[i] = ln_clamped(p[i]) - ln_clamped(q[i]) + 1.0;
                dq[i] = -p[i] / q[i].max(PROB_EPS);
            }
        }
        DivergenceKind::ReverseKl => {
            let (dq2, dp2) = divergence_grad_wrt_probs(DivergenceKind::ForwardKl, q, p);
            dp = dp2;
            dq = dq2;
        }
        DivergenceKind::Jsd => {
            for i in 0..n {
                let m = 0.5 * (p[i] + q[i]);
                dp[i] = 0.5 * (ln_clamped(p[i]) - ln_clamped(m));
                dq[i] = 0.5 * (ln_clamped(q[i]) - ln_clamped(m));
            }
        }
        DivergenceKind::SkewKl(lambda) => {
            for i in 0..n {
                let s = (lambda * p[i] + (1.0 - lambda) * q[i]).max(PROB_EPS);
                dp[i] = ln_clamped(p[i]) - ln_clamped(s) + 1.0 - lambda * p[i] / s;
                dq[i] = -(1.0 - lambda) * p[i] / s;
            }
        }
    }
    (dp, dq)
}

/// Gradient of `hidden_divergence(kind, u, v)` w.r.t. both vectors.
pub fn hidden_divergence_grad(
    kind: HiddenLossKind,
    u: &[f64],
    v: &[f64],
) -> Result<(Vec<f64>, Vec<f64>), DivergenceError> {
    if u.len() != v.len() {
        return Err(DivergenceError::DimensionMismatch(u.len(), v.len()));
    }
    Ok(match kind {
        HiddenLossKind::SoftmaxJsd => {
            let p = softmax(u);
            let q = softmax(v);
            let (dp, dq) = divergence_grad_wrt_probs(DivergenceKind::Jsd, &p, &q);
            (softmax_backward(&p, &dp), softmax_backward(&q, &dq))
        }
        HiddenLossKind::Mse => {
            let n = u.len() as f64;
            let du: Vec<f64> = u.iter().zip(v).map(|(a, b)| 2.0 * (a - b) / n).collect();
            let dv: Vec<f64> = du.iter().map(|d| -d).collect();
            (du, dv)
        }
    })
}
