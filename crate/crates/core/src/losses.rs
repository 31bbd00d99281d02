//! The objective terms, as pure differentiable functions: per-step
//! cross-entropy, accumulated keyword probability with coverage loss and
//! degeneration penalty, temperature-softened KL distillation, and the
//! weighted total.
//!
//! Each term comes in two forms: a value-only function on probability
//! matrices (the contract surface) and a `*_grad` twin on logits that also
//! returns d(loss)/d(logits) for the trainer.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::UNK_ID;
use crate::model::{step_probs, LogitsSequence, Scalar};
use crate::replay::KnowledgeKeyword;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("all positions masked")]
    AllMasked,
    #[error("shape mismatch: teacher {teacher:?} vs student {student:?}")]
    ShapeMismatch { teacher: (usize, usize), student: (usize, usize) },
    #[error("keyword `{0}` contains the unk token")]
    UnkInKeyword(String),
    #[error("reference/mask length {got} does not match {want} logit rows")]
    LengthMismatch { got: usize, want: usize },
    #[error("negative loss weight: {0}")]
    NegativeWeight(f64),
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
}

fn sc<S: Scalar>(x: f64) -> S {
    S::from(x).unwrap()
}

/// Numerically stable ln(1 + e^x).
fn softplus<S: Scalar>(x: S) -> S {
    if x > S::zero() {
        x + (S::one() + (-x).exp()).ln()
    } else {
        (S::one() + x.exp()).ln()
    }
}

fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// Mean negative log-probability of the gold token over unmasked positions.
pub fn ce_loss<S: Scalar>(
    probs: &Array2<S>,
    reference: &[usize],
    mask: &[bool],
) -> Result<S, LossError> {
    if reference.len() != probs.nrows() || mask.len() != probs.nrows() {
        return Err(LossError::LengthMismatch {
            got: reference.len().min(mask.len()),
            want: probs.nrows(),
        });
    }
    let mut total = S::zero();
    let mut n = 0usize;
    for (t, (&gold, &keep)) in reference.iter().zip(mask.iter()).enumerate() {
        if keep {
            total = total - probs[[t, gold]].ln();
            n += 1;
        }
    }
    if n == 0 {
        return Err(LossError::AllMasked);
    }
    Ok(total / sc::<S>(n as f64))
}

/// Cross-entropy from logits: value plus gradient w.r.t. the logits.
pub fn ce_grad<S: Scalar>(
    logits: &LogitsSequence<S>,
    reference: &[usize],
    mask: &[bool],
) -> Result<(S, Array2<S>), LossError> {
    let probs = step_probs(logits);
    let value = ce_loss(&probs, reference, mask)?;
    let n = mask.iter().filter(|&&m| m).count();
    let inv_n = sc::<S>(1.0 / n as f64);
    let mut dlogits = Array2::from_elem(logits.dim(), S::zero());
    for (t, (&gold, &keep)) in reference.iter().zip(mask.iter()).enumerate() {
        if !keep {
            continue;
        }
        for j in 0..logits.ncols() {
            let indicator = if j == gold { S::one() } else { S::zero() };
            dlogits[[t, j]] = (probs[[t, j]] - indicator) * inv_n;
        }
    }
    Ok((value, dlogits))
}

/// Accumulated generation probability of each keyword token: for keyword
/// token w_i, sums p(w_i) over all decoding steps. Each result lies in
/// [0, T_steps].
pub fn accumulate_keyword_prob<S: Scalar>(
    probs: &Array2<S>,
    keyword: &KnowledgeKeyword,
) -> Result<Vec<S>, LossError> {
    if keyword.tokens.ids.iter().any(|&id| id == UNK_ID) {
        return Err(LossError::UnkInKeyword(keyword.surface.clone()));
    }
    Ok(keyword
        .tokens
        .ids
        .iter()
        .map(|&id| {
            let mut acc = S::zero();
            for t in 0..probs.nrows() {
                acc += probs[[t, id]];
            }
            acc
        })
        .collect())
}

/// Sentence-level coverage loss: -sum_i ln(sigmoid(p_i)). Strictly decreasing
/// in each accumulated value.
pub fn coverage_loss<S: Scalar>(accumulated: &[S]) -> S {
    accumulated.iter().map(|&p| softplus(-p)).fold(S::zero(), |a, b| a + b)
}

/// Degeneration penalty: sum_i (1 - p_i)^2. Zero iff every accumulated value
/// is exactly 1.
pub fn repetition_penalty<S: Scalar>(accumulated: &[S]) -> S {
    accumulated
        .iter()
        .map(|&p| (S::one() - p) * (S::one() - p))
        .fold(S::zero(), |a, b| a + b)
}

/// Knowledge prediction loss: coverage plus degeneration penalty.
pub fn knowledge_loss<S: Scalar>(accumulated: &[S]) -> S {
    coverage_loss(accumulated) + repetition_penalty(accumulated)
}

/// Knowledge loss from logits: (coverage, penalty, d(total)/d(logits)).
pub fn knowledge_grad<S: Scalar>(
    logits: &LogitsSequence<S>,
    keyword: &KnowledgeKeyword,
) -> Result<(S, S, Array2<S>), LossError> {
    let probs = step_probs(logits);
    let acc = accumulate_keyword_prob(&probs, keyword)?;
    let cov = coverage_loss(&acc);
    let rep = repetition_penalty(&acc);

    // d(loss)/d(acc_i), both terms.
    let two = sc::<S>(2.0);
    let dacc: Vec<S> =
        acc.iter().map(|&p| (sigmoid(p) - S::one()) + two * (p - S::one())).collect();

    // d(loss)/d(probs): each keyword occurrence contributes its dacc to the
    // column of its token id, at every step.
    let mut dprob_cols: Array1<S> = Array1::from_elem(logits.ncols(), S::zero());
    for (i, &id) in keyword.tokens.ids.iter().enumerate() {
        dprob_cols[id] += dacc[i];
    }

    // Softmax backward per row: dz = p .* (dp - <dp, p>).
    let mut dlogits = Array2::from_elem(logits.dim(), S::zero());
    for t in 0..probs.nrows() {
        let mut dot = S::zero();
        for j in 0..probs.ncols() {
            dot += dprob_cols[j] * probs[[t, j]];
        }
        for j in 0..probs.ncols() {
            dlogits[[t, j]] = probs[[t, j]] * (dprob_cols[j] - dot);
        }
    }
    Ok((cov, rep, dlogits))
}

fn softened_log_probs<S: Scalar>(logits: &Array2<S>, inv_t: S) -> Array2<S> {
    let mut out = logits.mapv(|z| z * inv_t);
    for mut row in out.rows_mut() {
        let max = row.iter().fold(S::neg_infinity(), |a, &b| if b > a { b } else { a });
        let mut sum = S::zero();
        for v in row.iter() {
            sum += (*v - max).exp();
        }
        let log_z = max + sum.ln();
        for v in row.iter_mut() {
            *v = *v - log_z;
        }
    }
    out
}

/// Temperature-softened distillation loss: the mean over steps of
/// KL(phi(z_teacher) || phi(z_student)) with phi the temperature-T softmax.
/// Teacher values are treated as constants. No T^2 rescaling is applied.
pub fn kd_loss<S: Scalar>(
    teacher: &LogitsSequence<S>,
    student: &LogitsSequence<S>,
    temperature: f64,
) -> Result<S, LossError> {
    Ok(kd_grad(teacher, student, temperature)?.0)
}

/// KD loss plus gradient w.r.t. the student logits.
pub fn kd_grad<S: Scalar>(
    teacher: &LogitsSequence<S>,
    student: &LogitsSequence<S>,
    temperature: f64,
) -> Result<(S, Array2<S>), LossError> {
    if teacher.dim() != student.dim() {
        return Err(LossError::ShapeMismatch { teacher: teacher.dim(), student: student.dim() });
    }
    if temperature <= 0.0 {
        return Err(LossError::NonPositiveTemperature(temperature));
    }
    let inv_t = sc::<S>(1.0 / temperature);
    let steps = teacher.nrows();
    let inv_steps = sc::<S>(1.0 / steps as f64);

    let log_p = softened_log_probs(teacher, inv_t);
    let log_q = softened_log_probs(student, inv_t);

    let mut value = S::zero();
    let mut dlogits = Array2::from_elem(student.dim(), S::zero());
    for t in 0..steps {
        for j in 0..teacher.ncols() {
            let p = log_p[[t, j]].exp();
            let q = log_q[[t, j]].exp();
            value += p * (log_p[[t, j]] - log_q[[t, j]]);
            dlogits[[t, j]] = (q - p) * inv_t * inv_steps;
        }
    }
    Ok((value * inv_steps, dlogits))
}

/// Weighted total: L = L_ce + lambda_know * L_know + lambda_kd * L_kd, where
/// the CE term averages over caption samples and the knowledge/KD terms
/// average over replay samples.
pub fn total_loss(
    l_ce: f64,
    l_know: f64,
    l_kd: f64,
    lambda_know: f64,
    lambda_kd: f64,
) -> Result<f64, LossError> {
    if lambda_know < 0.0 {
        return Err(LossError::NegativeWeight(lambda_know));
    }
    if lambda_kd < 0.0 {
        return Err(LossError::NegativeWeight(lambda_kd));
    }
    Ok(l_ce + lambda_know * l_know + lambda_kd * l_kd)
}

/// Distillation hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KdConfig {
    pub temperature: f64,
    #[serde(rename = "λ_kd", alias = "lambda_kd")]
    pub lambda_kd: f64,
}

impl Default for KdConfig {
    fn default() -> Self {
        Self { temperature: 16.0, lambda_kd: 1.0 }
    }
}

impl KdConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if self.temperature <= 0.0 {
            return Err(LossError::NonPositiveTemperature(self.temperature));
        }
        if self.lambda_kd < 0.0 {
            return Err(LossError::NegativeWeight(self.lambda_kd));
        }
        Ok(())
    }
}

/// Per-step loss record. Terms with zero contributing samples are exactly 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_ce: f64,
    pub l_cov: f64,
    pub l_rep: f64,
    pub l_know: f64,
    pub l_kd: f64,
    pub total: f64,
    /// Caption samples contributing to the CE term.
    pub ce_count: usize,
    /// Replay samples contributing to the knowledge term.
    pub know_count: usize,
    /// Replay samples contributing to the KD term.
    pub kd_count: usize,
}

impl LossBreakdown {
    pub fn zero() -> Self {
        Self {
            l_ce: 0.0,
            l_cov: 0.0,
            l_rep: 0.0,
            l_know: 0.0,
            l_kd: 0.0,
            total: 0.0,
            ce_count: 0,
            know_count: 0,
            kd_count: 0,
        }
    }
}
