//! Training objectives and the loss weighting schedule.
//!
//! The dimensional loss is one minus a weighted sum of per-dimension
//! concordance correlation coefficients. Distillation is a confidence-weighted
//! cosine distance between student and (frozen) teacher utterance embeddings.

use alloc::format;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nnstack::{Graph, Op, Var};
use crate::tensor::Matrix;
use crate::{ACT, DOM, N_DIMS, VAL};

/// Auxiliary classification loss weight inside the task term.
pub const CE_WEIGHT: f64 = 0.2;
/// Norm guard in the cosine denominator.
pub const COSINE_EPS: f64 = 1e-8;
/// Span of the 7-point label scale.
pub const LABEL_RANGE: f64 = 6.0;

/// Moments behind a CCC value; population (divide-by-n) statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CccStats {
    pub mean_x: f64,
    pub mean_y: f64,
    pub var_x: f64,
    pub var_y: f64,
    pub cov: f64,
    /// Pearson correlation; `None` when either vector is constant.
    pub rho: Option<f64>,
}

impl CccStats {
    pub fn compute(x: &[f64], y: &[f64]) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::shape("ccc", format!("{} predictions vs {} labels", x.len(), y.len())));
        }
        if x.len() < 2 {
            return Err(Error::Input(format!("ccc needs at least 2 pairs, got {}", x.len())));
        }
        let n = x.len() as f64;
        let mean_x = x.iter().sum::<f64>() / n;
        let mean_y = y.iter().sum::<f64>() / n;
        let constant = |v: &[f64]| v.iter().all(|&a| a == v[0]);
        let (mut var_x, mut var_y, mut cov) = (0.0, 0.0, 0.0);
        for (a, b) in x.iter().zip(y) {
            let (dx, dy) = (a - mean_x, b - mean_y);
            var_x += dx * dx;
            var_y += dy * dy;
            cov += dx * dy;
        }
        var_x /= n;
        var_y /= n;
        cov /= n;
        if constant(x) {
            var_x = 0.0;
            cov = 0.0;
        }
        if constant(y) {
            var_y = 0.0;
            cov = 0.0;
        }
        let rho = if var_x > 0.0 && var_y > 0.0 {
            Some(cov / libm::sqrt(var_x * var_y))
        } else {
            None
        };
        Ok(CccStats {
            mean_x,
            mean_y,
            var_x,
            var_y,
            cov,
            rho,
        })
    }

    pub fn ccc(&self) -> f64 {
        if self.var_x == 0.0 || self.var_y == 0.0 {
            return 0.0;
        }
        let shift = self.mean_x - self.mean_y;
        2.0 * self.cov / (self.var_x + self.var_y + shift * shift)
    }
}

/// Concordance correlation coefficient of estimates `x` against truth `y`.
///
/// Zero when either vector is constant.
pub fn ccc(x: &[f64], y: &[f64]) -> Result<f64> {
    Ok(CccStats::compute(x, y)?.ccc())
}

/// Per-dimension weights of the CCC loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CccWeights {
    /// Weight of the valence CCC.
    pub alpha: f64,
    /// Weight of the activation CCC.
    pub beta: f64,
}

impl Default for CccWeights {
    fn default() -> Self {
        CccWeights {
            alpha: 1.0 / 3.0,
            beta: 1.0 / 3.0,
        }
    }
}

impl CccWeights {
    /// Weights indexed by score column (activation, valence, dominance).
    pub fn by_column(&self) -> [f64; 3] {
        let mut w = [0.0; 3];
        w[ACT] = self.beta;
        w[VAL] = self.alpha;
        w[DOM] = 1.0 - self.alpha - self.beta;
        w
    }
}

/// `1 - (α CCC_v + β CCC_a + (1-α-β) CCC_d)` over a `B x 3` score batch.
pub fn ccc_loss(g: &mut Graph, scores: Var, labels: &Matrix, weights: CccWeights) -> Result<Var> {
    let s = g.value(scores);
    if s.cols() != N_DIMS || s.shape() != labels.shape() {
        return Err(Error::shape("ccc_loss", format!("scores {:?}, labels {:?}", s.shape(), labels.shape())));
    }
    if s.rows() < 2 {
        return Err(Error::Input(format!("ccc_loss needs a batch of at least 2, got {}", s.rows())));
    }
    let w = weights.by_column();
    let mut total = 1.0;
    for (k, wk) in w.iter().enumerate() {
        total -= wk * ccc(&s.column(k), &labels.column(k))?;
    }
    let ng = g.needs_grad(scores);
    Ok(g.push_loss(
        total,
        Op::Ccc {
            scores,
            labels: labels.clone(),
            weights: w,
        },
        ng,
    ))
}

/// d(ccc_loss)/d(scores).
pub(crate) fn ccc_loss_grad(scores: &Matrix, labels: &Matrix, weights: &[f64; 3]) -> Matrix {
    let n = scores.rows();
    let nf = n as f64;
    let mut grad = Matrix::zeros(n, scores.cols());
    for (k, wk) in weights.iter().enumerate() {
        let x = scores.column(k);
        let y = labels.column(k);
        let mx = x.iter().sum::<f64>() / nf;
        let my = y.iter().sum::<f64>() / nf;
        let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
        for (a, b) in x.iter().zip(&y) {
            sxx += (a - mx) * (a - mx);
            syy += (b - my) * (b - my);
            sxy += (a - mx) * (b - my);
        }
        sxx /= nf;
        syy /= nf;
        sxy /= nf;
        let shift = mx - my;
        let denom = sxx + syy + shift * shift;
        if denom == 0.0 {
            continue;
        }
        // C = 2 S / D; dS/dx_i = (y_i - my)/n; dD/dx_i = 2 (x_i - mx)/n + 2 shift / n
        for i in 0..n {
            let ds = (y[i] - my) / nf;
            let dd = 2.0 * (x[i] - mx) / nf + 2.0 * shift / nf;
            let dc = 2.0 * ds / denom - 2.0 * sxy * dd / (denom * denom);
            grad.set(i, k, -wk * dc);
        }
    }
    grad
}

/// Mean softmax cross-entropy of `B x K` logits against class indices.
pub fn cross_entropy(g: &mut Graph, logits: Var, classes: &[usize]) -> Result<Var> {
    let l = g.value(logits);
    if l.rows() != classes.len() || l.rows() == 0 {
        return Err(Error::shape("cross_entropy", format!("{} logit rows, {} classes", l.rows(), classes.len())));
    }
    if let Some(bad) = classes.iter().find(|&&c| c >= l.cols()) {
        return Err(Error::Input(format!("class index {bad} outside [0, {})", l.cols())));
    }
    let mut total = 0.0;
    for (r, &c) in classes.iter().enumerate() {
        let row = l.row(r);
        total += log_sum_exp(row) - row[c];
    }
    let value = total / classes.len() as f64;
    let ng = g.needs_grad(logits);
    Ok(g.push_loss(
        value,
        Op::CrossEntropy {
            logits,
            classes: classes.to_vec(),
        },
        ng,
    ))
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + libm::log(row.iter().map(|v| libm::exp(v - m)).sum::<f64>())
}

pub(crate) fn cross_entropy_grad(logits: &Matrix, classes: &[usize]) -> Matrix {
    let b = logits.rows() as f64;
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    for (r, &c) in classes.iter().enumerate() {
        let row = logits.row(r);
        let lse = log_sum_exp(row);
        let out = grad.row_mut(r);
        for (o, v) in out.iter_mut().zip(row) {
            *o = libm::exp(v - lse) / b;
        }
        out[c] -= 1.0 / b;
    }
    grad
}

/// Per-sample confidence from teacher residuals:
/// `γ = 1 - (Σ_k |l_k - l̃_k| / 3) / M`, clamped to `[0, 1]`.
pub fn gamma_confidence(labels: &[f64; 3], teacher: &[f64; 3], range: f64) -> Result<f64> {
    if !(range > 0.0) {
        return Err(Error::Input(format!("label range must be positive, got {range}")));
    }
    let resid: f64 = labels.iter().zip(teacher).map(|(l, t)| libm::fabs(l - t)).sum();
    Ok((1.0 - (resid / 3.0) / range).clamp(0.0, 1.0))
}

/// Mean over the batch of `γ_i (1 - cos(E_T,i, E_S,i))`.
///
/// The teacher side is a constant; gradients flow to `student` only.
pub fn distillation_loss(g: &mut Graph, teacher: &Matrix, student: Var, gamma: &[f64]) -> Result<Var> {
    let s = g.value(student);
    if s.shape() != teacher.shape() || gamma.len() != s.rows() || s.rows() == 0 {
        return Err(Error::shape(
            "distillation_loss",
            format!("student {:?}, teacher {:?}, {} gammas", s.shape(), teacher.shape(), gamma.len()),
        ));
    }
    let mut total = 0.0;
    for (i, gi) in gamma.iter().enumerate() {
        total += gi * (1.0 - cosine(teacher.row(i), s.row(i), COSINE_EPS));
    }
    let value = total / gamma.len() as f64;
    let ng = g.needs_grad(student);
    Ok(g.push_loss(
        value,
        Op::Distill {
            student,
            teacher: teacher.clone(),
            gamma: gamma.to_vec(),
            eps: COSINE_EPS,
        },
        ng,
    ))
}

/// `t·s / max(|t| |s|, eps)`
pub fn cosine(t: &[f64], s: &[f64], eps: f64) -> f64 {
    let dot: f64 = t.iter().zip(s).map(|(a, b)| a * b).sum();
    let nt = libm::sqrt(t.iter().map(|a| a * a).sum::<f64>());
    let ns = libm::sqrt(s.iter().map(|a| a * a).sum::<f64>());
    dot / (nt * ns).max(eps)
}

pub(crate) fn distillation_grad(teacher: &Matrix, student: &Matrix, gamma: &[f64], eps: f64) -> Matrix {
    let b = student.rows() as f64;
    let mut grad = Matrix::zeros(student.rows(), student.cols());
    for (i, gi) in gamma.iter().enumerate() {
        let (t, s) = (teacher.row(i), student.row(i));
        let dot: f64 = t.iter().zip(s).map(|(a, c)| a * c).sum();
        let nt = libm::sqrt(t.iter().map(|a| a * a).sum::<f64>());
        let ns = libm::sqrt(s.iter().map(|a| a * a).sum::<f64>());
        let out = grad.row_mut(i);
        let scale = -gi / b;
        if nt * ns > eps {
            let inv = 1.0 / (nt * ns);
            let proj = dot * inv / (ns * ns);
            for j in 0..out.len() {
                out[j] = scale * (t[j] * inv - proj * s[j]);
            }
        } else {
            for j in 0..out.len() {
                out[j] = scale * t[j] / eps;
            }
        }
    }
    grad
}

/// Active loss coefficients for one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleState {
    pub epoch: usize,
    pub kappa: f64,
    pub lambda: f64,
}

/// Piecewise-constant (κ, λ) schedule: `early` before `switch_epoch`, `late` from it on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub switch_epoch: usize,
    pub early: (f64, f64),
    pub late: (f64, f64),
}

impl Default for Schedule {
    /// Distillation-heavy for epochs 0..40, task-heavy afterwards.
    fn default() -> Self {
        Schedule {
            switch_epoch: 40,
            early: (0.001, 1.0),
            late: (1.0, 0.01),
        }
    }
}

impl Schedule {
    /// The same (κ, λ) at every epoch.
    pub fn constant(kappa: f64, lambda: f64) -> Self {
        Schedule {
            switch_epoch: 0,
            early: (kappa, lambda),
            late: (kappa, lambda),
        }
    }

    pub fn at(&self, epoch: usize) -> ScheduleState {
        let (kappa, lambda) = if epoch < self.switch_epoch { self.early } else { self.late };
        ScheduleState { epoch, kappa, lambda }
    }
}

/// Default schedule at a (possibly negative, hence rejected) epoch index.
pub fn schedule(epoch: i64) -> Result<ScheduleState> {
    if epoch < 0 {
        return Err(Error::Input(format!("epoch must be non-negative, got {epoch}")));
    }
    Ok(Schedule::default().at(epoch as usize))
}

/// Loss nodes feeding the combined objective.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub ccc: Var,
    pub ce: Var,
    /// Absent when no teacher is attached.
    pub distill: Option<Var>,
}

/// `κ (L_ccc + 0.2 L_CE) + λ L_dis`, or `L_ccc + 0.2 L_CE` without a teacher.
pub fn total_loss(g: &mut Graph, terms: LossTerms, state: &ScheduleState) -> Result<Var> {
    let ce = g.scale(terms.ce, CE_WEIGHT);
    let task = g.add(terms.ccc, ce)?;
    match terms.distill {
        None => Ok(task),
        Some(dis) => {
            let task = g.scale(task, state.kappa);
            let dis = g.scale(dis, state.lambda);
            g.add(task, dis)
        }
    }
}

/// Per-dimension CCC of a `B x 3` prediction matrix against labels.
pub fn ccc_per_dim(pred: &Matrix, labels: &Matrix) -> Result<[f64; 3]> {
    if pred.shape() != labels.shape() || pred.cols() != N_DIMS {
        return Err(Error::shape("ccc_per_dim", format!("{:?} vs {:?}", pred.shape(), labels.shape())));
    }
    let mut out = [0.0; 3];
    for (k, o) in out.iter_mut().enumerate() {
        *o = ccc(&pred.column(k), &labels.column(k))?;
    }
    Ok(out)
}

/// Scalar loss values of one batch or epoch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub ccc: f64,
    pub ce: f64,
    pub distill: f64,
    pub total: f64,
}
