//! Distillation objectives recorded on a [`Tape`].
//!
//! Cross-entropy is written `H(pred, target)` with the student's prediction
//! first. Every loss reduces over the batch with the arithmetic mean, and
//! every teacher-side input is detached before use so that gradients only
//! ever reach the student.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::Outputs;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Clamp inside `ln` that keeps cross-entropy finite on one-hot predictions.
pub const LOG_EPS: f64 = 1e-12;

/// Weights and shape parameters shared by every distillation loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    /// Weight of the soft-prediction term.
    pub alpha: f64,
    /// Weight of the hidden-layer term.
    pub beta: f64,
    /// Softmax temperature for soft predictions.
    pub tau: f64,
    /// Triplet margin.
    pub lambda_margin: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            tau: 3.0,
            lambda_margin: 0.4,
        }
    }
}

impl DistillConfig {
    pub fn with_weights(self, alpha: f64, beta: f64) -> Self {
        Self { alpha, beta, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("alpha", self.alpha >= 0.0),
            ("beta", self.beta >= 0.0),
            ("tau", self.tau >= 1.0),
            ("lambda_margin", self.lambda_margin >= 0.0),
        ];
        for (name, ok) in checks {
            if !ok {
                return Err(Error::Parameter(format!("{name} is out of range in {self:?}")));
            }
        }
        Ok(())
    }
}

/// Which teacher output a classification student imitates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum ClsTarget {
    /// Temperature-smoothed predictions.
    #[default]
    Soft,
    /// Squared distance between embeddings.
    Hidden,
    /// Squared distance between raw logits.
    Logits,
}

/// `softmax(logits / tau)` per row.
pub fn soft_predictions(tape: &mut Tape, logits: Var, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Parameter(format!("temperature must be positive, got {tau}")));
    }
    if tau == 1.0 {
        return tape.softmax_rows(logits);
    }
    let scaled = tape.scale(logits, 1.0 / tau)?;
    tape.softmax_rows(scaled)
}

/// Batch mean of `−Σₖ targetₖ · ln(predₖ + ε)`.
pub fn cross_entropy(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    let (ps, ts) = (tape.value(pred).shape(), tape.value(target).shape());
    if ps != ts {
        return Err(Error::dim("cross_entropy", ps, ts));
    }
    if tape.value(target).data().iter().any(|&t| t < 0.0) {
        return Err(Error::contract("cross-entropy target has negative entries"));
    }
    let batch = tape.value(pred).rows() as f64;
    let log_p = tape.ln_clamp(pred, LOG_EPS)?;
    let weighted = tape.mul(target, log_p)?;
    let total = tape.sum(weighted)?;
    tape.scale(total, -1.0 / batch)
}

/// One-hot `[labels.len() × classes]` matrix.
pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::contract(format!("label {l} out of range for {classes} classes")));
        }
        data[i * classes + l] = 1.0;
    }
    Tensor::matrix(labels.len(), classes, data)
}

/// Cross-entropy of `softmax(logits)` against one-hot labels.
pub fn softmax_loss(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let (b, c) = tape.value(logits).dims2()?;
    if labels.len() != b {
        return Err(Error::dim("softmax_loss", &[b, c], &[labels.len()]));
    }
    let target = tape.constant(one_hot(labels, c)?);
    let p = tape.softmax_rows(logits)?;
    cross_entropy(tape, p, target)
}

/// `H(P_S^τ, P_T^τ)` with the teacher detached.
pub fn soft_target_loss(tape: &mut Tape, student_logits: Var, teacher_logits: Var, tau: f64) -> Result<Var> {
    let (ss, ts) = (tape.value(student_logits).shape(), tape.value(teacher_logits).shape());
    if ss != ts {
        return Err(Error::dim("soft_target_loss", ss, ts));
    }
    let teacher = tape.detach(teacher_logits);
    let p_s = soft_predictions(tape, student_logits, tau)?;
    let p_t = soft_predictions(tape, teacher, tau)?;
    cross_entropy(tape, p_s, p_t)
}

/// Label loss plus `α` times the cross-entropy between soft predictions.
pub fn distill_cls_loss(
    tape: &mut Tape,
    student_logits: Var,
    teacher_logits: Var,
    labels: &[usize],
    cfg: &DistillConfig,
) -> Result<Var> {
    distill_cls_loss_with(tape, student_logits, teacher_logits, None, labels, cfg, ClsTarget::Soft)
}

/// Classification distillation with a selectable teacher target.
///
/// `embeddings` carries `(K_S, K_T)` and is required for [`ClsTarget::Hidden`].
pub fn distill_cls_loss_with(
    tape: &mut Tape,
    student_logits: Var,
    teacher_logits: Var,
    embeddings: Option<(Var, Var)>,
    labels: &[usize],
    cfg: &DistillConfig,
    target: ClsTarget,
) -> Result<Var> {
    let (ss, ts) = (tape.value(student_logits).shape(), tape.value(teacher_logits).shape());
    if ss != ts {
        return Err(Error::dim("distill_cls_loss", ss, ts));
    }
    let label_loss = softmax_loss(tape, student_logits, labels)?;
    if cfg.alpha == 0.0 {
        return Ok(label_loss);
    }
    let term = match target {
        ClsTarget::Soft => soft_target_loss(tape, student_logits, teacher_logits, cfg.tau)?,
        ClsTarget::Logits => hidden_match_loss(tape, student_logits, teacher_logits)?,
        ClsTarget::Hidden => {
            let (ks, kt) = embeddings
                .ok_or_else(|| Error::contract("hidden-layer target needs student and teacher embeddings"))?;
            hidden_match_loss(tape, ks, kt)?
        }
    };
    let weighted = tape.scale(term, cfg.alpha)?;
    tape.add(label_loss, weighted)
}

/// Batch mean of squared Euclidean distances between matching rows.
fn mean_sq_distance(tape: &mut Tape, op: &'static str, a: Var, b: Var) -> Result<Var> {
    let (sa, sb) = (tape.value(a).shape(), tape.value(b).shape());
    if sa != sb {
        return Err(Error::dim(op, sa, sb));
    }
    let batch = tape.value(a).rows() as f64;
    let diff = tape.sub(a, b)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum(sq)?;
    tape.scale(total, 1.0 / batch)
}

/// Batch mean of `‖R − y‖²`.
pub fn euclidean_loss(tape: &mut Tape, regression: Var, keypoints: Var) -> Result<Var> {
    mean_sq_distance(tape, "euclidean_loss", regression, keypoints)
}

/// Batch mean of `‖K_S − K_T‖²`; the teacher side is detached.
pub fn hidden_match_loss(tape: &mut Tape, student: Var, teacher: Var) -> Result<Var> {
    let teacher = tape.detach(teacher);
    mean_sq_distance(tape, "hidden_match_loss", student, teacher)
}

/// `task + α·soft + β·hidden`. Terms with a zero weight are skipped, which
/// leaves the value identical to the weighted sum.
pub fn general_distill_loss(
    tape: &mut Tape,
    task_loss: Var,
    soft_term: Option<Var>,
    hidden_term: Option<Var>,
    cfg: &DistillConfig,
) -> Result<Var> {
    let mut total = task_loss;
    for (term, weight) in [(soft_term, cfg.alpha), (hidden_term, cfg.beta)] {
        if weight == 0.0 {
            continue;
        }
        let term = term.ok_or_else(|| Error::contract("a weighted distillation term was not provided"))?;
        if !tape.value(term).is_scalar() {
            return Err(Error::contract("distillation terms must be scalars"));
        }
        let weighted = tape.scale(term, weight)?;
        total = tape.add(total, weighted)?;
    }
    Ok(total)
}

/// Regression loss plus optional soft-prediction and hidden-layer terms.
pub fn align_distill_loss(
    tape: &mut Tape,
    student: &Outputs,
    teacher: &Outputs,
    keypoints: Var,
    cfg: &DistillConfig,
) -> Result<Var> {
    let r_s = student
        .regression
        .ok_or_else(|| Error::contract("alignment needs a regression head"))?;
    let task = euclidean_loss(tape, r_s, keypoints)?;
    let soft = if cfg.alpha != 0.0 {
        Some(soft_target_loss(tape, student.logits, teacher.logits, cfg.tau)?)
    } else {
        None
    };
    let hidden = if cfg.beta != 0.0 {
        Some(hidden_match_loss(tape, student.embedding, teacher.embedding)?)
    } else {
        None
    };
    general_distill_loss(tape, task, soft, hidden, cfg)
}

/// Batch mean of `max(0, ‖a − p‖² − ‖a − n‖² + λ)`.
pub fn triplet_loss(tape: &mut Tape, anchor: Var, positive: Var, negative: Var, lambda_margin: f64) -> Result<Var> {
    for (name, other) in [("triplet_loss(positive)", positive), ("triplet_loss(negative)", negative)] {
        let (sa, so) = (tape.value(anchor).shape(), tape.value(other).shape());
        if sa != so {
            return Err(Error::dim(name, sa, so));
        }
    }
    let d_ap = tape.sub(anchor, positive)?;
    let d_ap = tape.mul(d_ap, d_ap)?;
    let d_ap = tape.sum_rows(d_ap)?;
    let d_an = tape.sub(anchor, negative)?;
    let d_an = tape.mul(d_an, d_an)?;
    let d_an = tape.sum_rows(d_an)?;
    let gap = tape.sub(d_ap, d_an)?;
    let shifted = tape.add_scalar(gap, lambda_margin)?;
    let hinge = tape.relu(shifted)?;
    tape.mean(hinge)
}

/// Row indices of triplet members inside a deduplicated sample batch.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TripletRows {
    pub anchor: Vec<usize>,
    pub positive: Vec<usize>,
    pub negative: Vec<usize>,
}

impl TripletRows {
    pub fn len(&self) -> usize {
        self.anchor.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchor.is_empty()
    }
}

/// Triplet loss plus optional soft-prediction, hidden-layer and softmax terms.
///
/// `student` and `teacher` are forward passes over the same deduplicated
/// samples; `rows` points into them. The soft and hidden terms cover every
/// sample in the batch, not just anchors.
pub fn verif_distill_loss(
    tape: &mut Tape,
    student: &Outputs,
    teacher: &Outputs,
    rows: &TripletRows,
    cfg: &DistillConfig,
    include_softmax: bool,
    labels: Option<&[usize]>,
) -> Result<Var> {
    if rows.is_empty() || rows.positive.len() != rows.len() || rows.negative.len() != rows.len() {
        return Err(Error::contract("triplet rows must be non-empty and aligned"));
    }
    let k = student.embedding;
    let ka = tape.gather_rows(k, &rows.anchor)?;
    let kp = tape.gather_rows(k, &rows.positive)?;
    let kn = tape.gather_rows(k, &rows.negative)?;
    let mut task = triplet_loss(tape, ka, kp, kn, cfg.lambda_margin)?;
    if include_softmax {
        let labels = labels.ok_or_else(|| Error::contract("joint softmax needs identity labels"))?;
        let sm = softmax_loss(tape, student.logits, labels)?;
        task = tape.add(task, sm)?;
    }
    let soft = if cfg.alpha != 0.0 {
        Some(soft_target_loss(tape, student.logits, teacher.logits, cfg.tau)?)
    } else {
        None
    };
    let hidden = if cfg.beta != 0.0 {
        Some(hidden_match_loss(tape, student.embedding, teacher.embedding)?)
    } else {
        None
    };
    general_distill_loss(tape, task, soft, hidden, cfg)
}
