//! Distillation losses: tempered softmax, soft and hard cross-entropies,
//! the adaptive epoch schedule, internal-parameter stacking, the cosine
//! embedding loss and the three total-loss combiners.
//!
//! Everything here is a pure function; batched variants use mean reduction
//! so the temperature and schedule weights stay comparable across batch
//! sizes.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::teachers::TeacherKind;
use crate::vit::InternalParameters;

/// Student probabilities are clamped here before the log so the soft loss
/// stays finite at y_i = 0.
pub const PROB_FLOOR: f64 = 1e-12;

/// A validated probability vector over C classes.
#[derive(Debug, Clone)]
pub struct ProbVector<F: Scalar>(Array1<F>);

impl<F: Scalar> ProbVector<F> {
    pub fn new(values: Array1<F>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Input("probability vector must be non-empty".into()));
        }
        if values.iter().any(|v| !v.is_finite() || *v < F::zero()) {
            return Err(Error::Input(
                "probability vector entries must be finite and non-negative".into(),
            ));
        }
        let sum: f64 = values.iter().map(|v| v.as_f64()).sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Input(format!(
                "probability vector sums to {sum}, expected 1 within 1e-6"
            )));
        }
        Ok(Self(values))
    }

    pub fn view(&self) -> ArrayView1<'_, F> {
        self.0.view()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Array1<F> {
        self.0
    }
}

/// Tempered softmax: `y_i = exp(z_i/T) / sum_j exp(z_j/T)`, stabilized by
/// max-subtraction. Higher T softens the distribution; argmax is preserved.
pub fn tempered_softmax<F: Scalar>(logits: ArrayView1<'_, F>, t: F) -> Result<ProbVector<F>> {
    check_temperature(t)?;
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("non-finite logits".into()));
    }
    if logits.is_empty() {
        return Err(Error::Input("empty logit vector".into()));
    }
    let max = logits.iter().cloned().fold(F::neg_infinity(), F::max);
    let mut out = Array1::zeros(logits.len());
    let mut sum = F::zero();
    for (o, &z) in out.iter_mut().zip(logits.iter()) {
        *o = ((z - max) / t).exp();
        sum += *o;
    }
    out.mapv_inplace(|v| v / sum);
    ProbVector::new(out)
}

/// Row-wise tempered softmax for a batch of logits.
pub fn tempered_softmax_batch<F: Scalar>(logits: ArrayView2<'_, F>, t: F) -> Result<Array2<F>> {
    check_temperature(t)?;
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("non-finite logits".into()));
    }
    let (b, c) = logits.dim();
    if b == 0 || c == 0 {
        return Err(Error::Input("empty logit matrix".into()));
    }
    let mut out = Array2::zeros((b, c));
    for (mut row_out, row) in out.rows_mut().into_iter().zip(logits.rows()) {
        let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for (o, &z) in row_out.iter_mut().zip(row.iter()) {
            *o = ((z - max) / t).exp();
            sum += *o;
        }
        for o in row_out.iter_mut() {
            *o /= sum;
        }
    }
    Ok(out)
}

/// Soft loss: cross-entropy between teacher and student pseudo-probability
/// distributions produced at the same temperature.
pub fn soft_loss<F: Scalar>(teacher: &ProbVector<F>, student: &ProbVector<F>) -> Result<F> {
    if teacher.len() != student.len() {
        return Err(Error::Input(format!(
            "teacher has {} classes, student {}",
            teacher.len(),
            student.len()
        )));
    }
    Ok(soft_loss_row(teacher.view(), student.view()))
}

/// Mean soft loss over a batch; rows are per-sample distributions.
pub fn soft_loss_batch<F: Scalar>(
    teacher: ArrayView2<'_, F>,
    student: ArrayView2<'_, F>,
) -> Result<F> {
    if teacher.dim() != student.dim() {
        return Err(Error::Input(format!(
            "teacher shape {:?} vs student shape {:?}",
            teacher.dim(),
            student.dim()
        )));
    }
    let b = teacher.nrows();
    if b == 0 {
        return Err(Error::Input("empty batch".into()));
    }
    let mut acc = F::zero();
    for (tr, sr) in teacher.rows().into_iter().zip(student.rows()) {
        acc += soft_loss_row(tr, sr);
    }
    Ok(acc / F::cast(b as f64))
}

fn soft_loss_row<F: Scalar>(teacher: ArrayView1<'_, F>, student: ArrayView1<'_, F>) -> F {
    let floor = F::cast(PROB_FLOOR);
    let mut acc = F::zero();
    for (&ti, &si) in teacher.iter().zip(student.iter()) {
        acc -= ti * si.max(floor).ln();
    }
    acc
}

/// Gradient of the mean batched soft loss with respect to the student
/// logits: `(y - y_hat) / (B * T)` per row.
pub fn soft_loss_logit_grad<F: Scalar>(
    teacher_probs: ArrayView2<'_, F>,
    student_probs: ArrayView2<'_, F>,
    t: F,
) -> Array2<F> {
    let b = F::cast(teacher_probs.nrows() as f64);
    let mut grad = &student_probs - &teacher_probs;
    grad.mapv_inplace(|v| v / (b * t));
    grad
}

/// Hard loss: weighted cross-entropy of the student logits against the
/// ground-truth label at temperature 1.
pub fn hard_loss<F: Scalar>(logits: ArrayView1<'_, F>, label: usize, weights: &[F]) -> Result<F> {
    let c = logits.len();
    if label >= c {
        return Err(Error::Input(format!("label {label} out of range for {c} classes")));
    }
    check_weights(weights, c)?;
    Ok(weights[label] * -log_softmax_at(logits, label))
}

/// Mean hard loss over a batch.
pub fn hard_loss_batch<F: Scalar>(
    logits: ArrayView2<'_, F>,
    labels: &[usize],
    weights: &[F],
) -> Result<F> {
    let (b, c) = logits.dim();
    if labels.len() != b {
        return Err(Error::Input(format!("{} labels for batch of {b}", labels.len())));
    }
    if b == 0 {
        return Err(Error::Input("empty batch".into()));
    }
    check_weights(weights, c)?;
    let mut acc = F::zero();
    for (row, &g) in logits.rows().into_iter().zip(labels.iter()) {
        if g >= c {
            return Err(Error::Input(format!("label {g} out of range for {c} classes")));
        }
        acc += weights[g] * -log_softmax_at(row, g);
    }
    Ok(acc / F::cast(b as f64))
}

/// Gradient of the mean batched hard loss with respect to the logits:
/// `w_g * (softmax(z) - onehot(g)) / B` per row.
pub fn hard_loss_logit_grad<F: Scalar>(
    logits: ArrayView2<'_, F>,
    labels: &[usize],
    weights: &[F],
) -> Result<Array2<F>> {
    let (b, c) = logits.dim();
    if labels.len() != b || b == 0 {
        return Err(Error::Input("label count must match a non-empty batch".into()));
    }
    check_weights(weights, c)?;
    let bf = F::cast(b as f64);
    let mut grad = tempered_softmax_batch(logits, F::one())?;
    for (i, mut row) in grad.rows_mut().into_iter().enumerate() {
        let g = labels[i];
        if g >= c {
            return Err(Error::Input(format!("label {g} out of range for {c} classes")));
        }
        let w = weights[g];
        for (j, v) in row.iter_mut().enumerate() {
            let target = if j == g { F::one() } else { F::zero() };
            *v = w * (*v - target) / bf;
        }
    }
    Ok(grad)
}

fn log_softmax_at<F: Scalar>(logits: ArrayView1<'_, F>, index: usize) -> F {
    let max = logits.iter().cloned().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for &z in logits.iter() {
        sum += (z - max).exp();
    }
    logits[index] - max - sum.ln()
}

fn check_temperature<F: Scalar>(t: F) -> Result<()> {
    if !(t > F::zero()) || !t.is_finite() {
        return Err(Error::Parameter(format!("temperature must be positive, got {t}")));
    }
    Ok(())
}

fn check_weights<F: Scalar>(weights: &[F], c: usize) -> Result<()> {
    if weights.len() != c {
        return Err(Error::Input(format!(
            "{} class weights for {c} classes",
            weights.len()
        )));
    }
    if weights.iter().any(|w| !(*w > F::zero())) {
        return Err(Error::Parameter("class weights must be positive".into()));
    }
    Ok(())
}

/// Adaptive schedule weight `sqrt(E / e)`: emphasizes teacher imitation at
/// the start of adaptation and decays to exactly 1 at the last epoch.
pub fn schedule_weight(epoch: usize, total_epochs: usize) -> Result<f64> {
    if epoch < 1 || epoch > total_epochs {
        return Err(Error::Parameter(format!(
            "epoch {epoch} outside [1, {total_epochs}]"
        )));
    }
    Ok((total_epochs as f64 / epoch as f64).sqrt())
}

/// The stacked `4 x H` internal embedding: rows are b_n, w_n, b_o and the
/// mean of the transposed W_o (one mean per hidden channel over the I axis).
#[derive(Debug, Clone)]
pub struct InternalEmbedding<F: Scalar>(Array2<F>);

impl<F: Scalar> InternalEmbedding<F> {
    pub fn new(matrix: Array2<F>) -> Result<Self> {
        if matrix.nrows() != 4 || matrix.ncols() == 0 {
            return Err(Error::Input(format!(
                "internal embedding must be 4 x H, got {} x {}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("internal embedding has non-finite entries".into()));
        }
        Ok(Self(matrix))
    }

    pub fn view(&self) -> ArrayView2<'_, F> {
        self.0.view()
    }

    pub fn hidden_size(&self) -> usize {
        self.0.ncols()
    }
}

/// Stack (b_n, w_n, b_o, mean(W_o^T)) into a 4 x H matrix.
pub fn stack_internals<F: Scalar>(p: &InternalParameters<F>) -> Result<InternalEmbedding<F>> {
    p.validate()?;
    let h = p.hidden_size();
    let i = p.linear_weight.ncols();
    let mut out = Array2::zeros((4, h));
    out.row_mut(0).assign(&p.norm_bias);
    out.row_mut(1).assign(&p.norm_weight);
    out.row_mut(2).assign(&p.linear_bias);
    let mean = p.linear_weight.sum_axis(Axis(1)) / F::cast(i as f64);
    out.row_mut(3).assign(&mean);
    InternalEmbedding::new(out)
}

/// Cosine embedding target: +1 pulls the matrices together, -1 pushes
/// dissimilar pairs below zero similarity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CosineTarget {
    Similar,
    Dissimilar,
}

/// Cosine embedding loss between student and teacher internal embeddings.
///
/// Cosine similarity is computed per corresponding row pair (4 pairs along
/// the H axis) and the per-row losses are mean-reduced, so no parameter
/// group dominates through sheer magnitude.
pub fn cosine_embedding_loss<F: Scalar>(
    student: &InternalEmbedding<F>,
    teacher: &InternalEmbedding<F>,
    target: CosineTarget,
) -> Result<F> {
    Ok(cosine_loss_and_grad(student, teacher, target)?.0)
}

/// Cosine embedding loss plus its gradient with respect to the student
/// embedding rows.
pub fn cosine_loss_and_grad<F: Scalar>(
    student: &InternalEmbedding<F>,
    teacher: &InternalEmbedding<F>,
    target: CosineTarget,
) -> Result<(F, Array2<F>)> {
    let ws = student.view();
    let wt = teacher.view();
    if ws.dim() != wt.dim() {
        return Err(Error::Input(format!(
            "embedding shapes differ: {:?} vs {:?}",
            ws.dim(),
            wt.dim()
        )));
    }
    let rows = ws.nrows();
    let rows_f = F::cast(rows as f64);
    let mut loss = F::zero();
    let mut grad = Array2::zeros(ws.raw_dim());
    for r in 0..rows {
        let a = ws.row(r);
        let b = wt.row(r);
        let na = a.dot(&a).sqrt();
        let nb = b.dot(&b).sqrt();
        let denom = na * nb;
        if !(denom > F::zero()) || !denom.is_finite() {
            return Err(Error::Degenerate(format!(
                "row {r} of the internal embedding has zero norm"
            )));
        }
        let dot = a.dot(&b);
        let cos = (dot / denom).max(-F::one()).min(F::one());
        // d cos / d a = b/(|a||b|) - cos * a/|a|^2
        let active = match target {
            CosineTarget::Similar => {
                loss += F::one() - cos;
                Some(-F::one() / rows_f)
            }
            CosineTarget::Dissimilar => {
                if cos > F::zero() {
                    loss += cos;
                    Some(F::one() / rows_f)
                } else {
                    None
                }
            }
        };
        if let Some(outer) = active {
            let na2 = na * na;
            for (j, g) in grad.row_mut(r).iter_mut().enumerate() {
                let dcos = b[j] / denom - cos * a[j] / na2;
                *g = outer * dcos;
            }
        }
    }
    Ok((loss / rows_f, grad))
}

/// Hinton et al. baseline total: `T^2 * L_s + L_h`.
pub fn hinton_total<F: Scalar>(l_soft: F, l_hard: F, t: F) -> F {
    t * t * l_soft + l_hard
}

/// Method-1 adaptive total: `sqrt(E/e) * T^2 * L_s + L_h`. Equals the
/// Hinton total exactly at e = E.
pub fn method1_total<F: Scalar>(
    l_soft: F,
    l_hard: F,
    t: F,
    epoch: usize,
    total_epochs: usize,
) -> Result<F> {
    let w = F::cast(schedule_weight(epoch, total_epochs)?);
    Ok(w * (t * t * l_soft) + l_hard)
}

/// Method-2 total: `sqrt(E/e) * (T^2 * L_s + L_c) + L_h`. The cosine term
/// sits inside the scheduled parenthesis and carries no T^2 factor.
pub fn method2_total<F: Scalar>(
    l_soft: F,
    l_cosine: F,
    l_hard: F,
    t: F,
    epoch: usize,
    total_epochs: usize,
) -> Result<F> {
    let w = F::cast(schedule_weight(epoch, total_epochs)?);
    Ok(w * (t * t * l_soft + l_cosine) + l_hard)
}

/// Distillation strategy selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Plain fine-tuning, hard loss only.
    None,
    /// Hinton et al. total.
    Hinton,
    /// Epoch-scheduled soft loss.
    Method1,
    /// Epoch-scheduled soft plus cosine internal-embedding loss.
    Method2,
}

impl Strategy {
    pub fn label(&self) -> &'static str {
        match self {
            Strategy::None => "no distillation",
            Strategy::Hinton => "hinton",
            Strategy::Method1 => "method1",
            Strategy::Method2 => "method2",
        }
    }

    pub fn uses_teacher(&self) -> bool {
        !matches!(self, Strategy::None)
    }
}

/// Distillation hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistillConfig {
    /// Soft-loss temperature T.
    pub temperature: f64,
    /// Total epochs E of the schedule denominator; must match the training
    /// epoch budget.
    pub total_epochs: usize,
    pub strategy: Strategy,
    pub teacher_kind: TeacherKind,
    /// Per-class hard-loss weights; `None` means all ones.
    #[serde(default)]
    pub class_weights: Option<Vec<f64>>,
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Parameter(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.total_epochs < 1 {
            return Err(Error::Parameter("total_epochs must be >= 1".into()));
        }
        if let Some(w) = &self.class_weights {
            if w.iter().any(|v| !(*v > 0.0)) {
                return Err(Error::Parameter("class weights must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn weights_for<F: Scalar>(&self, num_classes: usize) -> Result<Vec<F>> {
        match &self.class_weights {
            None => Ok(vec![F::one(); num_classes]),
            Some(w) => {
                if w.len() != num_classes {
                    return Err(Error::Config(format!(
                        "{} class weights for {num_classes} classes",
                        w.len()
                    )));
                }
                Ok(w.iter().map(|&v| F::cast(v)).collect())
            }
        }
    }
}

/// Per-batch (or per-epoch mean) loss components. `total` always equals the
/// active combiner applied to the stored components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub soft: f64,
    pub hard: f64,
    pub cosine: f64,
    pub schedule_weight: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn none(hard: f64) -> Self {
        Self {
            soft: 0.0,
            hard,
            cosine: 0.0,
            schedule_weight: 1.0,
            total: hard,
        }
    }

    pub fn for_strategy(
        strategy: Strategy,
        soft: f64,
        cosine: f64,
        hard: f64,
        t: f64,
        epoch: usize,
        total_epochs: usize,
    ) -> Result<Self> {
        let breakdown = match strategy {
            Strategy::None => Self::none(hard),
            Strategy::Hinton => Self {
                soft,
                hard,
                cosine: 0.0,
                schedule_weight: 1.0,
                total: hinton_total(soft, hard, t),
            },
            Strategy::Method1 => Self {
                soft,
                hard,
                cosine: 0.0,
                schedule_weight: schedule_weight(epoch, total_epochs)?,
                total: method1_total(soft, hard, t, epoch, total_epochs)?,
            },
            Strategy::Method2 => Self {
                soft,
                hard,
                cosine,
                schedule_weight: schedule_weight(epoch, total_epochs)?,
                total: method2_total(soft, cosine, hard, t, epoch, total_epochs)?,
            },
        };
        Ok(breakdown)
    }

    /// Re-apply the combiner to the stored components; used by loss
    /// accounting checks.
    pub fn recombine(&self, strategy: Strategy, t: f64) -> f64 {
        match strategy {
            Strategy::None => self.hard,
            Strategy::Hinton => hinton_total(self.soft, self.hard, t),
            Strategy::Method1 => self.schedule_weight * (t * t * self.soft) + self.hard,
            Strategy::Method2 => {
                self.schedule_weight * (t * t * self.soft + self.cosine) + self.hard
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.soft.is_finite()
            && self.hard.is_finite()
            && self.cosine.is_finite()
            && self.schedule_weight.is_finite()
            && self.total.is_finite()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{arr1, arr2};
    use proptest::prelude::*;

    const LN2: f64 = std::f64::consts::LN_2;

    fn probs(v: &[f64]) -> ProbVector<f64> {
        ProbVector::new(arr1(v)).unwrap()
    }

    #[test]
    fn tempered_softmax_oracles() {
        let p = tempered_softmax(arr1(&[1.0, 1.0, 1.0]).view(), 2.0).unwrap();
        for &v in p.view().iter() {
            assert_abs_diff_eq!(v, 1.0 / 3.0, epsilon = 1e-6);
        }

        let p = tempered_softmax(arr1(&[2.0, 0.0]).view(), 1.0).unwrap();
        assert_abs_diff_eq!(p.view()[0], 0.880797, epsilon = 1e-6);
        assert_abs_diff_eq!(p.view()[1], 0.119203, epsilon = 1e-6);

        let p = tempered_softmax(arr1(&[2.0, 0.0]).view(), 1e6).unwrap();
        assert_abs_diff_eq!(p.view()[0], 0.5, epsilon = 1e-5);
        assert_abs_diff_eq!(p.view()[1], 0.5, epsilon = 1e-5);
    }

    #[test]
    fn tempered_softmax_rejects_bad_inputs() {
        assert!(matches!(
            tempered_softmax(arr1(&[1.0, 2.0]).view(), 0.0),
            Err(Error::Parameter(_))
        ));
        assert!(matches!(
            tempered_softmax(arr1(&[1.0, 2.0]).view(), -1.0),
            Err(Error::Parameter(_))
        ));
        assert!(matches!(
            tempered_softmax(arr1(&[f64::NAN, 2.0]).view(), 1.0),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn soft_loss_oracles() {
        assert_abs_diff_eq!(
            soft_loss(&probs(&[1.0, 0.0]), &probs(&[1.0, 0.0])).unwrap(),
            0.0,
            epsilon = 1e-6
        );
        assert_abs_diff_eq!(
            soft_loss(&probs(&[0.5, 0.5]), &probs(&[0.5, 0.5])).unwrap(),
            LN2,
            epsilon = 1e-6
        );
        // cross-entropy with a uniform student is ln 2 for any teacher
        assert_abs_diff_eq!(
            soft_loss(&probs(&[0.9, 0.1]), &probs(&[0.5, 0.5])).unwrap(),
            LN2,
            epsilon = 1e-6
        );
        assert!(matches!(
            soft_loss(&probs(&[0.5, 0.5]), &probs(&[0.2, 0.3, 0.5])),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn hard_loss_oracles() {
        let w = [1.0, 1.0];
        assert_abs_diff_eq!(
            hard_loss(arr1(&[0.0, 0.0]).view(), 0, &w).unwrap(),
            LN2,
            epsilon = 1e-6
        );
        assert_abs_diff_eq!(
            hard_loss(arr1(&[10.0, -10.0]).view(), 0, &w).unwrap(),
            2.061e-9,
            epsilon = 1e-6
        );
        assert_abs_diff_eq!(
            hard_loss(arr1(&[0.0, 0.0]).view(), 0, &[2.0, 1.0]).unwrap(),
            2.0 * LN2,
            epsilon = 1e-6
        );
        assert!(matches!(
            hard_loss(arr1(&[0.0, 0.0]).view(), 2, &w),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn schedule_weight_oracles() {
        assert_eq!(schedule_weight(50, 50).unwrap(), 1.0);
        assert_abs_diff_eq!(schedule_weight(1, 4).unwrap(), 2.0, epsilon = 1e-6);
        assert_abs_diff_eq!(schedule_weight(2, 50).unwrap(), 5.0, epsilon = 1e-6);
        assert!(matches!(schedule_weight(0, 4), Err(Error::Parameter(_))));
        assert!(matches!(schedule_weight(5, 4), Err(Error::Parameter(_))));
    }

    #[test]
    fn stack_internals_hand_example() {
        let p = InternalParameters {
            norm_bias: arr1(&[1.0, 2.0, 3.0]),
            norm_weight: arr1(&[4.0, 5.0, 6.0]),
            linear_bias: arr1(&[7.0, 8.0, 9.0]),
            linear_weight: arr2(&[[1.0, 3.0], [5.0, 7.0], [9.0, 11.0]]),
        };
        let e = stack_internals(&p).unwrap();
        let expected = arr2(&[
            [1.0, 2.0, 3.0],
            [4.0, 5.0, 6.0],
            [7.0, 8.0, 9.0],
            [2.0, 6.0, 10.0],
        ]);
        assert_eq!(e.view(), expected.view());
    }

    #[test]
    fn stack_internals_zero_and_shape() {
        let p = InternalParameters::<f64> {
            norm_bias: Array1::zeros(32),
            norm_weight: Array1::zeros(32),
            linear_bias: Array1::zeros(32),
            linear_weight: Array2::zeros((32, 64)),
        };
        let e = stack_internals(&p).unwrap();
        assert_eq!(e.view().dim(), (4, 32));
        assert!(e.view().iter().all(|&v| v == 0.0));

        let bad = InternalParameters::<f64> {
            norm_bias: Array1::zeros(3),
            norm_weight: Array1::zeros(3),
            linear_bias: Array1::zeros(4),
            linear_weight: Array2::zeros((3, 2)),
        };
        assert!(matches!(stack_internals(&bad), Err(Error::Input(_))));
    }

    #[test]
    fn cosine_loss_oracles() {
        let w = InternalEmbedding::new(arr2(&[
            [1.0, 2.0],
            [0.5, -1.0],
            [3.0, 0.1],
            [-2.0, 4.0],
        ]))
        .unwrap();
        let neg = InternalEmbedding::new(w.view().mapv(|v| -v)).unwrap();
        assert_abs_diff_eq!(
            cosine_embedding_loss(&w, &w, CosineTarget::Similar).unwrap(),
            0.0,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            cosine_embedding_loss(&w, &neg, CosineTarget::Similar).unwrap(),
            2.0,
            epsilon = 1e-12
        );

        // row-wise orthogonal pair
        let a = InternalEmbedding::new(arr2(&[
            [1.0, 0.0],
            [0.0, 1.0],
            [1.0, 0.0],
            [0.0, 1.0],
        ]))
        .unwrap();
        let b = InternalEmbedding::new(arr2(&[
            [0.0, 1.0],
            [1.0, 0.0],
            [0.0, -1.0],
            [-1.0, 0.0],
        ]))
        .unwrap();
        assert_abs_diff_eq!(
            cosine_embedding_loss(&a, &b, CosineTarget::Dissimilar).unwrap(),
            0.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn cosine_loss_rejects_zero_rows() {
        let mut m = arr2(&[[1.0, 2.0], [0.0, 0.0], [3.0, 0.1], [-2.0, 4.0]]);
        let bad = InternalEmbedding::new(m.clone()).unwrap();
        m[[1, 0]] = 1.0;
        let good = InternalEmbedding::new(m).unwrap();
        assert!(matches!(
            cosine_embedding_loss(&bad, &good, CosineTarget::Similar),
            Err(Error::Degenerate(_))
        ));
        assert!(matches!(
            cosine_embedding_loss(&good, &bad, CosineTarget::Similar),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn total_loss_oracles() {
        assert_abs_diff_eq!(hinton_total(1.0, 0.5, 2.0), 4.5, epsilon = 1e-6);
        assert_abs_diff_eq!(hinton_total(0.0, 0.7, 3.0), 0.7, epsilon = 1e-12);
        assert_abs_diff_eq!(hinton_total(0.3, 0.4, 1.0), 0.7, epsilon = 1e-12);

        assert_abs_diff_eq!(method1_total(1.0, 0.5, 2.0, 4, 4).unwrap(), 4.5, epsilon = 1e-6);
        assert_abs_diff_eq!(method1_total(1.0, 0.5, 2.0, 1, 4).unwrap(), 8.5, epsilon = 1e-6);
        assert_abs_diff_eq!(
            method1_total(0.0, 0.5, 7.0, 2, 9).unwrap(),
            0.5,
            epsilon = 1e-12
        );

        assert_abs_diff_eq!(
            method2_total(1.0, 0.25, 0.5, 2.0, 1, 4).unwrap(),
            9.0,
            epsilon = 1e-6
        );
        assert_eq!(
            method2_total(0.8, 0.0, 0.3, 2.0, 3, 7).unwrap(),
            method1_total(0.8, 0.3, 2.0, 3, 7).unwrap()
        );
        assert_abs_diff_eq!(
            method2_total(0.1, 0.2, 0.3, 1.0, 5, 5).unwrap(),
            0.6,
            epsilon = 1e-12
        );
    }

    #[test]
    fn breakdown_recombines() {
        use crate::losses::Strategy as S;
        let b = LossBreakdown::for_strategy(S::Method2, 1.0, 0.25, 0.5, 2.0, 1, 4).unwrap();
        assert_eq!(b.total, 9.0);
        assert_eq!(b.recombine(S::Method2, 2.0), b.total);
        let n = LossBreakdown::none(0.4);
        assert_eq!(n.total, 0.4);
        assert_eq!(n.schedule_weight, 1.0);
    }

    fn entropy(p: &ProbVector<f64>) -> f64 {
        p.view()
            .iter()
            .map(|&v| if v > 0.0 { -v * v.ln() } else { 0.0 })
            .sum()
    }

    proptest! {
        #[test]
        fn softmax_normalizes_and_preserves_argmax(
            z in proptest::collection::vec(-20.0..20.0f64, 2..12),
            t in 0.1..10.0f64,
        ) {
            let logits = Array1::from_vec(z);
            let p = tempered_softmax(logits.view(), t).unwrap();
            let sum: f64 = p.view().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-6);
            let argmax_z = logits
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            let argmax_p = p
                .view()
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            prop_assert_eq!(logits[argmax_z], logits[argmax_p]);
        }

        #[test]
        fn entropy_is_nondecreasing_in_temperature(
            z in proptest::collection::vec(-5.0..5.0f64, 2..8),
            t1 in 0.1..9.0f64,
            dt in 0.01..5.0f64,
        ) {
            let logits = Array1::from_vec(z);
            let spread = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                - logits.iter().cloned().fold(f64::INFINITY, f64::min);
            prop_assume!(spread > 1e-3);
            let lo = entropy(&tempered_softmax(logits.view(), t1).unwrap());
            let hi = entropy(&tempered_softmax(logits.view(), t1 + dt).unwrap());
            prop_assert!(hi >= lo - 1e-9);
        }

        #[test]
        fn schedule_is_nonincreasing_and_ends_at_one(total in 1usize..200) {
            let mut prev = f64::INFINITY;
            for e in 1..=total {
                let w = schedule_weight(e, total).unwrap();
                prop_assert!(w <= prev);
                prev = w;
            }
            prop_assert_eq!(schedule_weight(total, total).unwrap(), 1.0);
        }

        #[test]
        fn stacking_is_linear_in_the_parameters(
            scale in -3.0..3.0f64,
            h in 2usize..6,
            i in 2usize..6,
            seed in 0u64..1000,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut draw = |n: usize| Array1::from_iter((0..n).map(|_| rng.gen_range(-2.0..2.0f64)));
            let p = InternalParameters {
                norm_bias: draw(h),
                norm_weight: draw(h),
                linear_bias: draw(h),
                linear_weight: Array2::from_shape_fn((h, i), |_| rng.gen_range(-2.0..2.0f64)),
            };
            let scaled = InternalParameters {
                norm_bias: p.norm_bias.mapv(|v| v * scale),
                norm_weight: p.norm_weight.mapv(|v| v * scale),
                linear_bias: p.linear_bias.mapv(|v| v * scale),
                linear_weight: p.linear_weight.mapv(|v| v * scale),
            };
            let base = stack_internals(&p).unwrap();
            let lhs = stack_internals(&scaled).unwrap();
            for (a, b) in lhs.view().iter().zip(base.view().iter()) {
                prop_assert!((a - b * scale).abs() <= 1e-12 * b.abs().max(1.0));
            }
        }

        #[test]
        fn cosine_loss_is_bounded_for_similar_target(
            seed in 0u64..1000,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let ws = InternalEmbedding::new(
                Array2::from_shape_fn((4, 6), |_| rng.gen_range(-1.0..1.0f64) + 1.5)
            ).unwrap();
            let wt = InternalEmbedding::new(
                Array2::from_shape_fn((4, 6), |_| rng.gen_range(-1.0..1.0f64) + 1.5)
            ).unwrap();
            let l = cosine_embedding_loss(&ws, &wt, CosineTarget::Similar).unwrap();
            prop_assert!((0.0..=2.0).contains(&l));
            let self_l = cosine_embedding_loss(&ws, &ws, CosineTarget::Similar).unwrap();
            prop_assert!(self_l.abs() < 1e-12);
        }
    }
}
