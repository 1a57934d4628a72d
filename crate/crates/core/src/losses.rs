//! Task loss and the two anchor-matching losses.
//!
//! Every loss returns its value together with the gradient with respect to its
//! input matrix, already divided by the batch size. Anchors are constants: no
//! gradient flows into them.

use crate::error::{FedError, Result};
use crate::nn::{dot, ForwardCache, Matrix};
use crate::scalar::Scalar;

/// Rows with norm below this are left untouched by [`normalize_features`].
pub const NORM_FLOOR: f64 = 1e-12;

/// Category-wise anchors in feature space.
///
/// Categories that have never been observed carry an all-zero row with
/// `presence[c] == false`; such rows never enter any computation.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorSet<T> {
    anchors: Matrix<T>,
    presence: Vec<bool>,
    round_tag: usize,
}

impl<T: Scalar> AnchorSet<T> {
    pub fn new(anchors: Matrix<T>, presence: Vec<bool>, round_tag: usize) -> Result<Self> {
        if presence.len() != anchors.rows() {
            return Err(FedError::dim("AnchorSet presence", anchors.rows(), presence.len()));
        }
        if !anchors.is_finite() {
            return Err(FedError::Numeric("anchor rows".into()));
        }
        let mut anchors = anchors;
        for (c, &p) in presence.iter().enumerate() {
            if !p {
                anchors.row_mut(c).fill(T::zero());
            }
        }
        Ok(Self {
            anchors,
            presence,
            round_tag,
        })
    }

    /// Every category defined.
    pub fn from_matrix(anchors: Matrix<T>, round_tag: usize) -> Result<Self> {
        let presence = vec![true; anchors.rows()];
        Self::new(anchors, presence, round_tag)
    }

    /// Every category undefined.
    pub fn undefined(num_classes: usize, dim: usize) -> Self {
        Self {
            anchors: Matrix::zeros(num_classes, dim),
            presence: vec![false; num_classes],
            round_tag: 0,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.anchors.rows()
    }

    pub fn dim(&self) -> usize {
        self.anchors.cols()
    }

    pub fn round_tag(&self) -> usize {
        self.round_tag
    }

    pub fn matrix(&self) -> &Matrix<T> {
        &self.anchors
    }

    pub fn presence(&self) -> &[bool] {
        &self.presence
    }

    pub fn is_defined(&self, c: usize) -> bool {
        self.presence[c]
    }

    /// Anchor of category `c`, `None` for the undefined sentinel.
    pub fn anchor(&self, c: usize) -> Option<&[T]> {
        self.presence[c].then(|| self.anchors.row(c))
    }

    pub fn defined_count(&self) -> usize {
        self.presence.iter().filter(|&&p| p).count()
    }

    /// Copy with every defined row rescaled to unit norm.
    pub fn renormalized(&self) -> Self {
        let mut out = self.clone();
        for c in 0..out.num_classes() {
            if out.presence[c] {
                normalize_row(out.anchors.row_mut(c));
            }
        }
        out
    }

    /// Mean distance between anchors defined in both sets.
    pub fn mean_displacement(&self, previous: &Self) -> Option<T> {
        let mut total = T::zero();
        let mut n = 0usize;
        for c in 0..self.num_classes().min(previous.num_classes()) {
            if let (Some(a), Some(b)) = (self.anchor(c), previous.anchor(c)) {
                total += crate::nn::squared_distance(a, b).sqrt();
                n += 1;
            }
        }
        (n > 0).then(|| total / T::of_usize(n))
    }
}

/// Loss decomposition `total = task + lambda · matching`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown<T> {
    pub task_loss: T,
    pub match_loss: T,
    pub total: T,
    pub lambda: T,
}

impl<T: Scalar> LossBreakdown<T> {
    pub fn new(task_loss: T, match_loss: T, lambda: T) -> Self {
        Self {
            task_loss,
            match_loss,
            total: task_loss + lambda * match_loss,
            lambda,
        }
    }

    pub fn zero() -> Self {
        Self::new(T::zero(), T::zero(), T::zero())
    }
}

/// Feature matching term applied on top of the task loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Matching {
    /// Task loss only.
    None,
    /// Squared distance to the category's anchor.
    L2,
    /// Cross-entropy over temperature-scaled feature/anchor inner products.
    Contrastive { alpha: f64 },
}

impl Matching {
    pub fn is_active(&self) -> bool {
        !matches!(self, Matching::None)
    }
}

fn check_labels(rows: usize, labels: &[usize], classes: usize, what: &str) -> Result<()> {
    if labels.len() != rows {
        return Err(FedError::dim(format!("{what} labels"), rows, labels.len()));
    }
    if let Some(&c) = labels.iter().find(|&&c| c >= classes) {
        return Err(FedError::Contract(format!(
            "{what}: label {c} outside [0, {classes})"
        )));
    }
    Ok(())
}

/// Mean softmax cross-entropy; gradient `(softmax − onehot) / batch`.
pub fn cross_entropy<T: Scalar>(logits: &Matrix<T>, labels: &[usize]) -> Result<(T, Matrix<T>)> {
    check_labels(logits.rows(), labels, logits.cols(), "cross_entropy")?;
    let n = logits.rows();
    let mut grad = Matrix::zeros(n, logits.cols());
    if n == 0 {
        return Ok((T::zero(), grad));
    }
    let inv_n = T::one() / T::of_usize(n);
    let mut loss = T::zero();
    for (i, (&label, row)) in labels.iter().zip(logits.row_iter()).enumerate() {
        let (lse, probs) = softmax_with_lse(row.iter().copied());
        loss += lse - row[label];
        let g = grad.row_mut(i);
        for (g, p) in g.iter_mut().zip(probs) {
            *g = p * inv_n;
        }
        g[label] -= inv_n;
    }
    Ok((loss * inv_n, grad))
}

/// Returns `log Σ exp(z)` and the softmax probabilities.
fn softmax_with_lse<T: Scalar>(z: impl Iterator<Item = T> + Clone) -> (T, Vec<T>) {
    let max = z.clone().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = z.map(|v| (v - max).exp()).collect();
    let sum: T = exps.iter().copied().sum();
    let lse = max + sum.ln();
    (lse, exps.into_iter().map(|e| e / sum).collect())
}

fn normalize_row<T: Scalar>(row: &mut [T]) {
    let norm = dot(row, row).sqrt();
    if norm.as_f64() >= NORM_FLOOR {
        row.iter_mut().for_each(|v| *v /= norm);
    }
}

/// Scales each row to unit ℓ2 norm; rows with norm below `1e-12` are unchanged.
pub fn normalize_features<T: Scalar>(features: &Matrix<T>) -> Matrix<T> {
    let mut out = features.clone();
    for r in 0..out.rows() {
        normalize_row(out.row_mut(r));
    }
    out
}

/// Pulls a gradient with respect to normalized rows back to the raw rows
/// through the Jacobian of `x ↦ x / ‖x‖`: `(g − y⟨y, g⟩) / ‖x‖`.
pub fn normalize_backward<T: Scalar>(raw: &Matrix<T>, d_normalized: &Matrix<T>) -> Matrix<T> {
    debug_assert_eq!(raw.shape(), d_normalized.shape());
    let mut out = d_normalized.clone();
    for r in 0..raw.rows() {
        let x = raw.row(r);
        let norm = dot(x, x).sqrt();
        if norm.as_f64() < NORM_FLOOR {
            continue;
        }
        let g = d_normalized.row(r);
        let y_dot_g = dot(x, g) / norm;
        for ((o, &xi), &gi) in out.row_mut(r).iter_mut().zip(x).zip(g) {
            *o = (gi - xi / norm * y_dot_g) / norm;
        }
    }
    out
}

fn check_anchor_inputs<T: Scalar>(
    features: &Matrix<T>,
    labels: &[usize],
    anchors: &AnchorSet<T>,
    what: &str,
) -> Result<()> {
    if anchors.dim() != features.cols() {
        return Err(FedError::dim(format!("{what} anchor dimension"), features.cols(), anchors.dim()));
    }
    check_labels(features.rows(), labels, anchors.num_classes(), what)
}

/// Mean over the batch of `‖f − a_c‖²`. Samples whose anchor is undefined
/// contribute nothing but still count in the batch mean.
pub fn l2_match_loss<T: Scalar>(
    features: &Matrix<T>,
    labels: &[usize],
    anchors: &AnchorSet<T>,
) -> Result<(T, Matrix<T>)> {
    check_anchor_inputs(features, labels, anchors, "l2_match_loss")?;
    let n = features.rows();
    let mut grad = Matrix::zeros(n, features.cols());
    if n == 0 {
        return Ok((T::zero(), grad));
    }
    let inv_n = T::one() / T::of_usize(n);
    let two = T::of(2.0);
    let mut loss = T::zero();
    for (i, (&c, f)) in labels.iter().zip(features.row_iter()).enumerate() {
        let Some(a) = anchors.anchor(c) else { continue };
        for ((g, &fv), &av) in grad.row_mut(i).iter_mut().zip(f).zip(a) {
            let d = fv - av;
            loss += d * d;
            *g = two * d * inv_n;
        }
    }
    Ok((loss * inv_n, grad))
}

/// Contrastive-guiding loss: per sample, `s = softmax(⟨a_n, f⟩ / α)` over the
/// defined anchors and the loss is `−log s_c`, averaged over the batch.
///
/// Undefined anchors are left out of the softmax; a sample whose own anchor is
/// undefined contributes nothing.
pub fn cg_loss<T: Scalar>(
    features: &Matrix<T>,
    labels: &[usize],
    anchors: &AnchorSet<T>,
    alpha: f64,
) -> Result<(T, Matrix<T>)> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(FedError::Config(format!("temperature alpha must be > 0, got {alpha}")));
    }
    check_anchor_inputs(features, labels, anchors, "cg_loss")?;
    let n = features.rows();
    let mut grad = Matrix::zeros(n, features.cols());
    if n == 0 {
        return Ok((T::zero(), grad));
    }
    let inv_n = T::one() / T::of_usize(n);
    let inv_alpha = T::one() / T::of(alpha);
    let defined: Vec<usize> = (0..anchors.num_classes()).filter(|&c| anchors.is_defined(c)).collect();
    let mut loss = T::zero();
    for (i, (&c, f)) in labels.iter().zip(features.row_iter()).enumerate() {
        if !anchors.is_defined(c) {
            continue;
        }
        let sims = defined
            .iter()
            .map(|&j| dot(anchors.matrix().row(j), f) * inv_alpha);
        let (lse, probs) = softmax_with_lse(sims);
        loss += lse - dot(anchors.matrix().row(c), f) * inv_alpha;

        let g = grad.row_mut(i);
        for (&j, &p) in defined.iter().zip(&probs) {
            let coeff = (p - if j == c { T::one() } else { T::zero() }) * inv_alpha * inv_n;
            for (gv, &av) in g.iter_mut().zip(anchors.matrix().row(j)) {
                *gv += coeff * av;
            }
        }
    }
    Ok((loss * inv_n, grad))
}

/// Matching loss on already-normalized features.
pub fn match_loss<T: Scalar>(
    normalized: &Matrix<T>,
    labels: &[usize],
    anchors: &AnchorSet<T>,
    matching: Matching,
) -> Result<(T, Matrix<T>)> {
    match matching {
        Matching::None => Ok((T::zero(), Matrix::zeros(normalized.rows(), normalized.cols()))),
        Matching::L2 => l2_match_loss(normalized, labels, anchors),
        Matching::Contrastive { alpha } => cg_loss(normalized, labels, anchors, alpha),
    }
}

/// Output of [`combined_local_loss`]: the decomposition and both gradient
/// streams for [`crate::nn::MlpParams::backward`].
#[derive(Clone, Debug)]
pub struct LocalLoss<T> {
    pub breakdown: LossBreakdown<T>,
    pub d_logits: Matrix<T>,
    pub d_features: Matrix<T>,
}

/// `task + λ · matching` for one batch.
///
/// The classifier head sees raw features; the matching term is evaluated on
/// normalized features and its gradient is pulled back through the
/// normalization. With `Matching::None` or `λ = 0` the feature gradient is
/// exactly zero.
pub fn combined_local_loss<T: Scalar>(
    cache: &ForwardCache<T>,
    labels: &[usize],
    anchors: Option<&AnchorSet<T>>,
    lambda: f64,
    matching: Matching,
) -> Result<LocalLoss<T>> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(FedError::Config(format!("lambda must be >= 0, got {lambda}")));
    }
    let (task, d_logits) = cross_entropy(cache.logits(), labels)?;
    let feature = cache.feature();
    let zero_features = || Matrix::zeros(feature.rows(), feature.cols());

    if !matching.is_active() {
        return Ok(LocalLoss {
            breakdown: LossBreakdown::new(task, T::zero(), T::zero()),
            d_logits,
            d_features: zero_features(),
        });
    }
    let anchors = anchors.ok_or_else(|| {
        FedError::Protocol("feature matching requested without an anchor set".into())
    })?;
    let normalized = normalize_features(feature);
    let (m, d_norm) = match_loss(&normalized, labels, anchors, matching)?;
    let lambda_t = T::of(lambda);
    let d_features = if lambda == 0.0 {
        zero_features()
    } else {
        let mut d = normalize_backward(feature, &d_norm);
        d.scale(lambda_t);
        d
    };
    Ok(LocalLoss {
        breakdown: LossBreakdown::new(task, m, lambda_t),
        d_logits,
        d_features,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix<f64> {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn uniform_logits_give_ln_c() {
        let (loss, _) = cross_entropy(&Matrix::<f64>::zeros(3, 10), &[0, 4, 9]).unwrap();
        assert!(close(loss, 10f64.ln(), 1e-15));
        assert!(close(loss, 2.302585, 1e-6));
    }

    #[test]
    fn two_class_hand_value() {
        let (loss, grad) = cross_entropy(&m(&[&[1.0, 0.0]]), &[0]).unwrap();
        let expected = (1.0 + (-1.0f64).exp()).ln();
        assert!(close(loss, expected, 1e-15));
        assert!(close(loss, 0.313262, 1e-6));
        let p0 = 1.0 / (1.0 + (-1.0f64).exp());
        assert!(close(grad.get(0, 0), p0 - 1.0, 1e-15));
        assert!(close(grad.get(0, 1), 1.0 - p0, 1e-15));
    }

    #[test]
    fn confident_correct_logits_drive_loss_to_zero() {
        let mut prev = f64::INFINITY;
        for scale in [1.0, 2.0, 5.0, 10.0, 50.0] {
            let (loss, _) = cross_entropy(&m(&[&[scale, 0.0, -scale]]), &[0]).unwrap();
            assert!(loss < prev);
            prev = loss;
        }
        assert!(prev < 1e-20);
    }

    #[test]
    fn cross_entropy_is_stable_for_large_logits() {
        let (loss, grad) = cross_entropy(&m(&[&[1000.0, -1000.0]]), &[1]).unwrap();
        assert!(close(loss, 2000.0, 1e-9));
        assert!(grad.is_finite());
    }

    #[test]
    fn normalization_cases() {
        let out = normalize_features(&m(&[&[3.0, 4.0], &[0.6, 0.8], &[0.0, 0.0]]));
        assert!(close(out.get(0, 0), 0.6, 1e-15) && close(out.get(0, 1), 0.8, 1e-15));
        assert_eq!(out.row(1), &[0.6, 0.8]);
        assert_eq!(out.row(2), &[0.0, 0.0]);
    }

    #[test]
    fn l2_hand_value_and_matched_case() {
        let anchors = AnchorSet::from_matrix(m(&[&[0.0, 1.0], &[1.0, 0.0]]), 0).unwrap();
        let (loss, _) = l2_match_loss(&m(&[&[0.6, 0.8]]), &[0], &anchors).unwrap();
        assert!(close(loss, 0.40, 1e-15));

        let (loss, grad) = l2_match_loss(&m(&[&[1.0, 0.0]]), &[1], &anchors).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.as_slice().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn undefined_anchor_contributes_nothing() {
        let anchors = AnchorSet::new(m(&[&[0.0, 1.0], &[9.0, 9.0]]), vec![true, false], 0).unwrap();
        assert_eq!(anchors.anchor(1), None);
        let feats = m(&[&[0.6, 0.8], &[1.0, 0.0]]);
        let (l2, g2) = l2_match_loss(&feats, &[0, 1], &anchors).unwrap();
        assert!(close(l2, 0.20, 1e-15));
        assert_eq!(g2.row(1), &[0.0, 0.0]);
        let (cg, gc) = cg_loss(&feats, &[1, 1], &anchors, 1.0).unwrap();
        assert_eq!(cg, 0.0);
        assert!(gc.as_slice().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn cg_hand_value() {
        let anchors = AnchorSet::from_matrix(m(&[&[1.0, 0.0], &[0.0, 1.0]]), 0).unwrap();
        let (loss, _) = cg_loss(&m(&[&[1.0, 0.0]]), &[0], &anchors, 1.0).unwrap();
        let s1 = std::f64::consts::E / (std::f64::consts::E + 1.0);
        assert!(close(s1, 0.731059, 1e-6));
        assert!(close(loss, -s1.ln(), 1e-15));
        assert!(close(loss, 0.313262, 1e-6));
    }

    #[test]
    fn cg_identical_anchors_give_ln2() {
        let anchors = AnchorSet::from_matrix(m(&[&[0.3, 0.4], &[0.3, 0.4]]), 0).unwrap();
        let (loss, _) = cg_loss(&m(&[&[0.8, -0.6], &[0.0, 1.0]]), &[0, 1], &anchors, 0.5).unwrap();
        assert!(close(loss, 2f64.ln(), 1e-15));
    }

    #[test]
    fn cg_rejects_nonpositive_temperature() {
        let anchors = AnchorSet::from_matrix(m(&[&[1.0, 0.0], &[0.0, 1.0]]), 0).unwrap();
        assert!(cg_loss(&m(&[&[1.0, 0.0]]), &[0], &anchors, 0.0).is_err());
    }

    #[test]
    fn breakdown_identity() {
        let b = LossBreakdown::new(0.7, 0.2, 50.0);
        assert!(close(b.total, 0.7 + 50.0 * 0.2, 1e-12));
    }

    #[test]
    fn anchor_dimension_mismatch_is_reported() {
        let anchors = AnchorSet::from_matrix(m(&[&[1.0, 0.0, 0.0]]), 0).unwrap();
        assert!(matches!(
            l2_match_loss(&m(&[&[1.0, 0.0]]), &[0], &anchors),
            Err(FedError::Dimension { .. })
        ));
    }

    #[test]
    fn renormalize_and_displacement() {
        let a = AnchorSet::new(m(&[&[3.0, 4.0], &[1.0, 1.0]]), vec![true, false], 2).unwrap();
        let r = a.renormalized();
        assert!(close(r.matrix().get(0, 0), 0.6, 1e-15));
        assert_eq!(r.matrix().row(1), &[0.0, 0.0]);
        let d = r.mean_displacement(&a).unwrap();
        assert!(close(d, 4.0, 1e-12));
        assert_eq!(AnchorSet::<f64>::undefined(2, 2).mean_displacement(&a), None);
    }
}
