//! Loss functions of the multi-task detector.
//!
//! The scalar functions in this module work on `f64` and come with closed-form
//! gradients with respect to the network logits. The [`tensor`] submodule holds
//! the batched versions used for training, built from differentiable tensor
//! operations so autograd can backpropagate through them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{AnchorMatch, BoxDelta};

/// Lower clamp applied to probabilities inside logarithms.
pub const PROB_EPS: f64 = 1e-12;

/// Weights of the three task terms in the combined objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskWeights {
    pub det: f64,
    pub tumor: f64,
    pub fg: f64,
}

impl Default for TaskWeights {
    fn default() -> Self {
        TaskWeights { det: 1.0, tumor: 1.0, fg: 1.0 }
    }
}

impl TaskWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("det", self.det), ("tumor", self.tumor), ("fg", self.fg)] {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::Config(format!("task weight {name} = {w} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Focal weight of the positive class; negatives get `1 - alpha`.
    pub alpha: f64,
    /// Focusing exponent.
    pub gamma: f64,
    pub num_tumor_classes: usize,
    pub weights: TaskWeights,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { alpha: 0.25, gamma: 2.0, num_tumor_classes: 6, weights: TaskWeights::default() }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Config(format!("alpha = {} must lie in (0, 1]", self.alpha)));
        }
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(Error::Config(format!("gamma = {} must be finite and >= 0", self.gamma)));
        }
        if self.num_tumor_classes < 2 {
            return Err(Error::Config("at least two tumor classes are required".into()));
        }
        self.weights.validate()
    }

    /// Class weight for a binary target.
    pub fn alpha_for(&self, positive: bool) -> f64 {
        if positive {
            self.alpha
        } else {
            1.0 - self.alpha
        }
    }
}

/// `-ln p[true_class]` for a probability vector.
pub fn cross_entropy(probs: &[f64], true_class: usize) -> Result<f64> {
    if true_class >= probs.len() {
        return Err(Error::InvalidInput(format!(
            "class index {true_class} out of range for {} classes",
            probs.len()
        )));
    }
    if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::InvalidInput("probabilities must lie in [0, 1]".into()));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidInput(format!("probabilities sum to {total}, expected 1")));
    }
    Ok(-probs[true_class].max(PROB_EPS).ln())
}

/// Focal loss `-alpha_c (1 - p_c)^gamma ln p_c` of the true-class probability.
pub fn focal_loss(p_c: f64, alpha_c: f64, gamma: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p_c) {
        return Err(Error::InvalidInput(format!("probability {p_c} outside [0, 1]")));
    }
    if !(alpha_c > 0.0) || !(gamma >= 0.0) {
        return Err(Error::InvalidInput(format!("alpha_c = {alpha_c}, gamma = {gamma} out of range")));
    }
    let p = p_c.max(PROB_EPS);
    Ok(-alpha_c * (1.0 - p).powf(gamma) * p.ln())
}

/// Binary focal loss given the foreground probability and the true label.
pub fn binary_focal_loss(p_fg: f64, is_fg: bool, alpha: f64, gamma: f64) -> Result<f64> {
    let (p_t, alpha_t) = if is_fg { (p_fg, alpha) } else { (1.0 - p_fg, 1.0 - alpha) };
    focal_loss(p_t, alpha_t, gamma)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(sigmoid(x))` without cancellation.
fn log_sigmoid(x: f64) -> f64 {
    -((-x).max(0.0) + (-x.abs()).exp().ln_1p())
}

/// Binary focal loss on a logit and its derivative with respect to the logit.
///
/// With `s = +1` for a positive target and `-1` otherwise, and `p_t` the
/// probability of the target class:
/// `dL/dx = s * alpha_t * (1 - p_t)^gamma * (gamma * p_t * ln p_t - (1 - p_t))`.
pub fn binary_focal_from_logit(logit: f64, positive: bool, alpha: f64, gamma: f64) -> (f64, f64) {
    let (s, alpha_t) = if positive { (1.0, alpha) } else { (-1.0, 1.0 - alpha) };
    let z = s * logit;
    let log_pt = log_sigmoid(z);
    let log_one_minus_pt = log_sigmoid(-z);
    let p_t = log_pt.exp();
    let one_minus_pt = log_one_minus_pt.exp();
    let modulating = (gamma * log_one_minus_pt).exp();
    let value = -alpha_t * modulating * log_pt;
    let grad = s * alpha_t * modulating * (gamma * p_t * log_pt - one_minus_pt);
    (value, grad)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Cross-entropy of softmax(logits) and its gradient `softmax - onehot`.
pub fn cross_entropy_from_logits(logits: &[f64], true_class: usize) -> Result<(f64, Vec<f64>)> {
    if true_class >= logits.len() {
        return Err(Error::InvalidInput(format!(
            "class index {true_class} out of range for {} classes",
            logits.len()
        )));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_z = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    let value = log_z - logits[true_class];
    let mut grad = softmax(logits);
    grad[true_class] -= 1.0;
    Ok((value, grad))
}

pub fn smooth_l1(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        0.5 * x * x
    } else {
        a - 0.5
    }
}

pub fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

/// Detection loss terms before task weighting.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DetectionLoss {
    pub cls: f64,
    pub reg: f64,
}

impl DetectionLoss {
    pub fn total(&self) -> f64 {
        self.cls + self.reg
    }
}

/// Per-anchor training targets for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionTargets {
    pub labels: Vec<AnchorMatch>,
    /// Regression target per anchor; only meaningful for positives.
    pub deltas: Vec<BoxDelta>,
}

impl DetectionTargets {
    pub fn num_positive(&self) -> usize {
        self.labels.iter().filter(|l| matches!(l, AnchorMatch::Positive(_))).count()
    }
}

/// Dense detection loss of one image and its gradients.
///
/// `cls` is the focal loss summed over non-ignored anchors and `reg` the
/// smooth-L1 loss summed over the four coordinates of positive anchors; both
/// are divided by the number of positives (at least 1).
pub fn detection_loss_with_grad(
    cls_logits: &[f64],
    deltas: &[BoxDelta],
    targets: &DetectionTargets,
    alpha: f64,
    gamma: f64,
) -> Result<(DetectionLoss, Vec<f64>, Vec<BoxDelta>)> {
    let n = cls_logits.len();
    if n == 0 {
        return Err(Error::InvalidInput("detection loss needs at least one anchor".into()));
    }
    if deltas.len() != n || targets.labels.len() != n || targets.deltas.len() != n {
        return Err(Error::InvalidInput("anchor, delta and target counts differ".into()));
    }
    let norm = targets.num_positive().max(1) as f64;
    let mut loss = DetectionLoss::default();
    let mut cls_grad = vec![0.0; n];
    let mut delta_grad = vec![BoxDelta::default(); n];

    for i in 0..n {
        let positive = match targets.labels[i] {
            AnchorMatch::Ignore => continue,
            AnchorMatch::Negative => false,
            AnchorMatch::Positive(_) => true,
        };
        let (v, g) = binary_focal_from_logit(cls_logits[i], positive, alpha, gamma);
        loss.cls += v / norm;
        cls_grad[i] = g / norm;
        if positive {
            let pred = deltas[i].to_array();
            let tgt = targets.deltas[i].to_array();
            let mut grad = [0.0; 4];
            for k in 0..4 {
                let diff = pred[k] - tgt[k];
                loss.reg += smooth_l1(diff) / norm;
                grad[k] = smooth_l1_grad(diff) / norm;
            }
            delta_grad[i] = BoxDelta::from_array(grad);
        }
    }
    Ok((loss, cls_grad, delta_grad))
}

pub fn detection_loss(
    cls_logits: &[f64],
    deltas: &[BoxDelta],
    targets: &DetectionTargets,
    alpha: f64,
    gamma: f64,
) -> Result<DetectionLoss> {
    detection_loss_with_grad(cls_logits, deltas, targets, alpha, gamma).map(|(l, _, _)| l)
}

/// `w_det * (cls + reg) + w_tumor * tumor_ce + w_fg * fg_focal`.
pub fn multitask_loss(det: DetectionLoss, tumor_ce: f64, fg_focal: f64, weights: &TaskWeights) -> Result<f64> {
    weights.validate()?;
    let parts = [det.cls, det.reg, tumor_ce, fg_focal];
    if parts.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!("non-finite loss component in {parts:?}")));
    }
    Ok(weights.det * det.total() + weights.tumor * tumor_ce + weights.fg * fg_focal)
}

/// Raw network outputs for one image, as seen by the loss.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutputs {
    pub cls_logits: Vec<f64>,
    pub deltas: Vec<BoxDelta>,
    pub tumor_logits: Vec<f64>,
    pub fg_logit: f64,
}

/// Supervision for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTargets {
    pub detection: DetectionTargets,
    pub tumor_class: usize,
    pub foreground: bool,
}

/// Gradient of the combined loss with respect to every entry of [`HeadOutputs`].
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGradients {
    pub cls_logits: Vec<f64>,
    pub deltas: Vec<BoxDelta>,
    pub tumor_logits: Vec<f64>,
    pub fg_logit: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub det: DetectionLoss,
    pub tumor_ce: f64,
    pub fg_focal: f64,
    pub total: f64,
}

/// Combined multi-task loss of one image with its closed-form gradient.
pub fn multitask_value_and_grad(
    out: &HeadOutputs,
    targets: &ImageTargets,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, HeadGradients)> {
    cfg.validate()?;
    if out.tumor_logits.len() != cfg.num_tumor_classes {
        return Err(Error::InvalidInput(format!(
            "{} tumor logits for {} classes",
            out.tumor_logits.len(),
            cfg.num_tumor_classes
        )));
    }
    let w = cfg.weights;
    let (det, cls_grad, delta_grad) =
        detection_loss_with_grad(&out.cls_logits, &out.deltas, &targets.detection, cfg.alpha, cfg.gamma)?;
    let (tumor_ce, tumor_grad) = cross_entropy_from_logits(&out.tumor_logits, targets.tumor_class)?;
    let (fg_focal, fg_grad) = binary_focal_from_logit(out.fg_logit, targets.foreground, cfg.alpha, cfg.gamma);
    let total = multitask_loss(det, tumor_ce, fg_focal, &w)?;

    let scale4 = |d: &BoxDelta| BoxDelta::from_array(d.to_array().map(|v| v * w.det));
    let grads = HeadGradients {
        cls_logits: cls_grad.iter().map(|g| g * w.det).collect(),
        deltas: delta_grad.iter().map(scale4).collect(),
        tumor_logits: tumor_grad.iter().map(|g| g * w.tumor).collect(),
        fg_logit: fg_grad * w.fg,
    };
    Ok((LossBreakdown { det, tumor_ce, fg_focal, total }, grads))
}

/// Batched, differentiable versions of the losses above.
pub mod tensor {
    use candle_core::{DType, Tensor, D};

    use crate::error::Result;

    /// Numerically stable `ln(sigmoid(x))`.
    pub fn log_sigmoid(x: &Tensor) -> Result<Tensor> {
        // -(relu(-x) + ln(1 + exp(-|x|)))
        let soft = (x.neg()?.relu()? + (x.abs()?.neg()?.exp()? + 1.0)?.log()?)?;
        Ok(soft.neg()?)
    }

    /// Elementwise binary focal loss. `targets` holds 0/1 values with the
    /// shape of `logits`.
    pub fn binary_focal(logits: &Tensor, targets: &Tensor, alpha: f64, gamma: f64) -> Result<Tensor> {
        // z = s * x with s = 2t - 1, so ln p_t = ln sigmoid(z)
        let sign = ((targets * 2.0)? - 1.0)?;
        let z = (logits * &sign)?;
        let log_pt = log_sigmoid(&z)?;
        let log_one_minus_pt = log_sigmoid(&z.neg()?)?;
        let alpha_t = ((targets * (2.0 * alpha - 1.0))? + (1.0 - alpha))?;
        let modulating = (log_one_minus_pt * gamma)?.exp()?;
        Ok((alpha_t * modulating * log_pt)?.neg()?)
    }

    /// Dense classification loss: focal loss over anchors with `valid = 1`,
    /// summed and divided by `norm`.
    pub fn detection_cls(
        logits: &Tensor,
        targets: &Tensor,
        valid: &Tensor,
        norm: f64,
        alpha: f64,
        gamma: f64,
    ) -> Result<Tensor> {
        let fl = binary_focal(logits, targets, alpha, gamma)?;
        Ok(((fl * valid)?.sum_all()? / norm)?)
    }

    /// `0.5 x^2` for `|x| < 1`, `|x| - 0.5` otherwise.
    pub fn smooth_l1(x: &Tensor) -> Result<Tensor> {
        let a = x.abs()?;
        let inner = a.clamp(0.0, 1.0)?;
        Ok(((inner.sqr()? * 0.5)? + (a - inner)?)?)
    }

    /// Smooth-L1 over positive anchors. `deltas`/`targets` are `(..., 4)`,
    /// `positive` has the same shape without the last axis.
    pub fn detection_reg(deltas: &Tensor, targets: &Tensor, positive: &Tensor, norm: f64) -> Result<Tensor> {
        let per_anchor = smooth_l1(&(deltas - targets)?)?.sum(D::Minus1)?;
        Ok(((per_anchor * positive)?.sum_all()? / norm)?)
    }

    /// Mean cross-entropy of `(batch, classes)` logits against class indices.
    pub fn cross_entropy(logits: &Tensor, classes: &[usize]) -> Result<Tensor> {
        let (batch, n) = logits.dims2()?;
        let mut onehot = vec![0f32; batch * n];
        for (i, &c) in classes.iter().enumerate() {
            onehot[i * n + c] = 1.0;
        }
        let onehot = Tensor::from_vec(onehot, (batch, n), logits.device())?.to_dtype(logits.dtype())?;
        let log_probs = candle_nn::ops::log_softmax(logits, D::Minus1)?;
        Ok(((log_probs * onehot)?.sum_all()?.neg()? / batch as f64)?)
    }

    /// Mean binary focal loss of per-image logits.
    pub fn foreground_focal(logits: &Tensor, labels: &[bool], alpha: f64, gamma: f64) -> Result<Tensor> {
        let t: Vec<f32> = labels.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect();
        let t = Tensor::from_vec(t, logits.dims(), logits.device())?.to_dtype(logits.dtype())?;
        Ok(binary_focal(logits, &t, alpha, gamma)?.mean_all()?)
    }

    pub fn scalar(t: &Tensor) -> Result<f64> {
        Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cross_entropy_examples() {
        let mut probs = vec![0.15; 6];
        probs[2] = 0.25;
        assert_abs_diff_eq!(cross_entropy(&probs, 2).unwrap(), 1.386_294_361_119_890_6, epsilon = 1e-12);
        assert_eq!(cross_entropy(&[0.0, 1.0], 1).unwrap(), 0.0);
        let uniform = vec![1.0 / 6.0; 6];
        for c in 0..6 {
            assert_abs_diff_eq!(cross_entropy(&uniform, c).unwrap(), 6f64.ln(), epsilon = 1e-12);
        }
    }

    #[test]
    fn cross_entropy_errors_and_clamp() {
        assert!(cross_entropy(&[0.5, 0.5], 2).is_err());
        assert!(cross_entropy(&[0.5, 0.6], 0).is_err());
        let v = cross_entropy(&[1.0, 0.0], 1).unwrap();
        assert_abs_diff_eq!(v, -PROB_EPS.ln(), epsilon = 1e-9);
    }

    #[test]
    fn focal_examples() {
        // -0.25 * 0.25 * ln 0.5
        assert_abs_diff_eq!(focal_loss(0.5, 0.25, 2.0).unwrap(), 0.043_321_698_784_996_58, epsilon = 1e-12);
        // -0.25 * 0.01 * ln 0.9
        assert_abs_diff_eq!(focal_loss(0.9, 0.25, 2.0).unwrap(), 2.634_012_891_445_1e-4, epsilon = 1e-12);
        assert!(focal_loss(1.2, 0.25, 2.0).is_err());
        assert!(focal_loss(0.5, 0.0, 2.0).is_err());
        assert_eq!(focal_loss(1.0, 0.25, 2.0).unwrap(), 0.0);
        assert!(focal_loss(0.0, 0.25, 2.0).unwrap().is_finite());
    }

    #[test]
    fn focal_reduces_to_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let p: f64 = rng.random_range(1e-6..1.0);
            let ce = cross_entropy(&[p, 1.0 - p], 0).unwrap();
            assert!((focal_loss(p, 1.0, 0.0).unwrap() - ce).abs() <= 1e-9);
        }
    }

    #[test]
    fn binary_focal_uses_complementary_alpha() {
        let fg = binary_focal_loss(0.3, true, 0.25, 2.0).unwrap();
        let bg = binary_focal_loss(0.3, false, 0.25, 2.0).unwrap();
        assert_abs_diff_eq!(fg, focal_loss(0.3, 0.25, 2.0).unwrap());
        assert_abs_diff_eq!(bg, focal_loss(0.7, 0.75, 2.0).unwrap());
    }

    #[test]
    fn logit_form_matches_probability_form() {
        for &x in &[-6.0, -1.3, 0.0, 0.4, 3.2] {
            for positive in [true, false] {
                let (v, _) = binary_focal_from_logit(x, positive, 0.25, 2.0);
                let direct = binary_focal_loss(sigmoid(x), positive, 0.25, 2.0).unwrap();
                assert_abs_diff_eq!(v, direct, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn focal_decreasing_in_p() {
        let mut prev = f64::INFINITY;
        for i in 1..1000 {
            let p = i as f64 / 1000.0;
            let v = focal_loss(p, 0.25, 2.0).unwrap();
            assert!(v < prev, "not decreasing at p = {p}");
            prev = v;
        }
    }

    #[test]
    fn smooth_l1_pieces() {
        assert_eq!(smooth_l1(0.5), 0.125);
        assert_eq!(smooth_l1(2.0), 1.5);
        assert_eq!(smooth_l1(-2.0), 1.5);
        assert_eq!(smooth_l1(0.0), 0.0);
    }

    fn toy_targets() -> DetectionTargets {
        DetectionTargets {
            labels: vec![AnchorMatch::Positive(0), AnchorMatch::Negative, AnchorMatch::Ignore],
            deltas: vec![BoxDelta { dx: 0.1, dy: -0.2, dw: 0.3, dh: 0.0 }, BoxDelta::default(), BoxDelta::default()],
        }
    }

    #[test]
    fn detection_loss_limits() {
        let all_negative = DetectionTargets {
            labels: vec![AnchorMatch::Negative; 4],
            deltas: vec![BoxDelta::default(); 4],
        };
        let l = detection_loss(&[-40.0; 4], &[BoxDelta::default(); 4], &all_negative, 0.25, 2.0).unwrap();
        assert!(l.cls < 1e-30);
        assert_eq!(l.reg, 0.0);

        let t = toy_targets();
        let l = detection_loss(&[0.0, 0.0, 5.0], &t.deltas, &t, 0.25, 2.0).unwrap();
        assert_eq!(l.reg, 0.0);

        assert!(detection_loss(&[], &[], &DetectionTargets { labels: vec![], deltas: vec![] }, 0.25, 2.0).is_err());
    }

    #[test]
    fn ignored_anchors_do_not_contribute() {
        let t = toy_targets();
        let a = detection_loss(&[0.3, -1.0, 5.0], &t.deltas, &t, 0.25, 2.0).unwrap();
        let b = detection_loss(&[0.3, -1.0, -9.0], &t.deltas, &t, 0.25, 2.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn multitask_examples() {
        let w = TaskWeights::default();
        let det = DetectionLoss { cls: 0.25, reg: 0.15 };
        assert_abs_diff_eq!(multitask_loss(det, 0.3, 0.3, &w).unwrap(), 1.0, epsilon = 1e-15);
        let base = TaskWeights { det: 1.0, tumor: 0.0, fg: 0.0 };
        assert_eq!(multitask_loss(det, 0.3, 0.3, &base).unwrap(), det.total());
        assert_eq!(multitask_loss(DetectionLoss::default(), 0.0, 0.0, &w).unwrap(), 0.0);
        let bad = TaskWeights { det: 1.0, tumor: -0.1, fg: 0.0 };
        assert!(matches!(multitask_loss(det, 0.3, 0.3, &bad), Err(Error::Config(_))));
    }

    #[test]
    fn multitask_linear_in_each_component() {
        let w = TaskWeights { det: 0.7, tumor: 1.3, fg: 2.0 };
        let det = DetectionLoss { cls: 0.4, reg: 0.2 };
        let base = multitask_loss(det, 0.5, 0.1, &w).unwrap();
        let scaled = multitask_loss(det, 1.5, 0.1, &w).unwrap();
        assert_abs_diff_eq!(scaled - base, 1.3 * 1.0, epsilon = 1e-12);
        let scaled = multitask_loss(det, 0.5, 0.4, &w).unwrap();
        assert_abs_diff_eq!(scaled - base, 2.0 * 0.3, epsilon = 1e-12);
    }

    #[test]
    fn loss_config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        let bad = LossConfig { alpha: 0.0, ..LossConfig::default() };
        assert!(bad.validate().is_err());
        let bad = LossConfig { gamma: -1.0, ..LossConfig::default() };
        assert!(bad.validate().is_err());
        let bad = LossConfig { num_tumor_classes: 1, ..LossConfig::default() };
        assert!(bad.validate().is_err());
    }
}
