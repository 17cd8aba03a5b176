//! Dual heads on the image embedding and the losses that train them:
//! cross-entropy on the class head, symmetric InfoNCE between the text head
//! and whitened caption targets, the gradient-balancing weight, and the
//! scheduled mix of the two.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{log_sum_exp, Graph, Var};
use crate::rng::Rng;
use crate::scalar::{c, Scalar};
use crate::tensor::Tensor;

/// Added to the text-gradient norm in [`adaptive_weight`].
pub const ADAPTIVE_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct DualHeads<T> {
    /// `d x C`
    pub cls_w: Tensor<T>,
    pub cls_b: Tensor<T>,
    /// `d x d_txt`
    pub txt_w: Tensor<T>,
    pub txt_b: Tensor<T>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadVars {
    pub cls_w: Var,
    pub cls_b: Var,
    pub txt_w: Var,
    pub txt_b: Var,
}

impl HeadVars {
    pub fn all(&self) -> [Var; 4] {
        [self.cls_w, self.cls_b, self.txt_w, self.txt_b]
    }
}

impl<T: Scalar> DualHeads<T> {
    /// Truncated-normal (std 0.02) weights, zero biases. The class head is
    /// drawn from `rng` first, so it matches a plain classifier seeded alike.
    pub fn init(width: usize, classes: usize, d_txt: usize, cls_rng: &mut Rng, txt_rng: &mut Rng) -> Self {
        DualHeads {
            cls_w: Tensor::from_fn(&[width, classes], |_| c(cls_rng.truncated_normal(0.02))),
            cls_b: Tensor::zeros(&[classes]),
            txt_w: Tensor::from_fn(&[width, d_txt], |_| c(txt_rng.truncated_normal(0.02))),
            txt_b: Tensor::zeros(&[d_txt]),
        }
    }

    pub fn width(&self) -> usize {
        self.cls_w.shape()[0]
    }

    pub fn classes(&self) -> usize {
        self.cls_w.shape()[1]
    }

    pub fn d_txt(&self) -> usize {
        self.txt_w.shape()[1]
    }

    pub fn check(&self) -> Result<()> {
        let (d, classes, dt) = (self.width(), self.classes(), self.d_txt());
        if self.txt_w.shape()[0] != d {
            return Err(Error::shape("txt_w", &[d, dt], self.txt_w.shape()));
        }
        if self.cls_b.shape() != [classes] {
            return Err(Error::shape("cls_b", &[classes], self.cls_b.shape()));
        }
        if self.txt_b.shape() != [dt] {
            return Err(Error::shape("txt_b", &[dt], self.txt_b.shape()));
        }
        for (name, t) in self.named() {
            if !t.is_finite() {
                return Err(Error::non_finite(name));
            }
        }
        Ok(())
    }

    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        vec![
            ("heads.cls_w".into(), &self.cls_w),
            ("heads.cls_b".into(), &self.cls_b),
            ("heads.txt_w".into(), &self.txt_w),
            ("heads.txt_b".into(), &self.txt_b),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.cls_w, &mut self.cls_b, &mut self.txt_w, &mut self.txt_b]
    }

    pub fn register(&self, g: &mut Graph<T>) -> HeadVars {
        HeadVars {
            cls_w: g.param(&self.cls_w),
            cls_b: g.param(&self.cls_b),
            txt_w: g.param(&self.txt_w),
            txt_b: g.param(&self.txt_b),
        }
    }

    pub fn cast<U: Scalar>(&self) -> DualHeads<U> {
        DualHeads {
            cls_w: self.cls_w.cast(),
            cls_b: self.cls_b.cast(),
            txt_w: self.txt_w.cast(),
            txt_b: self.txt_b.cast(),
        }
    }
}

/// Outputs of both heads for one batch of embeddings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadOutputs {
    /// `z A_cls + b_cls`, kept for a numerically stable cross-entropy.
    pub logits: Var,
    /// Row-wise softmax of `logits`.
    pub p_cls: Var,
    /// `z A_txt + b_txt`
    pub p_txt: Var,
}

pub fn class_logits<T: Scalar>(g: &mut Graph<T>, z: Var, heads: &HeadVars) -> Result<Var> {
    g.linear(z, heads.cls_w, Some(heads.cls_b))
}

pub fn text_prediction<T: Scalar>(g: &mut Graph<T>, z: Var, heads: &HeadVars) -> Result<Var> {
    g.linear(z, heads.txt_w, Some(heads.txt_b))
}

pub fn forward_heads<T: Scalar>(g: &mut Graph<T>, z: Var, heads: &HeadVars) -> Result<HeadOutputs> {
    let logits = class_logits(g, z, heads)?;
    let p_cls = g.softmax_rows(logits);
    let p_txt = text_prediction(g, z, heads)?;
    Ok(HeadOutputs { logits, p_cls, p_txt })
}

/// Batch-mean cross-entropy with optional label smoothing, evaluated from
/// the class logits.
pub fn classification_loss<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    labels: &[usize],
    smoothing: f64,
) -> Result<Var> {
    g.cross_entropy(logits, labels, smoothing)
}

/// Symmetric InfoNCE between text-head predictions and constant targets on
/// raw inner products. With `normalize`, both sides are scaled to unit rows
/// first.
pub fn text_alignment_loss<T: Scalar>(
    g: &mut Graph<T>,
    p_txt: Var,
    targets: &Tensor<T>,
    normalize: bool,
) -> Result<Var> {
    if !normalize {
        return g.info_nce(p_txt, targets);
    }
    let p = g.l2_normalize_rows(p_txt);
    let (_, m) = targets.dims2();
    let mut t = targets.clone();
    for row in t.data_mut().chunks_exact_mut(m.max(1)) {
        let n = row.iter().map(|v| *v * *v).sum::<T>().sqrt().max(c(1e-12));
        for v in row.iter_mut() {
            *v /= n;
        }
    }
    g.info_nce(p, &t)
}

/// `||dL_cls/dz|| / (||dL_txt/dz|| + eps)` with Frobenius norms over the
/// whole batch.
pub fn adaptive_weight<T: Scalar>(grad_cls_z: &[T], grad_txt_z: &[T], eps: f64) -> f64 {
    let norm = |g: &[T]| libm::sqrt(g.iter().map(|v| v.to_f64_lossy() * v.to_f64_lossy()).sum());
    norm(grad_cls_z) / (norm(grad_txt_z) + eps)
}

/// `lambda alpha L_txt + (1 - lambda) L_cls`, with `alpha` a constant. At
/// `lambda == 0` this is `L_cls` itself and the text term may be absent.
pub fn total_loss<T: Scalar>(
    g: &mut Graph<T>,
    l_txt: Option<Var>,
    l_cls: Var,
    lambda: f64,
    alpha: f64,
) -> Result<Var> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Contract(alloc::format!("lambda {lambda} outside [0, 1]")));
    }
    if lambda == 0.0 {
        return Ok(l_cls);
    }
    let l_txt = l_txt.ok_or_else(|| Error::Contract("text loss required when lambda > 0".into()))?;
    let txt = g.scale(l_txt, c(lambda * alpha));
    let cls = g.scale(l_cls, c(1.0 - lambda));
    g.add(txt, cls)
}

/// Cross-entropy of probability rows (`B x C`, row-major) against labels,
/// with smoothing spread uniformly over the `C` classes.
pub fn cross_entropy_from_probs(probs: &[f64], classes: usize, labels: &[usize], smoothing: f64) -> Result<f64> {
    if classes == 0 || probs.len() != labels.len() * classes {
        return Err(Error::shape("cross_entropy", &[labels.len(), classes], &[probs.len()]));
    }
    let mut total = 0.0;
    for (row, &y) in probs.chunks_exact(classes).zip(labels) {
        if y >= classes {
            return Err(Error::LabelOutOfRange { label: y, classes });
        }
        let mut l = -(1.0 - smoothing) * libm::log(row[y]);
        if smoothing > 0.0 {
            l -= smoothing / classes as f64 * row.iter().map(|p| libm::log(*p)).sum::<f64>();
        }
        total += l;
    }
    Ok(total / labels.len() as f64)
}

/// Symmetric InfoNCE value for `B x m` row-major predictions and targets.
pub fn info_nce_value(pred: &[f64], targets: &[f64], batch: usize) -> Result<f64> {
    if batch == 0 || pred.len() != targets.len() || pred.len() % batch != 0 {
        return Err(Error::shape("info_nce", &[batch], &[pred.len(), targets.len()]));
    }
    let m = pred.len() / batch;
    let mut logits = vec![0.0; batch * batch];
    for j in 0..batch {
        for k in 0..batch {
            logits[j * batch + k] = pred[j * m..(j + 1) * m]
                .iter()
                .zip(&targets[k * m..(k + 1) * m])
                .map(|(a, b)| a * b)
                .sum();
        }
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::non_finite("alignment inner products"));
    }
    let mut loss = 0.0;
    let mut col = vec![0.0; batch];
    for j in 0..batch {
        let row = &logits[j * batch..(j + 1) * batch];
        loss -= row[j] - log_sum_exp(row);
        for (k, v) in col.iter_mut().enumerate() {
            *v = logits[k * batch + j];
        }
        loss -= logits[j * batch + j] - log_sum_exp(&col);
    }
    Ok(loss / batch as f64)
}
