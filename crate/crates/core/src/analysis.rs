//! Representation measurements: linear CKA, per-class Fréchet feature
//! distance, text-head inversion and linear probes.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{softmax_in_place, Graph};
use crate::linalg::{psd_sqrt, sym_eig, Matrix};
use crate::objective::DualHeads;
use crate::optim::{AdamW, AdamWConfig};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::trainer::argmax;

/// Smallest accepted `sigma_min / sigma_max` of the text head.
pub const RANK_TOL: f64 = 1e-8;

/// Row-per-sample features with optional class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub features: Matrix,
    pub labels: Option<Vec<usize>>,
}

impl FeatureMatrix {
    pub fn new(features: Matrix, labels: Option<Vec<usize>>) -> Result<Self> {
        if !features.is_finite() {
            return Err(Error::non_finite("feature matrix"));
        }
        if let Some(l) = &labels {
            if l.len() != features.rows() {
                return Err(Error::shape("feature labels", &[features.rows()], &[l.len()]));
            }
        }
        Ok(FeatureMatrix { features, labels })
    }

    pub fn from_tensor(t: &Tensor<f32>, labels: Option<Vec<usize>>) -> Result<Self> {
        let (n, d) = t.dims2();
        Self::new(Matrix::from_vec(n, d, t.to_f64_vec())?, labels)
    }
}

fn centered(x: &Matrix) -> Matrix {
    let (n, d) = (x.rows(), x.cols());
    let mut mean = vec![0.0; d];
    for r in 0..n {
        for (m, v) in mean.iter_mut().zip(x.row(r)) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut out = x.clone();
    for r in 0..n {
        for (j, m) in mean.iter().enumerate() {
            out[(r, j)] -= m;
        }
    }
    out
}

/// Biased linear CKA between two representations of the same samples.
pub fn linear_cka(x: &Matrix, y: &Matrix) -> Result<f64> {
    if x.rows() != y.rows() {
        return Err(Error::shape("cka rows", &[x.rows()], &[y.rows()]));
    }
    if x.rows() < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: x.rows() });
    }
    let xc = centered(x);
    let yc = centered(y);
    let xt = xc.transpose();
    let yt = yc.transpose();
    let cross = yt.matmul(&xc)?.frobenius();
    let xx = xt.matmul(&xc)?.frobenius();
    let yy = yt.matmul(&yc)?.frobenius();
    if xx == 0.0 || yy == 0.0 {
        return Err(Error::Contract("CKA of a zero-variance representation".into()));
    }
    Ok(cross * cross / (xx * yy))
}

/// Mean and `1/N` covariance of the selected rows.
fn gaussian_fit(x: &Matrix, rows: &[usize]) -> (Vec<f64>, Matrix) {
    let d = x.cols();
    let n = rows.len() as f64;
    let mut mean = vec![0.0; d];
    for &r in rows {
        for (m, v) in mean.iter_mut().zip(x.row(r)) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut cov = Matrix::zeros(d, d);
    for &r in rows {
        let row = x.row(r);
        for i in 0..d {
            let di = row[i] - mean[i];
            for j in i..d {
                cov[(i, j)] += di * (row[j] - mean[j]);
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[(i, j)] / n;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    (mean, cov)
}

/// Adds `eps I` with `eps = scale * tr(cov) / d`.
fn regularized(mut cov: Matrix, scale: f64) -> Matrix {
    let d = cov.rows();
    let eps = scale * cov.trace() / d as f64;
    for i in 0..d {
        cov[(i, i)] += eps;
    }
    cov
}

/// Fréchet distance between two Gaussians, evaluated with the
/// `Sigma_A^{1/2} Sigma_B Sigma_A^{1/2}` sandwich so that the inner square
/// root is of a symmetric PSD matrix.
pub fn frechet_distance(mu_a: &[f64], cov_a: &Matrix, mu_b: &[f64], cov_b: &Matrix) -> Result<f64> {
    if mu_a.len() != mu_b.len() || cov_a.rows() != mu_a.len() || cov_b.rows() != mu_b.len() {
        return Err(Error::shape("frechet", &[mu_a.len()], &[mu_b.len(), cov_a.rows(), cov_b.rows()]));
    }
    let shift: f64 = mu_a.iter().zip(mu_b).map(|(a, b)| (a - b) * (a - b)).sum();
    let root_a = psd_sqrt(cov_a)?;
    let sandwich = root_a.matmul(cov_b)?.matmul(&root_a)?.symmetrized();
    let cross = psd_sqrt(&sandwich)?.trace();
    Ok((shift + cov_a.trace() + cov_b.trace() - 2.0 * cross).max(0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FfdReport {
    /// Unweighted mean over classes.
    pub mean: f64,
    pub per_class: BTreeMap<usize, f64>,
}

/// Default covariance regularization scale for [`ffd`].
pub const FFD_EPS_SCALE: f64 = 1e-6;

/// Per-class Fréchet feature distance between two labelled feature sets.
/// Each class covariance gets `eps_scale * tr(Sigma) / d` added to its
/// diagonal.
pub fn ffd(a: &FeatureMatrix, b: &FeatureMatrix, eps_scale: f64) -> Result<FfdReport> {
    if a.features.cols() != b.features.cols() {
        return Err(Error::shape("ffd dims", &[a.features.cols()], &[b.features.cols()]));
    }
    let group = |f: &FeatureMatrix| -> Result<BTreeMap<usize, Vec<usize>>> {
        let labels = f
            .labels
            .as_ref()
            .ok_or_else(|| Error::Contract("ffd needs labelled features".into()))?;
        let mut m: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &y) in labels.iter().enumerate() {
            m.entry(y).or_default().push(i);
        }
        Ok(m)
    };
    let ga = group(a)?;
    let gb = group(b)?;
    let mut lonely: Vec<usize> = ga.keys().filter(|k| !gb.contains_key(k)).copied().collect();
    lonely.extend(gb.keys().filter(|k| !ga.contains_key(k)));
    if !lonely.is_empty() {
        lonely.sort_unstable();
        return Err(Error::ClassMismatch(lonely));
    }
    if ga.is_empty() {
        return Err(Error::TooFewSamples { needed: 1, got: 0 });
    }
    let mut per_class = BTreeMap::new();
    for (class, rows_a) in &ga {
        let (mu_a, cov_a) = gaussian_fit(&a.features, rows_a);
        let (mu_b, cov_b) = gaussian_fit(&b.features, &gb[class]);
        let cov_a = regularized(cov_a, eps_scale);
        let cov_b = regularized(cov_b, eps_scale);
        per_class.insert(*class, frechet_distance(&mu_a, &cov_a, &mu_b, &cov_b)?);
    }
    let mean = per_class.values().sum::<f64>() / per_class.len() as f64;
    Ok(FfdReport { mean, per_class })
}

fn head_matrix(t: &Tensor<f64>) -> Result<Matrix> {
    let (r, c) = t.dims2();
    Matrix::from_vec(r, c, t.data().to_vec())
}

/// Left inverse `L = A^T (A A^T)^{-1}` (`d_txt x d`) of the text head
/// weight `A` (`d x d_txt`), so that `z A L = z`.
pub fn text_head_left_inverse(heads: &DualHeads<f64>) -> Result<Matrix> {
    let a = head_matrix(&heads.txt_w)?;
    let (d, m) = (a.rows(), a.cols());
    if d > m {
        return Err(Error::Contract(format!("text head {d}x{m} cannot be inverted: width exceeds d_txt")));
    }
    let gram = a.matmul(&a.transpose())?.symmetrized();
    let eig = sym_eig(&gram)?;
    let lo = eig.eigenvalues[0].max(0.0);
    let hi = eig.eigenvalues[d - 1];
    let ratio = if hi > 0.0 { libm::sqrt(lo / hi) } else { 0.0 };
    if !(ratio > RANK_TOL) {
        return Err(Error::RankDeficient(ratio));
    }
    let gram_inv = eig.reconstruct_with(|l| 1.0 / l);
    a.transpose().matmul(&gram_inv)
}

/// Recovers the embedding `z` whose text-head output is `e_txt`.
pub fn recover_embedding(e_txt: &[f64], heads: &DualHeads<f64>) -> Result<Vec<f64>> {
    let m = heads.d_txt();
    if e_txt.len() != m {
        return Err(Error::shape("e_txt", &[m], &[e_txt.len()]));
    }
    let left = text_head_left_inverse(heads)?;
    let shifted: Vec<f64> = e_txt.iter().zip(heads.txt_b.data()).map(|(e, b)| e - b).collect();
    left.transpose().matvec(&shifted)
}

/// Class distribution implied by a text embedding: the class head applied
/// to the embedding recovered through the text head's left inverse.
pub fn invert_text_head(e_txt: &[f64], heads: &DualHeads<f64>) -> Result<Vec<f64>> {
    let z = recover_embedding(e_txt, heads)?;
    let a_cls = head_matrix(&heads.cls_w)?;
    let mut logits = a_cls.transpose().matvec(&z)?;
    for (l, b) in logits.iter_mut().zip(heads.cls_b.data()) {
        *l += b;
    }
    softmax_in_place(&mut logits);
    Ok(logits)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 60,
            batch_size: 64,
            learning_rate: 0.01,
            weight_decay: 1e-4,
            seed: 0,
        }
    }
}

/// Trains a softmax-regression probe on the `train` rows (features
/// standardized with train statistics) and returns top-1 accuracy on the
/// `test` rows.
pub fn linear_probe(x: &Matrix, labels: &[usize], train: &[usize], test: &[usize], cfg: &ProbeConfig) -> Result<f64> {
    if labels.len() != x.rows() {
        return Err(Error::shape("probe labels", &[x.rows()], &[labels.len()]));
    }
    if train.iter().chain(test).any(|&i| i >= x.rows()) {
        return Err(Error::Contract("probe split index out of range".into()));
    }
    let mut in_train = vec![false; x.rows()];
    for &i in train {
        in_train[i] = true;
    }
    if test.iter().any(|&i| in_train[i]) {
        return Err(Error::Contract("probe train and test splits overlap".into()));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let first = train.first().map(|&i| labels[i]);
    if first.is_none() || train.iter().all(|&i| Some(labels[i]) == first) {
        return Err(Error::Contract("probe training set has a single class".into()));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::Config("probe needs positive epochs and batch size".into()));
    }

    let d = x.cols();
    let (mean, cov) = gaussian_fit(x, train);
    let scale: Vec<f64> = (0..d)
        .map(|j| {
            let s = libm::sqrt(cov[(j, j)]);
            if s > 1e-12 {
                1.0 / s
            } else {
                1.0
            }
        })
        .collect();
    let standardized = |rows: &[usize]| -> Tensor<f64> {
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            out.extend(x.row(r).iter().zip(&mean).zip(&scale).map(|((v, m), s)| (v - m) * s));
        }
        Tensor::new(&[rows.len(), d], out).expect("probe batch shape")
    };

    let mut rng = Rng::new(cfg.seed);
    let mut w = Tensor::<f64>::from_fn(&[d, classes], |_| rng.normal() * 0.01);
    let mut b = Tensor::<f64>::zeros(&[classes]);
    let mut opt = AdamW::<f64>::new(AdamWConfig {
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    });
    let mut order: Vec<usize> = train.to_vec();
    for _ in 0..cfg.epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let mut g = Graph::new();
            let xin = g.constant(standardized(chunk));
            let wv = g.param(&w);
            let bv = g.param(&b);
            let logits = g.linear(xin, wv, Some(bv))?;
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let loss = g.cross_entropy(logits, &y, 0.0)?;
            g.backward(loss)?;
            let gw = g.grad(wv).map(<[f64]>::to_vec);
            let gb = g.grad(bv).map(<[f64]>::to_vec);
            if let Some(gw) = gw {
                opt.step(0, &mut w, &gw, cfg.learning_rate, true)?;
            }
            if let Some(gb) = gb {
                opt.step(1, &mut b, &gb, cfg.learning_rate, false)?;
            }
        }
    }

    if test.is_empty() {
        return Ok(0.0);
    }
    let mut g = Graph::new();
    let xin = g.constant(standardized(test));
    let wv = g.constant(w);
    let bv = g.constant(b);
    let logits = g.linear(xin, wv, Some(bv))?;
    let correct = g
        .value(logits)
        .chunks_exact(classes)
        .zip(test)
        .filter(|(row, &i)| argmax(row) == labels[i])
        .count();
    Ok(correct as f64 / test.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gaussian(n: usize, d: usize, rng: &mut Rng) -> Matrix {
        Matrix::from_vec(n, d, (0..n * d).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn cka_self_is_one() {
        let x = gaussian(30, 5, &mut Rng::new(1));
        assert!((linear_cka(&x, &x).unwrap() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn cka_errors() {
        let x = gaussian(1, 3, &mut Rng::new(1));
        assert!(linear_cka(&x, &x).is_err());
        let z = Matrix::zeros(5, 2);
        let y = gaussian(5, 2, &mut Rng::new(2));
        assert!(linear_cka(&z, &y).is_err());
        assert!(linear_cka(&y, &gaussian(6, 2, &mut Rng::new(3))).is_err());
    }

    #[test]
    fn ffd_mean_shift_only() {
        let i2 = Matrix::identity(2);
        let v = frechet_distance(&[0.0, 0.0], &i2, &[3.0, 4.0], &i2).unwrap();
        assert!((v - 25.0).abs() < 1e-12);
    }

    #[test]
    fn ffd_reports_class_mismatch() {
        let x = gaussian(6, 2, &mut Rng::new(4));
        let a = FeatureMatrix::new(x.clone(), Some(vec![0, 0, 1, 1, 2, 2])).unwrap();
        let b = FeatureMatrix::new(x, Some(vec![0, 0, 1, 1, 3, 3])).unwrap();
        assert_eq!(ffd(&a, &b, FFD_EPS_SCALE), Err(Error::ClassMismatch(vec![2, 3])));
    }

    #[test]
    fn square_orthogonal_head_inverse_is_transpose() {
        let rot = [0.6, -0.8, 0.8, 0.6];
        let heads = DualHeads {
            cls_w: Tensor::zeros(&[2, 3]),
            cls_b: Tensor::zeros(&[3]),
            txt_w: Tensor::new(&[2, 2], rot.to_vec()).unwrap(),
            txt_b: Tensor::zeros(&[2]),
        };
        let left = text_head_left_inverse(&heads).unwrap();
        let expected = [0.6, 0.8, -0.8, 0.6];
        for (a, b) in left.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rank_deficient_head_is_rejected() {
        let heads = DualHeads {
            cls_w: Tensor::zeros(&[2, 3]),
            cls_b: Tensor::zeros(&[3]),
            txt_w: Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 2.0, 4.0, 6.0]).unwrap(),
            txt_b: Tensor::zeros(&[3]),
        };
        assert!(matches!(text_head_left_inverse(&heads), Err(Error::RankDeficient(_))));
        let wide = DualHeads {
            txt_w: Tensor::zeros(&[4, 2]),
            txt_b: Tensor::zeros(&[2]),
            cls_w: Tensor::zeros(&[4, 3]),
            cls_b: Tensor::zeros(&[3]),
        };
        assert!(text_head_left_inverse(&wide).is_err());
    }

    #[test]
    fn probe_separable_toy() {
        let mut rng = Rng::new(5);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..80 {
            let y = i % 2;
            let cx = if y == 0 { -2.0 } else { 2.0 };
            rows.push(vec![cx + 0.3 * rng.normal(), 0.3 * rng.normal()]);
            labels.push(y);
        }
        let x = Matrix::from_rows(&rows).unwrap();
        let train: Vec<usize> = (0..60).collect();
        let test: Vec<usize> = (60..80).collect();
        assert_eq!(linear_probe(&x, &labels, &train, &test, &ProbeConfig::default()).unwrap(), 1.0);
    }

    #[test]
    fn probe_rejects_overlap_and_single_class() {
        let x = Matrix::from_rows(&[vec![0.0], vec![1.0], vec![2.0]]).unwrap();
        let cfg = ProbeConfig::default();
        assert!(linear_probe(&x, &[0, 1, 0], &[0, 1], &[1, 2], &cfg).is_err());
        assert!(linear_probe(&x, &[0, 0, 1], &[0, 1], &[2], &cfg).is_err());
    }
}
