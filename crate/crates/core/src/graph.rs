//! Tensor-level reverse-mode differentiation.
//!
//! A [`Graph`] is an arena built fresh for every forward pass: nodes are
//! appended in evaluation order, so reverse insertion order is a valid
//! topological order for the backward sweep. Ops are coarse (fused linear,
//! layer norm, multi-head attention core, cross-entropy, symmetric InfoNCE)
//! to keep the node count per step small.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::scalar::{c, Scalar, View};
use crate::tensor::Tensor;

/// Handle to a node of one [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Mean(Var),
    Tanh(Var),
    Gelu(Var),
    /// `x w (+ b)` with `x: r x k`, `w: k x n`, `b: n`.
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        /// per row (mean, 1/std)
        stats: Vec<(T, T)>,
    },
    Attention {
        qkv: Var,
        batch: usize,
        tokens: usize,
        heads: usize,
        probs: Vec<T>,
    },
    AssembleTokens {
        patches: Var,
        cls: Var,
        pos: Var,
        batch: usize,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        /// d loss / d logits for unit upstream gradient
        dlogits: Vec<T>,
    },
    InfoNce {
        pred: Var,
        targets: Vec<T>,
        /// d loss / d (pred targets^T) for unit upstream gradient
        dlogits: Vec<T>,
    },
    L2NormalizeRows {
        x: Var,
        norms: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Per-step computation graph.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

fn cols_of(shape: &[usize]) -> usize {
    *shape.last().unwrap_or(&1)
}

fn rows_of(shape: &[usize], len: usize) -> usize {
    len / cols_of(shape).max(1)
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Insert a tensor as a leaf.
    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, requires_grad)
    }

    /// Trainable leaf copied from `t`.
    pub fn param(&mut self, t: &Tensor<T>) -> Var {
        self.leaf(t.clone(), true)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("node shape is consistent")
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    /// Accumulated gradient of `v`, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (rows_of(&n.shape, n.value.len()), cols_of(&n.shape))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| *x + *y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| *x - *y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| *x * *y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).iter().map(|x| *x * s).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), value, Op::Scale(a, s), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum();
        let rg = self.rg(a);
        self.push(vec![1], vec![s], Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = c::<T>(self.value(a).len() as f64);
        let s: T = self.value(a).iter().copied().sum();
        let rg = self.rg(a);
        self.push(vec![1], vec![s / n], Op::Mean(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).iter().map(|x| x.tanh()).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), value, Op::Tanh(a), rg)
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let half = c::<T>(0.5);
        let inv_sqrt2 = c::<T>(core::f64::consts::FRAC_1_SQRT_2);
        let value = self
            .value(a)
            .iter()
            .map(|&x| half * x * (T::one() + (x * inv_sqrt2).erf()))
            .collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), value, Op::Gelu(a), rg)
    }

    // ---- matrix ops ----

    /// `x w + b` for `x: r x k`, `w: k x n`, optional bias `b` of length `n`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (r, k) = self.dims(x);
        let wshape = self.shape(w).to_vec();
        if wshape.len() != 2 || wshape[0] != k {
            return Err(Error::shape("linear", &[k, cols_of(&wshape)], &wshape));
        }
        let n = wshape[1];
        if let Some(b) = b {
            if self.value(b).len() != n {
                return Err(Error::shape("linear bias", &[n], self.shape(b)));
            }
        }
        let mut out = vec![T::zero(); r * n];
        if let Some(b) = b {
            let bias = self.value(b);
            for row in out.chunks_exact_mut(n) {
                row.copy_from_slice(bias);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        T::gemm(
            r,
            k,
            n,
            T::one(),
            self.value(x),
            crate::scalar::Layout::Normal,
            self.value(w),
            crate::scalar::Layout::Normal,
            beta,
            &mut out,
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let mut shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            shape = vec![r, k];
        }
        *shape.last_mut().unwrap() = n;
        Ok(self.push(shape, out, Op::Linear { x, w, b }, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.linear(a, b, None)
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (_, n) = self.dims(a);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_exact_mut(n) {
            softmax_in_place(row);
        }
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), out, Op::SoftmaxRows(a), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (r, d) = self.dims(x);
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(Error::shape("layer_norm", &[d], self.shape(gamma)));
        }
        let eps = c::<T>(eps);
        let dn = c::<T>(d as f64);
        let mut out = vec![T::zero(); r * d];
        let mut stats = Vec::with_capacity(r);
        let xv = self.value(x);
        let gv = self.value(gamma);
        let bv = self.value(beta);
        for (row, orow) in xv.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / dn;
            let rstd = T::one() / (var + eps).sqrt();
            for j in 0..d {
                orow[j] = (row[j] - mean) * rstd * gv[j] + bv[j];
            }
            stats.push((mean, rstd));
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            },
            rg,
        ))
    }

    /// Multi-head scaled dot-product self-attention core.
    ///
    /// `qkv` is `(batch * tokens) x 3d`, columns laid out as `[q | k | v]`
    /// with each head owning a contiguous `d / heads` slice. Returns the
    /// concatenated head outputs, `(batch * tokens) x d`.
    pub fn attention(&mut self, qkv: Var, batch: usize, tokens: usize, heads: usize) -> Result<Var> {
        let (r, w) = self.dims(qkv);
        if r != batch * tokens || w % 3 != 0 || (w / 3) % heads != 0 {
            return Err(Error::shape(
                "attention",
                &[batch * tokens, w - w % 3],
                self.shape(qkv),
            ));
        }
        let d = w / 3;
        let dh = d / heads;
        let scale = c::<T>(1.0 / (dh as f64).sqrt());
        let src = self.value(qkv);
        let mut out = vec![T::zero(); r * d];
        let mut probs = vec![T::zero(); batch * heads * tokens * tokens];
        let row3 = View {
            offset: 0,
            row_stride: w,
            col_stride: 1,
        };
        let out_view = View {
            offset: 0,
            row_stride: d,
            col_stride: 1,
        };
        let tt = View::row_major(tokens);
        for b in 0..batch {
            let base = b * tokens * w;
            for h in 0..heads {
                let p_off = (b * heads + h) * tokens * tokens;
                let p = &mut probs[p_off..p_off + tokens * tokens];
                // S = scale * Q K^T
                T::gemm_view(
                    tokens,
                    dh,
                    tokens,
                    scale,
                    src,
                    row3.at(base + h * dh),
                    src,
                    row3.at(base + d + h * dh).t(),
                    T::zero(),
                    p,
                    tt,
                );
                for prow in p.chunks_exact_mut(tokens) {
                    softmax_in_place(prow);
                }
                // O = P V
                T::gemm_view(
                    tokens,
                    tokens,
                    dh,
                    T::one(),
                    p,
                    tt,
                    src,
                    row3.at(base + 2 * d + h * dh),
                    T::zero(),
                    &mut out,
                    out_view.at(b * tokens * d + h * dh),
                );
            }
        }
        let rg = self.rg(qkv);
        Ok(self.push(
            vec![r, d],
            out,
            Op::Attention {
                qkv,
                batch,
                tokens,
                heads,
                probs,
            },
            rg,
        ))
    }

    /// Builds the token sequence `[cls; patches] + pos` for every image.
    ///
    /// `patches` is `(batch * n) x d`, `cls` is `d`, `pos` is `(n + 1) x d`.
    pub fn assemble_tokens(&mut self, patches: Var, cls: Var, pos: Var, batch: usize) -> Result<Var> {
        let (pr, d) = self.dims(patches);
        if batch == 0 || pr % batch != 0 {
            return Err(Error::shape("assemble_tokens", &[batch, d], self.shape(patches)));
        }
        let n = pr / batch;
        let t = n + 1;
        if self.value(cls).len() != d || self.value(pos).len() != t * d {
            return Err(Error::shape("assemble_tokens", &[t, d], self.shape(pos)));
        }
        let pv = self.value(patches);
        let cv = self.value(cls);
        let posv = self.value(pos);
        let mut out = vec![T::zero(); batch * t * d];
        for b in 0..batch {
            for i in 0..t {
                let dst = &mut out[(b * t + i) * d..(b * t + i + 1) * d];
                let p = &posv[i * d..(i + 1) * d];
                if i == 0 {
                    for j in 0..d {
                        dst[j] = cv[j] + p[j];
                    }
                } else {
                    let s = &pv[(b * n + i - 1) * d..(b * n + i) * d];
                    for j in 0..d {
                        dst[j] = s[j] + p[j];
                    }
                }
            }
        }
        let rg = self.rg(patches) || self.rg(cls) || self.rg(pos);
        Ok(self.push(
            vec![batch * t, d],
            out,
            Op::AssembleTokens {
                patches,
                cls,
                pos,
                batch,
            },
            rg,
        ))
    }

    /// Gathers rows of a matrix.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (r, d) = self.dims(x);
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::Contract(format!("row {bad} out of range for {r} rows")));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(rows.len() * d);
        for &i in rows {
            out.extend_from_slice(&xv[i * d..(i + 1) * d]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            vec![rows.len(), d],
            out,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Batch-mean cross-entropy of softmax(`logits`) against `labels`, with
    /// label smoothing `smoothing` spread uniformly over all classes.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], smoothing: f64) -> Result<Var> {
        let (b, classes) = self.dims(logits);
        if labels.len() != b {
            return Err(Error::shape("cross_entropy", &[b], &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::LabelOutOfRange { label: bad, classes });
        }
        let lv = self.value(logits);
        let on = c::<T>(1.0 - smoothing);
        let off = c::<T>(smoothing / classes as f64);
        let inv_b = c::<T>(1.0 / b as f64);
        let mut loss = T::zero();
        let mut dlogits = vec![T::zero(); b * classes];
        for ((row, &y), drow) in lv.chunks_exact(classes).zip(labels).zip(dlogits.chunks_exact_mut(classes)) {
            let lse = log_sum_exp(row);
            let mut row_loss = T::zero();
            for j in 0..classes {
                let logp = row[j] - lse;
                let q = if j == y { on + off } else { off };
                if q != T::zero() {
                    row_loss -= q * logp;
                }
                drow[j] = (logp.exp() - q) * inv_b;
            }
            loss += row_loss;
        }
        let loss = loss * inv_b;
        if !loss.is_finite() {
            return Err(Error::non_finite("cross-entropy loss"));
        }
        let rg = self.rg(logits);
        Ok(self.push(vec![1], vec![loss], Op::CrossEntropy { logits, dlogits }, rg))
    }

    /// Symmetric InfoNCE between predicted rows `pred` (`B x m`) and
    /// constant target rows `targets` (`B x m`) on raw inner products.
    pub fn info_nce(&mut self, pred: Var, targets: &Tensor<T>) -> Result<Var> {
        let (b, m) = self.dims(pred);
        let (tb, tm) = targets.dims2();
        if (tb, tm) != (b, m) {
            return Err(Error::shape("info_nce", &[b, m], targets.shape()));
        }
        let mut logits = vec![T::zero(); b * b];
        T::gemm(
            b,
            m,
            b,
            T::one(),
            self.value(pred),
            crate::scalar::Layout::Normal,
            targets.data(),
            crate::scalar::Layout::Transposed,
            T::zero(),
            &mut logits,
        );
        if logits.iter().any(|x| !x.is_finite()) {
            return Err(Error::non_finite("alignment inner products"));
        }
        let (loss, dlogits) = symmetric_info_nce(&logits, b);
        if !loss.is_finite() {
            return Err(Error::non_finite("alignment loss"));
        }
        let rg = self.rg(pred);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::InfoNce {
                pred,
                targets: targets.data().to_vec(),
                dlogits,
            },
            rg,
        ))
    }

    /// Scales every row to unit Euclidean norm (rows of norm below 1e-12
    /// are divided by 1e-12).
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let (_, d) = self.dims(x);
        let floor = c::<T>(1e-12);
        let mut out = self.value(x).to_vec();
        let mut norms = Vec::with_capacity(out.len() / d.max(1));
        for row in out.chunks_exact_mut(d) {
            let n = row.iter().map(|v| *v * *v).sum::<T>().sqrt().max(floor);
            for v in row.iter_mut() {
                *v /= n;
            }
            norms.push(n);
        }
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::L2NormalizeRows { x, norms }, rg)
    }

    // ---- backward ----

    /// Accumulates `d root / d node` into every reachable node that requires
    /// gradients. Repeated calls add up.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut local: Vec<Option<Vec<T>>> = Vec::new();
        local.resize_with(root.0 + 1, || None);
        local[root.0] = Some(vec![T::one()]);
        self.sweep(root, 0, &mut local);
        for (slot, g) in self.grads.iter_mut().zip(local) {
            let Some(g) = g else { continue };
            match slot {
                Some(acc) => add_into(acc, &g),
                None => *slot = Some(g),
            }
        }
        // non-requires-grad nodes never receive gradients
        for (node, slot) in self.nodes.iter().zip(self.grads.iter_mut()) {
            if !node.requires_grad {
                *slot = None;
            }
        }
        Ok(())
    }

    /// `d root / d wrt` computed by sweeping only the nodes created after
    /// `wrt`. Leaves the accumulated gradients untouched.
    pub fn grad_wrt(&self, root: Var, wrt: Var) -> Result<Vec<T>> {
        if self.value(root).len() != 1 {
            return Err(Error::Contract(format!(
                "grad_wrt needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        if wrt.0 > root.0 {
            return Ok(vec![T::zero(); self.value(wrt).len()]);
        }
        let mut local: Vec<Option<Vec<T>>> = Vec::new();
        local.resize_with(root.0 + 1, || None);
        local[root.0] = Some(vec![T::one()]);
        self.sweep(root, wrt.0 + 1, &mut local);
        Ok(local[wrt.0]
            .take()
            .unwrap_or_else(|| vec![T::zero(); self.value(wrt).len()]))
    }

    fn sweep(&self, root: Var, stop: usize, grads: &mut [Option<Vec<T>>]) {
        for id in (stop..=root.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let (lower, upper) = grads.split_at_mut(id);
            let Some(g) = upper[0].as_deref() else { continue };
            self.backprop(node, g, lower);
        }
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut [T]> {
        if !self.rg(v) {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]).as_mut_slice())
    }

    fn backprop(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    add_into(gb, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for (d, s) in gb.iter_mut().zip(g) {
                        *d -= *s;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for (d, x) in ga.iter_mut().zip(g) {
                        *d += *x * *s;
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for d in ga.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::Mean(a) => {
                let n = c::<T>(self.value(*a).len() as f64);
                if let Some(ga) = self.slot(grads, *a) {
                    let s = g[0] / n;
                    for d in ga.iter_mut() {
                        *d += s;
                    }
                }
            }
            Op::Tanh(a) => {
                let y = &node.value;
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * (T::one() - y[i] * y[i]);
                    }
                }
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                let half = c::<T>(0.5);
                let inv_sqrt2 = c::<T>(core::f64::consts::FRAC_1_SQRT_2);
                let inv_sqrt_2pi = c::<T>(0.398_942_280_401_432_7);
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..g.len() {
                        let xi = x[i];
                        let cdf = half * (T::one() + (xi * inv_sqrt2).erf());
                        let pdf = inv_sqrt_2pi * (-half * xi * xi).exp();
                        ga[i] += g[i] * (cdf + xi * pdf);
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let (r, k) = self.dims(*x);
                let n = cols_of(&node.shape);
                use crate::scalar::Layout::{Normal, Transposed};
                if let Some(gx) = self.slot(grads, *x) {
                    // dx += g w^T
                    T::gemm(r, n, k, T::one(), g, Normal, self.value(*w), Transposed, T::one(), gx);
                }
                if let Some(gw) = self.slot(grads, *w) {
                    // dw += x^T g
                    T::gemm(k, r, n, T::one(), self.value(*x), Transposed, g, Normal, T::one(), gw);
                }
                if let Some(b) = b {
                    if let Some(gb) = self.slot(grads, *b) {
                        for row in g.chunks_exact(n) {
                            add_into(gb, row);
                        }
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                let n = cols_of(&node.shape);
                let y = &node.value;
                if let Some(ga) = self.slot(grads, *a) {
                    for ((yr, gr), dr) in y.chunks_exact(n).zip(g.chunks_exact(n)).zip(ga.chunks_exact_mut(n)) {
                        let dot: T = yr.iter().zip(gr).map(|(p, q)| *p * *q).sum();
                        for j in 0..n {
                            dr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            } => {
                let d = cols_of(&node.shape);
                let dn = c::<T>(d as f64);
                let xv = self.value(*x);
                let gv = self.value(*gamma);
                if let Some(gg) = self.slot(grads, *gamma) {
                    for ((row, gr), &(mean, rstd)) in xv.chunks_exact(d).zip(g.chunks_exact(d)).zip(stats) {
                        for j in 0..d {
                            gg[j] += gr[j] * (row[j] - mean) * rstd;
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *beta) {
                    for gr in g.chunks_exact(d) {
                        add_into(gb, gr);
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    let mut dxhat = vec![T::zero(); d];
                    for (((row, gr), dr), &(mean, rstd)) in xv
                        .chunks_exact(d)
                        .zip(g.chunks_exact(d))
                        .zip(gx.chunks_exact_mut(d))
                        .zip(stats)
                    {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..d {
                            dxhat[j] = gr[j] * gv[j];
                            m1 += dxhat[j];
                            m2 += dxhat[j] * (row[j] - mean) * rstd;
                        }
                        m1 /= dn;
                        m2 /= dn;
                        for j in 0..d {
                            let xhat = (row[j] - mean) * rstd;
                            dr[j] += rstd * (dxhat[j] - m1 - xhat * m2);
                        }
                    }
                }
            }
            Op::Attention {
                qkv,
                batch,
                tokens,
                heads,
                probs,
            } => {
                let Some(gq) = self.slot(grads, *qkv) else { return };
                let (batch, tokens, heads) = (*batch, *tokens, *heads);
                let w = cols_of(self.shape(*qkv));
                let d = w / 3;
                let dh = d / heads;
                let scale = c::<T>(1.0 / (dh as f64).sqrt());
                let src = self.value(*qkv);
                let row3 = View {
                    offset: 0,
                    row_stride: w,
                    col_stride: 1,
                };
                let gview = View {
                    offset: 0,
                    row_stride: d,
                    col_stride: 1,
                };
                let tt = View::row_major(tokens);
                let mut dp = vec![T::zero(); tokens * tokens];
                for b in 0..batch {
                    let base = b * tokens * w;
                    for h in 0..heads {
                        let p_off = (b * heads + h) * tokens * tokens;
                        let p = &probs[p_off..p_off + tokens * tokens];
                        let go = gview.at(b * tokens * d + h * dh);
                        // dV += P^T dO
                        T::gemm_view(
                            tokens,
                            tokens,
                            dh,
                            T::one(),
                            p,
                            tt.t(),
                            g,
                            go,
                            T::one(),
                            gq,
                            row3.at(base + 2 * d + h * dh),
                        );
                        // dP = dO V^T
                        T::gemm_view(
                            tokens,
                            dh,
                            tokens,
                            T::one(),
                            g,
                            go,
                            src,
                            row3.at(base + 2 * d + h * dh).t(),
                            T::zero(),
                            &mut dp,
                            tt,
                        );
                        // dS = P * (dP - rowdot(dP, P))
                        for (pr, dr) in p.chunks_exact(tokens).zip(dp.chunks_exact_mut(tokens)) {
                            let dot: T = pr.iter().zip(dr.iter()).map(|(a, b)| *a * *b).sum();
                            for j in 0..tokens {
                                dr[j] = pr[j] * (dr[j] - dot);
                            }
                        }
                        // dQ += scale dS K
                        T::gemm_view(
                            tokens,
                            tokens,
                            dh,
                            scale,
                            &dp,
                            tt,
                            src,
                            row3.at(base + d + h * dh),
                            T::one(),
                            gq,
                            row3.at(base + h * dh),
                        );
                        // dK += scale dS^T Q
                        T::gemm_view(
                            tokens,
                            tokens,
                            dh,
                            scale,
                            &dp,
                            tt.t(),
                            src,
                            row3.at(base + h * dh),
                            T::one(),
                            gq,
                            row3.at(base + d + h * dh),
                        );
                    }
                }
            }
            Op::AssembleTokens {
                patches,
                cls,
                pos,
                batch,
            } => {
                let d = cols_of(&node.shape);
                let t = node.value.len() / d / batch;
                let n = t - 1;
                if let Some(gp) = self.slot(grads, *patches) {
                    for b in 0..*batch {
                        for i in 1..t {
                            add_into(
                                &mut gp[(b * n + i - 1) * d..(b * n + i) * d],
                                &g[(b * t + i) * d..(b * t + i + 1) * d],
                            );
                        }
                    }
                }
                if let Some(gc) = self.slot(grads, *cls) {
                    for b in 0..*batch {
                        add_into(gc, &g[b * t * d..(b * t + 1) * d]);
                    }
                }
                if let Some(gpos) = self.slot(grads, *pos) {
                    for b in 0..*batch {
                        add_into(gpos, &g[b * t * d..(b + 1) * t * d]);
                    }
                }
            }
            Op::SelectRows { x, rows } => {
                let d = cols_of(&node.shape);
                if let Some(gx) = self.slot(grads, *x) {
                    for (k, &i) in rows.iter().enumerate() {
                        add_into(&mut gx[i * d..(i + 1) * d], &g[k * d..(k + 1) * d]);
                    }
                }
            }
            Op::CrossEntropy { logits, dlogits } => {
                if let Some(gl) = self.slot(grads, *logits) {
                    for (d, s) in gl.iter_mut().zip(dlogits) {
                        *d += *s * g[0];
                    }
                }
            }
            Op::InfoNce {
                pred,
                targets,
                dlogits,
            } => {
                let (b, m) = self.dims(*pred);
                if let Some(gp) = self.slot(grads, *pred) {
                    use crate::scalar::Layout::Normal;
                    T::gemm(b, b, m, g[0], dlogits, Normal, targets, Normal, T::one(), gp);
                }
            }
            Op::L2NormalizeRows { x, norms } => {
                let d = cols_of(&node.shape);
                let y = &node.value;
                if let Some(gx) = self.slot(grads, *x) {
                    for (((yr, gr), dr), n) in y
                        .chunks_exact(d)
                        .zip(g.chunks_exact(d))
                        .zip(gx.chunks_exact_mut(d))
                        .zip(norms)
                    {
                        let dot: T = yr.iter().zip(gr).map(|(a, b)| *a * *b).sum();
                        for j in 0..d {
                            dr[j] += (gr[j] - yr[j] * dot) / *n;
                        }
                    }
                }
            }
        }
    }
}

/// In-place numerically stable softmax of one row.
pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    if !max.is_finite() {
        return max;
    }
    max + row.iter().map(|v| (*v - max).exp()).sum::<T>().ln()
}

/// Symmetric InfoNCE value and its gradient w.r.t. the `b x b` logit matrix
/// `logits[j][k] = <pred_j, target_k>`.
fn symmetric_info_nce<T: Scalar>(logits: &[T], b: usize) -> (T, Vec<T>) {
    let inv_b = c::<T>(1.0 / b as f64);
    let mut loss = T::zero();
    let mut grad = vec![T::zero(); b * b];
    // image -> text: softmax over k in each row j
    let mut buf = vec![T::zero(); b];
    for j in 0..b {
        let row = &logits[j * b..(j + 1) * b];
        let lse = log_sum_exp(row);
        loss -= row[j] - lse;
        for k in 0..b {
            buf[k] = (row[k] - lse).exp();
        }
        buf[j] -= T::one();
        for k in 0..b {
            grad[j * b + k] += buf[k] * inv_b;
        }
    }
    // text -> image: softmax over k of logits[k][j] for each column j
    for j in 0..b {
        for k in 0..b {
            buf[k] = logits[k * b + j];
        }
        let lse = log_sum_exp(&buf);
        loss -= logits[j * b + j] - lse;
        for k in 0..b {
            let mut p = (logits[k * b + j] - lse).exp();
            if k == j {
                p -= T::one();
            }
            grad[k * b + j] += p * inv_b;
        }
    }
    (loss * inv_b, grad)
}
