//! Op set: forward kernels and their vector-Jacobian products.
//!
//! Broadcasting is deliberately narrow: two operands must have identical
//! shapes, or the smaller one must be a single element or a trailing
//! (suffix) block of the larger — anything else must be made explicit with
//! `reshape`/`permute`. That keeps every kernel an index-modulo loop and
//! keeps gradients trivially auditable.

use super::{numel_of, Scalar, Tensor};

/// Recorded operation of a graph node, holding handles to its parents.
pub enum Op<T: Scalar> {
    Leaf,
    Add(Tensor<T>, Tensor<T>),
    Sub(Tensor<T>, Tensor<T>),
    Mul(Tensor<T>, Tensor<T>),
    Div(Tensor<T>, Tensor<T>),
    /// Elementwise min; ties take the left operand's gradient.
    Minimum(Tensor<T>, Tensor<T>),
    /// Elementwise max; ties take the left operand's gradient.
    Maximum(Tensor<T>, Tensor<T>),
    Matmul(Tensor<T>, Tensor<T>),
    Permute { x: Tensor<T>, perm: Vec<usize> },
    Reshape(Tensor<T>),
    /// Softmax over the last axis.
    Softmax(Tensor<T>),
    /// x * gain / sqrt(mean(x^2) + eps) over the last axis.
    RmsNorm { x: Tensor<T>, gain: Tensor<T>, eps: T },
    Silu(Tensor<T>),
    Sigmoid(Tensor<T>),
    /// Row gather: output row r is `table` row `ids[r]`.
    Embedding { table: Tensor<T>, ids: Vec<usize> },
    /// Mean next-token negative log-likelihood of rank-2 logits.
    CrossEntropy { logits: Tensor<T>, targets: Vec<usize> },
    /// Round half away from zero; gradient passes through unchanged.
    SteRound(Tensor<T>),
    /// Clamp against constants; gradient is 1 inside [lo, hi], 0 outside.
    ClampConst { x: Tensor<T>, lo: T, hi: T },
    /// Repeat every element n times consecutively (rank-1 result).
    RepeatEach { x: Tensor<T>, n: usize },
    Scale { x: Tensor<T>, c: T },
    AddScalar { x: Tensor<T>, c: T },
    Sum(Tensor<T>),
    Mean(Tensor<T>),
}

impl<T: Scalar> Op<T> {
    /// Parent tensors in a fixed order (drives the backward traversal).
    pub(crate) fn parents(&self) -> Vec<&Tensor<T>> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::Minimum(a, b)
            | Op::Maximum(a, b)
            | Op::Matmul(a, b) => vec![a, b],
            Op::Permute { x, .. }
            | Op::Reshape(x)
            | Op::Softmax(x)
            | Op::Silu(x)
            | Op::Sigmoid(x)
            | Op::SteRound(x)
            | Op::ClampConst { x, .. }
            | Op::RepeatEach { x, .. }
            | Op::Scale { x, .. }
            | Op::AddScalar { x, .. }
            | Op::Sum(x)
            | Op::Mean(x) => vec![x],
            Op::RmsNorm { x, gain, .. } => vec![x, gain],
            Op::Embedding { table, .. } => vec![table],
            Op::CrossEntropy { logits, .. } => vec![logits],
        }
    }
}

// ── Shape / broadcast helpers ───────────────────────────────────────────────

fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

/// Output shape for an elementwise binary op, panicking on anything outside
/// the equal/scalar/suffix rules.
fn broadcast_shape(a: &[usize], b: &[usize], opname: &str) -> Vec<usize> {
    if a == b {
        return a.to_vec();
    }
    let (an, bn) = (numel_of(a), numel_of(b));
    if bn == 1 || (bn <= an && is_suffix(b, a)) {
        return a.to_vec();
    }
    if an == 1 || (an <= bn && is_suffix(a, b)) {
        return b.to_vec();
    }
    panic!("{opname}: incompatible shapes {a:?} vs {b:?} (broadcast is equal/scalar/suffix only)");
}

fn requires(a: &Tensor<impl Scalar>, b: &Tensor<impl Scalar>) -> bool {
    a.requires_grad() || b.requires_grad()
}

// ── Elementwise binary ops ──────────────────────────────────────────────────

impl<T: Scalar> Tensor<T> {
    fn binary(&self, rhs: &Tensor<T>, opname: &str, f: impl Fn(T, T) -> T, op: Op<T>) -> Tensor<T> {
        let shape = broadcast_shape(self.shape(), rhs.shape(), opname);
        let n = numel_of(&shape);
        let a = self.data();
        let b = rhs.data();
        let (an, bn) = (a.len(), b.len());
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            out.push(f(a[i % an], b[i % bn]));
        }
        drop(a);
        drop(b);
        Tensor::from_parts(shape, out, requires(self, rhs), op)
    }

    pub fn add(&self, rhs: &Tensor<T>) -> Tensor<T> {
        self.binary(rhs, "add", |x, y| x + y, Op::Add(self.clone(), rhs.clone()))
    }

    pub fn sub(&self, rhs: &Tensor<T>) -> Tensor<T> {
        self.binary(rhs, "sub", |x, y| x - y, Op::Sub(self.clone(), rhs.clone()))
    }

    pub fn mul(&self, rhs: &Tensor<T>) -> Tensor<T> {
        self.binary(rhs, "mul", |x, y| x * y, Op::Mul(self.clone(), rhs.clone()))
    }

    pub fn div(&self, rhs: &Tensor<T>) -> Tensor<T> {
        self.binary(rhs, "div", |x, y| x / y, Op::Div(self.clone(), rhs.clone()))
    }

    /// Elementwise min (ties resolve to `self` in the gradient).
    pub fn minimum(&self, rhs: &Tensor<T>) -> Tensor<T> {
        self.binary(
            rhs,
            "minimum",
            |x, y| if x <= y { x } else { y },
            Op::Minimum(self.clone(), rhs.clone()),
        )
    }

    /// Elementwise max (ties resolve to `self` in the gradient).
    pub fn maximum(&self, rhs: &Tensor<T>) -> Tensor<T> {
        self.binary(
            rhs,
            "maximum",
            |x, y| if x >= y { x } else { y },
            Op::Maximum(self.clone(), rhs.clone()),
        )
    }

    pub fn square(&self) -> Tensor<T> {
        self.mul(self)
    }

    pub fn neg(&self) -> Tensor<T> {
        self.scale(-T::one())
    }

    // ── Elementwise unary ops ───────────────────────────────────────────

    fn unary(&self, f: impl Fn(T) -> T, op: Op<T>) -> Tensor<T> {
        let out: Vec<T> = self.data().iter().map(|&v| f(v)).collect();
        Tensor::from_parts(self.shape().to_vec(), out, self.requires_grad(), op)
    }

    pub fn scale(&self, c: T) -> Tensor<T> {
        self.unary(|v| v * c, Op::Scale { x: self.clone(), c })
    }

    pub fn add_scalar(&self, c: T) -> Tensor<T> {
        self.unary(|v| v + c, Op::AddScalar { x: self.clone(), c })
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        self.unary(|v| T::one() / (T::one() + (-v).exp()), Op::Sigmoid(self.clone()))
    }

    pub fn silu(&self) -> Tensor<T> {
        self.unary(|v| v / (T::one() + (-v).exp()), Op::Silu(self.clone()))
    }

    /// Round half away from zero; the backward pass is the identity
    /// (straight-through), so training can see through the integer grid.
    pub fn ste_round(&self) -> Tensor<T> {
        self.unary(|v| v.round(), Op::SteRound(self.clone()))
    }

    /// Clamp to constant bounds. NaN propagates. The subgradient is 1 for
    /// inputs inside [lo, hi] (inclusive) and 0 outside.
    pub fn clamp_const(&self, lo: T, hi: T) -> Tensor<T> {
        assert!(lo <= hi, "clamp_const: lo {lo} > hi {hi}");
        self.unary(
            |v| {
                if v < lo {
                    lo
                } else if v > hi {
                    hi
                } else {
                    v
                }
            },
            Op::ClampConst { x: self.clone(), lo, hi },
        )
    }

    // ── Structure ops ───────────────────────────────────────────────────

    pub fn reshape(&self, shape: &[usize]) -> Tensor<T> {
        assert_eq!(
            numel_of(shape),
            self.numel(),
            "reshape: {:?} ({} elems) -> {:?} ({} elems)",
            self.shape(),
            self.numel(),
            shape,
            numel_of(shape)
        );
        Tensor::from_parts(shape.to_vec(), self.to_vec(), self.requires_grad(), Op::Reshape(self.clone()))
    }

    pub fn permute(&self, perm: &[usize]) -> Tensor<T> {
        let (data, shape) = permute_raw(&self.data(), self.shape(), perm);
        Tensor::from_parts(
            shape,
            data,
            self.requires_grad(),
            Op::Permute { x: self.clone(), perm: perm.to_vec() },
        )
    }

    /// Rank-2 transpose.
    pub fn transpose(&self) -> Tensor<T> {
        assert_eq!(self.rank(), 2, "transpose: expected rank 2, got {:?}", self.shape());
        self.permute(&[1, 0])
    }

    /// Repeat every element `n` times consecutively, flattening to rank 1.
    /// Expands per-group quantizer parameters onto element positions.
    pub fn repeat_each(&self, n: usize) -> Tensor<T> {
        assert!(n > 0, "repeat_each: n must be positive");
        let src = self.data();
        let mut out = Vec::with_capacity(src.len() * n);
        for &v in src.iter() {
            for _ in 0..n {
                out.push(v);
            }
        }
        drop(src);
        Tensor::from_parts(
            vec![self.numel() * n],
            out,
            self.requires_grad(),
            Op::RepeatEach { x: self.clone(), n },
        )
    }

    // ── Reductions ──────────────────────────────────────────────────────

    pub fn sum(&self) -> Tensor<T> {
        let s = self.data().iter().fold(T::zero(), |acc, &v| acc + v);
        Tensor::from_parts(vec![], vec![s], self.requires_grad(), Op::Sum(self.clone()))
    }

    pub fn mean(&self) -> Tensor<T> {
        let n = T::lit(self.numel() as f64);
        let s = self.data().iter().fold(T::zero(), |acc, &v| acc + v);
        Tensor::from_parts(vec![], vec![s / n], self.requires_grad(), Op::Mean(self.clone()))
    }

    // ── Matmul ──────────────────────────────────────────────────────────

    /// Batched matrix product.
    ///
    /// `self` is `[..batch, m, k]`; `rhs` is either rank-2 `[k, n]`
    /// (broadcast over the batch) or `[..batch, k, n]` with identical
    /// leading dims. Result: `[..batch, m, n]`.
    pub fn matmul(&self, rhs: &Tensor<T>) -> Tensor<T> {
        let (ashape, bshape) = (self.shape(), rhs.shape());
        assert!(
            ashape.len() >= 2 && bshape.len() >= 2,
            "matmul: need rank >= 2, got {ashape:?} x {bshape:?}"
        );
        let (m, k) = (ashape[ashape.len() - 2], ashape[ashape.len() - 1]);
        let (bk, n) = (bshape[bshape.len() - 2], bshape[bshape.len() - 1]);
        let batch: usize = ashape[..ashape.len() - 2].iter().product();
        let b_batched = bshape.len() > 2;
        assert!(
            bk == k && (!b_batched || bshape[..bshape.len() - 2] == ashape[..ashape.len() - 2]),
            "matmul: incompatible shapes {ashape:?} x {bshape:?}"
        );

        let a = self.data();
        let b = rhs.data();
        let mut out = vec![T::zero(); batch * m * n];
        for bi in 0..batch {
            let a_off = bi * m * k;
            let b_off = if b_batched { bi * k * n } else { 0 };
            let o_off = bi * m * n;
            for i in 0..m {
                let arow = &a[a_off + i * k..a_off + (i + 1) * k];
                let orow = &mut out[o_off + i * n..o_off + (i + 1) * n];
                for (kk, &aik) in arow.iter().enumerate() {
                    let brow = &b[b_off + kk * n..b_off + (kk + 1) * n];
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o = *o + aik * bv;
                    }
                }
            }
        }
        drop(a);
        drop(b);
        let mut shape = ashape[..ashape.len() - 2].to_vec();
        shape.push(m);
        shape.push(n);
        Tensor::from_parts(shape, out, requires(self, rhs), Op::Matmul(self.clone(), rhs.clone()))
    }

    /// `x.linear(w)` = `x @ w^T` for a `[out, in]` weight, the layout used
    /// by every projection in the model.
    pub fn linear(&self, w: &Tensor<T>) -> Tensor<T> {
        assert_eq!(w.rank(), 2, "linear: weight must be rank 2, got {:?}", w.shape());
        self.matmul(&w.transpose())
    }

    // ── Normalization / activation over the last axis ───────────────────

    pub fn softmax(&self) -> Tensor<T> {
        let d = *self.shape().last().expect("softmax: rank >= 1 required");
        let x = self.data();
        let mut out = Vec::with_capacity(x.len());
        for row in x.chunks(d) {
            let m = row.iter().fold(T::neg_infinity(), |acc, &v| acc.max(v));
            let mut denom = T::zero();
            let start = out.len();
            for &v in row {
                let e = (v - m).exp();
                out.push(e);
                denom = denom + e;
            }
            for o in &mut out[start..] {
                *o = *o / denom;
            }
        }
        drop(x);
        Tensor::from_parts(self.shape().to_vec(), out, self.requires_grad(), Op::Softmax(self.clone()))
    }

    /// RMS normalization over the last axis with a learnable per-channel
    /// gain: `x * gain / sqrt(mean(x^2) + eps)`.
    pub fn rms_norm(&self, gain: &Tensor<T>, eps: T) -> Tensor<T> {
        let d = *self.shape().last().expect("rms_norm: rank >= 1 required");
        assert_eq!(
            gain.numel(),
            d,
            "rms_norm: gain shape {:?} does not match last axis of {:?}",
            gain.shape(),
            self.shape()
        );
        let x = self.data();
        let gv = gain.data();
        let mut out = Vec::with_capacity(x.len());
        let dn = T::lit(d as f64);
        for row in x.chunks(d) {
            let ms = row.iter().fold(T::zero(), |acc, &v| acc + v * v) / dn;
            let r = T::one() / (ms + eps).sqrt();
            for (j, &v) in row.iter().enumerate() {
                out.push(v * r * gv[j]);
            }
        }
        drop(x);
        drop(gv);
        Tensor::from_parts(
            self.shape().to_vec(),
            out,
            requires(self, gain),
            Op::RmsNorm { x: self.clone(), gain: gain.clone(), eps },
        )
    }

    // ── Lookup / loss ───────────────────────────────────────────────────

    /// Row gather from an embedding table (`self` is `[vocab, dim]`).
    /// Result shape is `id_shape ++ [dim]`.
    pub fn embedding(&self, ids: &[usize], id_shape: &[usize]) -> Tensor<T> {
        assert_eq!(self.rank(), 2, "embedding: table must be rank 2, got {:?}", self.shape());
        assert_eq!(
            numel_of(id_shape),
            ids.len(),
            "embedding: id_shape {:?} does not cover {} ids",
            id_shape,
            ids.len()
        );
        let (v, d) = (self.shape()[0], self.shape()[1]);
        let table = self.data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            assert!(id < v, "embedding: id {id} out of range for vocab {v}");
            out.extend_from_slice(&table[id * d..(id + 1) * d]);
        }
        drop(table);
        let mut shape = id_shape.to_vec();
        shape.push(d);
        Tensor::from_parts(
            shape,
            out,
            self.requires_grad(),
            Op::Embedding { table: self.clone(), ids: ids.to_vec() },
        )
    }

    /// Mean negative log-likelihood of rank-2 logits `[n, vocab]` against
    /// integer targets, fused with a max-shifted log-softmax for stability.
    pub fn cross_entropy(&self, targets: &[usize]) -> Tensor<T> {
        assert_eq!(self.rank(), 2, "cross_entropy: logits must be rank 2, got {:?}", self.shape());
        let (n, v) = (self.shape()[0], self.shape()[1]);
        assert_eq!(targets.len(), n, "cross_entropy: {} targets for {} rows", targets.len(), n);
        let x = self.data();
        let mut total = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            assert!(t < v, "cross_entropy: target {t} out of range for vocab {v}");
            let row = &x[r * v..(r + 1) * v];
            let m = row.iter().fold(T::neg_infinity(), |acc, &z| acc.max(z));
            let mut denom = T::zero();
            for &z in row {
                denom = denom + (z - m).exp();
            }
            let lse = m + denom.ln();
            total = total + (lse - row[t]);
        }
        drop(x);
        let loss = total / T::lit(n as f64);
        Tensor::from_parts(
            vec![],
            vec![loss],
            self.requires_grad(),
            Op::CrossEntropy { logits: self.clone(), targets: targets.to_vec() },
        )
    }
}

// ── Raw kernels shared by forward and backward ──────────────────────────────

/// Materialize `perm` applied to row-major `data` of `shape`.
fn permute_raw<T: Scalar>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let rank = shape.len();
    assert_eq!(perm.len(), rank, "permute: perm {perm:?} does not match shape {shape:?}");
    let mut seen = vec![false; rank];
    for &p in perm {
        assert!(p < rank && !seen[p], "permute: {perm:?} is not a permutation of 0..{rank}");
        seen[p] = true;
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    // in_strides for the source, walked in output order.
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let walk: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = numel_of(shape);
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..n {
        out.push(data[src]);
        // increment the output multi-index, adjusting the source offset
        for d in (0..rank).rev() {
            idx[d] += 1;
            src += walk[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= walk[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

fn invert_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

// ── Backward dispatch ───────────────────────────────────────────────────────

/// Propagate the accumulated gradient of `t` to its parents.
pub(crate) fn backward_step<T: Scalar>(t: &Tensor<T>) {
    let g: Vec<T> = match t.grad_ref().as_ref() {
        Some(g) => g.clone(),
        None => return, // dead branch: nothing flowed into this node
    };
    match t.op() {
        Op::Leaf => {}

        Op::Add(a, b) => {
            bin_backward(a, b, &g, |_, _, gi| (gi, gi));
        }
        Op::Sub(a, b) => {
            bin_backward(a, b, &g, |_, _, gi| (gi, -gi));
        }
        Op::Mul(a, b) => {
            bin_backward(a, b, &g, |av, bv, gi| (gi * bv, gi * av));
        }
        Op::Div(a, b) => {
            bin_backward(a, b, &g, |av, bv, gi| (gi / bv, -gi * av / (bv * bv)));
        }
        Op::Minimum(a, b) => {
            bin_backward(a, b, &g, |av, bv, gi| {
                if av <= bv {
                    (gi, T::zero())
                } else {
                    (T::zero(), gi)
                }
            });
        }
        Op::Maximum(a, b) => {
            bin_backward(a, b, &g, |av, bv, gi| {
                if av >= bv {
                    (gi, T::zero())
                } else {
                    (T::zero(), gi)
                }
            });
        }

        Op::Scale { x, c } => {
            if x.requires_grad() {
                x.accumulate_grad(&g.iter().map(|&gi| gi * *c).collect::<Vec<_>>());
            }
        }
        Op::AddScalar { x, .. } => {
            if x.requires_grad() {
                x.accumulate_grad(&g);
            }
        }
        Op::SteRound(x) => {
            // Straight-through: the Jacobian is the identity by contract.
            if x.requires_grad() {
                x.accumulate_grad(&g);
            }
        }
        Op::ClampConst { x, lo, hi } => {
            if x.requires_grad() {
                let xd = x.data();
                let contrib: Vec<T> = xd
                    .iter()
                    .zip(&g)
                    .map(|(&v, &gi)| if v >= *lo && v <= *hi { gi } else { T::zero() })
                    .collect();
                drop(xd);
                x.accumulate_grad(&contrib);
            }
        }
        Op::Sigmoid(x) => {
            if x.requires_grad() {
                let y = t.data();
                let contrib: Vec<T> =
                    y.iter().zip(&g).map(|(&yv, &gi)| gi * yv * (T::one() - yv)).collect();
                drop(y);
                x.accumulate_grad(&contrib);
            }
        }
        Op::Silu(x) => {
            if x.requires_grad() {
                let xd = x.data();
                let contrib: Vec<T> = xd
                    .iter()
                    .zip(&g)
                    .map(|(&v, &gi)| {
                        let s = T::one() / (T::one() + (-v).exp());
                        gi * s * (T::one() + v * (T::one() - s))
                    })
                    .collect();
                drop(xd);
                x.accumulate_grad(&contrib);
            }
        }

        Op::Reshape(x) => {
            if x.requires_grad() {
                x.accumulate_grad(&g);
            }
        }
        Op::Permute { x, perm } => {
            if x.requires_grad() {
                let (contrib, _) = permute_raw(&g, t.shape(), &invert_perm(perm));
                x.accumulate_grad(&contrib);
            }
        }
        Op::RepeatEach { x, n } => {
            if x.requires_grad() {
                let mut contrib = vec![T::zero(); x.numel()];
                for (i, &gi) in g.iter().enumerate() {
                    contrib[i / n] = contrib[i / n] + gi;
                }
                x.accumulate_grad(&contrib);
            }
        }
        Op::Sum(x) => {
            if x.requires_grad() {
                x.accumulate_grad(&vec![g[0]; x.numel()]);
            }
        }
        Op::Mean(x) => {
            if x.requires_grad() {
                let gi = g[0] / T::lit(x.numel() as f64);
                x.accumulate_grad(&vec![gi; x.numel()]);
            }
        }

        Op::Softmax(x) => {
            if x.requires_grad() {
                let d = *t.shape().last().unwrap();
                let p = t.data();
                let mut contrib = Vec::with_capacity(p.len());
                for (prow, grow) in p.chunks(d).zip(g.chunks(d)) {
                    let dot = prow
                        .iter()
                        .zip(grow)
                        .fold(T::zero(), |acc, (&pv, &gv)| acc + pv * gv);
                    for (&pv, &gv) in prow.iter().zip(grow) {
                        contrib.push(pv * (gv - dot));
                    }
                }
                drop(p);
                x.accumulate_grad(&contrib);
            }
        }

        Op::RmsNorm { x, gain, eps } => {
            let d = *t.shape().last().unwrap();
            let dn = T::lit(d as f64);
            let xd = x.data();
            let gv = gain.data();
            let mut dx = if x.requires_grad() { vec![T::zero(); xd.len()] } else { vec![] };
            let mut dgain = if gain.requires_grad() { vec![T::zero(); d] } else { vec![] };
            for (row_i, (row, grow)) in xd.chunks(d).zip(g.chunks(d)).enumerate() {
                let ms = row.iter().fold(T::zero(), |acc, &v| acc + v * v) / dn;
                let r = T::one() / (ms + *eps).sqrt();
                if gain.requires_grad() {
                    for j in 0..d {
                        dgain[j] = dgain[j] + grow[j] * row[j] * r;
                    }
                }
                if x.requires_grad() {
                    // dL/dx_j = r g_j gy_j - (r^3 / d) x_j * sum_i(gy_i g_i x_i)
                    let s = (0..d).fold(T::zero(), |acc, i| acc + grow[i] * gv[i] * row[i]);
                    let r3_over_d = r * r * r / dn;
                    let base = row_i * d;
                    for j in 0..d {
                        dx[base + j] = r * gv[j] * grow[j] - r3_over_d * row[j] * s;
                    }
                }
            }
            drop(xd);
            drop(gv);
            if x.requires_grad() {
                x.accumulate_grad(&dx);
            }
            if gain.requires_grad() {
                gain.accumulate_grad(&dgain);
            }
        }

        Op::Embedding { table, ids } => {
            if table.requires_grad() {
                let d = table.shape()[1];
                let mut contrib = vec![T::zero(); table.numel()];
                for (r, &id) in ids.iter().enumerate() {
                    let grow = &g[r * d..(r + 1) * d];
                    let trow = &mut contrib[id * d..(id + 1) * d];
                    for (tv, &gv) in trow.iter_mut().zip(grow) {
                        *tv = *tv + gv;
                    }
                }
                table.accumulate_grad(&contrib);
            }
        }

        Op::CrossEntropy { logits, targets } => {
            if logits.requires_grad() {
                let (n, v) = (logits.shape()[0], logits.shape()[1]);
                let gs = g[0] / T::lit(n as f64);
                let x = logits.data();
                let mut contrib = Vec::with_capacity(x.len());
                for (r, &tgt) in targets.iter().enumerate() {
                    let row = &x[r * v..(r + 1) * v];
                    let m = row.iter().fold(T::neg_infinity(), |acc, &z| acc.max(z));
                    let mut denom = T::zero();
                    for &z in row {
                        denom = denom + (z - m).exp();
                    }
                    for (j, &z) in row.iter().enumerate() {
                        let p = (z - m).exp() / denom;
                        let ind = if j == tgt { T::one() } else { T::zero() };
                        contrib.push(gs * (p - ind));
                    }
                }
                drop(x);
                logits.accumulate_grad(&contrib);
            }
        }

        Op::Matmul(a, b) => {
            let ashape = a.shape();
            let bshape = b.shape();
            let (m, k) = (ashape[ashape.len() - 2], ashape[ashape.len() - 1]);
            let n = bshape[bshape.len() - 1];
            let batch: usize = ashape[..ashape.len() - 2].iter().product();
            let b_batched = bshape.len() > 2;
            let ad = a.data();
            let bd = b.data();
            if a.requires_grad() {
                // dA[i,kk] = sum_j g[i,j] * B[kk,j]
                let mut da = vec![T::zero(); ad.len()];
                for bi in 0..batch {
                    let b_off = if b_batched { bi * k * n } else { 0 };
                    for i in 0..m {
                        let grow = &g[bi * m * n + i * n..bi * m * n + (i + 1) * n];
                        let darow = &mut da[bi * m * k + i * k..bi * m * k + (i + 1) * k];
                        for kk in 0..k {
                            let brow = &bd[b_off + kk * n..b_off + (kk + 1) * n];
                            let mut acc = T::zero();
                            for (&gv, &bv) in grow.iter().zip(brow) {
                                acc = acc + gv * bv;
                            }
                            darow[kk] = acc;
                        }
                    }
                }
                a.accumulate_grad(&da);
            }
            if b.requires_grad() {
                // dB[kk,j] = sum_batch sum_i A[i,kk] * g[i,j]
                let mut db = vec![T::zero(); bd.len()];
                for bi in 0..batch {
                    let b_off = if b_batched { bi * k * n } else { 0 };
                    for i in 0..m {
                        let arow = &ad[bi * m * k + i * k..bi * m * k + (i + 1) * k];
                        let grow = &g[bi * m * n + i * n..bi * m * n + (i + 1) * n];
                        for (kk, &av) in arow.iter().enumerate() {
                            let dbrow = &mut db[b_off + kk * n..b_off + (kk + 1) * n];
                            for (dv, &gv) in dbrow.iter_mut().zip(grow) {
                                *dv = *dv + av * gv;
                            }
                        }
                    }
                }
                b.accumulate_grad(&db);
            }
        }
    }
}

/// Shared backward for elementwise binaries under the modulo-broadcast rule.
fn bin_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    g: &[T],
    vjp: impl Fn(T, T, T) -> (T, T),
) {
    let (need_a, need_b) = (a.requires_grad(), b.requires_grad());
    if !need_a && !need_b {
        return;
    }
    let ad = a.data();
    let bd = b.data();
    let (an, bn) = (ad.len(), bd.len());
    let mut da = vec![T::zero(); if need_a { an } else { 0 }];
    let mut db = vec![T::zero(); if need_b { bn } else { 0 }];
    for (i, &gi) in g.iter().enumerate() {
        let (av, bv) = (ad[i % an], bd[i % bn]);
        let (ca, cb) = vjp(av, bv, gi);
        if need_a {
            da[i % an] = da[i % an] + ca;
        }
        if need_b {
            db[i % bn] = db[i % bn] + cb;
        }
    }
    drop(ad);
    drop(bd);
    if need_a {
        a.accumulate_grad(&da);
    }
    if need_b {
        b.accumulate_grad(&db);
    }
}
