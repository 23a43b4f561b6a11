//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every primitive as it is evaluated. Values are
//! computed eagerly; [`Graph::backward`] walks the tape in reverse and
//! accumulates adjoints into every node that depends on a trainable leaf.

use super::real::gemm;
use super::{ParamSet, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Cross-entropy targets: class indices or full distributions per row.
#[derive(Debug, Clone)]
pub enum Target<T> {
    Hard(Vec<usize>),
    Soft(Vec<T>),
}

#[derive(Debug)]
enum Op<T> {
    Leaf { param: Option<usize> },
    MatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize, shared_rhs: bool },
    Transpose { x: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, s: T },
    Gather { table: Var, idx: Vec<usize> },
    Softmax { x: Var },
    CrossEntropy { logits: Var, target: Target<T>, probs: Vec<T> },
    Tanh { x: Var },
    Gelu { x: Var, cdf: Vec<T> },
    SquaredError { pred: Var, target: Vec<T> },
    AddMask { x: Var },
    Reshape { x: Var },
    Permute { x: Var, axes: Vec<usize> },
    Concat { parts: Vec<Var> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Is `suffix` a trailing sub-shape of `shape`?
fn is_suffix(shape: &[usize], suffix: &[usize]) -> bool {
    suffix.len() <= shape.len() && shape[shape.len() - suffix.len()..] == *suffix
}

fn split_last(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().unwrap_or(&1);
    let rows = if cols == 0 { 0 } else { shape.iter().product::<usize>() / cols };
    (rows, cols)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn permute_data<T: Copy>(data: &[T], shape: &[usize], axes: &[usize]) -> (Vec<T>, Vec<usize>) {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    if data.is_empty() {
        return (out, out_shape);
    }
    // Innermost axis handled as a strided run.
    let inner = out_shape[rank - 1];
    let inner_stride = src_strides[rank - 1];
    let mut idx = vec![0usize; rank];
    loop {
        let base: usize = (0..rank - 1).map(|d| idx[d] * src_strides[d]).sum();
        out.extend((0..inner).map(|j| data[base + j * inner_stride]));
        let mut d = rank - 1;
        loop {
            if d == 0 {
                return (out, out_shape);
            }
            d -= 1;
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

fn transpose_last2<T: Copy + Default>(data: &[T], shape: &[usize]) -> Vec<T> {
    let r = shape[shape.len() - 2];
    let c = shape[shape.len() - 1];
    let batch = if r * c == 0 { 0 } else { data.len() / (r * c) };
    let mut out = vec![T::default(); data.len()];
    for b in 0..batch {
        let src = &data[b * r * c..(b + 1) * r * c];
        let dst = &mut out[b * r * c..(b + 1) * r * c];
        for i in 0..r {
            for j in 0..c {
                dst[j * r + i] = src[i * c + j];
            }
        }
    }
    out
}

/// `f(a[i], b[i mod len(b)])`; `b` tiles `a` exactly.
fn broadcast<T: Real>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    let mut out = Vec::with_capacity(a.len());
    if b.is_empty() {
        return out;
    }
    for chunk in a.chunks_exact(b.len()) {
        out.extend(chunk.iter().zip(b).map(|(&x, &y)| f(x, y)));
    }
    out
}

fn gelu_cdf<T: Real>(x: T) -> T {
    let half = T::from_f(0.5);
    half * (T::one() + (x * T::from_f(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_pdf<T: Real>(x: T) -> T {
    T::from_f(0.398_942_280_401_432_7) * (-(x * x) * T::from_f(0.5)).exp()
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape consistent")
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    /// Leaf holding a copy of `t`; trainable if `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf { param: None },
            t.requires_grad(),
        )
    }

    /// Constant (never differentiated).
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf { param: None }, false)
    }

    /// Registers every tensor of `params` as a leaf, tagged with its index.
    pub fn params(&mut self, params: &ParamSet<T>) -> Vec<Var> {
        params
            .tensors()
            .iter()
            .enumerate()
            .map(|(i, t)| {
                self.push(
                    t.shape().to_vec(),
                    t.data().to_vec(),
                    Op::Leaf { param: Some(i) },
                    t.requires_grad(),
                )
            })
            .collect()
    }

    /// Matrix product over the last two axes.
    ///
    /// `a` is `[..., m, k]`; `b` is either `[k, n]` (shared across the
    /// leading axes of `a`) or `[..., k, n]` with the same leading axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let err = || Error::shape("matmul", format!("{:?} x {:?}", sa, sb));
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(err());
        }
        let lead = &sa[..sa.len() - 2];
        let batch: usize = lead.iter().product();
        let shared_rhs = sb.len() == 2;
        if !shared_rhs && sb[..sb.len() - 2] != *lead {
            return Err(err());
        }
        let mut out_shape = lead.to_vec();
        out_shape.extend([m, n]);
        let mut out = vec![T::zero(); batch * m * n];
        {
            let av = &self.nodes[a.0].value;
            let bv = &self.nodes[b.0].value;
            if shared_rhs {
                gemm(batch * m, k, n, av, false, bv, false, &mut out, false);
            } else {
                for i in 0..batch {
                    gemm(
                        m,
                        k,
                        n,
                        &av[i * m * k..],
                        false,
                        &bv[i * k * n..],
                        false,
                        &mut out[i * m * n..],
                        false,
                    );
                }
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(
            out_shape,
            out,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_rhs,
            },
            ng,
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::shape("transpose", format!("rank {} < 2", s.len())));
        }
        let out = transpose_last2(self.value(x), &s);
        let mut shape = s.clone();
        let r = shape.len();
        shape.swap(r - 2, r - 1);
        let ng = self.ng(x);
        Ok(self.push(shape, out, Op::Transpose { x }, ng))
    }

    /// Elementwise sum; the smaller operand broadcasts over the leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = self.order_broadcast("add", a, b)?;
        let av = self.value(a);
        let bv = self.value(b);
        let out = broadcast(av, bv, |x, y| x + y);
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(shape, out, Op::Add { a, b }, ng))
    }

    /// Elementwise product with the same broadcasting rule as [`Graph::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = self.order_broadcast("mul", a, b)?;
        let av = self.value(a);
        let bv = self.value(b);
        let out = broadcast(av, bv, |x, y| x * y);
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(shape, out, Op::Mul { a, b }, ng))
    }

    fn order_broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<(Var, Var)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if is_suffix(sa, sb) {
            Ok((a, b))
        } else if is_suffix(sb, sa) {
            Ok((b, a))
        } else {
            Err(Error::shape(op, format!("{:?} vs {:?}", sa, sb)))
        }
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s = T::from_f(s);
        let out = self.value(x).iter().map(|&v| v * s).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x);
        self.push(shape, out, Op::Scale { x, s }, ng)
    }

    /// Row gather from a rank-2 table: `out[i] = table[idx[i]]`.
    pub fn gather(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(Error::shape("gather", format!("table must be rank 2, got {:?}", s)));
        }
        let (rows, cols) = (s[0], s[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::shape(
                "gather",
                format!("index {} out of range for table {:?}", bad, s),
            ));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            out.extend_from_slice(&tv[i * cols..(i + 1) * cols]);
        }
        let ng = self.ng(table);
        Ok(self.push(
            vec![idx.len(), cols],
            out,
            Op::Gather {
                table,
                idx: idx.to_vec(),
            },
            ng,
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let (rows, cols) = split_last(&shape);
        let mut out = self.value(x).to_vec();
        for r in 0..rows {
            softmax_row(&mut out[r * cols..(r + 1) * cols]);
        }
        let ng = self.ng(x);
        self.push(shape, out, Op::Softmax { x }, ng)
    }

    /// Fused log-softmax + categorical cross-entropy, averaged over rows.
    pub fn cross_entropy(&mut self, logits: Var, target: Target<T>) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let (rows, cols) = split_last(&shape);
        match &target {
            Target::Hard(idx) => {
                if idx.len() != rows || idx.iter().any(|&i| i >= cols) {
                    return Err(Error::shape(
                        "cross_entropy",
                        format!("logits {:?} vs {} hard targets", shape, idx.len()),
                    ));
                }
            }
            Target::Soft(t) => {
                if t.len() != rows * cols {
                    return Err(Error::shape(
                        "cross_entropy",
                        format!("logits {:?} vs {} soft target entries", shape, t.len()),
                    ));
                }
            }
        }
        if rows == 0 {
            return Err(Error::shape("cross_entropy", "no rows"));
        }
        let xv = self.value(logits);
        let mut probs = xv.to_vec();
        let mut total = 0.0f64;
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            match &target {
                Target::Hard(idx) => total += (lse - row[idx[r]]).as_f64(),
                Target::Soft(t) => {
                    for c in 0..cols {
                        let tc = t[r * cols + c];
                        if tc != T::zero() {
                            total += (tc * (lse - row[c])).as_f64();
                        }
                    }
                }
            }
            softmax_row(&mut probs[r * cols..(r + 1) * cols]);
        }
        let loss = T::from_f(total / rows as f64);
        let ng = self.ng(logits);
        Ok(self.push(
            vec![],
            vec![loss],
            Op::CrossEntropy {
                logits,
                target,
                probs,
            },
            ng,
        ))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|v| v.tanh()).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x);
        self.push(shape, out, Op::Tanh { x }, ng)
    }

    /// GELU with the exact Gaussian CDF.
    pub fn gelu(&mut self, x: Var) -> Var {
        let cdf: Vec<T> = self.value(x).iter().map(|&v| gelu_cdf(v)).collect();
        let out = self.value(x).iter().zip(&cdf).map(|(&v, &c)| v * c).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x);
        self.push(shape, out, Op::Gelu { x, cdf }, ng)
    }

    /// Mean squared error against a constant target.
    pub fn squared_error(&mut self, pred: Var, target: &[T]) -> Result<Var> {
        let pv = self.value(pred);
        if pv.len() != target.len() || pv.is_empty() {
            return Err(Error::shape(
                "squared_error",
                format!("prediction {:?} vs {} targets", self.shape(pred), target.len()),
            ));
        }
        let total: f64 = pv
            .iter()
            .zip(target)
            .map(|(&p, &t)| {
                let d = (p - t).as_f64();
                d * d
            })
            .sum();
        let loss = T::from_f(total / pv.len() as f64);
        let ng = self.ng(pred);
        Ok(self.push(
            vec![],
            vec![loss],
            Op::SquaredError {
                pred,
                target: target.to_vec(),
            },
            ng,
        ))
    }

    /// Adds a constant mask (e.g. `-inf` above the diagonal) broadcast over
    /// the leading axes of `x`.
    pub fn add_mask(&mut self, x: Var, mask: &Tensor<T>) -> Result<Var> {
        if !is_suffix(self.shape(x), mask.shape()) {
            return Err(Error::shape(
                "add_mask",
                format!("{:?} vs mask {:?}", self.shape(x), mask.shape()),
            ));
        }
        let out = broadcast(self.value(x), mask.data(), |v, m| v + m);
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x);
        Ok(self.push(shape, out, Op::AddMask { x }, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape(x), shape),
            ));
        }
        let out = self.value(x).to_vec();
        let ng = self.ng(x);
        Ok(self.push(shape.to_vec(), out, Op::Reshape { x }, ng))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let mut seen = vec![false; s.len()];
        let valid = axes.len() == s.len()
            && axes.iter().all(|&a| a < s.len() && !std::mem::replace(&mut seen[a], true));
        if !valid || s.is_empty() {
            return Err(Error::shape("permute", format!("{:?} by {:?}", s, axes)));
        }
        let (out, shape) = permute_data(self.value(x), &s, axes);
        let ng = self.ng(x);
        Ok(self.push(
            shape,
            out,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
            ng,
        ))
    }

    /// Concatenation along the first axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut rows = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != *tail {
                return Err(Error::shape("concat", format!("{:?} vs tail {:?}", s, tail)));
            }
            rows += s[0];
        }
        let mut out = Vec::new();
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                parts: parts.to_vec(),
            },
            ng,
        ))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (rows, cols) = split_last(&shape);
        if self.shape(gamma) != [cols] || self.shape(beta) != [cols] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "x {:?}, gamma {:?}, beta {:?}",
                    shape,
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let eps = T::from_f(1e-5);
        let n = T::from_f(cols as f64);
        let xv = self.value(x);
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * gv[c] + bv[c];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Returns the adjoint of every
    /// parameter leaf registered via [`Graph::params`], indexed by parameter
    /// position (`None` for parameters that do not require gradients).
    pub fn backward(&self, loss: Var) -> Result<Vec<Option<Vec<T>>>> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut param_grads: Vec<(usize, Vec<T>)> = Vec::new();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf { param } => {
                    if let Some(p) = param {
                        param_grads.push((*p, g));
                    }
                }
                Op::MatMul {
                    a,
                    b,
                    batch,
                    m,
                    k,
                    n,
                    shared_rhs,
                } => {
                    let (batch, m, k, n) = (*batch, *m, *k, *n);
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    if self.ng(*a) {
                        let mut da = vec![T::zero(); batch * m * k];
                        if *shared_rhs {
                            gemm(batch * m, n, k, &g, false, bv, true, &mut da, false);
                        } else {
                            for i in 0..batch {
                                gemm(
                                    m,
                                    n,
                                    k,
                                    &g[i * m * n..],
                                    false,
                                    &bv[i * k * n..],
                                    true,
                                    &mut da[i * m * k..],
                                    false,
                                );
                            }
                        }
                        accumulate(&mut grads, *a, da);
                    }
                    if self.ng(*b) {
                        let mut db = vec![T::zero(); bv.len()];
                        if *shared_rhs {
                            gemm(k, batch * m, n, av, true, &g, false, &mut db, false);
                        } else {
                            for i in 0..batch {
                                gemm(
                                    k,
                                    m,
                                    n,
                                    &av[i * m * k..],
                                    true,
                                    &g[i * m * n..],
                                    false,
                                    &mut db[i * k * n..],
                                    false,
                                );
                            }
                        }
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::Transpose { x } => {
                    let dx = transpose_last2(&g, &node.shape);
                    accumulate(&mut grads, *x, dx);
                }
                Op::Add { a, b } => {
                    if self.ng(*b) {
                        let nb = self.nodes[b.0].value.len();
                        let mut db = vec![T::zero(); nb];
                        for gc in g.chunks_exact(nb) {
                            add_into(&mut db, gc);
                        }
                        accumulate(&mut grads, *b, db);
                    }
                    if self.ng(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Mul { a, b } => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    let nb = bv.len();
                    if self.ng(*b) {
                        let mut db = vec![T::zero(); nb];
                        for (gc, ac) in g.chunks_exact(nb).zip(av.chunks_exact(nb)) {
                            for ((d, &gi), &ai) in db.iter_mut().zip(gc).zip(ac) {
                                *d = *d + gi * ai;
                            }
                        }
                        accumulate(&mut grads, *b, db);
                    }
                    if self.ng(*a) {
                        let da = broadcast(&g, bv, |gi, y| gi * y);
                        accumulate(&mut grads, *a, da);
                    }
                }
                Op::Scale { x, s } => {
                    let dx = g.iter().map(|&gi| gi * *s).collect();
                    accumulate(&mut grads, *x, dx);
                }
                Op::Gather { table, idx } => {
                    let s = &self.nodes[table.0].shape;
                    let cols = s[1];
                    let mut dt = vec![T::zero(); s[0] * cols];
                    for (r, &src) in idx.iter().enumerate() {
                        let dst = &mut dt[src * cols..(src + 1) * cols];
                        for (d, &gi) in dst.iter_mut().zip(&g[r * cols..(r + 1) * cols]) {
                            *d = *d + gi;
                        }
                    }
                    accumulate(&mut grads, *table, dt);
                }
                Op::Softmax { x } => {
                    let (rows, cols) = split_last(&node.shape);
                    let y = &node.value;
                    let mut dx = vec![T::zero(); y.len()];
                    for r in 0..rows {
                        let sl = r * cols..(r + 1) * cols;
                        let dot: T = y[sl.clone()].iter().zip(&g[sl.clone()]).map(|(&a, &b)| a * b).sum();
                        for c in sl {
                            dx[c] = y[c] * (g[c] - dot);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::CrossEntropy {
                    logits,
                    target,
                    probs,
                } => {
                    let (rows, cols) = split_last(&self.nodes[logits.0].shape);
                    let scale = g[0] / T::from_f(rows as f64);
                    let mut dx = vec![T::zero(); probs.len()];
                    match target {
                        Target::Hard(idx) => {
                            for r in 0..rows {
                                for c in 0..cols {
                                    dx[r * cols + c] = probs[r * cols + c] * scale;
                                }
                                dx[r * cols + idx[r]] = dx[r * cols + idx[r]] - scale;
                            }
                        }
                        Target::Soft(t) => {
                            for r in 0..rows {
                                let sl = r * cols..(r + 1) * cols;
                                let mass: T = t[sl.clone()].iter().copied().sum();
                                for c in sl {
                                    dx[c] = (probs[c] * mass - t[c]) * scale;
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *logits, dx);
                }
                Op::Tanh { x } => {
                    let dx = g
                        .iter()
                        .zip(&node.value)
                        .map(|(&gi, &y)| gi * (T::one() - y * y))
                        .collect();
                    accumulate(&mut grads, *x, dx);
                }
                Op::Gelu { x, cdf } => {
                    let xv = &self.nodes[x.0].value;
                    let dx = g
                        .iter()
                        .zip(xv)
                        .zip(cdf)
                        .map(|((&gi, &v), &c)| gi * (c + v * gelu_pdf(v)))
                        .collect();
                    accumulate(&mut grads, *x, dx);
                }
                Op::SquaredError { pred, target } => {
                    let pv = &self.nodes[pred.0].value;
                    let scale = g[0] * T::from_f(2.0 / pv.len() as f64);
                    let dx = pv.iter().zip(target).map(|(&p, &t)| (p - t) * scale).collect();
                    accumulate(&mut grads, *pred, dx);
                }
                Op::AddMask { x } | Op::Reshape { x } => {
                    accumulate(&mut grads, *x, g);
                }
                Op::Permute { x, axes } => {
                    let mut inverse = vec![0; axes.len()];
                    for (i, &a) in axes.iter().enumerate() {
                        inverse[a] = i;
                    }
                    let (dx, _) = permute_data(&g, &node.shape, &inverse);
                    accumulate(&mut grads, *x, dx);
                }
                Op::Concat { parts } => {
                    let mut off = 0;
                    for &p in parts {
                        let len = self.nodes[p.0].value.len();
                        if self.ng(p) {
                            accumulate(&mut grads, p, g[off..off + len].to_vec());
                        }
                        off += len;
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let (rows, cols) = split_last(&node.shape);
                    let gv = &self.nodes[gamma.0].value;
                    let n = T::from_f(cols as f64);
                    let mut dgamma = vec![T::zero(); cols];
                    let mut dbeta = vec![T::zero(); cols];
                    let mut dx = vec![T::zero(); g.len()];
                    for r in 0..rows {
                        let sl = r * cols..(r + 1) * cols;
                        let mut sum_d = T::zero();
                        let mut sum_dh = T::zero();
                        for c in 0..cols {
                            let i = r * cols + c;
                            dgamma[c] = dgamma[c] + g[i] * xhat[i];
                            dbeta[c] = dbeta[c] + g[i];
                            let dh = g[i] * gv[c];
                            sum_d = sum_d + dh;
                            sum_dh = sum_dh + dh * xhat[i];
                        }
                        let (md, mdh) = (sum_d / n, sum_dh / n);
                        for (c, i) in sl.enumerate() {
                            let dh = g[i] * gv[c];
                            dx[i] = rstd[r] * (dh - md - xhat[i] * mdh);
                        }
                    }
                    if self.ng(*gamma) {
                        accumulate(&mut grads, *gamma, dgamma);
                    }
                    if self.ng(*beta) {
                        accumulate(&mut grads, *beta, dbeta);
                    }
                    if self.ng(*x) {
                        accumulate(&mut grads, *x, dx);
                    }
                }
            }
        }

        let n_params = self
            .nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Leaf { param: Some(p) } => Some(p + 1),
                _ => None,
            })
            .max()
            .unwrap_or(0);
        let mut out: Vec<Option<Vec<T>>> = (0..n_params).map(|_| None).collect();
        for (p, g) in param_grads {
            out[p] = Some(match out[p].take() {
                Some(mut acc) => {
                    add_into(&mut acc, &g);
                    acc
                }
                None => g,
            });
        }
        // Trainable parameters unreachable from the loss get zero gradients.
        for node in &self.nodes {
            if let Op::Leaf { param: Some(p) } = node.op {
                if node.needs_grad && out[p].is_none() {
                    out[p] = Some(vec![T::zero(); node.value.len()]);
                }
            }
        }
        Ok(out)
    }
}

fn softmax_row<T: Real>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

fn add_into<T: Real>(acc: &mut [T], g: &[T]) {
    for (a, &b) in acc.iter_mut().zip(g) {
        *a = *a + b;
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
    match &mut grads[v.0] {
        Some(acc) => add_into(acc, &g),
        slot @ None => *slot = Some(g),
    }
}

/// Runs `build` on a fresh graph holding `params` and differentiates the
/// scalar it returns.
///
/// Returns the loss value and one gradient per parameter that requires
/// gradients, named after that parameter.
pub fn forward_backward<T, F>(params: &ParamSet<T>, build: F) -> Result<(T, ParamSet<T>)>
where
    T: Real,
    F: FnOnce(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let mut graph = Graph::new();
    let vars = graph.params(params);
    let loss = build(&mut graph, &vars)?;
    let value = graph.scalar(loss);
    let raw = graph.backward(loss)?;
    let mut grads = ParamSet::new();
    for (i, g) in raw.into_iter().enumerate() {
        if let Some(g) = g {
            let shape = params.get(i).shape().to_vec();
            grads.push(params.name(i), Tensor::new(shape, g)?);
        }
    }
    Ok((value, grads))
}
