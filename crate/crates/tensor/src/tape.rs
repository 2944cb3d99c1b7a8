//! Build-per-forward gradient tape.
//!
//! Every differentiable op appends one node whose parents were recorded
//! earlier, so node ids are already in topological order and backward is a
//! single reverse sweep.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Result, TensorError};
use crate::scalar::{gemm, Scalar, View};
use crate::tensor::{axis_split, row_stats, softmax_in_place, Tensor};

enum Op<T: Scalar> {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddRow(usize, usize),
    Gelu(usize),
    Clamp(usize, T, T),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax {
        x: usize,
        axis: usize,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        heads: usize,
        groups: usize,
        probs: Vec<T>,
    },
    GatherRows {
        x: usize,
        idx: Vec<usize>,
    },
    ConcatRows(Vec<usize>),
    CumsumRows {
        x: usize,
        group: usize,
    },
    MeanRows {
        x: usize,
        group: usize,
    },
    Reshape(usize),
    Sum(usize),
    SmoothL1Sum {
        x: usize,
        target: Tensor<T>,
    },
    BceLogitsMean {
        x: usize,
        target: Tensor<T>,
    },
    CrossEntropyMean {
        x: usize,
        classes: Vec<usize>,
    },
    MseMean {
        x: usize,
        target: Tensor<T>,
    },
}

impl<T: Scalar> Op<T> {
    fn parents(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(x, _) | Op::Gelu(x) | Op::Clamp(x, _, _) | Op::Reshape(x) | Op::Sum(x) => vec![*x],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Softmax { x, .. }
            | Op::GatherRows { x, .. }
            | Op::CumsumRows { x, .. }
            | Op::MeanRows { x, .. }
            | Op::SmoothL1Sum { x, .. }
            | Op::BceLogitsMean { x, .. }
            | Op::CrossEntropyMean { x, .. }
            | Op::MseMean { x, .. } => vec![*x],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::ConcatRows(parts) => parts.clone(),
        }
    }
}

struct Node<T: Scalar> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records operations for one forward pass.
pub struct Tape<T: Scalar = f64> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar = f64> {
    tape: &'t Tape<T>,
    id: usize,
}

/// Result of a backward sweep.
pub struct Gradients<T: Scalar = f64> {
    grads: Vec<Option<Tensor<T>>>,
    visits: Vec<u32>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Number of nodes processed by the sweep.
    pub fn nodes_visited(&self) -> usize {
        self.visits.iter().filter(|&&v| v > 0).count()
    }

    /// Largest number of times any single node was processed.
    pub fn max_visits(&self) -> u32 {
        self.visits.iter().copied().max().unwrap_or(0)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = op.parents().iter().any(|&p| nodes[p].requires_grad);
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    pub fn var(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, true)
    }

    fn value_of(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let n = nodes.len();
        if nodes[loss.id].value.len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        let mut visits = vec![0u32; n];
        grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape(), T::one()));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || grads[id].is_none() {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                visits[id] += 1;
                continue;
            }
            let g = grads[id].take().expect("checked above");
            visits[id] += 1;
            for (parent, pg) in local_grads(&nodes, id, &g) {
                if !nodes[parent].requires_grad {
                    continue;
                }
                match &mut grads[parent] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(Gradients { grads, visits })
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn same_tape(&self, other: &Var<'_, T>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "vars from different tapes"
        );
    }

    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&other);
        let out = self.value().matmul(&other.value())?;
        Ok(self.tape.push(out, Op::MatMul(self.id, other.id)))
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&other);
        let out = self.value().add(&other.value())?;
        Ok(self.tape.push(out, Op::Add(self.id, other.id)))
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&other);
        let out = self.value().sub(&other.value())?;
        Ok(self.tape.push(out, Op::Sub(self.id, other.id)))
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&other);
        let out = self.value().zip_map(&other.value(), "mul", |a, b| a * b)?;
        Ok(self.tape.push(out, Op::Mul(self.id, other.id)))
    }

    pub fn scale(self, c: T) -> Var<'t, T> {
        let out = self.value().scale(c);
        self.tape.push(out, Op::Scale(self.id, c))
    }

    /// Adds a length-`cols` vector to every row.
    pub fn add_row(self, bias: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&bias);
        let x = self.value();
        let b = bias.value();
        let c = x.cols();
        if b.len() != c {
            return Err(TensorError::Shape {
                op: "add_row",
                lhs: x.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(c) {
            for (v, &bb) in row.iter_mut().zip(b.data()) {
                *v = *v + bb;
            }
        }
        let out = Tensor::new(x.shape(), out)?;
        Ok(self.tape.push(out, Op::AddRow(self.id, bias.id)))
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Var<'t, T> {
        let out = self.value().map(|x| gelu_fwd(x).0);
        self.tape.push(out, Op::Gelu(self.id))
    }

    /// Elementwise clamp to `[lo, hi]`; gradient passes only where the input
    /// lies strictly inside.
    pub fn clamp(self, lo: T, hi: T) -> Var<'t, T> {
        let out = self.value().map(|v| v.max(lo).min(hi));
        self.tape.push(out, Op::Clamp(self.id, lo, hi))
    }

    pub fn layer_norm(self, gamma: Var<'t, T>, beta: Var<'t, T>, eps: T) -> Result<Var<'t, T>> {
        let x = self.value();
        let out = x.layer_norm(&gamma.value(), &beta.value(), eps)?;
        let c = x.cols();
        let mut xhat = Vec::with_capacity(x.len());
        let mut rstd = Vec::with_capacity(x.rows());
        for row in x.data().chunks(c) {
            let (mean, r) = row_stats(row, eps);
            rstd.push(r);
            xhat.extend(row.iter().map(|&v| (v - mean) * r));
        }
        Ok(self.tape.push(
            out,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                rstd,
            },
        ))
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'t, T>> {
        let out = self.value().softmax(axis)?;
        Ok(self.tape.push(out, Op::Softmax { x: self.id, axis }))
    }

    /// Grouped multi-head scaled dot-product attention.
    ///
    /// `self` holds `groups·nq` query rows and `keys`/`values` hold
    /// `groups·nk` rows; row block `g` of the queries only attends to row
    /// block `g` of the keys. The feature dimension is split into `heads`
    /// contiguous slices.
    pub fn attention(
        self,
        keys: Var<'t, T>,
        values: Var<'t, T>,
        heads: usize,
        groups: usize,
    ) -> Result<Var<'t, T>> {
        let q = self.value();
        let k = keys.value();
        let v = values.value();
        let (out, probs) = attention_fwd(&q, &k, &v, heads, groups)?;
        Ok(self.tape.push(
            out,
            Op::Attention {
                q: self.id,
                k: keys.id,
                v: values.id,
                heads,
                groups,
                probs,
            },
        ))
    }

    /// Row gather; indices may repeat (gradients are scatter-added).
    pub fn gather_rows(self, idx: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        let c = x.cols();
        let r = x.rows();
        if idx.is_empty() {
            return Err(TensorError::Contract("gather_rows with no indices".into()));
        }
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(TensorError::Contract(format!(
                    "gather_rows index {i} out of {r} rows"
                )));
            }
            out.extend_from_slice(&x.data()[i * c..(i + 1) * c]);
        }
        let out = Tensor::new(&[idx.len(), c], out)?;
        Ok(self.tape.push(
            out,
            Op::GatherRows {
                x: self.id,
                idx: idx.to_vec(),
            },
        ))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let out = self.value().reshape(shape)?;
        Ok(self.tape.push(out, Op::Reshape(self.id)))
    }

    /// Cumulative sum along consecutive row blocks of length `group`.
    pub fn cumsum_rows(self, group: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let c = x.cols();
        if group == 0 || x.rows() % group != 0 {
            return Err(TensorError::Contract(format!(
                "cumsum_rows group {group} does not divide {} rows",
                x.rows()
            )));
        }
        let mut out = x.data().to_vec();
        for block in out.chunks_mut(group * c) {
            for t in 1..group {
                for j in 0..c {
                    block[t * c + j] = block[t * c + j] + block[(t - 1) * c + j];
                }
            }
        }
        let out = Tensor::new(x.shape(), out)?;
        Ok(self.tape.push(out, Op::CumsumRows { x: self.id, group }))
    }

    /// Mean over consecutive row blocks of length `group`.
    pub fn mean_rows(self, group: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let c = x.cols();
        if group == 0 || x.rows() % group != 0 {
            return Err(TensorError::Contract(format!(
                "mean_rows group {group} does not divide {} rows",
                x.rows()
            )));
        }
        let blocks = x.rows() / group;
        let inv = T::one() / T::of(group as f64);
        let mut out = vec![T::zero(); blocks * c];
        for (b, block) in x.data().chunks(group * c).enumerate() {
            for row in block.chunks(c) {
                for j in 0..c {
                    out[b * c + j] = out[b * c + j] + row[j];
                }
            }
        }
        for v in &mut out {
            *v = *v * inv;
        }
        let out = Tensor::new(&[blocks, c], out)?;
        Ok(self.tape.push(out, Op::MeanRows { x: self.id, group }))
    }

    pub fn sum(self) -> Var<'t, T> {
        let out = Tensor::scalar(self.value().sum());
        self.tape.push(out, Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'t, T> {
        let n = self.value().len();
        self.sum().scale(T::one() / T::of(n as f64))
    }

    /// Σ smooth-L1(x − target) with unit transition point.
    pub fn smooth_l1_sum(self, target: &Tensor<T>) -> Result<Var<'t, T>> {
        let x = self.value();
        x.check_same(target, "smooth_l1")?;
        let half = T::of(0.5);
        let total = x
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| {
                let d = (a - b).abs();
                if d < T::one() {
                    half * d * d
                } else {
                    d - half
                }
            })
            .sum();
        Ok(self.tape.push(
            Tensor::scalar(total),
            Op::SmoothL1Sum {
                x: self.id,
                target: target.clone(),
            },
        ))
    }

    /// Mean binary cross-entropy of logits against {0,1} targets.
    pub fn bce_with_logits_mean(self, target: &Tensor<T>) -> Result<Var<'t, T>> {
        let x = self.value();
        x.check_same(target, "bce_with_logits")?;
        let total: T = x
            .data()
            .iter()
            .zip(target.data())
            .map(|(&z, &t)| bce_term(z, t))
            .sum();
        let out = Tensor::scalar(total / T::of(x.len() as f64));
        Ok(self.tape.push(
            out,
            Op::BceLogitsMean {
                x: self.id,
                target: target.clone(),
            },
        ))
    }

    /// Mean over rows of −log softmax(row)[class].
    pub fn cross_entropy_mean(self, classes: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        let k = x.cols();
        if classes.len() != x.rows() || classes.iter().any(|&c| c >= k) {
            return Err(TensorError::Contract(format!(
                "cross_entropy: {} classes for logits {:?}",
                classes.len(),
                x.shape()
            )));
        }
        let mut total = T::zero();
        for (row, &c) in x.data().chunks(k).zip(classes) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            total = total + lse - row[c];
        }
        let out = Tensor::scalar(total / T::of(classes.len() as f64));
        Ok(self.tape.push(
            out,
            Op::CrossEntropyMean {
                x: self.id,
                classes: classes.to_vec(),
            },
        ))
    }

    pub fn mse_mean(self, target: &Tensor<T>) -> Result<Var<'t, T>> {
        let x = self.value();
        x.check_same(target, "mse")?;
        let total: T = x
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum();
        let out = Tensor::scalar(total / T::of(x.len() as f64));
        Ok(self.tape.push(
            out,
            Op::MseMean {
                x: self.id,
                target: target.clone(),
            },
        ))
    }
}

/// Concatenates vars with equal column counts along rows.
pub fn concat_rows<'t, T: Scalar>(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
    let first = parts
        .first()
        .ok_or_else(|| TensorError::Contract("concat_rows of nothing".into()))?;
    let c = first.value().cols();
    let mut data = Vec::new();
    let mut rows = 0;
    for p in parts {
        first.same_tape(p);
        let v = p.value();
        if v.cols() != c {
            return Err(TensorError::Shape {
                op: "concat_rows",
                lhs: first.shape(),
                rhs: v.shape().to_vec(),
            });
        }
        rows += v.rows();
        data.extend_from_slice(v.data());
    }
    let out = Tensor::new(&[rows, c], data)?;
    Ok(first
        .tape
        .push(out, Op::ConcatRows(parts.iter().map(|p| p.id).collect())))
}

pub(crate) fn bce_term<T: Scalar>(z: T, t: T) -> T {
    z.max(T::zero()) - z * t + (T::one() + (-z.abs()).exp()).ln()
}

fn gelu_fwd<T: Scalar>(x: T) -> (T, T) {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let a = T::of(0.044715);
    let half = T::of(0.5);
    let u = c * (x + a * x * x * x);
    let th = u.tanh();
    let y = half * x * (T::one() + th);
    let dy = half * (T::one() + th)
        + half * x * (T::one() - th * th) * c * (T::one() + T::of(3.0) * a * x * x);
    (y, dy)
}

fn attention_fwd<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
    groups: usize,
) -> Result<(Tensor<T>, Vec<T>)> {
    let c = q.cols();
    let shape_err = |rhs: &Tensor<T>| TensorError::Shape {
        op: "attention",
        lhs: q.shape().to_vec(),
        rhs: rhs.shape().to_vec(),
    };
    if k.cols() != c || q.rank() != 2 || k.rank() != 2 {
        return Err(shape_err(k));
    }
    if v.rank() != 2 || v.rows() != k.rows() || v.cols() != c {
        return Err(shape_err(v));
    }
    if heads == 0 || c % heads != 0 || groups == 0 || q.rows() % groups != 0 || k.rows() % groups != 0
    {
        return Err(TensorError::Contract(format!(
            "attention: {heads} heads / {groups} groups incompatible with q {:?}, k {:?}",
            q.shape(),
            k.shape()
        )));
    }
    let nq = q.rows() / groups;
    let nk = k.rows() / groups;
    let dh = c / heads;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut probs = vec![T::zero(); groups * heads * nq * nk];
    let mut out = vec![T::zero(); q.len()];
    for g in 0..groups {
        for h in 0..heads {
            let p_off = (g * heads + h) * nq * nk;
            let qv = View::new(q.data(), g * nq * c + h * dh, c, 1);
            let kt = View::new(k.data(), g * nk * c + h * dh, 1, c);
            gemm(nq, dh, nk, scale, qv, kt, T::zero(), &mut probs, p_off, nk, 1);
            softmax_in_place(&mut probs[p_off..p_off + nq * nk], nq, nk, 1);
            let pv = View::new(&probs, p_off, nk, 1);
            let vv = View::new(v.data(), g * nk * c + h * dh, c, 1);
            gemm(nq, nk, dh, T::one(), pv, vv, T::zero(), &mut out, g * nq * c + h * dh, c, 1);
        }
    }
    Ok((Tensor::new(q.shape(), out)?, probs))
}

fn local_grads<T: Scalar>(nodes: &[Node<T>], id: usize, g: &Tensor<T>) -> Vec<(usize, Tensor<T>)> {
    let val = |i: usize| &nodes[i].value;
    let need = |i: usize| nodes[i].requires_grad;
    match &nodes[id].op {
        Op::Leaf => vec![],
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            let mut res = Vec::new();
            if need(*a) {
                let mut da = vec![T::zero(); m * k];
                gemm(
                    m,
                    n,
                    k,
                    T::one(),
                    View::new(g.data(), 0, n, 1),
                    View::new(bv.data(), 0, 1, n),
                    T::zero(),
                    &mut da,
                    0,
                    k,
                    1,
                );
                res.push((*a, Tensor::new(&[m, k], da).expect("shape")));
            }
            if need(*b) {
                let mut db = vec![T::zero(); k * n];
                gemm(
                    k,
                    m,
                    n,
                    T::one(),
                    View::new(av.data(), 0, 1, k),
                    View::new(g.data(), 0, n, 1),
                    T::zero(),
                    &mut db,
                    0,
                    n,
                    1,
                );
                res.push((*b, Tensor::new(&[k, n], db).expect("shape")));
            }
            res
        }
        Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
        Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.scale(-T::one()))],
        Op::Mul(a, b) => {
            let da = g.zip_map(val(*b), "mul", |x, y| x * y).expect("shape");
            let db = g.zip_map(val(*a), "mul", |x, y| x * y).expect("shape");
            vec![(*a, da), (*b, db)]
        }
        Op::Scale(x, c) => vec![(*x, g.scale(*c))],
        Op::AddRow(x, b) => {
            let bv = val(*b);
            let c = bv.len();
            let mut db = vec![T::zero(); c];
            for row in g.data().chunks(c) {
                for j in 0..c {
                    db[j] = db[j] + row[j];
                }
            }
            vec![
                (*x, g.clone()),
                (*b, Tensor::new(bv.shape(), db).expect("shape")),
            ]
        }
        Op::Clamp(x, lo, hi) => {
            let dx = g
                .zip_map(val(*x), "clamp", |gg, xx| if xx > *lo && xx < *hi { gg } else { T::zero() })
                .expect("shape");
            vec![(*x, dx)]
        }
        Op::Gelu(x) => {
            let dx = g
                .zip_map(val(*x), "gelu", |gg, xx| gg * gelu_fwd(xx).1)
                .expect("shape");
            vec![(*x, dx)]
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let gv = val(*gamma);
            let c = gv.len();
            let n = T::of(c as f64);
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            let mut dx = vec![T::zero(); g.len()];
            for (r, (grow, xrow)) in g.data().chunks(c).zip(xhat.chunks(c)).enumerate() {
                let mut mean_d = T::zero();
                let mut mean_dx = T::zero();
                for j in 0..c {
                    dgamma[j] = dgamma[j] + grow[j] * xrow[j];
                    dbeta[j] = dbeta[j] + grow[j];
                    let d = grow[j] * gv.data()[j];
                    mean_d = mean_d + d;
                    mean_dx = mean_dx + d * xrow[j];
                }
                mean_d = mean_d / n;
                mean_dx = mean_dx / n;
                for j in 0..c {
                    let d = grow[j] * gv.data()[j];
                    dx[r * c + j] = rstd[r] * (d - mean_d - xrow[j] * mean_dx);
                }
            }
            vec![
                (*x, Tensor::new(g.shape(), dx).expect("shape")),
                (*gamma, Tensor::new(gv.shape(), dgamma).expect("shape")),
                (*beta, Tensor::new(val(*beta).shape(), dbeta).expect("shape")),
            ]
        }
        Op::Softmax { x, axis } => {
            let y = &nodes[id].value;
            let (outer, len, inner) = axis_split(y.shape(), *axis).expect("validated in forward");
            let mut dx = vec![T::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let mut dot = T::zero();
                    for a in 0..len {
                        let idx = base + a * inner;
                        dot = dot + g.data()[idx] * y.data()[idx];
                    }
                    for a in 0..len {
                        let idx = base + a * inner;
                        dx[idx] = y.data()[idx] * (g.data()[idx] - dot);
                    }
                }
            }
            vec![(*x, Tensor::new(y.shape(), dx).expect("shape"))]
        }
        Op::Attention {
            q,
            k,
            v,
            heads,
            groups,
            probs,
        } => attention_bwd(val(*q), val(*k), val(*v), *heads, *groups, probs, g)
            .into_iter()
            .zip([*q, *k, *v])
            .map(|(t, i)| (i, t))
            .collect(),
        Op::GatherRows { x, idx } => {
            let xv = val(*x);
            let c = xv.cols();
            let mut dx = vec![T::zero(); xv.len()];
            for (r, &i) in idx.iter().enumerate() {
                for j in 0..c {
                    dx[i * c + j] = dx[i * c + j] + g.data()[r * c + j];
                }
            }
            vec![(*x, Tensor::new(xv.shape(), dx).expect("shape"))]
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            parts
                .iter()
                .map(|&p| {
                    let pv = val(p);
                    let n = pv.len();
                    let t = Tensor::new(pv.shape(), g.data()[off..off + n].to_vec()).expect("shape");
                    off += n;
                    (p, t)
                })
                .collect()
        }
        Op::CumsumRows { x, group } => {
            let c = g.cols();
            let mut dx = g.data().to_vec();
            for block in dx.chunks_mut(group * c) {
                for t in (0..group - 1).rev() {
                    for j in 0..c {
                        block[t * c + j] = block[t * c + j] + block[(t + 1) * c + j];
                    }
                }
            }
            vec![(*x, Tensor::new(val(*x).shape(), dx).expect("shape"))]
        }
        Op::MeanRows { x, group } => {
            let xv = val(*x);
            let c = xv.cols();
            let inv = T::one() / T::of(*group as f64);
            let mut dx = vec![T::zero(); xv.len()];
            for (r, v) in dx.chunks_mut(c).enumerate() {
                let b = r / group;
                for j in 0..c {
                    v[j] = g.data()[b * c + j] * inv;
                }
            }
            vec![(*x, Tensor::new(xv.shape(), dx).expect("shape"))]
        }
        Op::Reshape(x) => vec![(*x, g.reshape(val(*x).shape()).expect("shape"))],
        Op::Sum(x) => vec![(*x, Tensor::full(val(*x).shape(), g.item()))],
        Op::SmoothL1Sum { x, target } => {
            let gs = g.item();
            let dx = val(*x)
                .zip_map(target, "smooth_l1", |a, b| {
                    (a - b).max(-T::one()).min(T::one()) * gs
                })
                .expect("shape");
            vec![(*x, dx)]
        }
        Op::BceLogitsMean { x, target } => {
            let xv = val(*x);
            let s = g.item() / T::of(xv.len() as f64);
            let dx = xv
                .zip_map(target, "bce", |z, t| (T::one() / (T::one() + (-z).exp()) - t) * s)
                .expect("shape");
            vec![(*x, dx)]
        }
        Op::CrossEntropyMean { x, classes } => {
            let xv = val(*x);
            let k = xv.cols();
            let s = g.item() / T::of(classes.len() as f64);
            let mut dx = xv.data().to_vec();
            softmax_in_place(&mut dx, classes.len(), k, 1);
            for (r, &c) in classes.iter().enumerate() {
                dx[r * k + c] = dx[r * k + c] - T::one();
            }
            for v in &mut dx {
                *v = *v * s;
            }
            vec![(*x, Tensor::new(xv.shape(), dx).expect("shape"))]
        }
        Op::MseMean { x, target } => {
            let xv = val(*x);
            let s = T::of(2.0) * g.item() / T::of(xv.len() as f64);
            let dx = xv.zip_map(target, "mse", |a, b| (a - b) * s).expect("shape");
            vec![(*x, dx)]
        }
    }
}

fn attention_bwd<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
    groups: usize,
    probs: &[T],
    g: &Tensor<T>,
) -> Vec<Tensor<T>> {
    let c = q.cols();
    let nq = q.rows() / groups;
    let nk = k.rows() / groups;
    let dh = c / heads;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut dq = vec![T::zero(); q.len()];
    let mut dk = vec![T::zero(); k.len()];
    let mut dv = vec![T::zero(); v.len()];
    let mut dp = vec![T::zero(); nq * nk];
    for gi in 0..groups {
        for h in 0..heads {
            let p_off = (gi * heads + h) * nq * nk;
            let q_off = gi * nq * c + h * dh;
            let k_off = gi * nk * c + h * dh;
            let gv = View::new(g.data(), q_off, c, 1);
            // dV = Pᵀ·dO
            gemm(
                nk,
                nq,
                dh,
                T::one(),
                View::new(probs, p_off, 1, nk),
                gv,
                T::zero(),
                &mut dv,
                k_off,
                c,
                1,
            );
            // dP = dO·Vᵀ
            gemm(
                nq,
                dh,
                nk,
                T::one(),
                gv,
                View::new(v.data(), k_off, 1, c),
                T::zero(),
                &mut dp,
                0,
                nk,
                1,
            );
            let p = &probs[p_off..p_off + nq * nk];
            for i in 0..nq {
                let row = &mut dp[i * nk..(i + 1) * nk];
                let prow = &p[i * nk..(i + 1) * nk];
                let dot: T = row.iter().zip(prow).map(|(&a, &b)| a * b).sum();
                for (d, &pp) in row.iter_mut().zip(prow) {
                    *d = pp * (*d - dot);
                }
            }
            // dQ = dS·K·scale, dK = dSᵀ·Q·scale
            gemm(
                nq,
                nk,
                dh,
                scale,
                View::new(&dp, 0, nk, 1),
                View::new(k.data(), k_off, c, 1),
                T::zero(),
                &mut dq,
                q_off,
                c,
                1,
            );
            gemm(
                nk,
                nq,
                dh,
                scale,
                View::new(&dp, 0, 1, nk),
                View::new(q.data(), q_off, c, 1),
                T::zero(),
                &mut dk,
                k_off,
                c,
                1,
            );
        }
    }
    vec![
        Tensor::new(q.shape(), dq).expect("shape"),
        Tensor::new(k.shape(), dk).expect("shape"),
        Tensor::new(v.shape(), dv).expect("shape"),
    ]
}
