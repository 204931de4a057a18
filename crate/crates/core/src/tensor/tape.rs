use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels::{self, ConvGeom};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(pub(crate) usize);

/// Index of a parameter in a parameter registry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

pub(crate) enum Op<T> {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Minimum(Var, Var),
    Maximum(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Gather {
        table: Var,
        indices: Vec<usize>,
    },
    Pick {
        x: Var,
        indices: Vec<usize>,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    Broadcast(Var),
    ConvexCombine {
        coeffs: Var,
        bank: Var,
    },
}

impl<T> Op<T> {
    pub(crate) fn parents(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf | Param(_) => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | Minimum(a, b) | Maximum(a, b) => {
                vec![*a, *b]
            }
            MatMul { a, b, .. } | BatchMatMul { a, b, .. } => vec![*a, *b],
            Scale(a, _) | AddScalar(a) | Relu(a) | Sigmoid(a) | Exp(a) | Log(a) | Abs(a)
            | Sum(a) | Mean(a) | SumAxis(a, _) | Permute(a, _) | Reshape(a) | Softmax(a)
            | LogSoftmax(a) | Broadcast(a) => vec![*a],
            Slice { x, .. } | Pick { x, .. } | Dropout { x, .. } => vec![*x],
            Gather { table, .. } => vec![*table],
            Concat(vs, _) => vs.clone(),
            LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Conv2d { x, w, b, .. } => vec![*x, *w, *b],
            ConvexCombine { coeffs, bank } => vec![*coeffs, *bank],
        }
    }
}

pub(crate) struct Node<T> {
    pub value: Tensor<T>,
    pub op: Op<T>,
    pub needs_grad: bool,
}

/// Append-only record of one forward pass.
///
/// Nodes are pushed in evaluation order, so every node's parents precede it.
/// A tape is built fresh for each forward pass and consumed by one backward.
pub struct Tape<T: Real> {
    pub(crate) nodes: Vec<Node<T>>,
    param_vars: Vec<Option<Var>>,
    train: bool,
    rng: ChaCha8Rng,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<T: Real> {
    pub(crate) grads: Vec<Option<Tensor<T>>>,
    pub(crate) shapes: Vec<Vec<usize>>,
    pub(crate) params: Vec<(ParamId, Var)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to a leaf; zeros when the leaf does not reach the loss.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn param(&self, id: ParamId) -> Option<Tensor<T>> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .map(|(_, v)| self.wrt(*v))
    }

    /// `(parameter, gradient)` for every parameter bound on the tape.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, Tensor<T>)> + '_ {
        self.params.iter().map(|(p, v)| (*p, self.wrt(*v)))
    }
}

fn suffix_broadcastable(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    /// Tape in evaluation mode (dropout disabled).
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            param_vars: Vec::new(),
            train: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    /// Tape in training mode; `seed` drives dropout masks.
    pub fn training(seed: u64) -> Self {
        Tape {
            train: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
            ..Self::new()
        }
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let needs_grad = match &op {
            Op::Leaf => false,
            Op::Param(_) => true,
            other => other.parents().iter().any(|p| self.nodes[p.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input: never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Leaf that may require a gradient.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        let v = self.push(value, Op::Leaf);
        self.nodes[v.0].needs_grad = requires_grad;
        v
    }

    /// Binds a registered parameter. Repeated binds return the same handle.
    pub fn param(&mut self, id: ParamId, value: &Tensor<T>) -> Var {
        if let Some(Some(v)) = self.param_vars.get(id.0) {
            return *v;
        }
        let v = self.push(value.clone(), Op::Param(id));
        if self.param_vars.len() <= id.0 {
            self.param_vars.resize(id.0 + 1, None);
        }
        self.param_vars[id.0] = Some(v);
        v
    }

    /// Parameters bound on this tape that `v` depends on.
    pub fn params_reaching(&self, v: Var) -> BTreeSet<ParamId> {
        let mut seen = vec![false; self.nodes.len()];
        let mut stack = vec![v];
        let mut out = BTreeSet::new();
        while let Some(n) = stack.pop() {
            if std::mem::replace(&mut seen[n.0], true) {
                continue;
            }
            if let Op::Param(id) = self.nodes[n.0].op {
                out.insert(id);
            }
            stack.extend(self.nodes[n.0].op.parents());
        }
        out
    }

    // -- elementwise ------------------------------------------------------

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if !suffix_broadcastable(&sa, &sb) {
            return Err(Error::shape(name, &sa, &sb));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let bn = bv.len();
        let out: Vec<T> = if bn == av.len() {
            av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect()
        } else {
            av.iter().enumerate().map(|(i, &x)| f(x, bv[i % bn])).collect()
        };
        Ok(self.push(Tensor::from_vec(sa, out), op))
    }

    fn same_shape(&self, name: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(name, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    /// `a + b`; `b` may match a trailing suffix of `a`'s shape.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("minimum", a, b)?;
        self.binary("minimum", a, b, T::min, Op::Minimum(a, b))
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("maximum", a, b)?;
        self.binary("maximum", a, b, T::max, Op::Maximum(a, b))
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(a).map(f);
        self.push(value, op)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -T::one())
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        self.unary(a, |x| x + s, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(T::zero()), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, |x| T::one() / (T::one() + (-x).exp()), Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, T::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, T::ln, Op::Log(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, T::abs, Op::Abs(a))
    }

    // -- reductions and shape ---------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s: T = v.data().iter().copied().sum();
        let m = s / T::from_f64(v.numel() as f64);
        self.push(Tensor::scalar(m), Op::Mean(a))
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("sum_axis", &shape, &[axis]));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.value(a).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &x[(o * len + l) * inner..(o * len + l + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        Ok(self.push(Tensor::from_vec(out_shape, out), Op::SumAxis(a, axis)))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let len = *self
            .shape(a)
            .get(axis)
            .ok_or_else(|| Error::shape("mean_axis", self.shape(a), &[axis]))?;
        let s = self.sum_axis(a, axis)?;
        Ok(self.scale(s, T::one() / T::from_f64(len as f64)))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        if sorted != (0..shape.len()).collect::<Vec<_>>() {
            return Err(Error::shape("permute", &shape, axes));
        }
        let (out_shape, out) = kernels::permute(self.value(a).data(), &shape, axes);
        Ok(self.push(Tensor::from_vec(out_shape, out), Op::Permute(a, axes.to_vec())))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let rank = self.shape(a).len();
        if rank < 2 {
            return Err(Error::shape("transpose", self.shape(a), &[]));
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(a, &axes)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        Ok(self.push(value, Op::Reshape(a)))
    }

    pub fn concat(&mut self, vars: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*vars.first().ok_or_else(|| Error::contract("concat of nothing"))?).to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", &first, &[axis]));
        }
        let mut total = 0;
        for &v in vars {
            let s = self.shape(v);
            let ok = s.len() == first.len()
                && s.iter().enumerate().all(|(i, &d)| i == axis || d == first[i]);
            if !ok {
                return Err(Error::shape("concat", &first, s));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in vars {
                let len = self.shape(v)[axis];
                let d = self.value(v).data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        Ok(self.push(Tensor::from_vec(shape, out), Op::Concat(vars.to_vec(), axis)))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(Error::shape("slice", &shape, &[axis, start, end]));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let len = shape[axis];
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            out.extend_from_slice(&x[(o * len + start) * inner..(o * len + end) * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = end - start;
        Ok(self.push(
            Tensor::from_vec(out_shape, out),
            Op::Slice { x: a, axis, start },
        ))
    }

    /// Repeats `a` along a new leading axis of length `batch`.
    pub fn broadcast(&mut self, a: Var, batch: usize) -> Var {
        let v = self.value(a);
        let mut shape = vec![batch];
        shape.extend_from_slice(v.shape());
        let mut out = Vec::with_capacity(batch * v.numel());
        for _ in 0..batch {
            out.extend_from_slice(v.data());
        }
        self.push(Tensor::from_vec(shape, out), Op::Broadcast(a))
    }

    // -- normalisation ----------------------------------------------------

    /// Softmax along the last axis, max-subtracted.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let width = *v.shape().last().ok_or_else(|| Error::shape("softmax", &[], &[]))?;
        let out = kernels::softmax_rows(v.data(), width);
        let shape = v.shape().to_vec();
        Ok(self.push(Tensor::from_vec(shape, out), Op::Softmax(a)))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let width = *v.shape().last().ok_or_else(|| Error::shape("log_softmax", &[], &[]))?;
        let out = kernels::log_softmax_rows(v.data(), width);
        let shape = v.shape().to_vec();
        Ok(self.push(Tensor::from_vec(shape, out), Op::LogSoftmax(a)))
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::shape("layer_norm", &[], &[]))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape("layer_norm", &shape, self.shape(gamma)));
        }
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = xv.len() / d;
        let mut xhat = vec![T::zero(); xv.len()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        let n = T::from_f64(d as f64);
        let eps = T::from_f64(eps);
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        Ok(self.push(
            Tensor::from_vec(shape, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    // -- products ---------------------------------------------------------

    /// `a[..., p, q] @ b[q, s]`; leading axes of `a` are flattened into rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a[..., p, q] @ b^T` for `b[s, q]` (the layout of a linear layer weight).
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let inner = if trans_b { sb.get(1) } else { sb.first() };
        if sa.len() < 2 || sb.len() != 2 || Some(&sa[sa.len() - 1]) != inner {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (q, s) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        let rows = self.value(a).numel() / q;
        let mut out = vec![T::zero(); rows * s];
        kernels::gemm(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            rows,
            q,
            s,
            false,
            trans_b,
            false,
        );
        let mut shape = sa;
        *shape.last_mut().unwrap() = s;
        Ok(self.push(Tensor::from_vec(shape, out), Op::MatMul { a, b, trans_b }))
    }

    /// Batched `a[g, p, q] @ b[g, q, s]`, or `a @ b^T` with `b[g, s, q]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bad = sa.len() != 3
            || sb.len() != 3
            || sa[0] != sb[0]
            || (!trans_b && sa[2] != sb[1])
            || (trans_b && sa[2] != sb[2]);
        if bad {
            return Err(Error::shape("batch_matmul", &sa, &sb));
        }
        let (g, p, q) = (sa[0], sa[1], sa[2]);
        let s = if trans_b { sb[1] } else { sb[2] };
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![T::zero(); g * p * s];
        for i in 0..g {
            kernels::gemm(
                &av[i * p * q..(i + 1) * p * q],
                &bv[i * q * s..(i + 1) * q * s],
                &mut out[i * p * s..(i + 1) * p * s],
                p,
                q,
                s,
                false,
                trans_b,
                false,
            );
        }
        Ok(self.push(
            Tensor::from_vec(vec![g, p, s], out),
            Op::BatchMatMul { a, b, trans_b },
        ))
    }

    // -- indexing ---------------------------------------------------------

    /// Embedding lookup: rows of `table[v, f]` at `indices`.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 || indices.iter().any(|&i| i >= shape[0]) {
            return Err(Error::shape("gather_rows", &shape, indices));
        }
        let width = shape[1];
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            out.extend_from_slice(&t[i * width..(i + 1) * width]);
        }
        Ok(self.push(
            Tensor::from_vec(vec![indices.len(), width], out),
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
        ))
    }

    /// `out[i] = x[i, indices[i]]` for `x[n, k]`.
    pub fn pick(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || shape[0] != indices.len() || indices.iter().any(|&i| i >= shape[1]) {
            return Err(Error::shape("pick", &shape, indices));
        }
        let k = shape[1];
        let xv = self.value(x).data();
        let out = indices.iter().enumerate().map(|(r, &c)| xv[r * k + c]).collect();
        Ok(self.push(
            Tensor::from_vec(vec![indices.len()], out),
            Op::Pick {
                x,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Inverted dropout; identity when the tape is not training or `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        if !self.train || p <= 0.0 {
            return x;
        }
        let keep = T::from_f64(1.0 / (1.0 - p));
        let n = self.value(x).numel();
        let mask: Vec<T> = (0..n)
            .map(|_| if self.rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let v = self.value(x);
        let out = v.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let shape = v.shape().to_vec();
        self.push(Tensor::from_vec(shape, out), Op::Dropout { x, mask })
    }

    // -- convolution and query combination ----------------------------------

    /// Square-kernel 2-D convolution: `x[b, c, h, w]`, `w[o, c, k, k]`, `b[o]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || sw[2] != sw[3] || stride == 0 {
            return Err(Error::shape("conv2d", &sx, &sw));
        }
        if self.shape(b) != [sw[0]] {
            return Err(Error::shape("conv2d", &sw, self.shape(b)));
        }
        let (batch, channels, height, width) = (sx[0], sx[1], sx[2], sx[3]);
        let (out_c, kernel) = (sw[0], sw[2]);
        if height + 2 * pad < kernel || width + 2 * pad < kernel {
            return Err(Error::shape("conv2d", &sx, &sw));
        }
        let geom = ConvGeom {
            channels,
            height,
            width,
            kernel,
            stride,
            pad,
            out_h: (height + 2 * pad - kernel) / stride + 1,
            out_w: (width + 2 * pad - kernel) / stride + 1,
        };
        let (cr, cc) = (geom.col_rows(), geom.col_cols());
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let mut cols = vec![T::zero(); batch * cr * cc];
        let mut out = vec![T::zero(); batch * out_c * cc];
        let img = channels * height * width;
        for i in 0..batch {
            let col = &mut cols[i * cr * cc..(i + 1) * cr * cc];
            kernels::im2col(&xv[i * img..(i + 1) * img], &geom, col);
            let dst = &mut out[i * out_c * cc..(i + 1) * out_c * cc];
            for (o, row) in dst.chunks_mut(cc).enumerate() {
                row.iter_mut().for_each(|v| *v = bv[o]);
            }
            kernels::gemm(wv, col, dst, out_c, cr, cc, false, false, true);
        }
        Ok(self.push(
            Tensor::from_vec(vec![batch, out_c, geom.out_h, geom.out_w], out),
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            },
        ))
    }

    /// Group-wise weighted sum of bank rows.
    ///
    /// `coeffs` is `[m, r]` or `[batch, m, r]`; `bank` is `[m*r, f]`. Output row
    /// `i` is `sum_j coeffs[i, j] * bank[i*r + j]`, shaped `[m, f]` or
    /// `[batch, m, f]`.
    pub fn convex_combine(&mut self, coeffs: Var, bank: Var) -> Result<Var> {
        let (sc, sb) = (self.shape(coeffs).to_vec(), self.shape(bank).to_vec());
        let (batch, m, r) = match sc.len() {
            2 => (1, sc[0], sc[1]),
            3 => (sc[0], sc[1], sc[2]),
            _ => return Err(Error::shape("convex_combine", &sc, &sb)),
        };
        if sb.len() != 2 || sb[0] != m * r {
            return Err(Error::shape("convex_combine", &sc, &sb));
        }
        let f = sb[1];
        let cv = self.value(coeffs).data();
        let bv = self.value(bank).data();
        let mut out = vec![T::zero(); batch * m * f];
        for bi in 0..batch {
            for i in 0..m {
                let dst = &mut out[(bi * m + i) * f..(bi * m + i + 1) * f];
                for j in 0..r {
                    let w = cv[(bi * m + i) * r + j];
                    let src = &bv[(i * r + j) * f..(i * r + j + 1) * f];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d += w * s;
                    }
                }
            }
        }
        let shape = if sc.len() == 2 { vec![m, f] } else { vec![batch, m, f] };
        Ok(self.push(
            Tensor::from_vec(shape, out),
            Op::ConvexCombine { coeffs, bank },
        ))
    }
}
