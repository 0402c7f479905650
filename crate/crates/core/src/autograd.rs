//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every primitive appends one node holding its value and whatever it needs
//! for the backward rule. Nodes are appended in evaluation order, so the tape
//! is topologically sorted by construction and `backward` walks it once in
//! reverse.

use std::collections::BTreeMap;

use crate::error::{arg_err, dim_err, Result};
use crate::tensor::kernels::{self, ConvGeometry};
use crate::tensor::{broadcast_shape, lit, Padding, Scalar, Tensor};

/// Key of a trainable tensor; gradients are reported against it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Statistics source for batch normalization.
pub enum NormStats<'a, T> {
    /// Normalize with the statistics of the current batch.
    Batch,
    /// Normalize with fixed (running) statistics.
    Fixed { mean: &'a [T], var: &'a [T] },
}

/// Per-channel mean and biased variance of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchMoments<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

enum Op<T: Scalar> {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul {
        a: Var,
        b: Var,
        transpose_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Relu6(Var),
    Mean {
        input: Var,
        out_index: Vec<usize>,
        count: usize,
    },
    Sum(Var),
    Softmax {
        input: Var,
        axis: usize,
    },
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeometry,
        c_out: usize,
    },
    Depthwise {
        input: Var,
        kernel: Var,
        geom: ConvGeometry,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        x_hat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Reshape(Var),
    Permute {
        input: Var,
        perm: Vec<usize>,
    },
    Concat(Vec<Var>),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients keyed by parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T: Scalar> {
    grads: BTreeMap<ParamId, Tensor<T>>,
}

impl<T: Scalar> Default for Gradients<T> {
    fn default() -> Self {
        Gradients { grads: BTreeMap::new() }
    }
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads.get(&id)
    }

    pub fn insert(&mut self, id: ParamId, grad: Tensor<T>) {
        self.grads.insert(id, grad);
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.grads.iter().map(|(&k, v)| (k, v))
    }

    pub fn all_finite(&self) -> bool {
        self.grads.values().all(Tensor::is_finite)
    }
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<ParamId, Var>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Tape::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: BTreeMap::new(),
        }
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

    /// Records a tensor that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Records a parameter; repeated calls with the same id return the same node.
    pub fn param(&mut self, id: ParamId, value: &Tensor<T>) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.leaf(value.clone().with_requires_grad(true), true);
        self.params.insert(id, v);
        v
    }

    fn leaf(&mut self, value: Tensor<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (&[m, k], &[k2, n]) = (sa, sb) else {
            return Err(dim_err!("matmul needs 2-D operands, got {sa:?} and {sb:?}"));
        };
        if k != k2 {
            return Err(dim_err!("matmul inner dimensions differ: {sa:?} · {sb:?}"));
        }
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), &[a, b]))
    }

    /// `a[B×M×K] · b[B×K×N]`, or `a · bᵀ` with `b[B×N×K]` when `transpose_b`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (&[batch, m, k], &[batch2, r, c]) = (sa, sb) else {
            return Err(dim_err!("batch_matmul needs 3-D operands, got {sa:?} and {sb:?}"));
        };
        let (k2, n) = if transpose_b { (c, r) } else { (r, c) };
        if batch != batch2 || k != k2 {
            return Err(dim_err!(
                "batch_matmul shape mismatch: {sa:?} · {sb:?} (transpose_b = {transpose_b})"
            ));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(batch * m * n);
        for i in 0..batch {
            let ai = &av[i * m * k..(i + 1) * m * k];
            let bi = &bv[i * k * n..(i + 1) * k * n];
            if transpose_b {
                out.extend(kernels::matmul_a_bt(ai, bi, m, k, n));
            } else {
                out.extend(kernels::matmul(ai, bi, m, k, n));
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![batch, m, n], out),
            Op::BatchMatMul { a, b, transpose_b },
            &[a, b],
        ))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<(Tensor<T>, usize)> {
        let (va, vb) = (self.value(a), self.value(b));
        let shape = broadcast_shape(va.shape(), vb.shape())?;
        let nb = vb.numel();
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, vb.data()[i % nb]))
            .collect();
        Ok((Tensor::from_parts(shape, data), nb))
    }

    /// `a + b`, where `b` equals `a`'s shape or a trailing suffix of it.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, _) = self.binary(a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, _) = self.binary(a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, _) = self.binary(a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let t = self.value(a).map(|x| x * factor);
        self.push(t, Op::Scale(a, factor), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.max(T::zero()));
        self.push(t, Op::Relu(a), &[a])
    }

    pub fn relu6(&mut self, a: Var) -> Var {
        let six = lit::<T>(6.0);
        let t = self.value(a).map(|x| x.max(T::zero()).min(six));
        self.push(t, Op::Relu6(a), &[a])
    }

    /// Arithmetic mean over `axes`, which are removed from the shape.
    pub fn mean(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        for &ax in axes {
            if ax >= shape.len() {
                return Err(arg_err!("axis {ax} out of range for shape {shape:?}"));
            }
            if std::mem::replace(&mut seen[ax], true) {
                return Err(arg_err!("axis {ax} repeated in {axes:?}"));
            }
        }
        let out_shape: Vec<usize> = shape.iter().zip(&seen).filter(|(_, &s)| !s).map(|(&d, _)| d).collect();
        let count: usize = axes.iter().map(|&ax| shape[ax]).product();
        let out_index = reduction_index(&shape, &seen);
        let mut out = vec![T::zero(); out_shape.iter().product()];
        for (&x, &o) in self.value(a).data().iter().zip(&out_index) {
            out[o] += x;
        }
        let denom = lit::<T>(count as f64);
        out.iter_mut().for_each(|v| *v /= denom);
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::Mean {
                input: a,
                out_index,
                count,
            },
            &[a],
        ))
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Mean of all elements as a rank-0 tensor.
    pub fn mean_all(&mut self, a: Var) -> Var {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        self.mean(a, &axes).expect("all axes are valid and distinct")
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(arg_err!("softmax axis {axis} out of range for {shape:?}"));
        }
        let out = kernels::softmax(self.value(a).data(), &shape, axis);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax { input: a, axis }, &[a]))
    }

    /// Cross-correlation of `input[B×H×W×Cin]` with `kernel[kh×kw×Cin×Cout]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: Padding) -> Result<Var> {
        let ks = self.shape(kernel).to_vec();
        let &[k_h, k_w, c_in, c_out] = ks.as_slice() else {
            return Err(dim_err!("conv2d kernel must be kh×kw×Cin×Cout, got {ks:?}"));
        };
        let geom = ConvGeometry::new(self.shape(input), k_h, k_w, stride, padding)?;
        if geom.channels != c_in {
            return Err(dim_err!(
                "conv2d input {:?} has {} channels, kernel {ks:?} expects {c_in}",
                self.shape(input),
                geom.channels
            ));
        }
        let out = kernels::conv2d_forward(self.value(input).data(), self.value(kernel).data(), &geom, c_out);
        let shape = vec![geom.batch, geom.out_h, geom.out_w, c_out];
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Conv2d {
                input,
                kernel,
                geom,
                c_out,
            },
            &[input, kernel],
        ))
    }

    /// Per-channel convolution of `input[B×H×W×C]` with `kernel[kh×kw×C]`.
    pub fn depthwise_conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: Padding) -> Result<Var> {
        let ks = self.shape(kernel).to_vec();
        let &[k_h, k_w, c] = ks.as_slice() else {
            return Err(dim_err!("depthwise kernel must be kh×kw×C, got {ks:?}"));
        };
        let geom = ConvGeometry::new(self.shape(input), k_h, k_w, stride, padding)?;
        if geom.channels != c {
            return Err(dim_err!(
                "depthwise input {:?} has {} channels, kernel {ks:?} expects {c}",
                self.shape(input),
                geom.channels
            ));
        }
        let out = kernels::depthwise_forward(self.value(input).data(), self.value(kernel).data(), &geom);
        let shape = vec![geom.batch, geom.out_h, geom.out_w, c];
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Depthwise { input, kernel, geom },
            &[input, kernel],
        ))
    }

    /// Normalizes over every axis but the last (channel) axis, then applies
    /// `gamma · x̂ + beta`. Returns the batch moments when they were computed.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<'_, T>,
        epsilon: T,
    ) -> Result<(Var, Option<BatchMoments<T>>)> {
        let shape = self.shape(input).to_vec();
        let c = *shape.last().ok_or_else(|| dim_err!("batch_norm on a rank-0 tensor"))?;
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(dim_err!(
                    "batch_norm affine parameter {:?} does not match channels {c}",
                    self.shape(p)
                ));
            }
        }
        let x = self.value(input).data();
        let rows = x.len() / c;
        let (mean, var, batch_stats) = match stats {
            NormStats::Batch => {
                let n = lit::<T>(rows as f64);
                let mut mean = vec![T::zero(); c];
                for row in x.chunks_exact(c) {
                    mean.iter_mut().zip(row).for_each(|(m, &v)| *m += v);
                }
                mean.iter_mut().for_each(|m| *m /= n);
                let mut var = vec![T::zero(); c];
                for row in x.chunks_exact(c) {
                    for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                var.iter_mut().for_each(|s| *s /= n);
                (mean, var, true)
            }
            NormStats::Fixed { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(dim_err!("running statistics do not match channels {c}"));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + epsilon).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut x_hat = Vec::with_capacity(x.len());
        let mut out = Vec::with_capacity(x.len());
        for row in x.chunks_exact(c) {
            for j in 0..c {
                let h = (row[j] - mean[j]) * inv_std[j];
                x_hat.push(h);
                out.push(g[j] * h + b[j]);
            }
        }
        let moments = batch_stats.then_some(BatchMoments { mean, var });
        let v = self.push(
            Tensor::from_parts(shape, out),
            Op::BatchNorm {
                input,
                gamma,
                beta,
                x_hat,
                inv_std,
                batch_stats,
            },
            &[input, gamma, beta],
        );
        Ok((v, moments))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshape(shape.to_vec())?.with_requires_grad(false);
        Ok(self.push(t, Op::Reshape(a), &[a]))
    }

    /// Row-major reshape to `B×(rest)`.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() < 2 {
            return Err(dim_err!("flatten needs rank ≥ 2, got {shape:?}"));
        }
        let rest: usize = shape[1..].iter().product();
        self.reshape(a, &[shape[0], rest])
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut check = perm.to_vec();
        check.sort_unstable();
        if check != (0..shape.len()).collect::<Vec<_>>() {
            return Err(arg_err!("{perm:?} is not a permutation of the axes of {shape:?}"));
        }
        let (data, out_shape) = permute_data(self.value(a).data(), &shape, perm);
        Ok(self.push(
            Tensor::from_parts(out_shape, data),
            Op::Permute {
                input: a,
                perm: perm.to_vec(),
            },
            &[a],
        ))
    }

    /// Joins tensors along the last axis; all leading dimensions must match.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| arg_err!("concat of an empty list"))?;
        let lead = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(dim_err!(
                    "concat leading dimensions differ: {:?} vs {s:?}",
                    self.shape(*first)
                ));
            }
            widths.push(s[s.len() - 1]);
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Concat(parts.to_vec()), parts))
    }

    /// Row lookup: `table[V×E]` indexed by `ids` of shape `ids_shape`,
    /// giving `ids_shape × E`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize], ids_shape: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        let &[vocab, e] = ts.as_slice() else {
            return Err(dim_err!("embedding table must be V×E, got {ts:?}"));
        };
        if ids_shape.iter().product::<usize>() != ids.len() {
            return Err(dim_err!("ids shape {ids_shape:?} does not hold {} ids", ids.len()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(arg_err!("token id {bad} out of range for vocabulary of {vocab}"));
        }
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * e);
        for &i in ids {
            out.extend_from_slice(&t[i * e..(i + 1) * e]);
        }
        let mut shape = ids_shape.to_vec();
        shape.push(e);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Gradients of a scalar `loss` with respect to every recorded parameter.
    /// Parameters the loss does not depend on get zero gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(arg_err!("backward needs a scalar loss, got shape {:?}", lv.shape()));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }

        let mut out = Gradients::default();
        for (&id, &v) in &self.params {
            let shape = self.shape(v).to_vec();
            let g = match grads.get_mut(v.0).and_then(Option::take) {
                Some(data) => Tensor::from_parts(shape, data),
                None => Tensor::zeros(shape),
            };
            out.insert(id, g);
        }
        Ok(out)
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let mut acc = |v: Var, contrib: Vec<T>| accumulate(grads, v, contrib);
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.wants(a) {
                    acc(a, kernels::matmul_a_bt(g, bv.data(), m, n, k));
                }
                if self.wants(b) {
                    acc(b, kernels::matmul_at_b(av.data(), g, m, k, n));
                }
            }
            &Op::BatchMatMul { a, b, transpose_b } => {
                let (av, bv) = (self.value(a), self.value(b));
                let (batch, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n = node.value.shape()[2];
                let (mut da, mut db) = (Vec::new(), Vec::new());
                for i in 0..batch {
                    let ai = &av.data()[i * m * k..(i + 1) * m * k];
                    let bi = &bv.data()[i * k * n..(i + 1) * k * n];
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    if transpose_b {
                        da.extend(kernels::matmul(gi, bi, m, n, k));
                        db.extend(kernels::matmul_at_b(gi, ai, m, n, k));
                    } else {
                        da.extend(kernels::matmul_a_bt(gi, bi, m, n, k));
                        db.extend(kernels::matmul_at_b(ai, gi, m, k, n));
                    }
                }
                if self.wants(a) {
                    acc(a, da);
                }
                if self.wants(b) {
                    acc(b, db);
                }
            }
            &Op::Add(a, b) => {
                if self.wants(a) {
                    acc(a, g.to_vec());
                }
                if self.wants(b) {
                    acc(b, reduce_to(g, self.value(b).numel(), |x, _| x));
                }
            }
            &Op::Sub(a, b) => {
                if self.wants(a) {
                    acc(a, g.to_vec());
                }
                if self.wants(b) {
                    acc(b, reduce_to(g, self.value(b).numel(), |x, _| -x));
                }
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                if self.wants(a) {
                    let nb = bv.len();
                    acc(a, g.iter().enumerate().map(|(i, &x)| x * bv[i % nb]).collect());
                }
                if self.wants(b) {
                    acc(b, reduce_to(g, bv.len(), |x, i| x * av[i]));
                }
            }
            &Op::Scale(a, factor) => acc(a, g.iter().map(|&x| x * factor).collect()),
            &Op::Relu(a) => {
                let x = self.value(a).data();
                acc(
                    a,
                    g.iter()
                        .zip(x)
                        .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                        .collect(),
                );
            }
            &Op::Relu6(a) => {
                let x = self.value(a).data();
                let six = lit::<T>(6.0);
                acc(
                    a,
                    g.iter()
                        .zip(x)
                        .map(|(&gv, &xv)| if xv > T::zero() && xv < six { gv } else { T::zero() })
                        .collect(),
                );
            }
            Op::Mean {
                input,
                out_index,
                count,
            } => {
                let denom = lit::<T>(*count as f64);
                acc(*input, out_index.iter().map(|&o| g[o] / denom).collect());
            }
            &Op::Sum(a) => acc(a, vec![g[0]; self.value(a).numel()]),
            &Op::Softmax { input, axis } => {
                let y = &node.value;
                acc(input, kernels::softmax_backward(y.data(), g, y.shape(), axis));
            }
            &Op::Conv2d {
                input,
                kernel,
                ref geom,
                c_out,
            } => {
                let (dx, dk) =
                    kernels::conv2d_backward(self.value(input).data(), self.value(kernel).data(), g, geom, c_out);
                if self.wants(input) {
                    acc(input, dx);
                }
                if self.wants(kernel) {
                    acc(kernel, dk);
                }
            }
            &Op::Depthwise {
                input,
                kernel,
                ref geom,
            } => {
                let (dx, dk) =
                    kernels::depthwise_backward(self.value(input).data(), self.value(kernel).data(), g, geom);
                if self.wants(input) {
                    acc(input, dx);
                }
                if self.wants(kernel) {
                    acc(kernel, dk);
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                x_hat,
                inv_std,
                batch_stats,
            } => {
                let c = inv_std.len();
                let gv = self.value(*gamma).data();
                let mut d_gamma = vec![T::zero(); c];
                let mut d_beta = vec![T::zero(); c];
                for (grow, hrow) in g.chunks_exact(c).zip(x_hat.chunks_exact(c)) {
                    for j in 0..c {
                        d_gamma[j] += grow[j] * hrow[j];
                        d_beta[j] += grow[j];
                    }
                }
                if self.wants(*input) {
                    let dx = if *batch_stats {
                        // dx = inv_std/N · (N·dx̂ − Σdx̂ − x̂·Σ(dx̂·x̂)), dx̂ = g·γ
                        let n = lit::<T>((g.len() / c) as f64);
                        let mut out = Vec::with_capacity(g.len());
                        for (grow, hrow) in g.chunks_exact(c).zip(x_hat.chunks_exact(c)) {
                            for j in 0..c {
                                let dxh = grow[j] * gv[j];
                                let s1 = d_beta[j] * gv[j];
                                let s2 = d_gamma[j] * gv[j];
                                out.push(inv_std[j] / n * (n * dxh - s1 - hrow[j] * s2));
                            }
                        }
                        out
                    } else {
                        g.chunks_exact(c)
                            .flat_map(|grow| (0..c).map(move |j| grow[j] * gv[j] * inv_std[j]))
                            .collect()
                    };
                    acc(*input, dx);
                }
                if self.wants(*gamma) {
                    acc(*gamma, d_gamma);
                }
                if self.wants(*beta) {
                    acc(*beta, d_beta);
                }
            }
            &Op::Reshape(a) => acc(a, g.to_vec()),
            Op::Permute { input, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let (data, _) = permute_data(g, node.value.shape(), &inverse);
                acc(*input, data);
            }
            Op::Concat(parts) => {
                let total = *node.value.shape().last().expect("rank ≥ 1");
                let rows = g.len() / total;
                let mut offset = 0;
                for &p in parts {
                    let w = *self.shape(p).last().expect("rank ≥ 1");
                    if self.wants(p) {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        acc(p, d);
                    }
                    offset += w;
                }
            }
            Op::Gather { table, ids } => {
                let tv = self.value(*table);
                let e = tv.shape()[1];
                let mut d = vec![T::zero(); tv.numel()];
                for (r, &i) in ids.iter().enumerate() {
                    for (dst, &src) in d[i * e..(i + 1) * e].iter_mut().zip(&g[r * e..(r + 1) * e]) {
                        *dst += src;
                    }
                }
                acc(*table, d);
            }
        }
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, contrib: Vec<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.iter_mut().zip(&contrib).for_each(|(e, &c)| *e += c),
        slot @ None => *slot = Some(contrib),
    }
}

/// Folds a gradient of the broadcast shape back onto an operand of `n`
/// elements that was repeated along leading axes. `f` maps (grad, flat index).
fn reduce_to<T: Scalar>(g: &[T], n: usize, f: impl Fn(T, usize) -> T) -> Vec<T> {
    let mut out = vec![T::zero(); n];
    for (i, &x) in g.iter().enumerate() {
        out[i % n] += f(x, i);
    }
    out
}

/// For every flat index of `shape`, the flat index in the shape with the
/// `reduced` axes removed.
fn reduction_index(shape: &[usize], reduced: &[bool]) -> Vec<usize> {
    let numel: usize = shape.iter().product();
    let mut out_strides = vec![0; shape.len()];
    let mut stride = 1;
    for ax in (0..shape.len()).rev() {
        if !reduced[ax] {
            out_strides[ax] = stride;
            stride *= shape[ax];
        }
    }
    let mut index = vec![0usize; shape.len()];
    let mut map = Vec::with_capacity(numel);
    for _ in 0..numel {
        map.push(index.iter().zip(&out_strides).map(|(i, s)| i * s).sum());
        for ax in (0..shape.len()).rev() {
            index[ax] += 1;
            if index[ax] < shape[ax] {
                break;
            }
            index[ax] = 0;
        }
    }
    map
}

/// Permutes axes: output axis `i` is input axis `perm[i]`.
pub(crate) fn permute_data<T: Scalar>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for ax in (0..rank.saturating_sub(1)).rev() {
        in_strides[ax] = in_strides[ax + 1] * shape[ax + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut index = vec![0usize; rank];
    for _ in 0..data.len() {
        out.push(data[index.iter().zip(&strides).map(|(i, s)| i * s).sum::<usize>()]);
        for ax in (0..rank).rev() {
            index[ax] += 1;
            if index[ax] < out_shape[ax] {
                break;
            }
            index[ax] = 0;
        }
    }
    (out, out_shape)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn matmul_identity_and_annihilator() {
        let mut tape = Tape::<f64>::new();
        let b = Tensor::from_fn([3, 3], |i| (i as f64).cos());
        let i3 = tape.constant(Tensor::eye(3));
        let bv = tape.constant(b.clone());
        let c = tape.matmul(i3, bv).unwrap();
        assert_eq!(tape.value(c), &b);

        let z = tape.constant(Tensor::zeros([2, 4]));
        let any = tape.constant(Tensor::from_fn([4, 5], |i| i as f64));
        let c = tape.matmul(z, any).unwrap();
        assert_eq!(tape.value(c), &Tensor::zeros([2, 5]));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros([2, 3]));
        let b = tape.constant(Tensor::zeros([4, 5]));
        let msg = tape.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[3], &[2.0, 2.0, 2.0]));
        let y = tape.softmax(x, 0).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = tape.constant(t(&[2], &[0.0, 3f64.ln()]));
        let y = tape.softmax(x, 0).unwrap();
        assert!((tape.value(y).data()[0] - 0.25).abs() < 1e-15);
        assert!((tape.value(y).data()[1] - 0.75).abs() < 1e-15);
        let x = tape.constant(t(&[2], &[1000.0, 1001.0]));
        let y = tape.softmax(x, 0).unwrap();
        assert!(tape.value(y).is_finite());
        assert!((tape.value(y).sum() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn relu_family() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let x = tape.constant(t(&[3], &[-1.0, 3.0, 9.0]));
        let y = tape.relu6(x);
        assert_eq!(tape.value(y).data(), &[0.0, 3.0, 6.0]);
    }

    #[test]
    fn add_zeros_is_identity_and_bad_broadcast_errors() {
        let mut tape = Tape::<f64>::new();
        let x = Tensor::from_fn([2, 3], |i| i as f64 * 0.3);
        let xv = tape.constant(x.clone());
        let z = tape.constant(Tensor::zeros([3]));
        let y = tape.add(xv, z).unwrap();
        assert_eq!(tape.value(y), &x);
        let bad = tape.constant(Tensor::zeros([2]));
        assert!(matches!(tape.add(xv, bad), Err(crate::Error::Dimension(_))));
    }

    #[test]
    fn mean_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[4], &[1.0, 2.0, 3.0, 4.0]));
        let m = tape.mean(x, &[0]).unwrap();
        assert_eq!(tape.value(m).item().unwrap(), 2.5);
        let c = tape.constant(Tensor::full([2, 3, 4], 1.75));
        let m = tape.mean(c, &[0, 2]).unwrap();
        assert_eq!(tape.value(m), &Tensor::full([3], 1.75));
        assert!(matches!(tape.mean(c, &[1, 1]), Err(crate::Error::Argument(_))));
    }

    #[test]
    fn backward_examples() {
        let mut tape = Tape::<f64>::new();
        let p = tape.param(ParamId(0), &Tensor::from_fn([2, 3], |i| i as f64));
        let s = tape.sum(p);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(ParamId(0)).unwrap(), &Tensor::ones([2, 3]));

        let mut tape = Tape::<f64>::new();
        let p = tape.param(ParamId(0), &Tensor::scalar(3.0));
        let target = tape.constant(Tensor::scalar(1.0));
        let d = tape.sub(p, target).unwrap();
        let sq = tape.mul(d, d).unwrap();
        let loss = tape.mean_all(sq);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(ParamId(0)).unwrap().item().unwrap(), 4.0);
    }

    #[test]
    fn backward_rejects_non_scalar_and_zeroes_unused() {
        let mut tape = Tape::<f64>::new();
        let p = tape.param(ParamId(0), &Tensor::ones([3]));
        let unused = tape.param(ParamId(1), &Tensor::ones([2, 2]));
        let _ = unused;
        assert!(matches!(tape.backward(p), Err(crate::Error::Argument(_))));
        let s = tape.sum(p);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(ParamId(1)).unwrap(), &Tensor::zeros([2, 2]));
    }

    #[test]
    fn flatten_and_concat_layouts() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn([2, 3, 4], |i| i as f64));
        let f = tape.flatten(x).unwrap();
        assert_eq!(tape.shape(f), &[2, 12]);
        assert_eq!(tape.value(f).data(), tape.value(x).data());
        let v = tape.constant(Tensor::zeros([5]));
        assert!(tape.flatten(v).is_err());

        let a = tape.constant(Tensor::zeros([2, 2]));
        let b = tape.constant(Tensor::ones([2, 3]));
        let c = tape.concat(&[a, b]).unwrap();
        assert_eq!(tape.value(c).data(), &[0., 0., 1., 1., 1., 0., 0., 1., 1., 1.]);
        let bad = tape.constant(Tensor::ones([3, 3]));
        assert!(matches!(tape.concat(&[a, bad]), Err(crate::Error::Dimension(_))));
    }

    #[test]
    fn concat_gradient_is_ones() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param(ParamId(0), &Tensor::from_fn([2, 2], |i| i as f64));
        let b = tape.param(ParamId(1), &Tensor::from_fn([2, 3], |i| -(i as f64)));
        let c = tape.concat(&[a, b]).unwrap();
        let s = tape.sum(c);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(ParamId(0)).unwrap(), &Tensor::ones([2, 2]));
        assert_eq!(g.get(ParamId(1)).unwrap(), &Tensor::ones([2, 3]));
    }

    #[test]
    fn permute_roundtrip() {
        let x = Tensor::<f64>::from_fn([2, 3, 4], |i| i as f64);
        let (p, s) = permute_data(x.data(), x.shape(), &[2, 0, 1]);
        assert_eq!(s, vec![4, 2, 3]);
        assert_eq!(p[1], x.at(&[0, 1, 0]));
        let (back, s2) = permute_data(&p, &s, &[1, 2, 0]);
        assert_eq!(s2, vec![2, 3, 4]);
        assert_eq!(back, x.data());
    }
}
