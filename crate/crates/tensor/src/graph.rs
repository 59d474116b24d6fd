//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied during one forward pass.
//! Nodes are appended in evaluation order, so walking the tape backwards is
//! a valid reverse topological order.

use rand::Rng;

use crate::tensor::{numel, ParamId, ParamStore, Tensor};
use crate::{Scalar, TensorError};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

pub const LAYER_NORM_EPS: f64 = 1e-5;

enum Op<T: Scalar> {
    Leaf,
    MatMul { a: Var, b: Var },
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: T },
    Softmax { a: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Gelu { a: Var, deriv: Vec<T> },
    Relu { a: Var },
    Embedding { table: Var, indices: Vec<usize> },
    Concat { inputs: Vec<Var>, axis: usize },
    Narrow { a: Var, axis: usize, start: usize },
    Reshape { a: Var },
    SwapAxes12 { a: Var },
    Dropout { a: Var, mask: Vec<T> },
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<T>, probs: Vec<T> },
    Sum { a: Var },
}

struct Node<T: Scalar> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<ParamId>,
}

#[derive(Default)]
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

fn shape_err(msg: String) -> TensorError {
    TensorError::Shape(msg)
}

/// Splits `shape` around `axis` into `(outer, len, inner)`.
fn around_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
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
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = self.node(v);
        Tensor::new(&n.shape, n.value.clone()).expect("node shapes are consistent")
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Records a constant or an input; gradients are tracked when
    /// `tensor.requires_grad` is set.
    pub fn input(&mut self, tensor: Tensor<T>) -> Var {
        let requires_grad = tensor.requires_grad;
        let shape = tensor.shape().to_vec();
        self.push(shape, tensor.into_data(), Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var, TensorError> {
        Ok(self.input(Tensor::new(shape, data)?))
    }

    /// Records a leaf bound to a stored parameter.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let t = store.get(id);
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true);
        self.nodes[v.0].param = Some(id);
        v
    }

    /// `a[..., k] x b[k, n] -> [..., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(shape_err(format!("matmul {sa:?} x {sb:?}")));
        }
        let (k, n) = (sb[0], sb[1]);
        let m = numel(sa) / k;
        let mut shape = sa.to_vec();
        *shape.last_mut().expect("non-empty") = n;
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a),
            (k as isize, 1),
            self.value(b),
            (n as isize, 1),
            T::zero(),
            &mut out,
            (n as isize, 1),
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, out, Op::MatMul { a, b }, rg))
    }

    /// Batched product of `[g, m, k]` with `[g, k, n]`, or with `[g, n, k]`
    /// transposed when `trans_b`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(shape_err(format!("batch_matmul {sa:?} x {sb:?}")));
        }
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(shape_err(format!("batch_matmul {sa:?} x {sb:?} (trans_b={trans_b})")));
        }
        let mut out = vec![T::zero(); g * m * n];
        let b_strides = if trans_b { (1, k as isize) } else { (n as isize, 1) };
        for i in 0..g {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                &self.value(a)[i * m * k..],
                (k as isize, 1),
                &self.value(b)[i * k * n..],
                b_strides,
                T::zero(),
                &mut out[i * m * n..],
                (n as isize, 1),
            );
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![g, m, n], out, Op::BatchMatMul { a, b, trans_b }, rg))
    }

    /// Elementwise sum; `b` may match a trailing suffix of `a`'s shape and is
    /// then broadcast over the leading dimensions.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(shape_err(format!("add {sa:?} + {sb:?}")));
        }
        let nb = numel(sb).max(1);
        let bv = self.value(b);
        let mut out = self.value(a).to_vec();
        for chunk in out.chunks_mut(nb) {
            add_into(chunk, bv);
        }
        let shape = sa.to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, out, Op::Add { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(format!("mul {:?} * {:?}", self.shape(a), self.shape(b))));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| *x * *y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, out, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let out = self.value(a).iter().map(|x| *x * factor).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(shape, out, Op::Scale { a, factor }, rg)
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        let shape = self.shape(a).to_vec();
        let d = *shape.last().ok_or_else(|| shape_err("softmax of a scalar".into()))?;
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(d) {
            softmax_in_place(row);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(shape, out, Op::Softmax { a }, rg))
    }

    /// Normalizes the last dimension to zero mean and unit variance, then
    /// applies the learned `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| shape_err("layer_norm of a scalar".into()))?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(shape_err(format!(
                "layer_norm over {d} with gain {:?} and bias {:?}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let eps = T::from_f64_lossy(LAYER_NORM_EPS);
        let dn = T::from_usize(d).expect("dimension fits");
        let rows = numel(&shape) / d;
        let mut xhat = Vec::with_capacity(rows * d);
        let mut rstd = Vec::with_capacity(rows);
        for row in self.value(x).chunks(d) {
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / dn;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            xhat.extend(row.iter().map(|v| (*v - mean) * r));
        }
        let (g, b) = (self.value(gain), self.value(bias));
        let out = xhat
            .iter()
            .enumerate()
            .map(|(i, xh)| *xh * g[i % d] + b[i % d])
            .collect();
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(shape, out, Op::LayerNorm { x, gain, bias, xhat, rstd }, rg))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let (out, deriv) = self.value(a).iter().map(|x| gelu(*x)).unzip();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(shape, out, Op::Gelu { a, deriv }, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|x| x.max(T::zero())).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(shape, out, Op::Relu { a }, rg)
    }

    /// Gathers rows of `table: [v, d]`; the result has shape `index_shape + [d]`.
    pub fn embedding(&mut self, table: Var, indices: &[usize], index_shape: &[usize]) -> Result<Var, TensorError> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 || numel(index_shape) != indices.len() {
            return Err(shape_err(format!("embedding table {st:?} with index shape {index_shape:?}")));
        }
        let (v, d) = (st[0], st[1]);
        if let Some(bad) = indices.iter().find(|i| **i >= v) {
            return Err(TensorError::Index { index: *bad, len: v });
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(indices.len() * d);
        for i in indices {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let mut shape = index_shape.to_vec();
        shape.push(d);
        let rg = self.rg(&[table]);
        Ok(self.push(
            shape,
            out,
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = self
            .shape(*inputs.first().ok_or_else(|| shape_err("concat of nothing".into()))?)
            .to_vec();
        if axis >= first.len() {
            return Err(shape_err(format!("concat axis {axis} of {first:?}")));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            if s.len() != first.len()
                || s[..axis] != first[..axis]
                || s[axis + 1..] != first[axis + 1..]
            {
                return Err(shape_err(format!("concat {first:?} with {s:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = around_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let len = self.shape(*v)[axis] * inner;
                out.extend_from_slice(&self.value(*v)[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = self.rg(inputs);
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var, TensorError> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() || start + len > sa[axis] {
            return Err(shape_err(format!("narrow {sa:?} axis {axis} [{start}, {})", start + len)));
        }
        let (outer, full, inner) = around_axis(&sa, axis);
        let av = self.value(a);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&av[base..base + len * inner]);
        }
        let mut shape = sa;
        shape[axis] = len;
        let rg = self.rg(&[a]);
        Ok(self.push(shape, out, Op::Narrow { a, axis, start }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        if numel(shape) != numel(self.shape(a)) {
            return Err(shape_err(format!("reshape {:?} to {shape:?}", self.shape(a))));
        }
        let out = self.value(a).to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(shape.to_vec(), out, Op::Reshape { a }, rg))
    }

    /// `[a, b, c, d] -> [a, c, b, d]`.
    pub fn swap_axes_12(&mut self, a: Var) -> Result<Var, TensorError> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 {
            return Err(shape_err(format!("swap_axes_12 needs rank 4, got {s:?}")));
        }
        let out = swap12(self.value(a), &s);
        let rg = self.rg(&[a]);
        Ok(self.push(vec![s[0], s[2], s[1], s[3]], out, Op::SwapAxes12 { a }, rg))
    }

    /// Inverted dropout. Identity (the same node) when `!train` or `p == 0`.
    pub fn dropout<R: Rng>(&mut self, a: Var, p: f64, train: bool, rng: &mut R) -> Result<Var, TensorError> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::DropoutProbability(p));
        }
        if !train || p == 0.0 {
            return Ok(a);
        }
        let keep = T::from_f64_lossy(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(a).len())
            .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
            .collect();
        let out = self.value(a).iter().zip(&mask).map(|(x, m)| *x * *m).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(shape, out, Op::Dropout { a, mask }, rg))
    }

    /// `sum_i weights[i] * -log softmax(logits[i])[targets[i]]` over the rows
    /// of `logits: [n, c]`. Rows with zero weight are skipped entirely.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[T]) -> Result<Var, TensorError> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || targets.len() != s[0] || weights.len() != s[0] {
            return Err(shape_err(format!(
                "cross_entropy logits {s:?} with {} targets, {} weights",
                targets.len(),
                weights.len()
            )));
        }
        let c = s[1];
        if let Some(bad) = targets.iter().find(|t| **t >= c) {
            return Err(TensorError::Index { index: *bad, len: c });
        }
        let mut probs = self.value(logits).to_vec();
        let mut total = T::zero();
        for (i, row) in probs.chunks_mut(c).enumerate() {
            if weights[i] == T::zero() {
                row.iter_mut().for_each(|p| *p = T::zero());
                continue;
            }
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|z| (*z - max).exp()).sum::<T>().ln() + max;
            total = total + weights[i] * (lse - row[targets[i]]);
            softmax_in_place(row);
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            vec![],
            vec![total],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).iter().copied().sum();
        let rg = self.rg(&[a]);
        self.push(vec![], vec![total], Op::Sum { a }, rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::from_usize(self.value(a).len().max(1)).expect("length fits");
        let s = self.sum(a);
        self.scale(s, T::one() / n)
    }

    /// Reverse sweep from a scalar `loss`. Gradients are then readable with
    /// [`Graph::grad`] and transferable with [`Graph::accumulate_param_grads`].
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gout) = grads[i].take() else { continue };
            self.backprop_node(node, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        self.grads = grads;
        Ok(())
    }

    /// Adds the gradients of parameter leaves into `store`.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore<T>) {
        for (node, grad) in self.nodes.iter().zip(&self.grads) {
            if let (Some(id), Some(g)) = (node.param, grad) {
                store.get_mut(id).accumulate_grad(g);
            }
        }
    }

    fn backprop_node(&self, node: &Node<T>, gout: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let needs = |v: &Var| nodes[v.0].requires_grad;
        macro_rules! acc {
            ($v:expr) => {
                slot(grads, nodes[$v.0].value.len(), $v)
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let sb = &nodes[b.0].shape;
                let (k, n) = (sb[0], sb[1]);
                let m = nodes[a.0].value.len() / k;
                if needs(a) {
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        gout,
                        (n as isize, 1),
                        &nodes[b.0].value,
                        (1, n as isize),
                        T::one(),
                        acc!(*a),
                        (k as isize, 1),
                    );
                }
                if needs(b) {
                    T::gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        &nodes[a.0].value,
                        (1, k as isize),
                        gout,
                        (n as isize, 1),
                        T::one(),
                        acc!(*b),
                        (n as isize, 1),
                    );
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let sa = &nodes[a.0].shape;
                let (g, m, k) = (sa[0], sa[1], sa[2]);
                let n = node.shape[2];
                if needs(a) {
                    let b_t_strides = if *trans_b { (k as isize, 1) } else { (1, n as isize) };
                    let da = acc!(*a);
                    for i in 0..g {
                        T::gemm(
                            m,
                            n,
                            k,
                            T::one(),
                            &gout[i * m * n..],
                            (n as isize, 1),
                            &nodes[b.0].value[i * k * n..],
                            b_t_strides,
                            T::one(),
                            &mut da[i * m * k..],
                            (k as isize, 1),
                        );
                    }
                }
                if needs(b) {
                    let db = acc!(*b);
                    for i in 0..g {
                        if *trans_b {
                            // db[n, k] = gout^T[n, m] * a[m, k]
                            T::gemm(
                                n,
                                m,
                                k,
                                T::one(),
                                &gout[i * m * n..],
                                (1, n as isize),
                                &nodes[a.0].value[i * m * k..],
                                (k as isize, 1),
                                T::one(),
                                &mut db[i * k * n..],
                                (k as isize, 1),
                            );
                        } else {
                            // db[k, n] = a^T[k, m] * gout[m, n]
                            T::gemm(
                                k,
                                m,
                                n,
                                T::one(),
                                &nodes[a.0].value[i * m * k..],
                                (1, k as isize),
                                &gout[i * m * n..],
                                (n as isize, 1),
                                T::one(),
                                &mut db[i * k * n..],
                                (n as isize, 1),
                            );
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                if needs(a) {
                    add_into(acc!(*a), gout);
                }
                if needs(b) {
                    let db = acc!(*b);
                    let nb = db.len().max(1);
                    for chunk in gout.chunks(nb) {
                        add_into(db, chunk);
                    }
                }
            }
            Op::Mul { a, b } => {
                if needs(a) {
                    let other = &nodes[b.0].value;
                    for ((d, g), o) in acc!(*a).iter_mut().zip(gout).zip(other) {
                        *d = *d + *g * *o;
                    }
                }
                if needs(b) {
                    let other = &nodes[a.0].value;
                    for ((d, g), o) in acc!(*b).iter_mut().zip(gout).zip(other) {
                        *d = *d + *g * *o;
                    }
                }
            }
            Op::Scale { a, factor } => {
                for (d, g) in acc!(*a).iter_mut().zip(gout) {
                    *d = *d + *g * *factor;
                }
            }
            Op::Softmax { a } => {
                let d = *node.shape.last().expect("rank >= 1");
                let da = acc!(*a);
                for ((y, g), dx) in node.value.chunks(d).zip(gout.chunks(d)).zip(da.chunks_mut(d)) {
                    let dot: T = y.iter().zip(g).map(|(y, g)| *y * *g).sum();
                    for ((dx, y), g) in dx.iter_mut().zip(y).zip(g) {
                        *dx = *dx + *y * (*g - dot);
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let d = *node.shape.last().expect("rank >= 1");
                let dn = T::from_usize(d).expect("dimension fits");
                let gv = &nodes[gain.0].value;
                if needs(x) {
                    let dx = acc!(*x);
                    for (r, ((xh, g), dxr)) in xhat.chunks(d).zip(gout.chunks(d)).zip(dx.chunks_mut(d)).enumerate() {
                        let dxhat: Vec<T> = g.iter().zip(gv).map(|(g, w)| *g * *w).collect();
                        let mean_d = dxhat.iter().copied().sum::<T>() / dn;
                        let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| *a * *b).sum::<T>() / dn;
                        for ((out, dh), xh) in dxr.iter_mut().zip(&dxhat).zip(xh) {
                            *out = *out + rstd[r] * (*dh - mean_d - *xh * mean_dx);
                        }
                    }
                }
                if needs(gain) {
                    let dg = acc!(*gain);
                    for (xh, g) in xhat.chunks(d).zip(gout.chunks(d)) {
                        for ((dg, xh), g) in dg.iter_mut().zip(xh).zip(g) {
                            *dg = *dg + *xh * *g;
                        }
                    }
                }
                if needs(bias) {
                    let db = acc!(*bias);
                    for g in gout.chunks(d) {
                        add_into(db, g);
                    }
                }
            }
            Op::Gelu { a, deriv } => {
                for ((d, g), dy) in acc!(*a).iter_mut().zip(gout).zip(deriv) {
                    *d = *d + *g * *dy;
                }
            }
            Op::Relu { a } => {
                let av = &nodes[a.0].value;
                for ((d, g), x) in acc!(*a).iter_mut().zip(gout).zip(av) {
                    if *x > T::zero() {
                        *d = *d + *g;
                    }
                }
            }
            Op::Embedding { table, indices } => {
                let d = nodes[table.0].shape[1];
                let dt = acc!(*table);
                for (row, i) in gout.chunks(d).zip(indices) {
                    add_into(&mut dt[i * d..(i + 1) * d], row);
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = around_axis(&node.shape, *axis);
                let mut offset = 0;
                for v in inputs {
                    let len = nodes[v.0].shape[*axis];
                    if needs(v) {
                        let dv = acc!(*v);
                        for o in 0..outer {
                            let src = &gout[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            add_into(&mut dv[o * len * inner..(o + 1) * len * inner], src);
                        }
                    }
                    offset += len;
                }
            }
            Op::Narrow { a, axis, start } => {
                let (outer, full, inner) = around_axis(&nodes[a.0].shape, *axis);
                let len = node.shape[*axis];
                let da = acc!(*a);
                for o in 0..outer {
                    let base = (o * full + start) * inner;
                    add_into(&mut da[base..base + len * inner], &gout[o * len * inner..(o + 1) * len * inner]);
                }
            }
            Op::Reshape { a } => add_into(acc!(*a), gout),
            Op::SwapAxes12 { a } => {
                let back = swap12(gout, &node.shape);
                add_into(acc!(*a), &back);
            }
            Op::Dropout { a, mask } => {
                for ((d, g), m) in acc!(*a).iter_mut().zip(gout).zip(mask) {
                    *d = *d + *g * *m;
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let c = nodes[logits.0].shape[1];
                let dl = acc!(*logits);
                for (i, (p, d)) in probs.chunks(c).zip(dl.chunks_mut(c)).enumerate() {
                    if weights[i] == T::zero() {
                        continue;
                    }
                    let w = weights[i] * gout[0];
                    for (j, (d, p)) in d.iter_mut().zip(p).enumerate() {
                        let onehot = if j == targets[i] { T::one() } else { T::zero() };
                        *d = *d + w * (*p - onehot);
                    }
                }
            }
            Op::Sum { a } => {
                for d in acc!(*a).iter_mut() {
                    *d = *d + gout[0];
                }
            }
        }
    }
}

fn slot<T: Scalar>(grads: &mut [Option<Vec<T>>], len: usize, v: Var) -> &mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *d + *s;
    }
}

fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total = total + *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

/// Value and derivative of the tanh-approximated GELU.
fn gelu<T: Scalar>(x: T) -> (T, T) {
    let c = T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
    let k = T::from_f64_lossy(0.044715);
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let value = half * x * (T::one() + t);
    let deriv = half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * k * x * x);
    (value, deriv)
}

/// Permutes `[a, b, c, d]` data to `[a, c, b, d]` order.
fn swap12<T: Scalar>(src: &[T], s: &[usize]) -> Vec<T> {
    let (n0, n1, n2, n3) = (s[0], s[1], s[2], s[3]);
    let mut out = vec![T::zero(); src.len()];
    for i0 in 0..n0 {
        for i1 in 0..n1 {
            for i2 in 0..n2 {
                let from = ((i0 * n1 + i1) * n2 + i2) * n3;
                let to = ((i0 * n2 + i2) * n1 + i1) * n3;
                out[to..to + n3].copy_from_slice(&src[from..from + n3]);
            }
        }
    }
    out
}
