//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as a node in creation order, so the
//! node list is already topologically sorted. [`Graph::backward`] walks it in
//! reverse. Leaf gradients accumulate across calls until [`Graph::zero_grad`]
//! or, for bound parameters, [`crate::params::ParamStore::zero_grad`].
//!
//! Fused model kernels (scans, convolutions, windowed attention) plug in
//! through [`CustomOp`], which supplies a hand-written vector-Jacobian product.

pub mod kernels;

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{numel, Scalar, Tensor};

use kernels::{gemm_nn, gemm_nt, gemm_tn, guarded_exp, sigmoid, softplus};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Exp,
    Sigmoid,
    Silu,
    Softplus,
    Neg,
}

impl Unary {
    fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Unary::Exp => guarded_exp(x),
            Unary::Sigmoid => sigmoid(x),
            Unary::Silu => kernels::silu(x),
            Unary::Softplus => softplus(x),
            Unary::Neg => -x,
        }
    }

    /// Derivative given input `x` and output `y`.
    fn derivative<T: Scalar>(self, x: T, y: T) -> T {
        match self {
            Unary::Exp => y,
            Unary::Sigmoid => y * (T::one() - y),
            Unary::Silu => {
                let s = sigmoid(x);
                s + x * s * (T::one() - s)
            }
            Unary::Softplus => sigmoid(x),
            Unary::Neg => -T::one(),
        }
    }
}

/// Vector-Jacobian product for an operation whose forward pass was computed
/// outside the graph.
pub trait CustomOp<T: Scalar> {
    fn name(&self) -> &'static str;

    /// Gradients for each input, given the upstream gradient of the output.
    /// Entries for inputs with `needs[i] == false` may be `None`.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_out: &[T],
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>>;
}

enum Op<T: Scalar> {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Transpose { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, s: T },
    AddBias { x: Var, bias: Var },
    MulBias { x: Var, scale: Var },
    Unary { x: Var, f: Unary },
    Softmax { x: Var, axis: usize },
    RmsNorm { x: Var, gamma: Var, inv_rms: Vec<T> },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        log_z: Vec<T>,
        denom: T,
    },
    Sum { x: Var },
    Mean { x: Var },
    GatherRows { table: Var, ids: Vec<usize> },
    SliceLast { x: Var, start: usize },
    Reshape { x: Var },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp<T>> },
}

impl<T: Scalar> Op<T> {
    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. }
            | Op::Add { a, b }
            | Op::Sub { a, b }
            | Op::Mul { a, b } => vec![*a, *b],
            Op::AddBias { x, bias } => vec![*x, *bias],
            Op::MulBias { x, scale } => vec![*x, *scale],
            Op::RmsNorm { x, gamma, .. } => vec![*x, *gamma],
            Op::Transpose { x }
            | Op::Scale { x, .. }
            | Op::Unary { x, .. }
            | Op::Softmax { x, .. }
            | Op::Sum { x }
            | Op::Mean { x }
            | Op::SliceLast { x, .. }
            | Op::Reshape { x } => vec![*x],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::GatherRows { table, .. } => vec![*table],
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    /// Persistent accumulator, leaves only.
    grad: Option<Vec<T>>,
}

/// Operation tape. Ops validate shapes eagerly and return `Error::Shape` on mismatch.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    bound: HashMap<ParamId, Var>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn split_batch(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::shape(format!(
            "matmul operand needs rank >= 2, got {shape:?}"
        )));
    }
    let r = shape.len();
    Ok((numel(&shape[..r - 2]), shape[r - 2], shape[r - 1]))
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            bound: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = op
            .parents()
            .iter()
            .any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Binds a stored parameter as a leaf (once per graph). Tracks gradients
    /// only when the parameter is trainable.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.leaf(p.value.clone(), p.trainable);
        self.bound.insert(id, v);
        v
    }

    pub fn param_named(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        let id = store.expect_id(name)?;
        Ok(self.param(store, id))
    }

    /// Adds the gradients of every bound trainable parameter into the store.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore<T>) {
        for (&id, &v) in &self.bound {
            let p = store.get_mut(id);
            if !p.trainable {
                continue;
            }
            if let Some(g) = &self.nodes[v.0].grad {
                for (dst, &src) in p.grad.data_mut().iter_mut().zip(g) {
                    *dst += src;
                }
            }
        }
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ---- linear algebra ----

    /// `a[..., m, k] · b[k, n]` or batched `a[B..., m, k] · b[B..., k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` where `b` is `[n, k]` (or batched `[B..., n, k]`).
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let ash = self.shape(a).to_vec();
        let bsh = self.shape(b).to_vec();
        let (batch, m, k) = split_batch(&ash)?;
        let (bb, r0, r1) = split_batch(&bsh)?;
        let (kb, n) = if trans_b { (r1, r0) } else { (r0, r1) };
        if kb != k {
            return Err(Error::shape(format!(
                "matmul inner dims disagree: {ash:?} x {bsh:?}{}",
                if trans_b { "ᵀ" } else { "" }
            )));
        }
        let shared = bsh.len() == 2;
        if !shared && bsh[..bsh.len() - 2] != ash[..ash.len() - 2] {
            return Err(Error::shape(format!(
                "matmul batch dims disagree: {ash:?} x {bsh:?}"
            )));
        }
        debug_assert!(shared || bb == batch);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![T::zero(); batch * m * n];
        for bi in 0..batch {
            let a_s = &av[bi * m * k..(bi + 1) * m * k];
            let b_s = if shared {
                bv
            } else {
                &bv[bi * k * n..(bi + 1) * k * n]
            };
            let o = &mut out[bi * m * n..(bi + 1) * m * n];
            if trans_b {
                gemm_nt(a_s, b_s, o, m, k, n);
            } else {
                gemm_nn(a_s, b_s, o, m, k, n);
            }
        }
        let mut shape = ash[..ash.len() - 2].to_vec();
        shape.extend([m, n]);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::MatMul { a, b, trans_b }))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let sh = self.shape(x).to_vec();
        let (batch, m, n) = split_batch(&sh)?;
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        for bi in 0..batch {
            let base = bi * m * n;
            for i in 0..m {
                for j in 0..n {
                    out[base + j * m + i] = xv[base + i * n + j];
                }
            }
        }
        let mut shape = sh.clone();
        let r = shape.len();
        shape.swap(r - 1, r - 2);
        Ok(self.push(Tensor::new(shape, out)?, Op::Transpose { x }))
    }

    // ---- elementwise ----

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let av = self.value(a);
        let bv = self.value(b);
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(v, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(v, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(v, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| v * s).collect();
        let value = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Scale { x, s })
    }

    fn last_dim_vector(&self, x: Var, v: Var, what: &str) -> Result<usize> {
        let d = *self
            .shape(x)
            .last()
            .ok_or_else(|| Error::shape(format!("{what} on a scalar")))?;
        if self.shape(v) != [d] {
            return Err(Error::shape(format!(
                "{what}: vector {:?} does not match last dim of {:?}",
                self.shape(v),
                self.shape(x)
            )));
        }
        Ok(d)
    }

    /// `x[..., d] + bias[d]`
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = self.last_dim_vector(x, bias, "add_bias")?;
        let xv = self.value(x);
        let bv = self.value(bias).data();
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(d.max(1)) {
            for (o, &b) in row.iter_mut().zip(bv) {
                *o += b;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(value, Op::AddBias { x, bias }))
    }

    /// `x[..., d] ⊙ scale[d]`
    pub fn mul_bias(&mut self, x: Var, scale: Var) -> Result<Var> {
        let d = self.last_dim_vector(x, scale, "mul_bias")?;
        let xv = self.value(x);
        let sv = self.value(scale).data();
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(d.max(1)) {
            for (o, &s) in row.iter_mut().zip(sv) {
                *o *= s;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(value, Op::MulBias { x, scale }))
    }

    pub fn unary(&mut self, x: Var, f: Unary) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| f.apply(v)).collect();
        let value = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Unary { x, f })
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Silu)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Softplus)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Neg)
    }

    /// Inverted dropout: zeroes each element with probability `p` and rescales the rest.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut impl Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(format!("dropout probability {p} not in [0, 1)")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - p));
        let shape = self.shape(x).to_vec();
        let mask: Vec<T> = (0..numel(&shape))
            .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
            .collect();
        let m = self.constant(Tensor::new(shape, mask)?);
        self.mul(x, m)
    }

    // ---- normalisation and losses ----

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(format!(
                "softmax axis {axis} out of range for {shape:?}"
            )));
        }
        let (pre, len, post) = (
            numel(&shape[..axis]),
            shape[axis],
            numel(&shape[axis + 1..]),
        );
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        for p in 0..pre {
            for q in 0..post {
                let idx = |i: usize| (p * len + i) * post + q;
                let mut mx = T::neg_infinity();
                for i in 0..len {
                    mx = mx.max(xv[idx(i)]);
                }
                let mut z = T::zero();
                for i in 0..len {
                    let e = (xv[idx(i)] - mx).exp();
                    out[idx(i)] = e;
                    z += e;
                }
                for i in 0..len {
                    out[idx(i)] /= z;
                }
            }
        }
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { x, axis }))
    }

    /// `gamma ⊙ x / sqrt(mean(x²) + eps)` over the last axis.
    pub fn rmsnorm(&mut self, x: Var, gamma: Var, eps: f64) -> Result<Var> {
        let d = self.last_dim_vector(x, gamma, "rmsnorm")?;
        let eps = T::of(eps);
        let xv = self.value(x);
        let gv = self.value(gamma).data();
        let mut out = vec![T::zero(); xv.len()];
        let rows = if d == 0 { 0 } else { xv.len() / d };
        let mut inv_rms = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let ms = row.iter().map(|&v| v * v).sum::<T>() / T::of(d as f64);
            let inv = T::one() / (ms + eps).sqrt();
            inv_rms.push(inv);
            for j in 0..d {
                out[r * d + j] = gv[j] * row[j] * inv;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(value, Op::RmsNorm { x, gamma, inv_rms }))
    }

    /// Mean negative log-likelihood over positions whose target is not `ignore_index`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[i64], ignore_index: i64) -> Result<Var> {
        self.cross_entropy_impl(logits, targets, ignore_index, None)
    }

    /// Summed negative log-likelihood divided by a caller-supplied `denominator`
    /// (used to normalise micro-batches by the token count of a whole accumulation group).
    pub fn cross_entropy_over(
        &mut self,
        logits: Var,
        targets: &[i64],
        ignore_index: i64,
        denominator: f64,
    ) -> Result<Var> {
        if !(denominator > 0.0) {
            return Err(Error::invalid("cross-entropy denominator must be positive"));
        }
        self.cross_entropy_impl(logits, targets, ignore_index, Some(denominator))
    }

    fn cross_entropy_impl(
        &mut self,
        logits: Var,
        targets: &[i64],
        ignore_index: i64,
        denominator: Option<f64>,
    ) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let v = *shape
            .last()
            .ok_or_else(|| Error::shape("cross_entropy on a scalar"))?;
        let rows = if v == 0 { 0 } else { numel(&shape) / v };
        if targets.len() != rows {
            return Err(Error::shape(format!(
                "{} targets for {rows} logit rows",
                targets.len()
            )));
        }
        let mut parsed = Vec::with_capacity(rows);
        for &t in targets {
            if t == ignore_index {
                parsed.push(None);
            } else if t < 0 || t as usize >= v {
                return Err(Error::invalid(format!("target {t} outside [0, {v})")));
            } else {
                parsed.push(Some(t as usize));
            }
        }
        let count = parsed.iter().filter(|t| t.is_some()).count();
        if count == 0 && denominator.is_none() {
            return Err(Error::invalid(
                "every target equals ignore_index; mean loss is undefined",
            ));
        }
        let denom = T::of(denominator.unwrap_or(count as f64));
        let lv = self.value(logits).data();
        let mut log_z = Vec::with_capacity(rows);
        let mut total = T::zero();
        for (r, t) in parsed.iter().enumerate() {
            let row = &lv[r * v..(r + 1) * v];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z = row.iter().map(|&x| (x - mx).exp()).sum::<T>().ln() + mx;
            log_z.push(z);
            if let Some(t) = t {
                total += z - row[*t];
            }
        }
        let value = Tensor::scalar(total / denom);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: parsed,
                log_z,
                denom,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.data().iter().copied().sum::<T>() / T::of(xv.len().max(1) as f64);
        self.push(Tensor::scalar(s), Op::Mean { x })
    }

    // ---- indexing ----

    /// Rows of a `[V, d]` table selected by `ids`, giving `[ids.len(), d]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let sh = self.shape(table).to_vec();
        if sh.len() != 2 {
            return Err(Error::shape(format!("gather_rows needs a 2-D table, got {sh:?}")));
        }
        let (v, d) = (sh[0], sh[1]);
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::invalid(format!("row id {id} out of range for {v} rows")));
            }
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        Ok(self.push(
            value,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// `x[..., start..start + len]`
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let sh = self.shape(x).to_vec();
        let d = *sh.last().ok_or_else(|| Error::shape("slice_last on a scalar"))?;
        if start + len > d {
            return Err(Error::shape(format!(
                "slice {start}..{} exceeds last dim {d}",
                start + len
            )));
        }
        let xv = self.value(x).data();
        let rows = if d == 0 { 0 } else { xv.len() / d };
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&xv[r * d + start..r * d + start + len]);
        }
        let mut shape = sh.clone();
        *shape.last_mut().expect("rank >= 1") = len;
        Ok(self.push(Tensor::new(shape, out)?, Op::SliceLast { x, start }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape { x }))
    }

    pub fn custom(&mut self, inputs: &[Var], output: Tensor<T>, op: Box<dyn CustomOp<T>>) -> Var {
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
        )
    }

    // ---- backward ----

    /// Reverse pass from a single-element `loss`, accumulating into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    None => node.grad = Some(g),
                }
                continue;
            }
            for (parent, pg) in self.vjp(i, &g) {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn vjp(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let ash = self.shape(*a);
                let bsh = self.shape(*b);
                let (batch, m, k) = split_batch(ash).expect("validated");
                let n = if *trans_b { bsh[bsh.len() - 2] } else { bsh[bsh.len() - 1] };
                let shared = bsh.len() == 2;
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.needs(*a) {
                    let mut ga = vec![T::zero(); av.len()];
                    for bi in 0..batch {
                        let gs = &g[bi * m * n..(bi + 1) * m * n];
                        let b_s = if shared { bv } else { &bv[bi * k * n..(bi + 1) * k * n] };
                        let o = &mut ga[bi * m * k..(bi + 1) * m * k];
                        if *trans_b {
                            gemm_nn(gs, b_s, o, m, n, k);
                        } else {
                            gemm_nt(gs, b_s, o, m, n, k);
                        }
                    }
                    out.push((*a, ga));
                }
                if self.needs(*b) {
                    let mut gb = vec![T::zero(); bv.len()];
                    for bi in 0..batch {
                        let gs = &g[bi * m * n..(bi + 1) * m * n];
                        let a_s = &av[bi * m * k..(bi + 1) * m * k];
                        let o = if shared {
                            &mut gb[..]
                        } else {
                            &mut gb[bi * k * n..(bi + 1) * k * n]
                        };
                        if *trans_b {
                            gemm_tn(gs, a_s, o, m, n, k);
                        } else {
                            gemm_tn(a_s, gs, o, m, k, n);
                        }
                    }
                    out.push((*b, gb));
                }
            }
            Op::Transpose { x } => {
                let sh = self.shape(*x);
                let (batch, m, n) = split_batch(sh).expect("validated");
                let mut gx = vec![T::zero(); g.len()];
                for bi in 0..batch {
                    let base = bi * m * n;
                    for i in 0..m {
                        for j in 0..n {
                            gx[base + i * n + j] = g[base + j * m + i];
                        }
                    }
                }
                out.push((*x, gx));
            }
            Op::Add { a, b } => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.to_vec()));
            }
            Op::Sub { a, b } => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.iter().map(|&v| -v).collect()));
            }
            Op::Mul { a, b } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.needs(*a) {
                    out.push((*a, g.iter().zip(bv).map(|(&gi, &bi)| gi * bi).collect()));
                }
                if self.needs(*b) {
                    out.push((*b, g.iter().zip(av).map(|(&gi, &ai)| gi * ai).collect()));
                }
            }
            Op::Scale { x, s } => out.push((*x, g.iter().map(|&v| v * *s).collect())),
            Op::AddBias { x, bias } => {
                let d = self.value(*bias).len();
                out.push((*x, g.to_vec()));
                if self.needs(*bias) {
                    let mut gb = vec![T::zero(); d];
                    for row in g.chunks(d.max(1)) {
                        gb.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
                    }
                    out.push((*bias, gb));
                }
            }
            Op::MulBias { x, scale } => {
                let sv = self.value(*scale).data();
                let xv = self.value(*x).data();
                let d = sv.len();
                if self.needs(*x) {
                    let mut gx = g.to_vec();
                    for row in gx.chunks_mut(d.max(1)) {
                        row.iter_mut().zip(sv).for_each(|(a, &s)| *a *= s);
                    }
                    out.push((*x, gx));
                }
                if self.needs(*scale) {
                    let mut gs = vec![T::zero(); d];
                    for (grow, xrow) in g.chunks(d.max(1)).zip(xv.chunks(d.max(1))) {
                        for j in 0..d {
                            gs[j] += grow[j] * xrow[j];
                        }
                    }
                    out.push((*scale, gs));
                }
            }
            Op::Unary { x, f } => {
                let xv = self.value(*x).data();
                let yv = node.value.data();
                let gx = g
                    .iter()
                    .zip(xv.iter().zip(yv))
                    .map(|(&gi, (&xi, &yi))| gi * f.derivative(xi, yi))
                    .collect();
                out.push((*x, gx));
            }
            Op::Softmax { x, axis } => {
                let shape = node.value.shape();
                let (pre, len, post) = (
                    numel(&shape[..*axis]),
                    shape[*axis],
                    numel(&shape[*axis + 1..]),
                );
                let y = node.value.data();
                let mut gx = vec![T::zero(); y.len()];
                for p in 0..pre {
                    for q in 0..post {
                        let idx = |i: usize| (p * len + i) * post + q;
                        let dotp: T = (0..len).map(|i| g[idx(i)] * y[idx(i)]).sum();
                        for i in 0..len {
                            gx[idx(i)] = y[idx(i)] * (g[idx(i)] - dotp);
                        }
                    }
                }
                out.push((*x, gx));
            }
            Op::RmsNorm { x, gamma, inv_rms } => {
                let xv = self.value(*x).data();
                let gv = self.value(*gamma).data();
                let d = gv.len();
                let nd = T::of(d as f64);
                if self.needs(*x) {
                    let mut gx = vec![T::zero(); xv.len()];
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        let row = &xv[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let s: T = (0..d).map(|j| gr[j] * gv[j] * row[j]).sum();
                        let c = s * inv * inv * inv / nd;
                        for j in 0..d {
                            gx[r * d + j] = gr[j] * gv[j] * inv - row[j] * c;
                        }
                    }
                    out.push((*x, gx));
                }
                if self.needs(*gamma) {
                    let mut gg = vec![T::zero(); d];
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xv[r * d + j] * inv;
                        }
                    }
                    out.push((*gamma, gg));
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                log_z,
                denom,
            } => {
                let lv = self.value(*logits).data();
                let v = lv.len() / targets.len().max(1);
                let scale = g[0] / *denom;
                let mut gl = vec![T::zero(); lv.len()];
                for (r, t) in targets.iter().enumerate() {
                    let Some(t) = t else { continue };
                    for j in 0..v {
                        gl[r * v + j] = (lv[r * v + j] - log_z[r]).exp() * scale;
                    }
                    gl[r * v + t] -= scale;
                }
                out.push((*logits, gl));
            }
            Op::Sum { x } => out.push((*x, vec![g[0]; self.value(*x).len()])),
            Op::Mean { x } => {
                let n = self.value(*x).len();
                out.push((*x, vec![g[0] / T::of(n.max(1) as f64); n]));
            }
            Op::GatherRows { table, ids } => {
                let sh = self.shape(*table);
                let d = sh[1];
                let mut gt = vec![T::zero(); sh[0] * d];
                for (r, &id) in ids.iter().enumerate() {
                    gt[id * d..(id + 1) * d]
                        .iter_mut()
                        .zip(&g[r * d..(r + 1) * d])
                        .for_each(|(a, &b)| *a += b);
                }
                out.push((*table, gt));
            }
            Op::SliceLast { x, start } => {
                let d = *self.shape(*x).last().expect("rank >= 1");
                let len = *node.value.shape().last().expect("rank >= 1");
                let mut gx = vec![T::zero(); self.value(*x).len()];
                if len > 0 {
                    for (r, row) in g.chunks(len).enumerate() {
                        gx[r * d + start..r * d + start + len].copy_from_slice(row);
                    }
                }
                out.push((*x, gx));
            }
            Op::Reshape { x } => out.push((*x, g.to_vec())),
            Op::Custom { inputs, op } => {
                let vals: Vec<&Tensor<T>> = inputs.iter().map(|v| self.value(*v)).collect();
                let needs: Vec<bool> = inputs.iter().map(|v| self.needs(*v)).collect();
                let grads = op.backward(&vals, &node.value, g, &needs);
                for ((v, need), gi) in inputs.iter().zip(needs).zip(grads) {
                    if need {
                        if let Some(gi) = gi {
                            out.push((*v, gi));
                        }
                    }
                }
            }
        }
        out
    }
}
