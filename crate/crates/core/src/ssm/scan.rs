//! Selective scan: the input-dependent diagonal linear recurrence
//!
//! ```text
//! h_t = exp(Δ_t·A) ⊙ h_{t−1} + ((exp(Δ_t·A) − 1)/A) ⊙ B_t · u_t
//! y_t = ⟨C_t, h_t⟩ + D·u_t
//! ```
//!
//! per channel, with `h_{−1} = 0`. Two forward kernels exist: a plain
//! sequential loop and a work-efficient (Blelloch) associative scan over
//! `(multiplier, offset)` pairs. Both share one backward pass.

use rayon::prelude::*;

use crate::autodiff::{CustomOp, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

use super::discretize::{zoh, zoh_df_da};

/// Which forward kernel a scan uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanKernel {
    #[default]
    Sequential,
    Parallel,
}

/// Affine map `h ↦ mul·h + add`; composition is the scan's combine operator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine<T> {
    pub mul: T,
    pub add: T,
}

impl<T: Scalar> Affine<T> {
    pub fn identity() -> Self {
        Affine {
            mul: T::one(),
            add: T::zero(),
        }
    }
}

/// Applies `first` then `second`: `(a₁,b₁)∘(a₂,b₂) = (a₂a₁, a₂b₁ + b₂)`.
#[inline]
pub fn combine<T: Scalar>(first: Affine<T>, second: Affine<T>) -> Affine<T> {
    Affine {
        mul: second.mul * first.mul,
        add: second.mul * first.add + second.add,
    }
}

/// In-place inclusive scan using Blelloch's up-sweep/down-sweep over a
/// power-of-two padded buffer. `O(n)` combines, `O(log n)` depth.
pub fn blelloch_inclusive<T: Scalar>(items: &mut [Affine<T>]) {
    let len = items.len();
    if len <= 1 {
        return;
    }
    let n = len.next_power_of_two();
    let mut buf: Vec<Affine<T>> = Vec::with_capacity(n);
    buf.extend_from_slice(items);
    buf.resize(n, Affine::identity());

    let mut stride = 2;
    while stride <= n {
        let half = stride / 2;
        for i in (0..n).step_by(stride) {
            buf[i + stride - 1] = combine(buf[i + half - 1], buf[i + stride - 1]);
        }
        stride *= 2;
    }
    buf[n - 1] = Affine::identity();
    let mut stride = n;
    while stride >= 2 {
        let half = stride / 2;
        for i in (0..n).step_by(stride) {
            let left = buf[i + half - 1];
            buf[i + half - 1] = buf[i + stride - 1];
            buf[i + stride - 1] = combine(buf[i + stride - 1], left);
        }
        stride /= 2;
    }
    // exclusive prefix ∘ element = inclusive prefix
    for (item, prefix) in items.iter_mut().zip(&buf) {
        *item = combine(*prefix, *item);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ScanDims {
    pub batch: usize,
    pub time: usize,
    pub channels: usize,
    pub state: usize,
}

/// Inputs of one selective scan. Time-major layouts: `u`, `delta`: `[T, C]`
/// (or `[B, T, C]`); `b`, `c`: `[T, N]` (or `[B, T, N]`); `a`: `[C, N]`; `d`: `[C]`.
#[derive(Debug, Clone, Copy)]
pub struct ScanInputs<'a, T> {
    pub u: &'a Tensor<T>,
    pub delta: &'a Tensor<T>,
    pub b: &'a Tensor<T>,
    pub c: &'a Tensor<T>,
    pub a: &'a Tensor<T>,
    pub d: &'a Tensor<T>,
}

fn leading(shape: &[usize], what: &str) -> Result<(usize, usize, usize)> {
    match shape {
        [t, x] => Ok((1, *t, *x)),
        [b, t, x] => Ok((*b, *t, *x)),
        other => Err(Error::shape(format!(
            "{what} must be [T, _] or [B, T, _], got {other:?}"
        ))),
    }
}

pub(crate) fn scan_dims(
    u: &[usize],
    delta: &[usize],
    b: &[usize],
    c: &[usize],
    a: &[usize],
    d: &[usize],
) -> Result<ScanDims> {
    let (batch, time, channels) = leading(u, "u")?;
    if delta != u {
        return Err(Error::shape(format!("delta {delta:?} must match u {u:?}")));
    }
    let (bb, bt, state) = leading(b, "B_t")?;
    if bb != batch || bt != time || b.len() != u.len() {
        return Err(Error::shape(format!("B_t {b:?} disagrees with u {u:?}")));
    }
    if c != b {
        return Err(Error::shape(format!("C_t {c:?} must match B_t {b:?}")));
    }
    if a != [channels, state] {
        return Err(Error::shape(format!(
            "A must be [{channels}, {state}], got {a:?}"
        )));
    }
    if d != [channels] {
        return Err(Error::shape(format!("D must be [{channels}], got {d:?}")));
    }
    if state == 0 {
        return Err(Error::shape("state size N must be at least 1"));
    }
    Ok(ScanDims {
        batch,
        time,
        channels,
        state,
    })
}

impl<T: Scalar> ScanInputs<'_, T> {
    pub(crate) fn dims(&self) -> Result<ScanDims> {
        scan_dims(
            self.u.shape(),
            self.delta.shape(),
            self.b.shape(),
            self.c.shape(),
            self.a.shape(),
            self.d.shape(),
        )
    }
}

/// Raw slices for one batch item.
pub(crate) struct Lane<'a, T> {
    pub u: &'a [T],
    pub b: &'a [T],
    pub c: &'a [T],
    pub abar: &'a [T],
    pub f: &'a [T],
}

/// Discretised system for every `(b, t, c, k)`, laid out like the state history.
pub(crate) struct Discrete<T> {
    pub abar: Vec<T>,
    pub f: Vec<T>,
    pub em1: Vec<T>,
}

fn discretize_all<T: Scalar>(dims: ScanDims, delta: &[T], a: &[T]) -> Discrete<T> {
    let n = dims.state;
    let len = delta.len() * n;
    let mut out = Discrete {
        abar: vec![T::zero(); len],
        f: vec![T::zero(); len],
        em1: vec![T::zero(); len],
    };
    out.abar
        .par_chunks_mut(n)
        .zip(out.f.par_chunks_mut(n))
        .zip(out.em1.par_chunks_mut(n))
        .enumerate()
        .for_each(|(idx, ((ab, f), em1))| {
            let dt = delta[idx];
            let row = &a[(idx % dims.channels) * n..][..n];
            for k in 0..n {
                (ab[k], f[k], em1[k]) = zoh(dt, row[k]);
            }
        });
    out
}

/// Sequential forward for one batch item; writes `y` (`[T, C]`) and all states (`[T, C, N]`).
pub(crate) fn forward_sequential<T: Scalar>(
    lane: &Lane<'_, T>,
    d: &[T],
    time: usize,
    ch: usize,
    n: usize,
    y: &mut [T],
    states: &mut [T],
) {
    let mut h = vec![T::zero(); ch * n];
    for t in 0..time {
        let bt = &lane.b[t * n..(t + 1) * n];
        let ct = &lane.c[t * n..(t + 1) * n];
        for cc in 0..ch {
            let ut = lane.u[t * ch + cc];
            let at = (t * ch + cc) * n;
            let hrow = &mut h[cc * n..(cc + 1) * n];
            let mut acc = T::zero();
            for k in 0..n {
                hrow[k] = lane.abar[at + k] * hrow[k] + lane.f[at + k] * bt[k] * ut;
                acc += ct[k] * hrow[k];
            }
            y[t * ch + cc] = acc + d[cc] * ut;
        }
        states[t * ch * n..(t + 1) * ch * n].copy_from_slice(&h);
    }
}

/// Associative-scan forward for one batch item, parallel over channels.
pub(crate) fn forward_parallel<T: Scalar>(
    lane: &Lane<'_, T>,
    d: &[T],
    time: usize,
    ch: usize,
    n: usize,
    y: &mut [T],
    states: &mut [T],
) {
    // per channel: (y column [T], states [T, N])
    let columns: Vec<(Vec<T>, Vec<T>)> = (0..ch)
        .into_par_iter()
        .map(|cc| {
            let mut hs = vec![T::zero(); time * n];
            let mut pairs = Vec::with_capacity(time);
            for k in 0..n {
                pairs.clear();
                for t in 0..time {
                    let at = (t * ch + cc) * n + k;
                    pairs.push(Affine {
                        mul: lane.abar[at],
                        add: lane.f[at] * lane.b[t * n + k] * lane.u[t * ch + cc],
                    });
                }
                blelloch_inclusive(&mut pairs);
                for (t, p) in pairs.iter().enumerate() {
                    hs[t * n + k] = p.add;
                }
            }
            let ycol = (0..time)
                .map(|t| {
                    let mut acc = T::zero();
                    for k in 0..n {
                        acc += lane.c[t * n + k] * hs[t * n + k];
                    }
                    acc + d[cc] * lane.u[t * ch + cc]
                })
                .collect();
            (ycol, hs)
        })
        .collect();
    for (cc, (ycol, hs)) in columns.into_iter().enumerate() {
        for t in 0..time {
            y[t * ch + cc] = ycol[t];
            states[(t * ch + cc) * n..(t * ch + cc + 1) * n]
                .copy_from_slice(&hs[t * n..(t + 1) * n]);
        }
    }
}

/// Runs a batched scan, returning `y`, the full state history `[B, T, C, N]`
/// and the discretised system that produced it.
pub(crate) fn run_forward<T: Scalar>(
    dims: ScanDims,
    u: &[T],
    delta: &[T],
    b: &[T],
    c: &[T],
    a: &[T],
    d: &[T],
    kernel: ScanKernel,
) -> (Vec<T>, Vec<T>, Discrete<T>) {
    let ScanDims {
        batch,
        time,
        channels: ch,
        state: n,
    } = dims;
    let disc = discretize_all(dims, delta, a);
    let mut y = vec![T::zero(); batch * time * ch];
    let mut states = vec![T::zero(); batch * time * ch * n];
    for bi in 0..batch {
        let tc = time * ch;
        let tn = time * n;
        let lane = Lane {
            u: &u[bi * tc..(bi + 1) * tc],
            b: &b[bi * tn..(bi + 1) * tn],
            c: &c[bi * tn..(bi + 1) * tn],
            abar: &disc.abar[bi * tc * n..(bi + 1) * tc * n],
            f: &disc.f[bi * tc * n..(bi + 1) * tc * n],
        };
        let ys = &mut y[bi * tc..(bi + 1) * tc];
        let ss = &mut states[bi * tc * n..(bi + 1) * tc * n];
        match kernel {
            ScanKernel::Sequential => forward_sequential(&lane, d, time, ch, n, ys, ss),
            ScanKernel::Parallel => forward_parallel(&lane, d, time, ch, n, ys, ss),
        }
    }
    (y, states, disc)
}

/// Gradients of a selective scan, in input order `(u, delta, a, b, c, d)`.
pub(crate) struct ScanGrads<T> {
    pub u: Vec<T>,
    pub delta: Vec<T>,
    pub a: Vec<T>,
    pub b: Vec<T>,
    pub c: Vec<T>,
    pub d: Vec<T>,
}

/// Reverse-time pass over the recurrence using stored states.
pub(crate) fn run_backward<T: Scalar>(
    dims: ScanDims,
    u: &[T],
    delta: &[T],
    b: &[T],
    c: &[T],
    a: &[T],
    d: &[T],
    states: &[T],
    disc: &Discrete<T>,
    gy: &[T],
) -> ScanGrads<T> {
    let ScanDims {
        batch,
        time,
        channels: ch,
        state: n,
    } = dims;
    let mut g = ScanGrads {
        u: vec![T::zero(); u.len()],
        delta: vec![T::zero(); delta.len()],
        a: vec![T::zero(); a.len()],
        b: vec![T::zero(); b.len()],
        c: vec![T::zero(); c.len()],
        d: vec![T::zero(); d.len()],
    };
    let mut gh = vec![T::zero(); ch * n];
    for bi in 0..batch {
        gh.iter_mut().for_each(|v| *v = T::zero());
        for t in (0..time).rev() {
            let row = bi * time + t;
            for cc in 0..ch {
                let idx = row * ch + cc;
                let (ut, dt, gyt) = (u[idx], delta[idx], gy[idx]);
                g.d[cc] += gyt * ut;
                g.u[idx] += gyt * d[cc];
                let mut g_delta = T::zero();
                let mut g_u = T::zero();
                for k in 0..n {
                    let s_idx = idx * n + k;
                    let h_t = states[s_idx];
                    let h_prev = if t > 0 { states[s_idx - ch * n] } else { T::zero() };
                    let ak = a[cc * n + k];
                    let bk = b[row * n + k];
                    g.c[row * n + k] += gyt * h_t;
                    let ghk = gh[cc * n + k] + gyt * c[row * n + k];
                    let (abar, f) = (disc.abar[s_idx], disc.f[s_idx]);
                    let g_abar = ghk * h_prev;
                    let g_bbar = ghk * ut;
                    g_u += ghk * f * bk;
                    g.b[row * n + k] += g_bbar * f;
                    let g_f = g_bbar * bk;
                    g_delta += g_abar * abar * ak + g_f * abar;
                    g.a[cc * n + k] += g_abar * abar * dt + g_f * zoh_df_da(dt, ak, abar, disc.em1[s_idx]);
                    gh[cc * n + k] = ghk * abar;
                }
                g.delta[idx] += g_delta;
                g.u[idx] += g_u;
            }
        }
    }
    g
}

/// Selective scan over plain tensors with the sequential kernel.
pub fn selective_scan_sequential<T: Scalar>(inputs: &ScanInputs<'_, T>) -> Result<Tensor<T>> {
    scan_tensor(inputs, ScanKernel::Sequential)
}

/// Selective scan over plain tensors with the associative-scan kernel.
pub fn selective_scan_parallel<T: Scalar>(inputs: &ScanInputs<'_, T>) -> Result<Tensor<T>> {
    scan_tensor(inputs, ScanKernel::Parallel)
}

fn scan_tensor<T: Scalar>(inputs: &ScanInputs<'_, T>, kernel: ScanKernel) -> Result<Tensor<T>> {
    let dims = inputs.dims()?;
    if inputs.delta.data().iter().any(|&v| !(v > T::zero())) {
        return Err(Error::invalid("every step size delta must be positive"));
    }
    let (y, _, _) = run_forward(
        dims,
        inputs.u.data(),
        inputs.delta.data(),
        inputs.b.data(),
        inputs.c.data(),
        inputs.a.data(),
        inputs.d.data(),
        kernel,
    );
    Tensor::new(inputs.u.shape().to_vec(), y)
}

struct ScanOp<T> {
    dims: ScanDims,
    states: Vec<T>,
    disc: Discrete<T>,
}

impl<T: Scalar> CustomOp<T> for ScanOp<T> {
    fn name(&self) -> &'static str {
        "selective_scan"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad_out: &[T],
        _needs: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let [u, delta, a, b, c, d] = inputs else {
            unreachable!("scan has six inputs")
        };
        let g = run_backward(
            self.dims,
            u.data(),
            delta.data(),
            b.data(),
            c.data(),
            a.data(),
            d.data(),
            &self.states,
            &self.disc,
            grad_out,
        );
        vec![
            Some(g.u),
            Some(g.delta),
            Some(g.a),
            Some(g.b),
            Some(g.c),
            Some(g.d),
        ]
    }
}

/// Differentiable selective scan node. Shapes as in [`ScanInputs`].
pub fn selective_scan_op<T: Scalar>(
    g: &mut Graph<T>,
    u: Var,
    delta: Var,
    a: Var,
    b: Var,
    c: Var,
    d: Var,
    kernel: ScanKernel,
) -> Result<Var> {
    let dims = scan_dims(
        g.shape(u),
        g.shape(delta),
        g.shape(b),
        g.shape(c),
        g.shape(a),
        g.shape(d),
    )?;
    let (y, states, disc) = run_forward(
        dims,
        g.value(u).data(),
        g.value(delta).data(),
        g.value(b).data(),
        g.value(c).data(),
        g.value(a).data(),
        g.value(d).data(),
        kernel,
    );
    let out = Tensor::new(g.shape(u).to_vec(), y)?;
    Ok(g.custom(
        &[u, delta, a, b, c, d],
        out,
        Box::new(ScanOp { dims, states, disc }),
    ))
}
