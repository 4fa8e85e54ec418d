//! Scalar-per-head state-space scan evaluated chunk-wise.
//!
//! Every head shares one scalar pole `a_h` and one step `Δ_{t,h}` across its
//! `P` channels and `N` state dims. Inside a chunk the output is a masked
//! (decay-weighted) quadratic form; between chunks only the `[P, N]` state is
//! carried. Mathematically identical to the diagonal scan with `A` broadcast.

use crate::autodiff::{CustomOp, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

use super::discretize::zoh;
use super::scan::{run_backward, run_forward, ScanDims, ScanKernel};

pub const DEFAULT_CHUNK_LEN: usize = 64;

/// `u`: `[B, T, E]`, `dt`: `[B, T, H]`, `a`: `[H]`, `b`/`c`: `[B, T, N]`, `d`: `[E]`.
#[derive(Debug, Clone, Copy)]
pub struct SsdInputs<'a, T> {
    pub u: &'a Tensor<T>,
    pub dt: &'a Tensor<T>,
    pub a: &'a Tensor<T>,
    pub b: &'a Tensor<T>,
    pub c: &'a Tensor<T>,
    pub d: &'a Tensor<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct SsdDims {
    batch: usize,
    time: usize,
    channels: usize,
    heads: usize,
    head_dim: usize,
    state: usize,
}

fn ssd_dims(
    u: &[usize],
    dt: &[usize],
    a: &[usize],
    b: &[usize],
    c: &[usize],
    d: &[usize],
) -> Result<SsdDims> {
    let [batch, time, channels] = *u else {
        return Err(Error::shape(format!("u must be [B, T, E], got {u:?}")));
    };
    let [db, dtt, heads] = *dt else {
        return Err(Error::shape(format!("dt must be [B, T, H], got {dt:?}")));
    };
    if db != batch || dtt != time {
        return Err(Error::shape(format!("dt {dt:?} disagrees with u {u:?}")));
    }
    if heads == 0 || channels % heads != 0 {
        return Err(Error::shape(format!(
            "{channels} channels do not split into {heads} heads"
        )));
    }
    if a != [heads] {
        return Err(Error::shape(format!("A must be [{heads}], got {a:?}")));
    }
    let [bb, bt, state] = *b else {
        return Err(Error::shape(format!("B_t must be [B, T, N], got {b:?}")));
    };
    if bb != batch || bt != time || c != b {
        return Err(Error::shape(format!("B_t {b:?} / C_t {c:?} disagree with u {u:?}")));
    }
    if state == 0 {
        return Err(Error::shape("state size N must be at least 1"));
    }
    if d != [channels] {
        return Err(Error::shape(format!("D must be [{channels}], got {d:?}")));
    }
    Ok(SsdDims {
        batch,
        time,
        channels,
        heads,
        head_dim: channels / heads,
        state,
    })
}

fn chunked_forward<T: Scalar>(
    dims: SsdDims,
    u: &[T],
    dt: &[T],
    a: &[T],
    b: &[T],
    c: &[T],
    d: &[T],
    chunk: usize,
) -> Vec<T> {
    let SsdDims {
        batch,
        time,
        channels: e,
        heads,
        head_dim: p,
        state: n,
    } = dims;
    let mut y = vec![T::zero(); batch * time * e];
    let mut cum = vec![T::zero(); chunk];
    let mut fbar = vec![T::zero(); chunk];
    let mut cb = vec![T::zero(); chunk * chunk];
    for bi in 0..batch {
        let row = |t: usize| bi * time + t;
        for h in 0..heads {
            let ah = a[h];
            let mut state = vec![T::zero(); p * n];
            let mut start = 0;
            while start < time {
                let len = chunk.min(time - start);
                let mut running = T::zero();
                for i in 0..len {
                    let step = dt[row(start + i) * heads + h];
                    running += step * ah;
                    cum[i] = running;
                    fbar[i] = zoh(step, ah).1;
                }
                for i in 0..len {
                    let ci = &c[row(start + i) * n..row(start + i) * n + n];
                    for j in 0..=i {
                        let bj = &b[row(start + j) * n..row(start + j) * n + n];
                        let ip: T = ci.iter().zip(bj).map(|(&x, &z)| x * z).sum();
                        cb[i * chunk + j] = ip;
                    }
                }
                for i in 0..len {
                    let ri = row(start + i);
                    let ci = &c[ri * n..ri * n + n];
                    let carry = cum[i].exp();
                    for pp in 0..p {
                        let ch = h * p + pp;
                        let srow = &state[pp * n..(pp + 1) * n];
                        let inter: T = ci.iter().zip(srow).map(|(&x, &s)| x * s).sum();
                        let mut acc = carry * inter;
                        for j in 0..=i {
                            let w = cb[i * chunk + j] * (cum[i] - cum[j]).exp() * fbar[j];
                            acc += w * u[row(start + j) * e + ch];
                        }
                        y[ri * e + ch] = acc + d[ch] * u[ri * e + ch];
                    }
                }
                let last = cum[len - 1];
                let total = last.exp();
                for pp in 0..p {
                    let ch = h * p + pp;
                    for k in 0..n {
                        let mut s = total * state[pp * n + k];
                        for j in 0..len {
                            let rj = row(start + j);
                            s += (last - cum[j]).exp() * fbar[j] * b[rj * n + k] * u[rj * e + ch];
                        }
                        state[pp * n + k] = s;
                    }
                }
                start += len;
            }
        }
    }
    y
}

/// Expands per-head `(dt, a)` to per-channel `delta: [B, T, E]` and `A: [E, N]`.
fn broadcast<T: Scalar>(dims: SsdDims, dt: &[T], a: &[T]) -> (Vec<T>, Vec<T>) {
    let SsdDims {
        batch,
        time,
        channels: e,
        heads,
        head_dim: p,
        state: n,
    } = dims;
    let mut delta = vec![T::zero(); batch * time * e];
    for r in 0..batch * time {
        for ch in 0..e {
            delta[r * e + ch] = dt[r * heads + ch / p];
        }
    }
    let mut full_a = vec![T::zero(); e * n];
    for ch in 0..e {
        for k in 0..n {
            full_a[ch * n + k] = a[ch / p];
        }
    }
    (delta, full_a)
}

/// Scalar-head scan over plain tensors, chunked with `chunk_len`.
pub fn ssd_scalar_head<T: Scalar>(inputs: &SsdInputs<'_, T>, chunk_len: usize) -> Result<Tensor<T>> {
    if chunk_len < 1 {
        return Err(Error::invalid("chunk length must be at least 1"));
    }
    let dims = ssd_dims(
        inputs.u.shape(),
        inputs.dt.shape(),
        inputs.a.shape(),
        inputs.b.shape(),
        inputs.c.shape(),
        inputs.d.shape(),
    )?;
    let y = chunked_forward(
        dims,
        inputs.u.data(),
        inputs.dt.data(),
        inputs.a.data(),
        inputs.b.data(),
        inputs.c.data(),
        inputs.d.data(),
        chunk_len,
    );
    Tensor::new(inputs.u.shape().to_vec(), y)
}

/// The broadcast diagonal problem `(delta [B,T,E], A [E,N])` equivalent to `inputs`.
pub fn broadcast_to_diagonal<T: Scalar>(inputs: &SsdInputs<'_, T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let dims = ssd_dims(
        inputs.u.shape(),
        inputs.dt.shape(),
        inputs.a.shape(),
        inputs.b.shape(),
        inputs.c.shape(),
        inputs.d.shape(),
    )?;
    let (delta, a) = broadcast(dims, inputs.dt.data(), inputs.a.data());
    Ok((
        Tensor::new(inputs.u.shape().to_vec(), delta)?,
        Tensor::new(vec![dims.channels, dims.state], a)?,
    ))
}

struct SsdOp {
    dims: SsdDims,
}

impl<T: Scalar> CustomOp<T> for SsdOp {
    fn name(&self) -> &'static str {
        "ssd_scalar_head"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad_out: &[T],
        _needs: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let [u, dt, a, b, c, d] = inputs else {
            unreachable!("ssd has six inputs")
        };
        let dims = self.dims;
        let (delta, full_a) = broadcast(dims, dt.data(), a.data());
        let scan_dims = ScanDims {
            batch: dims.batch,
            time: dims.time,
            channels: dims.channels,
            state: dims.state,
        };
        let (_, states, disc) = run_forward(
            scan_dims,
            u.data(),
            &delta,
            b.data(),
            c.data(),
            &full_a,
            d.data(),
            ScanKernel::Sequential,
        );
        let g = run_backward(
            scan_dims,
            u.data(),
            &delta,
            b.data(),
            c.data(),
            &full_a,
            d.data(),
            &states,
            &disc,
            grad_out,
        );
        let p = dims.head_dim;
        let mut g_dt = vec![T::zero(); dt.len()];
        for r in 0..dims.batch * dims.time {
            for ch in 0..dims.channels {
                g_dt[r * dims.heads + ch / p] += g.delta[r * dims.channels + ch];
            }
        }
        let mut g_a = vec![T::zero(); dims.heads];
        for ch in 0..dims.channels {
            for k in 0..dims.state {
                g_a[ch / p] += g.a[ch * dims.state + k];
            }
        }
        vec![
            Some(g.u),
            Some(g_dt),
            Some(g_a),
            Some(g.b),
            Some(g.c),
            Some(g.d),
        ]
    }
}

/// Differentiable scalar-head scan node. Shapes as in [`SsdInputs`].
pub fn ssd_op<T: Scalar>(
    g: &mut Graph<T>,
    u: Var,
    dt: Var,
    a: Var,
    b: Var,
    c: Var,
    d: Var,
    chunk_len: usize,
) -> Result<Var> {
    if chunk_len < 1 {
        return Err(Error::invalid("chunk length must be at least 1"));
    }
    let dims = ssd_dims(
        g.shape(u),
        g.shape(dt),
        g.shape(a),
        g.shape(b),
        g.shape(c),
        g.shape(d),
    )?;
    let y = chunked_forward(
        dims,
        g.value(u).data(),
        g.value(dt).data(),
        g.value(a).data(),
        g.value(b).data(),
        g.value(c).data(),
        g.value(d).data(),
        chunk_len,
    );
    let out = Tensor::new(g.shape(u).to_vec(), y)?;
    Ok(g.custom(&[u, dt, a, b, c, d], out, Box::new(SsdOp { dims })))
}
