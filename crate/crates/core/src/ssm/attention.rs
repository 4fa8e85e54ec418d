//! Causal multi-head attention restricted to a sliding window.
//!
//! Position `t` attends to `max(0, t − W + 1) ..= t`. Scores are scaled by
//! `1/√d_head` and normalised with a softmax over the visible window only.

use crate::autodiff::{CustomOp, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy)]
struct Dims {
    batch: usize,
    time: usize,
    model: usize,
    heads: usize,
    head_dim: usize,
    window: usize,
}

impl Dims {
    fn first(&self, t: usize) -> usize {
        (t + 1).saturating_sub(self.window)
    }
}

struct SwaOp<T> {
    dims: Dims,
    /// Window probabilities, `[B, H, T, W]` with unused slots zero.
    probs: Vec<T>,
}

fn check(shape_q: &[usize], shape_k: &[usize], shape_v: &[usize], heads: usize, window: usize) -> Result<Dims> {
    if window < 1 {
        return Err(Error::invalid("attention window must be at least 1"));
    }
    let [batch, time, model] = *shape_q else {
        return Err(Error::shape(format!("q must be [B, T, d], got {shape_q:?}")));
    };
    if shape_k != shape_q || shape_v != shape_q {
        return Err(Error::shape(format!(
            "q {shape_q:?}, k {shape_k:?}, v {shape_v:?} must agree"
        )));
    }
    if heads == 0 || model % heads != 0 {
        return Err(Error::shape(format!("{model} does not split into {heads} heads")));
    }
    Ok(Dims {
        batch,
        time,
        model,
        heads,
        head_dim: model / heads,
        window,
    })
}

/// Windowed attention over already-projected `q`, `k`, `v` (`[B, T, d]`).
pub fn sliding_window_attention<T: Scalar>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    window: usize,
) -> Result<Var> {
    let dims = check(g.shape(q), g.shape(k), g.shape(v), heads, window)?;
    let Dims {
        batch,
        time,
        model,
        heads,
        head_dim,
        window,
    } = dims;
    let scale = T::one() / T::of(head_dim as f64).sqrt();
    let (qv, kv, vv) = (g.value(q).data(), g.value(k).data(), g.value(v).data());
    let mut out = vec![T::zero(); qv.len()];
    let mut probs = vec![T::zero(); batch * heads * time * window];
    for b in 0..batch {
        for h in 0..heads {
            let off = h * head_dim;
            for t in 0..time {
                let qt = &qv[(b * time + t) * model + off..][..head_dim];
                let first = dims.first(t);
                let pbase = ((b * heads + h) * time + t) * window;
                let mut mx = T::neg_infinity();
                for (slot, j) in (first..=t).enumerate() {
                    let kj = &kv[(b * time + j) * model + off..][..head_dim];
                    let s = qt.iter().zip(kj).map(|(&x, &y)| x * y).sum::<T>() * scale;
                    probs[pbase + slot] = s;
                    mx = mx.max(s);
                }
                let span = t + 1 - first;
                let mut z = T::zero();
                for p in &mut probs[pbase..pbase + span] {
                    *p = (*p - mx).exp();
                    z += *p;
                }
                let orow = (b * time + t) * model + off;
                for (slot, j) in (first..=t).enumerate() {
                    let p = probs[pbase + slot] / z;
                    probs[pbase + slot] = p;
                    let vj = &vv[(b * time + j) * model + off..][..head_dim];
                    for e in 0..head_dim {
                        out[orow + e] += p * vj[e];
                    }
                }
            }
        }
    }
    let value = Tensor::new(vec![batch, time, model], out)?;
    Ok(g.custom(&[q, k, v], value, Box::new(SwaOp { dims, probs })))
}

impl<T: Scalar> CustomOp<T> for SwaOp<T> {
    fn name(&self) -> &'static str {
        "sliding_window_attention"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        g: &[T],
        _needs: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let Dims {
            batch,
            time,
            model,
            heads,
            head_dim,
            window,
        } = self.dims;
        let (qv, kv, vv) = (inputs[0].data(), inputs[1].data(), inputs[2].data());
        let scale = T::one() / T::of(head_dim as f64).sqrt();
        let mut gq = vec![T::zero(); qv.len()];
        let mut gk = vec![T::zero(); kv.len()];
        let mut gv = vec![T::zero(); vv.len()];
        let mut gp = vec![T::zero(); window];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * head_dim;
                for t in 0..time {
                    let first = self.dims.first(t);
                    let pbase = ((b * heads + h) * time + t) * window;
                    let orow = (b * time + t) * model + off;
                    let go = &g[orow..orow + head_dim];
                    let mut dotp = T::zero();
                    for (slot, j) in (first..=t).enumerate() {
                        let vrow = (b * time + j) * model + off;
                        let p = self.probs[pbase + slot];
                        let mut s = T::zero();
                        for e in 0..head_dim {
                            s += go[e] * vv[vrow + e];
                            gv[vrow + e] += p * go[e];
                        }
                        gp[slot] = s;
                        dotp += p * s;
                    }
                    for (slot, j) in (first..=t).enumerate() {
                        let gs = self.probs[pbase + slot] * (gp[slot] - dotp) * scale;
                        let krow = (b * time + j) * model + off;
                        for e in 0..head_dim {
                            gq[orow + e] += gs * kv[krow + e];
                            gk[krow + e] += gs * qv[orow + e];
                        }
                    }
                }
            }
        }
        vec![Some(gq), Some(gk), Some(gv)]
    }
}
