//! Depthwise causal 1-D convolution over time.

use crate::autodiff::{CustomOp, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

struct ConvOp {
    batch: usize,
    time: usize,
    channels: usize,
    width: usize,
}

impl<T: Scalar> CustomOp<T> for ConvOp {
    fn name(&self) -> &'static str {
        "causal_conv1d"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        g: &[T],
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let (x, w) = (inputs[0].data(), inputs[1].data());
        let (bsz, time, ch, k) = (self.batch, self.time, self.channels, self.width);
        let mut gx = vec![T::zero(); x.len()];
        let mut gw = vec![T::zero(); w.len()];
        let mut gb = vec![T::zero(); ch];
        for bi in 0..bsz {
            for t in 0..time {
                let row = (bi * time + t) * ch;
                for c in 0..ch {
                    let gy = g[row + c];
                    gb[c] += gy;
                    for j in 0..k {
                        // tap j reads x[t − (k − 1) + j]
                        let Some(src) = (t + j).checked_sub(k - 1) else { continue };
                        let xi = (bi * time + src) * ch + c;
                        gw[c * k + j] += gy * x[xi];
                        gx[xi] += gy * w[c * k + j];
                    }
                }
            }
        }
        vec![
            needs[0].then_some(gx),
            needs[1].then_some(gw),
            needs[2].then_some(gb),
        ]
    }
}

/// `y[t, c] = bias[c] + Σ_j w[c, j] · x[t − (K−1) + j, c]`, zero-padded on the left.
/// `x`: `[B, T, C]`, `w`: `[C, K]`, `bias`: `[C]`.
pub fn causal_conv1d<T: Scalar>(g: &mut Graph<T>, x: Var, w: Var, bias: Var) -> Result<Var> {
    let [bsz, time, ch] = *g.shape(x) else {
        return Err(Error::shape(format!("conv input must be [B, T, C], got {:?}", g.shape(x))));
    };
    let [wc, k] = *g.shape(w) else {
        return Err(Error::shape(format!("conv weight must be [C, K], got {:?}", g.shape(w))));
    };
    if wc != ch || k == 0 || g.shape(bias) != [ch] {
        return Err(Error::shape(format!(
            "conv weight {:?} / bias {:?} do not fit {ch} channels",
            g.shape(w),
            g.shape(bias)
        )));
    }
    let xv = g.value(x).data();
    let wv = g.value(w).data();
    let bv = g.value(bias).data();
    let mut y = vec![T::zero(); xv.len()];
    for bi in 0..bsz {
        for t in 0..time {
            let row = (bi * time + t) * ch;
            for c in 0..ch {
                let mut acc = bv[c];
                for j in 0..k {
                    if let Some(src) = (t + j).checked_sub(k - 1) {
                        acc += wv[c * k + j] * xv[(bi * time + src) * ch + c];
                    }
                }
                y[row + c] = acc;
            }
        }
    }
    let out = Tensor::new(vec![bsz, time, ch], y)?;
    Ok(g.custom(
        &[x, w, bias],
        out,
        Box::new(ConvOp {
            batch: bsz,
            time,
            channels: ch,
            width: k,
        }),
    ))
}
