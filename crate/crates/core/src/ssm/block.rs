//! Residual blocks: diagonal selective SSM, scalar-head SSM and sliding-window attention.

use rand::Rng;

use super::config::{BlockVariant, ModelConfig};
use super::model::{RunCtx, SsmModel};
use super::{causal_conv1d, selective_scan_op, sliding_window_attention, ssd_op};
use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

fn linear_init<T: Scalar>(d_in: usize, d_out: usize, rng: &mut impl Rng) -> Tensor<T> {
    let bound = 1.0 / (d_in as f64).sqrt();
    Tensor::uniform(&[d_in, d_out], -bound, bound, rng)
}

fn inv_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// Step-size biases whose softplus lies log-uniformly in `[1e-3, 1e-1]`.
fn dt_bias_init<T: Scalar>(n: usize, rng: &mut impl Rng) -> Tensor<T> {
    let (lo, hi) = (1e-3f64.ln(), 1e-1f64.ln());
    let vals: Vec<f64> = (0..n)
        .map(|_| inv_softplus(rng.gen_range(lo..hi).exp()))
        .collect();
    Tensor::from_f64(&[n], &vals).expect("length matches")
}

/// Registers the parameters of layer `i` under `layer{i}.*`.
pub(crate) fn init_block<T: Scalar>(
    store: &mut ParamStore<T>,
    cfg: &ModelConfig,
    i: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    let p = |n: &str| format!("layer{i}.{n}");
    let (d, e, n, k) = (cfg.d_model, cfg.inner_dim(), cfg.state_size, cfg.conv_width);
    store.insert(&p("norm"), Tensor::ones(&[d]), true)?;
    match cfg.block_variant(i) {
        BlockVariant::SwaHybrid => {
            for name in ["q_proj", "k_proj", "v_proj", "o_proj"] {
                store.insert(&p(name), linear_init(d, d, rng), true)?;
            }
        }
        variant => {
            store.insert(&p("in_proj"), linear_init(d, 2 * e, rng), true)?;
            let cb = 1.0 / (k as f64).sqrt();
            store.insert(&p("conv_w"), Tensor::uniform(&[e, k], -cb, cb, rng), true)?;
            store.insert(&p("conv_b"), Tensor::zeros(&[e]), true)?;
            if variant == BlockVariant::Diagonal {
                let r = cfg.dt_rank;
                store.insert(&p("x_proj"), linear_init(e, r + 2 * n, rng), true)?;
                store.insert(&p("dt_proj"), linear_init(r, e, rng), true)?;
                store.insert(&p("dt_bias"), dt_bias_init(e, rng), true)?;
                let a_log: Vec<f64> = (0..e).flat_map(|_| (1..=n).map(|j| (j as f64).ln())).collect();
                store.insert(&p("a_log"), Tensor::from_f64(&[e, n], &a_log)?, true)?;
            } else {
                let h = cfg.ssd_heads();
                store.insert(&p("x_proj"), linear_init(e, h + 2 * n, rng), true)?;
                store.insert(&p("dt_bias"), dt_bias_init(h, rng), true)?;
                let a_log: Vec<f64> = (0..h).map(|_| rng.gen_range(1.0f64..16.0).ln()).collect();
                store.insert(&p("a_log"), Tensor::from_f64(&[h], &a_log)?, true)?;
            }
            store.insert(&p("d"), Tensor::ones(&[e]), true)?;
            store.insert(&p("out_proj"), linear_init(e, d, rng), true)?;
        }
    }
    Ok(())
}

/// One residual block over `x: [B, T, d_model]`.
pub fn block_forward<T: Scalar>(
    model: &SsmModel<T>,
    g: &mut Graph<T>,
    layer: usize,
    x: Var,
    ctx: &mut RunCtx<'_>,
) -> Result<Var> {
    let cfg = &model.config;
    let p = |n: &str| format!("layer{layer}.{n}");
    let gamma = g.param_named(&model.params, &p("norm"))?;
    let h = g.rmsnorm(x, gamma, cfg.norm_eps)?;
    let out = match cfg.block_variant(layer) {
        BlockVariant::SwaHybrid => {
            let q = model.linear(g, &p("q_proj"), h, ctx)?;
            let k = model.linear(g, &p("k_proj"), h, ctx)?;
            let v = model.linear(g, &p("v_proj"), h, ctx)?;
            let att = sliding_window_attention(g, q, k, v, cfg.attn_heads, cfg.swa_window)?;
            model.linear(g, &p("o_proj"), att, ctx)?
        }
        variant => {
            let e = cfg.inner_dim();
            let n = cfg.state_size;
            let xz = model.linear(g, &p("in_proj"), h, ctx)?;
            let xi = g.slice_last(xz, 0, e)?;
            let z = g.slice_last(xz, e, e)?;
            let cw = g.param_named(&model.params, &p("conv_w"))?;
            let cb = g.param_named(&model.params, &p("conv_b"))?;
            let xc = causal_conv1d(g, xi, cw, cb)?;
            let u = g.silu(xc);
            let xp = g.param_named(&model.params, &p("x_proj"))?;
            let proj = g.matmul(u, xp)?;
            let dtb = g.param_named(&model.params, &p("dt_bias"))?;
            let a_log = g.param_named(&model.params, &p("a_log"))?;
            let a_exp = g.exp(a_log);
            let a = g.neg(a_exp);
            let dskip = g.param_named(&model.params, &p("d"))?;
            let y = if variant == BlockVariant::Diagonal {
                let r = cfg.dt_rank;
                let dtr = g.slice_last(proj, 0, r)?;
                let bm = g.slice_last(proj, r, n)?;
                let cm = g.slice_last(proj, r + n, n)?;
                let dtp = g.param_named(&model.params, &p("dt_proj"))?;
                let dt = g.matmul(dtr, dtp)?;
                let dt = g.add_bias(dt, dtb)?;
                let dt = g.softplus(dt);
                selective_scan_op(g, u, dt, a, bm, cm, dskip, ctx.kernel)?
            } else {
                let hh = cfg.ssd_heads();
                let dt = g.slice_last(proj, 0, hh)?;
                let bm = g.slice_last(proj, hh, n)?;
                let cm = g.slice_last(proj, hh + n, n)?;
                let dt = g.add_bias(dt, dtb)?;
                let dt = g.softplus(dt);
                ssd_op(g, u, dt, a, bm, cm, dskip, cfg.chunk_len)?
            };
            let gate = g.silu(z);
            let y = g.mul(y, gate)?;
            model.linear(g, &p("out_proj"), y, ctx)?
        }
    };
    g.add(x, out)
}
