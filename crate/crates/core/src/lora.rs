//! Low-rank adapters on projection layers and the embedding table.
//!
//! Base weights are stored `[d_in, d_out]` and applied as `x·W`. An adapter
//! holds `A: [r, d_in]` and `B: [d_out, r]`, contributing
//! `(α/r) · drop(x)·Aᵀ·Bᵀ`, which merges into the base as `W + (α/r)·(B·A)ᵀ`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::ssm::{BlockVariant, SsmModel};
use crate::tensor::{Scalar, Tensor};

/// Prefix under which adapter tensors live in the parameter store and checkpoints.
pub const ADAPTER_PREFIX: &str = "adapters/";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 8,
            alpha: 32.0,
            dropout: 0.1,
        }
    }
}

impl LoraConfig {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank < 1 {
            return Err(Error::invalid("LoRA rank must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!("LoRA dropout {} not in [0, 1)", self.dropout)));
        }
        if !self.alpha.is_finite() {
            return Err(Error::invalid("LoRA alpha must be finite"));
        }
        Ok(())
    }
}

/// Adapter attached to one named base weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    pub target: String,
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub d_in: usize,
    pub d_out: usize,
}

impl LoraAdapter {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn a_name(&self) -> String {
        format!("{ADAPTER_PREFIX}{}.lora_a", self.target)
    }

    pub fn b_name(&self) -> String {
        format!("{ADAPTER_PREFIX}{}.lora_b", self.target)
    }
}

/// Adapter targets: the embedding table plus every SSM in/out projection and
/// every attention q/k/v/o projection, in layer order.
pub fn select_target_layers<T: Scalar>(model: &SsmModel<T>) -> Vec<String> {
    let mut out = vec!["embed".to_string()];
    for (i, v) in model.config.layer_variants().into_iter().enumerate() {
        let names: &[&str] = match v {
            BlockVariant::Diagonal | BlockVariant::ScalarPerHead => &["in_proj", "out_proj"],
            BlockVariant::SwaHybrid => &["q_proj", "k_proj", "v_proj", "o_proj"],
        };
        out.extend(names.iter().map(|n| format!("layer{i}.{n}")));
    }
    out
}

/// Freezes every base weight and attaches a fresh adapter to each target.
/// `A` is drawn from `uniform(±1/√d_in)`, `B` is zero.
pub fn attach<T: Scalar>(model: &mut SsmModel<T>, cfg: &LoraConfig, rng: &mut impl Rng) -> Result<Vec<String>> {
    cfg.validate()?;
    model.params.freeze_all();
    let targets = select_target_layers(model);
    for target in &targets {
        let w = model
            .params
            .value(target)
            .ok_or_else(|| Error::invalid(format!("no base weight named `{target}`")))?;
        let [d_in, d_out] = *w.shape() else {
            return Err(Error::shape(format!("`{target}` is not a matrix")));
        };
        let adapter = LoraAdapter {
            target: target.clone(),
            rank: cfg.rank,
            alpha: cfg.alpha,
            dropout: if target == "embed" { 0.0 } else { cfg.dropout },
            d_in,
            d_out,
        };
        let bound = 1.0 / (d_in as f64).sqrt();
        let a = Tensor::uniform(&[cfg.rank, d_in], -bound, bound, rng);
        model.params.insert(&adapter.a_name(), a, true)?;
        model.params.insert(&adapter.b_name(), Tensor::zeros(&[d_out, cfg.rank]), true)?;
        model.adapters.insert(target.clone(), adapter);
    }
    Ok(targets)
}

/// `y = x·W + scale · drop(x)·Aᵀ·Bᵀ`. Dropout applies only when `dropout` carries a generator.
pub fn lora_forward<T: Scalar, R: Rng>(
    g: &mut Graph<T>,
    x: Var,
    w: Var,
    a: Var,
    b: Var,
    scale: f64,
    dropout: Option<(f64, &mut R)>,
) -> Result<Var> {
    let base = g.matmul(x, w)?;
    let (ra, rb) = (g.shape(a)[0], g.shape(b).get(1).copied().unwrap_or(0));
    if g.shape(a).len() != 2 || g.shape(b).len() != 2 || ra != rb {
        return Err(Error::shape(format!(
            "adapter rank mismatch: A {:?}, B {:?}",
            g.shape(a),
            g.shape(b)
        )));
    }
    let xin = match dropout {
        Some((p, rng)) if p > 0.0 => g.dropout(x, p, rng)?,
        _ => x,
    };
    let low = g.matmul_nt(xin, a)?;
    let delta = g.matmul_nt(low, b)?;
    let delta = g.scale(delta, T::of(scale));
    g.add(base, delta)
}

/// `W + scale·(B·A)ᵀ` for `W: [d_in, d_out]`, `A: [r, d_in]`, `B: [d_out, r]`.
pub fn lora_merge<T: Scalar>(w: &Tensor<T>, a: &Tensor<T>, b: &Tensor<T>, scale: f64) -> Result<Tensor<T>> {
    let (&[d_in, d_out], &[r, ad], &[bd, br]) = (w.shape(), a.shape(), b.shape()) else {
        return Err(Error::shape("merge operands must be matrices"));
    };
    if ad != d_in || bd != d_out || br != r {
        return Err(Error::shape(format!(
            "cannot merge A {:?}, B {:?} into W {:?}",
            a.shape(),
            b.shape(),
            w.shape()
        )));
    }
    let s = T::of(scale);
    let (av, bv) = (a.data(), b.data());
    let mut out = w.clone();
    let od = out.data_mut();
    for i in 0..d_in {
        for o in 0..d_out {
            let mut acc = T::zero();
            for k in 0..r {
                acc += bv[o * r + k] * av[k * d_in + i];
            }
            od[i * d_out + o] += s * acc;
        }
    }
    Ok(out)
}

/// Folds every adapter into its base weight and removes the adapter tensors.
pub fn merge_all<T: Scalar>(model: &mut SsmModel<T>) -> Result<()> {
    let adapters: Vec<LoraAdapter> = model.adapters.values().cloned().collect();
    for ad in adapters {
        let merged = merged_weight(&model.params, &ad)?;
        let id = model.params.expect_id(&ad.target)?;
        model.params.get_mut(id).value = merged;
    }
    model.params.remove_where(|n| n.starts_with(ADAPTER_PREFIX));
    model.adapters.clear();
    Ok(())
}

pub fn merged_weight<T: Scalar>(params: &ParamStore<T>, ad: &LoraAdapter) -> Result<Tensor<T>> {
    let get = |n: &str| {
        params
            .value(n)
            .ok_or_else(|| Error::invalid(format!("missing tensor `{n}`")))
    };
    lora_merge(get(&ad.target)?, get(&ad.a_name())?, get(&ad.b_name())?, ad.scale())
}
