//! Token embedding, block stack, final norm and tied output head.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::block::{block_forward, init_block};
use super::config::ModelConfig;
use super::scan::ScanKernel;
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::lora::{lora_forward, LoraAdapter};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

/// Embedding row that is zero at initialisation.
pub const PAD_ROW: usize = 0;

/// Per-call execution settings. Dropout is active only when a generator is supplied.
pub struct RunCtx<'r> {
    pub kernel: ScanKernel,
    pub dropout_rng: Option<&'r mut ChaCha8Rng>,
}

impl<'r> RunCtx<'r> {
    pub fn eval() -> Self {
        RunCtx {
            kernel: ScanKernel::default(),
            dropout_rng: None,
        }
    }

    pub fn train(rng: &'r mut ChaCha8Rng) -> Self {
        RunCtx {
            kernel: ScanKernel::default(),
            dropout_rng: Some(rng),
        }
    }

    pub fn with_kernel(mut self, kernel: ScanKernel) -> Self {
        self.kernel = kernel;
        self
    }
}

#[derive(Debug, Clone)]
pub struct SsmModel<T: Scalar> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    /// Attached adapters keyed by target weight name.
    pub adapters: BTreeMap<String, LoraAdapter>,
}

impl<T: Scalar> SsmModel<T> {
    /// Builds a freshly initialised model from `config.init_seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut params = ParamStore::new();
        let (v, d) = (config.vocab_size, config.d_model);
        let mut embed = Tensor::uniform(&[v, d], -0.1, 0.1, &mut rng);
        embed.data_mut()[PAD_ROW * d..(PAD_ROW + 1) * d].fill(T::zero());
        params.insert("embed", embed, true)?;
        for i in 0..config.n_layers {
            init_block(&mut params, &config, i, &mut rng)?;
        }
        params.insert("final_norm", Tensor::ones(&[d]), true)?;
        Ok(SsmModel {
            config,
            params,
            adapters: BTreeMap::new(),
        })
    }

    /// `x·W` for the named weight, plus its adapter path when one is attached.
    pub fn linear(&self, g: &mut Graph<T>, name: &str, x: Var, ctx: &mut RunCtx<'_>) -> Result<Var> {
        let w = g.param_named(&self.params, name)?;
        match self.adapters.get(name) {
            None => g.matmul(x, w),
            Some(ad) => {
                let a = g.param_named(&self.params, &ad.a_name())?;
                let b = g.param_named(&self.params, &ad.b_name())?;
                let drop = match ctx.dropout_rng.as_deref_mut() {
                    Some(rng) if ad.dropout > 0.0 => Some((ad.dropout, rng)),
                    _ => None,
                };
                lora_forward(g, x, w, a, b, ad.scale(), drop)
            }
        }
    }

    /// Embedding table including its low-rank delta, `[V, d]`.
    pub fn embedding_table(&self, g: &mut Graph<T>) -> Result<Var> {
        let e = g.param_named(&self.params, "embed")?;
        let Some(ad) = self.adapters.get("embed") else {
            return Ok(e);
        };
        let a = g.param_named(&self.params, &ad.a_name())?;
        let b = g.param_named(&self.params, &ad.b_name())?;
        let ba = g.matmul(b, a)?;
        let delta = g.transpose(ba)?;
        let delta = g.scale(delta, T::of(ad.scale()));
        g.add(e, delta)
    }

    fn check_ids(&self, ids: &[usize], batch: usize) -> Result<usize> {
        if batch == 0 || ids.len() % batch != 0 {
            return Err(Error::shape(format!("{} ids do not form {batch} rows", ids.len())));
        }
        let time = ids.len() / batch;
        if time > self.config.max_seq_len {
            return Err(Error::invalid(format!(
                "sequence length {time} exceeds max_seq_len {}",
                self.config.max_seq_len
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.config.vocab_size) {
            return Err(Error::invalid(format!(
                "token id {bad} out of range for vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(time)
    }

    /// Final-normed hidden states `[B, T, d]` for row-major `ids` of `batch` rows.
    /// Returns the hidden states and the embedding table used, so the head can reuse it.
    pub fn forward_hidden(
        &self,
        g: &mut Graph<T>,
        ids: &[usize],
        batch: usize,
        ctx: &mut RunCtx<'_>,
    ) -> Result<(Var, Var)> {
        let time = self.check_ids(ids, batch)?;
        let table = self.embedding_table(g)?;
        let rows = g.gather_rows(table, ids)?;
        let mut x = g.reshape(rows, &[batch, time, self.config.d_model])?;
        for layer in 0..self.config.n_layers {
            x = block_forward(self, g, layer, x, ctx)?;
        }
        let gamma = g.param_named(&self.params, "final_norm")?;
        Ok((g.rmsnorm(x, gamma, self.config.norm_eps)?, table))
    }

    /// Next-token logits `[B, T, V]`.
    pub fn forward(&self, g: &mut Graph<T>, ids: &[usize], batch: usize, ctx: &mut RunCtx<'_>) -> Result<Var> {
        let (h, table) = self.forward_hidden(g, ids, batch, ctx)?;
        g.matmul_nt(h, table)
    }

    /// Inference-mode logits as a plain tensor.
    pub fn logits(&self, ids: &[usize], batch: usize) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let y = self.forward(&mut g, ids, batch, &mut RunCtx::eval())?;
        Ok(g.value(y).clone())
    }
}
