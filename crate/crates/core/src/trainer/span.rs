use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::ssm::SsmModel;
use crate::tensor::{Scalar, Tensor};

pub const SPAN_START: &str = "span_head.start";
pub const SPAN_END: &str = "span_head.end";

/// Two linear predictors `[d, 1]` over final hidden states.
pub struct SpanHead;

impl SpanHead {
    pub fn attach<T: Scalar>(model: &mut SsmModel<T>, rng: &mut impl Rng) -> Result<()> {
        let d = model.config.d_model;
        let bound = 1.0 / (d as f64).sqrt();
        for name in [SPAN_START, SPAN_END] {
            model.params.insert(name, Tensor::uniform(&[d, 1], -bound, bound, rng), true)?;
        }
        Ok(())
    }

    pub fn present<T: Scalar>(model: &SsmModel<T>) -> bool {
        model.params.id(SPAN_START).is_some() && model.params.id(SPAN_END).is_some()
    }

    /// Start and end logits `[B, T]` for hidden states `[B, T, d]`.
    pub fn logits<T: Scalar>(model: &SsmModel<T>, g: &mut Graph<T>, hidden: Var) -> Result<(Var, Var)> {
        let &[b, t, _] = g.shape(hidden) else {
            return Err(Error::shape("span head expects [B, T, d] hidden states"));
        };
        let ws = g.param_named(&model.params, SPAN_START)?;
        let we = g.param_named(&model.params, SPAN_END)?;
        let s = g.matmul(hidden, ws)?;
        let e = g.matmul(hidden, we)?;
        Ok((g.reshape(s, &[b, t])?, g.reshape(e, &[b, t])?))
    }
}

/// `argmax_{i ≤ j ≤ i + max_answer_tokens} start[i] + end[j]`; ties keep the earliest pair.
pub fn best_span(start: &[f64], end: &[f64], max_answer_tokens: usize) -> Result<(usize, usize, f64)> {
    if start.is_empty() || start.len() != end.len() {
        return Err(Error::invalid(format!(
            "span search needs equal non-empty logits, got {} and {}",
            start.len(),
            end.len()
        )));
    }
    let mut best = (0, 0, f64::NEG_INFINITY);
    for (i, &s) in start.iter().enumerate() {
        let top = (i + max_answer_tokens).min(end.len() - 1);
        for (j, &e) in end.iter().enumerate().take(top + 1).skip(i) {
            if s + e > best.2 {
                best = (i, j, s + e);
            }
        }
    }
    Ok(best)
}
