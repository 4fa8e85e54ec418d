//! Fine-tuning loop: presets, warmup schedule, gradient accumulation,
//! periodic evaluation, checkpointing and the span-prediction head.

mod adam;
mod checkpoint;
mod span;

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::dataset::{build_chat_example, encode_record, pad_and_mask, ChatExample, ChatTemplate, EncodedRecord, QaRecord};
use crate::error::{Error, Result};
use crate::lora::LoraConfig;
use crate::metrics::{report, MetricReport, Scorer, TokenEmbedder};
use crate::prompting::{generate_greedy, predict_span};
use crate::ssm::{RunCtx, SsmModel};
use crate::tensor::{Scalar, Tensor};
use crate::tokenizer::{Vocab, PAD_ID};

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{checkpoint_steps, load_checkpoint, save_checkpoint, save_merged, CHECKPOINT_VERSION};
pub use span::{best_span, SpanHead, SPAN_END, SPAN_START};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub preset_name: String,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub accumulation_steps: usize,
    pub epochs: usize,
    pub warmup_steps: usize,
    pub max_seq_len: usize,
    /// Optimizer steps between validation passes; 0 evaluates once per epoch.
    pub eval_interval: usize,
    pub checkpoint_interval: usize,
    pub seed: u64,
    pub lora: LoraConfig,
    /// Next-token loss on chat-formatted sequences.
    pub lm_objective: bool,
    /// Start/end cross-entropy through the span head.
    pub span_head: bool,
    pub max_answer_tokens: usize,
    pub max_new_tokens: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            preset_name: "mamba".into(),
            learning_rate: 2e-4,
            batch_size: 4,
            accumulation_steps: 8,
            epochs: 3,
            warmup_steps: 100,
            max_seq_len: 2048,
            eval_interval: 0,
            checkpoint_interval: 500,
            seed: 0,
            lora: LoraConfig::default(),
            lm_objective: true,
            span_head: false,
            max_answer_tokens: 64,
            max_new_tokens: 32,
        }
    }
}

impl TrainConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let base = TrainConfig {
            preset_name: name.to_string(),
            ..TrainConfig::default()
        };
        Ok(match name {
            "mamba" | "mamba2" => base,
            "falcon" => TrainConfig {
                learning_rate: 1e-4,
                accumulation_steps: 1,
                epochs: 10,
                span_head: true,
                ..base
            },
            "jamba" => TrainConfig {
                lora: LoraConfig {
                    rank: 16,
                    ..LoraConfig::default()
                },
                ..base
            },
            "zamba" => TrainConfig {
                max_seq_len: 4096,
                ..base
            },
            "samba" => TrainConfig {
                batch_size: 8,
                ..base
            },
            "hymba" => TrainConfig {
                learning_rate: 3e-4,
                ..base
            },
            other => return Err(Error::invalid(format!("unknown preset `{other}`"))),
        })
    }

    pub fn effective_batch(&self) -> usize {
        self.batch_size * self.accumulation_steps
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.accumulation_steps == 0 {
            return Err(Error::invalid("batch_size and accumulation_steps must be positive"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning rate must be finite and non-negative"));
        }
        if self.max_seq_len == 0 || self.checkpoint_interval == 0 {
            return Err(Error::invalid("max_seq_len and checkpoint_interval must be positive"));
        }
        if !self.lm_objective && !self.span_head {
            return Err(Error::invalid("enable at least one of lm_objective and span_head"));
        }
        self.lora.validate()
    }
}

/// Linear ramp from 0 to the peak over `warmup_steps`, constant afterwards.
pub fn lr_schedule(step: usize, cfg: &TrainConfig) -> f64 {
    if cfg.warmup_steps == 0 || step >= cfg.warmup_steps {
        cfg.learning_rate
    } else {
        cfg.learning_rate * step as f64 / cfg.warmup_steps as f64
    }
}

/// A record with the model inputs each enabled objective needs.
#[derive(Debug, Clone)]
pub struct Example {
    pub record: QaRecord,
    pub chat: Option<ChatExample>,
    pub span: Option<EncodedRecord>,
}

pub fn prepare_examples(records: &[QaRecord], vocab: &Vocab, template: &ChatTemplate, cfg: &TrainConfig) -> Result<Vec<Example>> {
    records
        .iter()
        .map(|r| {
            Ok(Example {
                record: r.clone(),
                chat: cfg
                    .lm_objective
                    .then(|| build_chat_example(r, template, vocab, cfg.max_seq_len))
                    .transpose()?,
                span: cfg.span_head.then(|| encode_record(r, vocab, cfg.max_seq_len)).transpose()?,
            })
        })
        .collect()
}

/// Model, optimizer and loop position: everything a checkpoint restores.
#[derive(Debug, Clone)]
pub struct TrainState<T: Scalar> {
    pub model: SsmModel<T>,
    pub optimizer: Adam<T>,
    pub config: TrainConfig,
    /// Optimizer steps taken.
    pub step: usize,
    /// Completed epochs.
    pub epoch: usize,
    /// Examples already consumed in the current epoch.
    pub cursor: usize,
    pub best_eval_loss: Option<f64>,
    pub vocab: Option<Vocab>,
    pub template: Option<ChatTemplate>,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(model: SsmModel<T>, config: TrainConfig) -> Self {
        TrainState {
            model,
            optimizer: Adam::new(AdamConfig::default()),
            config,
            step: 0,
            epoch: 0,
            cursor: 0,
            best_eval_loss: None,
            vocab: None,
            template: None,
        }
    }
}

/// Independent generator for `(seed, stream, index)`.
pub fn derived_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos((index as u128) << 20);
    rng
}

const STREAM_SHUFFLE: u64 = 1;
const STREAM_DROPOUT: u64 = 2;

/// Example order for one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut derived_rng(seed, STREAM_SHUFFLE, epoch as u64));
    idx
}

fn lm_targets(chat: &ChatExample, width: usize) -> Vec<i64> {
    (0..width)
        .map(|t| match chat.loss_mask.get(t + 1) {
            Some(1) => chat.ids[t + 1] as i64,
            _ => -1,
        })
        .collect()
}

/// Number of loss terms an example contributes to each objective.
fn loss_terms(ex: &Example) -> (usize, usize) {
    let lm = ex
        .chat
        .as_ref()
        .map_or(0, |c| c.loss_mask.iter().skip(1).filter(|&&m| m == 1).count());
    (lm, usize::from(ex.span.is_some()))
}

/// Sum of per-token losses over `batch`, divided by the given denominators.
/// Returns the loss node, or `None` when the batch has no loss terms.
fn batch_loss<T: Scalar>(
    model: &SsmModel<T>,
    g: &mut Graph<T>,
    batch: &[&Example],
    denom: (usize, usize),
    ctx: &mut RunCtx<'_>,
) -> Result<Option<Var>> {
    let mut total: Option<Var> = None;
    let mut add = |g: &mut Graph<T>, v: Var| -> Result<()> {
        total = Some(match total {
            None => v,
            Some(t) => g.add(t, v)?,
        });
        Ok(())
    };
    let chats: Vec<&ChatExample> = batch.iter().filter_map(|e| e.chat.as_ref()).collect();
    if denom.0 > 0 && !chats.is_empty() {
        let seqs: Vec<Vec<usize>> = chats.iter().map(|c| c.ids.clone()).collect();
        let padded = pad_and_mask(&seqs, usize::MAX, PAD_ID)?;
        let width = padded.width();
        let logits = model.forward(g, &padded.flat_ids(), padded.rows(), ctx)?;
        let v = model.config.vocab_size;
        let flat = g.reshape(logits, &[padded.rows() * width, v])?;
        let targets: Vec<i64> = chats.iter().flat_map(|c| lm_targets(c, width)).collect();
        if targets.iter().any(|&t| t >= 0) {
            let loss = g.cross_entropy_over(flat, &targets, -1, denom.0 as f64)?;
            add(g, loss)?;
        }
    }
    let spans: Vec<&EncodedRecord> = batch.iter().filter_map(|e| e.span.as_ref()).collect();
    if denom.1 > 0 && !spans.is_empty() {
        let seqs: Vec<Vec<usize>> = spans.iter().map(|s| s.token_ids.clone()).collect();
        let padded = pad_and_mask(&seqs, usize::MAX, PAD_ID)?;
        let (b, width) = (padded.rows(), padded.width());
        let (hidden, _) = model.forward_hidden(g, &padded.flat_ids(), b, ctx)?;
        let (start, end) = SpanHead::logits(model, g, hidden)?;
        let mut mask = vec![T::of(-1e9); b * width];
        for (r, s) in spans.iter().enumerate() {
            mask[r * width + s.context_offset..r * width + s.context_offset + s.context_len()].fill(T::zero());
        }
        let mask = g.constant(Tensor::new(vec![b, width], mask)?);
        // start and end each count half of an example's span loss
        let denom = 2.0 * denom.1 as f64;
        for (logits, pick) in [(start, true), (end, false)] {
            let masked = g.add(logits, mask)?;
            let targets: Vec<i64> = spans
                .iter()
                .map(|s| (s.context_offset + if pick { s.token_start } else { s.token_end }) as i64)
                .collect();
            let loss = g.cross_entropy_over(masked, &targets, -1, denom)?;
            add(g, loss)?;
        }
    }
    Ok(total)
}

/// One optimizer step over `group`, split into micro-batches of `batch_size`.
/// Every micro-batch loss is divided by the token count of the whole group, so
/// the accumulated gradient equals that of a single large batch.
pub fn optimizer_step<T: Scalar>(state: &mut TrainState<T>, group: &[&Example]) -> Result<f64> {
    let denom = group.iter().map(|e| loss_terms(e)).fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    let cfg = state.config.clone();
    state.model.params.zero_grad();
    let mut loss = 0.0;
    for (k, micro) in group.chunks(cfg.batch_size).enumerate() {
        let mut rng = derived_rng(cfg.seed, STREAM_DROPOUT, (state.step * cfg.accumulation_steps + k) as u64);
        let mut ctx = RunCtx::train(&mut rng);
        let mut g = Graph::new();
        let Some(l) = batch_loss(&state.model, &mut g, micro, denom, &mut ctx)? else {
            continue;
        };
        let value = g.value(l).item().as_f64();
        if !value.is_finite() {
            return Err(Error::Divergence {
                step: state.step,
                reason: format!("loss is {value} in micro-batch {k}"),
            });
        }
        loss += value;
        g.backward(l)?;
        g.accumulate_param_grads(&mut state.model.params);
    }
    let lr = lr_schedule(state.step, &cfg);
    state.optimizer.step(&mut state.model.params, lr);
    state.step += 1;
    Ok(loss)
}

/// Mean loss over `examples` without dropout.
pub fn eval_loss<T: Scalar>(model: &SsmModel<T>, examples: &[Example], batch_size: usize) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty dataset"));
    }
    let refs: Vec<&Example> = examples.iter().collect();
    let denom = refs.iter().map(|e| loss_terms(e)).fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    let mut total = 0.0;
    for chunk in refs.chunks(batch_size.max(1)) {
        let mut g = Graph::new();
        if let Some(l) = batch_loss(model, &mut g, chunk, denom, &mut RunCtx::eval())? {
            total += g.value(l).item().as_f64();
        }
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<serde_json::Value>,
}

/// Where training writes artifacts. Without an output directory no files are written.
#[derive(Debug, Clone, Default)]
pub struct TrainOutputs {
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainSummary {
    pub log: Vec<LogRecord>,
    /// Mean optimizer-step loss per epoch run in this call.
    pub epoch_losses: Vec<f64>,
    pub checkpoints: Vec<PathBuf>,
}

fn append_log(out: &TrainOutputs, rec: &LogRecord) -> Result<()> {
    let Some(dir) = &out.out_dir else { return Ok(()) };
    let path = dir.join("train_log.jsonl");
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| Error::at_path(&path, e))?;
    writeln!(f, "{}", serde_json::to_string(rec)?)?;
    Ok(())
}

fn checkpoint_at<T: Scalar>(state: &TrainState<T>, out: &TrainOutputs, name: &str, summary: &mut TrainSummary) -> Result<()> {
    if let Some(dir) = &out.out_dir {
        let path = dir.join(name);
        save_checkpoint(state, &path)?;
        summary.checkpoints.push(path);
    }
    Ok(())
}

fn maybe_eval<T: Scalar>(
    state: &mut TrainState<T>,
    eval: Option<&[Example]>,
    out: &TrainOutputs,
    summary: &mut TrainSummary,
) -> Result<Option<f64>> {
    let Some(eval) = eval.filter(|e| !e.is_empty()) else { return Ok(None) };
    let loss = eval_loss(&state.model, eval, state.config.batch_size)?;
    if state.best_eval_loss.map_or(true, |b| loss < b) {
        state.best_eval_loss = Some(loss);
        checkpoint_at(state, out, "best", summary)?;
    }
    Ok(Some(loss))
}

/// Runs the remaining epochs of `state.config` from the saved loop position.
pub fn train<T: Scalar>(
    state: &mut TrainState<T>,
    data: &[Example],
    eval: Option<&[Example]>,
    out: &TrainOutputs,
) -> Result<TrainSummary> {
    state.config.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if let Some(dir) = &out.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::at_path(dir, e))?;
    }
    let mut summary = TrainSummary::default();
    let start_step = state.step;
    let group_size = state.config.effective_batch();
    while state.epoch < state.config.epochs {
        let order = epoch_order(data.len(), state.config.seed, state.epoch);
        let mut losses = Vec::new();
        while state.cursor < order.len() {
            let end = (state.cursor + group_size).min(order.len());
            let group: Vec<&Example> = order[state.cursor..end].iter().map(|&i| &data[i]).collect();
            let lr = lr_schedule(state.step, &state.config);
            let loss = optimizer_step(state, &group)?;
            state.cursor = end;
            losses.push(loss);
            let mut rec = LogRecord {
                step: state.step,
                lr,
                loss,
                eval_loss: None,
                metrics: None,
            };
            if state.config.eval_interval > 0 && state.step % state.config.eval_interval == 0 {
                rec.eval_loss = maybe_eval(state, eval, out, &mut summary)?;
            }
            if state.step % state.config.checkpoint_interval == 0 {
                checkpoint_at(state, out, &format!("step-{}", state.step), &mut summary)?;
            }
            append_log(out, &rec)?;
            summary.log.push(rec);
        }
        state.epoch += 1;
        state.cursor = 0;
        if state.config.eval_interval == 0 {
            if let Some(l) = maybe_eval(state, eval, out, &mut summary)? {
                if let Some(last) = summary.log.last_mut() {
                    last.eval_loss = Some(l);
                }
            }
        }
        summary.epoch_losses.push(losses.iter().sum::<f64>() / losses.len().max(1) as f64);
    }
    if state.step > start_step && state.step % state.config.checkpoint_interval != 0 {
        checkpoint_at(state, out, "final", &mut summary)?;
    }
    Ok(summary)
}

/// Contextual token vectors from the model's final hidden states.
pub struct ModelEmbedder<'a, T: Scalar> {
    pub model: &'a SsmModel<T>,
    pub vocab: &'a Vocab,
}

impl<T: Scalar> TokenEmbedder for ModelEmbedder<'_, T> {
    fn embed(&self, tokens: &[String]) -> Vec<Vec<f64>> {
        if tokens.is_empty() {
            return Vec::new();
        }
        let ids: Vec<usize> = tokens
            .iter()
            .map(|t| self.vocab.id(t).unwrap_or(crate::tokenizer::UNK_ID))
            .collect();
        let d = self.model.config.d_model;
        let mut g = Graph::new();
        let Ok((h, _)) = self.model.forward_hidden(&mut g, &ids, 1, &mut RunCtx::eval()) else {
            return vec![vec![0.0; d]; tokens.len()];
        };
        g.value(h).data().chunks(d).map(|c| c.iter().map(|x| x.as_f64()).collect()).collect()
    }
}

/// How predictions are produced during evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Argmax span from the span head.
    Span,
    /// Greedy decoding after the chat prompt.
    Generate,
}

#[derive(Debug, Clone)]
pub struct EvalResult {
    pub report: MetricReport,
    pub loss: Option<f64>,
}

/// Scores every example with the five metrics. The embedding score uses
/// `embedder`, or the evaluated model's hidden states when `None`. Deterministic.
pub fn evaluate<T: Scalar>(
    model: &SsmModel<T>,
    examples: &[Example],
    vocab: &Vocab,
    template: &ChatTemplate,
    cfg: &TrainConfig,
    mode: EvalMode,
    embedder: Option<&dyn TokenEmbedder>,
) -> Result<EvalResult> {
    if examples.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty dataset"));
    }
    let own = ModelEmbedder { model, vocab };
    let scorer = Scorer::new(vocab, embedder.unwrap_or(&own));
    let mut rows = Vec::with_capacity(examples.len());
    for ex in examples {
        let r = &ex.record;
        let pred = match mode {
            EvalMode::Span => predict_span(model, r, vocab, cfg.max_seq_len, cfg.max_answer_tokens)?.text,
            EvalMode::Generate => {
                let budget = cfg.max_seq_len.min(model.config.max_seq_len).saturating_sub(cfg.max_new_tokens);
                let prompt = crate::dataset::build_chat_prompt(r, template, vocab, budget)?;
                let ids = generate_greedy(model, &prompt, cfg.max_new_tokens)?;
                vocab.decode(&ids, true)?.trim().to_string()
            }
        };
        rows.push(scorer.score(&r.id, r.lang.as_str(), &pred, &r.answer));
    }
    let has_targets = examples.iter().any(|e| match mode {
        EvalMode::Span => e.span.is_some(),
        EvalMode::Generate => e.chat.is_some(),
    });
    let loss = if has_targets { Some(eval_loss(model, examples, cfg.batch_size)?) } else { None };
    Ok(EvalResult {
        report: report(rows)?,
        loss,
    })
}

/// Writes `value` as pretty JSON.
pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::at_path(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_fixture() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_schedule(0, &cfg), 0.0);
        assert_eq!(lr_schedule(50, &cfg), 1e-4);
        assert_eq!(lr_schedule(100, &cfg), 2e-4);
        assert_eq!(lr_schedule(10_000, &cfg), 2e-4);
        let flat = TrainConfig {
            warmup_steps: 0,
            ..cfg
        };
        assert_eq!(lr_schedule(0, &flat), 2e-4);
    }

    #[test]
    fn presets() {
        let m = TrainConfig::preset("mamba").unwrap();
        assert_eq!((m.learning_rate, m.batch_size, m.effective_batch(), m.epochs, m.warmup_steps), (2e-4, 4, 32, 3, 100));
        assert!(TrainConfig::preset("falcon").unwrap().span_head);
        assert_eq!(TrainConfig::preset("jamba").unwrap().lora.rank, 16);
        assert_eq!(TrainConfig::preset("zamba").unwrap().max_seq_len, 4096);
        assert_eq!(TrainConfig::preset("samba").unwrap().effective_batch(), 64);
        assert_eq!(TrainConfig::preset("hymba").unwrap().learning_rate, 3e-4);
        for p in crate::ssm::PRESET_NAMES {
            assert_eq!(TrainConfig::preset(p).unwrap().checkpoint_interval, 500);
        }
    }

    #[test]
    fn epoch_orders_differ_but_repeat() {
        assert_eq!(epoch_order(50, 3, 1), epoch_order(50, 3, 1));
        assert_ne!(epoch_order(50, 3, 1), epoch_order(50, 3, 2));
    }
}
