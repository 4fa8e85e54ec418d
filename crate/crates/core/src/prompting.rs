//! Zero/one/few-shot prompt rendering, sampled generation and best-of-P
//! answer selection, plus span inference for models with a span head.

use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::dataset::{encode_query, QaRecord};
use crate::error::{Error, Result};
use crate::metrics::{token_f1, WhitespaceTokenizer};
use crate::ssm::{RunCtx, SsmModel};
use crate::tensor::Scalar;
use crate::tokenizer::{Vocab, EOS_ID};
use crate::trainer::{best_span, derived_rng, SpanHead};

const SLOTS: [&str; 5] = ["system", "context", "question", "answer", "examples"];

/// Prompt layout with `{name}` placeholders.
///
/// `example` is rendered once per shot with `{context}`, `{question}` and
/// `{answer}`, each block followed by `separator`. `prompt` is the whole
/// prompt and receives `{system}`, `{examples}`, `{context}` and `{question}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub system: String,
    pub example: String,
    pub prompt: String,
    pub separator: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate {
            system: "नीचे दिए गए परिदृश्य को पढ़ें और प्रश्न का उत्तर दें।".into(),
            example: "परिदृश्य: {context}\nप्रश्न: {question}\nउत्तर: {answer}".into(),
            prompt: "{system}\n\n{examples}परिदृश्य: {context}\nप्रश्न: {question}\nउत्तर:".into(),
            separator: "\n\n".into(),
        }
    }
}

/// A template piece: literal text or a placeholder name.
#[derive(Debug, Clone, PartialEq, Eq)]
enum Piece<'a> {
    Text(&'a str),
    Slot(&'a str),
}

fn pieces(template: &str) -> Vec<Piece<'_>> {
    let mut out = Vec::new();
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        let Some(len) = rest[open..].find('}') else { break };
        let name = &rest[open + 1..open + len];
        if SLOTS.contains(&name) {
            if open > 0 {
                out.push(Piece::Text(&rest[..open]));
            }
            out.push(Piece::Slot(name));
        } else {
            out.push(Piece::Text(&rest[..open + len + 1]));
        }
        rest = &rest[open + len + 1..];
    }
    if !rest.is_empty() {
        out.push(Piece::Text(rest));
    }
    out
}

/// Single-pass substitution, so placeholder-like text inside values stays literal.
fn fill(template: &str, values: &[(&str, &str)]) -> Result<String> {
    let mut out = String::with_capacity(template.len());
    for p in pieces(template) {
        match p {
            Piece::Text(t) => out.push_str(t),
            Piece::Slot(name) => {
                let v = values
                    .iter()
                    .find(|(k, _)| *k == name)
                    .ok_or_else(|| Error::invalid(format!("no value for placeholder {{{name}}}")))?;
                out.push_str(v.1);
            }
        }
    }
    Ok(out)
}

fn slot_count(template: &str, name: &str) -> usize {
    pieces(template).iter().filter(|p| **p == Piece::Slot(name)).count()
}

impl PromptTemplate {
    /// Parses sections headed by `[system]`, `[example]`, `[prompt]` and
    /// optionally `[separator]`, in which `\n` stands for a newline.
    pub fn parse(text: &str) -> Result<Self> {
        let mut sections: Vec<(String, String)> = Vec::new();
        for line in text.lines() {
            let trimmed = line.trim();
            if trimmed.starts_with('[') && trimmed.ends_with(']') && trimmed.len() > 2 {
                sections.push((trimmed[1..trimmed.len() - 1].to_string(), String::new()));
            } else if let Some((_, body)) = sections.last_mut() {
                if !body.is_empty() {
                    body.push('\n');
                }
                body.push_str(line);
            } else if !trimmed.is_empty() {
                return Err(Error::invalid("prompt template text before the first [section]"));
            }
        }
        let get = |name: &str| -> Result<String> {
            let mut found = sections.iter().filter(|(k, _)| k == name);
            match (found.next(), found.next()) {
                (Some((_, v)), None) => Ok(v.trim_end_matches('\n').to_string()),
                (None, _) => Err(Error::invalid(format!("prompt template lacks a [{name}] section"))),
                (Some(_), Some(_)) => Err(Error::invalid(format!("prompt template repeats [{name}]"))),
            }
        };
        if let Some((k, _)) = sections
            .iter()
            .find(|(k, _)| !["system", "example", "prompt", "separator"].contains(&k.as_str()))
        {
            return Err(Error::invalid(format!("unknown prompt template section [{k}]")));
        }
        let separator = match get("separator") {
            Ok(s) => s.trim().replace("\\n", "\n"),
            Err(_) => PromptTemplate::default().separator,
        };
        let t = PromptTemplate {
            system: get("system")?,
            example: get("example")?,
            prompt: get("prompt")?,
            separator,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::at_path(path, e))?;
        Self::parse(&text)
    }

    /// Serialises to the format read by [`PromptTemplate::parse`].
    pub fn to_text(&self) -> String {
        format!(
            "[system]\n{}\n[example]\n{}\n[prompt]\n{}\n[separator]\n{}\n",
            self.system,
            self.example,
            self.prompt,
            self.separator.replace('\n', "\\n")
        )
    }

    pub fn validate(&self) -> Result<()> {
        for slot in ["context", "question", "answer"] {
            if slot_count(&self.example, slot) != 1 {
                return Err(Error::invalid(format!("example block must contain {{{slot}}} exactly once")));
            }
        }
        for slot in ["context", "question"] {
            if slot_count(&self.prompt, slot) != 1 {
                return Err(Error::invalid(format!("prompt must contain {{{slot}}} exactly once")));
            }
        }
        for slot in ["system", "examples"] {
            if slot_count(&self.prompt, slot) > 1 {
                return Err(Error::invalid(format!("prompt contains {{{slot}}} more than once")));
            }
        }
        if slot_count(&self.prompt, "answer") > 0 {
            return Err(Error::invalid("the prompt must not contain {answer}"));
        }
        if pieces(&self.system).iter().any(|p| matches!(p, Piece::Slot(_))) {
            return Err(Error::invalid("the system message takes no placeholders"));
        }
        Ok(())
    }

    /// Number of example blocks the prompt can hold.
    pub fn capacity(&self) -> usize {
        if slot_count(&self.prompt, "examples") == 1 {
            usize::MAX
        } else {
            0
        }
    }

    /// Literal non-blank fragments that frame inserted text.
    pub fn delimiters(&self) -> Vec<String> {
        let mut out: Vec<String> = [&self.example, &self.prompt]
            .iter()
            .flat_map(|t| pieces(t))
            .filter_map(|p| match p {
                Piece::Text(t) => Some(t.trim().to_string()),
                Piece::Slot(_) => None,
            })
            .filter(|t| !t.is_empty())
            .collect();
        out.sort();
        out.dedup();
        out
    }

    /// Fails if any delimiter occurs inside corpus text, which would make
    /// rendered prompts ambiguous.
    pub fn check_corpus<'a>(&self, texts: impl IntoIterator<Item = &'a str>) -> Result<()> {
        let delims = self.delimiters();
        for text in texts {
            if let Some(d) = delims.iter().find(|d| text.contains(d.as_str())) {
                return Err(Error::invalid(format!(
                    "template delimiter {d:?} occurs in corpus text {text:?}"
                )));
            }
        }
        Ok(())
    }
}

/// Renders the prompt for `record` with `examples` as worked shots, in order.
pub fn render_prompt(template: &PromptTemplate, record: &QaRecord, examples: &[QaRecord]) -> Result<String> {
    render_query(template, &record.question, &record.context, examples)
}

pub fn render_query(template: &PromptTemplate, question: &str, context: &str, examples: &[QaRecord]) -> Result<String> {
    template.validate()?;
    if examples.len() > template.capacity() {
        return Err(Error::invalid(format!(
            "{} examples given but the prompt has no {{examples}} slot",
            examples.len()
        )));
    }
    let mut shots = String::new();
    for ex in examples {
        shots.push_str(&fill(
            &template.example,
            &[("context", &ex.context), ("question", &ex.question), ("answer", &ex.answer)],
        )?);
        shots.push_str(&template.separator);
    }
    fill(
        &template.prompt,
        &[
            ("system", &template.system),
            ("examples", &shots),
            ("context", context),
            ("question", question),
        ],
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    /// Number of sampled candidates.
    pub samples: usize,
    /// 0 decodes greedily.
    pub temperature: f64,
    pub max_tokens: usize,
    /// Weight of the likelihood term against candidate agreement.
    pub lambda: f64,
    pub seed: u64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            samples: 1,
            temperature: 0.0,
            max_tokens: 32,
            lambda: 0.5,
            seed: 0,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples < 1 {
            return Err(Error::invalid("at least one sample is required"));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::invalid(format!("lambda must lie in [0, 1], got {}", self.lambda)));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(Error::invalid("temperature must be finite and non-negative"));
        }
        if self.max_tokens < 1 {
            return Err(Error::invalid("max_tokens must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    /// Generated ids without the closing `<eos>`.
    pub ids: Vec<usize>,
    pub text: String,
}

/// Next-token log-probabilities after every prefix of `ids`, as `[T][V]`.
fn log_probs<T: Scalar>(model: &SsmModel<T>, ids: &[usize], last_only: bool) -> Result<Vec<Vec<f64>>> {
    let mut g = Graph::new();
    let (hidden, table) = model.forward_hidden(&mut g, ids, 1, &mut RunCtx::eval())?;
    let d = model.config.d_model;
    let h = g.value(hidden).data();
    let e = g.value(table).data();
    let rows = if last_only { ids.len() - 1..ids.len() } else { 0..ids.len() };
    Ok(rows
        .map(|t| {
            let x = &h[t * d..(t + 1) * d];
            let logits: Vec<f64> = e
                .chunks(d)
                .map(|row| row.iter().zip(x).map(|(a, b)| a.as_f64() * b.as_f64()).sum())
                .collect();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
            logits.into_iter().map(|l| l - lse).collect()
        })
        .collect())
}

fn pick(lp: &[f64], temperature: f64, rng: &mut impl Rng) -> usize {
    if temperature == 0.0 {
        let mut best = 0;
        for (i, &v) in lp.iter().enumerate() {
            if v > lp[best] {
                best = i;
            }
        }
        return best;
    }
    let max = lp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = lp.iter().map(|l| ((l - max) / temperature).exp()).collect();
    let mut u = rng.gen::<f64>() * weights.iter().sum::<f64>();
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

fn check_fits<T: Scalar>(model: &SsmModel<T>, prompt: &[usize], max_tokens: usize) -> Result<()> {
    if prompt.is_empty() {
        return Err(Error::invalid("the prompt is empty"));
    }
    if prompt.len() + max_tokens > model.config.max_seq_len {
        return Err(Error::invalid(format!(
            "prompt of {} tokens plus {max_tokens} new tokens exceeds max_seq_len {}",
            prompt.len(),
            model.config.max_seq_len
        )));
    }
    Ok(())
}

fn continue_from<T: Scalar>(
    model: &SsmModel<T>,
    prompt: &[usize],
    max_tokens: usize,
    temperature: f64,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    let mut seq = prompt.to_vec();
    let mut out = Vec::new();
    while out.len() < max_tokens {
        let lp = log_probs(model, &seq, true)?;
        let next = pick(&lp[0], temperature, rng);
        if next == EOS_ID {
            break;
        }
        seq.push(next);
        out.push(next);
    }
    Ok(out)
}

/// Greedy continuation of `prompt`, stopping at `<eos>` or `max_tokens`.
pub fn generate_greedy<T: Scalar>(model: &SsmModel<T>, prompt: &[usize], max_tokens: usize) -> Result<Vec<usize>> {
    check_fits(model, prompt, max_tokens)?;
    continue_from(model, prompt, max_tokens, 0.0, &mut derived_rng(0, 0, 0))
}

const STREAM_SAMPLING: u64 = 3;

/// `cfg.samples` continuations of `prompt`. Candidate `c` draws from its own
/// stream derived from `(cfg.seed, c)`, so results do not depend on scheduling.
pub fn generate<T: Scalar>(model: &SsmModel<T>, vocab: &Vocab, prompt: &[usize], cfg: &SelectionConfig) -> Result<Vec<Candidate>> {
    cfg.validate()?;
    check_fits(model, prompt, cfg.max_tokens)?;
    let run = |c: usize| -> Result<Candidate> {
        let mut rng = derived_rng(cfg.seed, STREAM_SAMPLING, c as u64);
        let ids = continue_from(model, prompt, cfg.max_tokens, cfg.temperature, &mut rng)?;
        let text = vocab.decode(&ids, true)?.trim().to_string();
        Ok(Candidate { ids, text })
    };
    if cfg.temperature == 0.0 {
        let c = run(0)?;
        return Ok(vec![c; cfg.samples]);
    }
    (0..cfg.samples).into_par_iter().map(run).collect()
}

/// Mean log-probability of `candidate` followed by `<eos>` given `prompt`.
pub fn normalized_log_likelihood<T: Scalar>(model: &SsmModel<T>, prompt: &[usize], candidate: &[usize]) -> Result<f64> {
    let mut seq = prompt.to_vec();
    seq.extend(candidate);
    seq.push(EOS_ID);
    let lp = log_probs(model, &seq[..seq.len() - 1], false)?;
    let n = candidate.len() + 1;
    let total: f64 = (0..n).map(|k| lp[prompt.len() - 1 + k][seq[prompt.len() + k]]).sum();
    Ok(total / n as f64)
}

/// Mean token F1 of each text against all the others; 1 for a lone candidate.
pub fn agreement(texts: &[&str]) -> Vec<f64> {
    let n = texts.len();
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| j != i)
                .map(|j| token_f1(texts[i], texts[j], &WhitespaceTokenizer))
                .sum::<f64>()
                / (n - 1) as f64
        })
        .collect()
}

/// `λ·exp(mean log-prob) + (1 − λ)·agreement` per candidate.
pub fn selection_scores(mean_log_probs: &[f64], agreement: &[f64], lambda: f64) -> Vec<f64> {
    mean_log_probs
        .iter()
        .zip(agreement)
        .map(|(lp, a)| lambda * lp.exp() + (1.0 - lambda) * a)
        .collect()
}

/// Index of the highest score; ties go to the lowest index.
pub fn argmax_first(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub index: usize,
    pub answer: String,
    pub score: f64,
    pub scores: Vec<f64>,
}

/// Picks the candidate with the best mix of likelihood and agreement.
pub fn select_best<T: Scalar>(
    candidates: &[Candidate],
    model: &SsmModel<T>,
    prompt: &[usize],
    cfg: &SelectionConfig,
) -> Result<Selection> {
    cfg.validate()?;
    if candidates.is_empty() {
        return Err(Error::invalid("selection needs at least one candidate"));
    }
    let texts: Vec<&str> = candidates.iter().map(|c| c.text.as_str()).collect();
    let agree = agreement(&texts);
    let lps = if cfg.lambda > 0.0 {
        candidates
            .par_iter()
            .map(|c| normalized_log_likelihood(model, prompt, &c.ids))
            .collect::<Result<Vec<_>>>()?
    } else {
        vec![0.0; candidates.len()]
    };
    let scores = selection_scores(&lps, &agree, cfg.lambda);
    let index = argmax_first(&scores);
    Ok(Selection {
        index,
        answer: candidates[index].text.clone(),
        score: scores[index],
        scores,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpanPrediction {
    /// Inclusive token span within the kept context tokens.
    pub token_start: usize,
    pub token_end: usize,
    /// Character range in the context.
    pub char_start: usize,
    pub char_end: usize,
    pub text: String,
    pub score: f64,
}

/// Best-scoring answer span for a question over a context.
pub fn predict_span_query<T: Scalar>(
    model: &SsmModel<T>,
    question: &str,
    context: &str,
    vocab: &Vocab,
    max_len: usize,
    max_answer_tokens: usize,
) -> Result<SpanPrediction> {
    if !SpanHead::present(model) {
        return Err(Error::invalid("the model has no span head"));
    }
    let enc = encode_query(question, context, vocab, max_len.min(model.config.max_seq_len))?;
    if enc.context_len() == 0 {
        return Err(Error::invalid("the context is empty"));
    }
    let mut g = Graph::new();
    let (hidden, _) = model.forward_hidden(&mut g, &enc.token_ids, 1, &mut RunCtx::eval())?;
    let (s, e) = SpanHead::logits(model, &mut g, hidden)?;
    let range = enc.context_offset..enc.context_offset + enc.context_len();
    let start: Vec<f64> = g.value(s).data()[range.clone()].iter().map(|v| v.as_f64()).collect();
    let end: Vec<f64> = g.value(e).data()[range].iter().map(|v| v.as_f64()).collect();
    let (i, j, score) = best_span(&start, &end, max_answer_tokens)?;
    let (cs, ce) = enc.char_range(i, j).expect("best_span stays inside the context");
    Ok(SpanPrediction {
        token_start: i,
        token_end: j,
        char_start: cs,
        char_end: ce,
        text: context.chars().skip(cs).take(ce - cs).collect(),
        score,
    })
}

pub fn predict_span<T: Scalar>(
    model: &SsmModel<T>,
    record: &QaRecord,
    vocab: &Vocab,
    max_len: usize,
    max_answer_tokens: usize,
) -> Result<SpanPrediction> {
    predict_span_query(model, &record.question, &record.context, vocab, max_len, max_answer_tokens)
}
