use crate::error::{Error, Result};
use crate::tokenizer::{TokenSpan, Vocab, EOS_ID, SOS_ID};

use super::QaRecord;

fn align_error(reason: String) -> Error {
    Error::Alignment {
        id: String::new(),
        reason,
    }
}

fn with_id(e: Error, id: &str) -> Error {
    match e {
        Error::Alignment { reason, .. } => Error::Alignment {
            id: id.to_string(),
            reason,
        },
        other => other,
    }
}

/// Smallest token range `[start, end]` whose characters cover the answer.
fn align_spans(spans: &[TokenSpan], start: usize, len: usize, total_chars: usize) -> Result<(usize, usize)> {
    if len == 0 {
        return Err(align_error("empty answer has no token span".into()));
    }
    let end = start + len;
    if end > total_chars {
        return Err(Error::invalid(format!(
            "answer range {start}..{end} lies outside a context of {total_chars} characters"
        )));
    }
    let first = spans.partition_point(|t| t.char_end <= start);
    let last = spans.partition_point(|t| t.char_start < end) - 1;
    Ok((first, last))
}

/// Inclusive token span of the answer inside the tokenized context.
pub fn align_span(context: &str, answer: &str, answer_start: usize, vocab: &Vocab) -> Result<(usize, usize)> {
    let spans = vocab.encode_with_offsets(context);
    let n_chars = context.chars().count();
    let (s, e) = align_spans(&spans, answer_start, answer.chars().count(), n_chars)?;
    check_reconstructs(&spans, s, e, answer, vocab)?;
    Ok((s, e))
}

fn check_reconstructs(spans: &[TokenSpan], s: usize, e: usize, answer: &str, vocab: &Vocab) -> Result<()> {
    let ids: Vec<usize> = spans[s..=e].iter().map(|t| t.id).collect();
    let text = vocab.decode(&ids, true)?;
    if !text.contains(answer) {
        return Err(align_error(format!(
            "tokens {s}..={e} {ids:?} decode to {text:?}, which does not contain {answer:?}"
        )));
    }
    Ok(())
}

/// Model input for span prediction: `<sos> question <eos> context <eos>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedRecord {
    pub token_ids: Vec<usize>,
    /// Index of the first context token in `token_ids`.
    pub context_offset: usize,
    /// Character range in the original context of each kept context token.
    pub context_chars: Vec<(usize, usize)>,
    /// Answer span relative to the kept context tokens.
    pub token_start: usize,
    pub token_end: usize,
    pub attention_mask: Vec<u8>,
}

impl EncodedRecord {
    pub fn context_len(&self) -> usize {
        self.context_chars.len()
    }

    /// Character range covered by a predicted token span.
    pub fn char_range(&self, start: usize, end: usize) -> Option<(usize, usize)> {
        let (s, _) = *self.context_chars.get(start)?;
        let (_, e) = *self.context_chars.get(end)?;
        (s <= e).then_some((s, e))
    }
}

/// Encodes a record for span prediction, trimming context tokens to fit
/// `max_len`: first from the left up to the answer, then from the right.
pub fn encode_record(rec: &QaRecord, vocab: &Vocab, max_len: usize) -> Result<EncodedRecord> {
    let spans = vocab.encode_with_offsets(&rec.context);
    let n_chars = rec.context.chars().count();
    let (s, e) = align_spans(&spans, rec.answer_start, rec.answer.chars().count(), n_chars)
        .map_err(|err| with_id(err, &rec.id))?;
    check_reconstructs(&spans, s, e, &rec.answer, vocab).map_err(|err| with_id(err, &rec.id))?;
    let question = vocab.encode(&rec.question, false);
    let fixed = question.len() + 3;
    let budget = max_len.saturating_sub(fixed);
    if budget < e - s + 1 {
        return Err(Error::invalid(format!(
            "record {}: question and answer need {} tokens, max_len is {max_len}",
            rec.id,
            fixed + e - s + 1
        )));
    }
    let lo = spans.len().saturating_sub(budget).min(s);
    let hi = spans.len().min(lo + budget);
    let mut token_ids = Vec::with_capacity(fixed + hi - lo);
    token_ids.push(SOS_ID);
    token_ids.extend(&question);
    token_ids.push(EOS_ID);
    let context_offset = token_ids.len();
    token_ids.extend(spans[lo..hi].iter().map(|t| t.id));
    token_ids.push(EOS_ID);
    let n = token_ids.len();
    Ok(EncodedRecord {
        token_ids,
        context_offset,
        context_chars: spans[lo..hi].iter().map(|t| (t.char_start, t.char_end)).collect(),
        token_start: s - lo,
        token_end: e - lo,
        attention_mask: vec![1; n],
    })
}

/// Encodes a question and context for inference, without a gold answer.
/// Context tokens beyond `max_len` are dropped from the right; the span fields are 0.
pub fn encode_query(question: &str, context: &str, vocab: &Vocab, max_len: usize) -> Result<EncodedRecord> {
    let question = vocab.encode(question, false);
    let fixed = question.len() + 3;
    if fixed >= max_len {
        return Err(Error::invalid(format!(
            "the question needs {fixed} tokens, leaving no room for context under max_len {max_len}"
        )));
    }
    let spans = vocab.encode_with_offsets(context);
    let kept = &spans[..spans.len().min(max_len - fixed)];
    let mut token_ids = Vec::with_capacity(fixed + kept.len());
    token_ids.push(SOS_ID);
    token_ids.extend(&question);
    token_ids.push(EOS_ID);
    let context_offset = token_ids.len();
    token_ids.extend(kept.iter().map(|t| t.id));
    token_ids.push(EOS_ID);
    let n = token_ids.len();
    Ok(EncodedRecord {
        token_ids,
        context_offset,
        context_chars: kept.iter().map(|t| (t.char_start, t.char_end)).collect(),
        token_start: 0,
        token_end: 0,
        attention_mask: vec![1; n],
    })
}

/// Right-padded, equal-length rows with a 0/1 mask.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PaddedBatch {
    pub ids: Vec<Vec<usize>>,
    pub mask: Vec<Vec<u8>>,
}

impl PaddedBatch {
    pub fn rows(&self) -> usize {
        self.ids.len()
    }

    pub fn width(&self) -> usize {
        self.ids.first().map_or(0, Vec::len)
    }

    pub fn flat_ids(&self) -> Vec<usize> {
        self.ids.concat()
    }
}

/// Pads every sequence on the right to the longest length (at most `max_len`).
/// Longer sequences keep their last `max_len` tokens.
pub fn pad_and_mask(sequences: &[Vec<usize>], max_len: usize, pad_id: usize) -> Result<PaddedBatch> {
    if max_len < 1 {
        return Err(Error::invalid("max_len must be at least 1"));
    }
    let width = sequences.iter().map(|s| s.len().min(max_len)).max().unwrap_or(0);
    let mut out = PaddedBatch::default();
    for seq in sequences {
        let kept = &seq[seq.len().saturating_sub(max_len)..];
        let mut ids = kept.to_vec();
        let mut mask = vec![1u8; kept.len()];
        ids.resize(width, pad_id);
        mask.resize(width, 0);
        out.ids.push(ids);
        out.mask.push(mask);
    }
    Ok(out)
}

/// Inverse of [`pad_and_mask`] for sequences that were not truncated.
pub fn strip_padding(batch: &PaddedBatch) -> Vec<Vec<usize>> {
    batch
        .ids
        .iter()
        .zip(&batch.mask)
        .map(|(ids, m)| ids.iter().zip(m).filter(|(_, &k)| k == 1).map(|(&i, _)| i).collect())
        .collect()
}
