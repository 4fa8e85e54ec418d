use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::{Vocab, EOS_ID, SOS_ID};

use super::{align_span, QaRecord};

/// Role messages with `{context}`, `{question}` and `{answer}` placeholders.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatTemplate {
    pub system: String,
    pub user: String,
    pub assistant: String,
}

impl Default for ChatTemplate {
    fn default() -> Self {
        ChatTemplate {
            system: "आप एक सहायक हैं जो दिए गए संदर्भ के आधार पर प्रश्नों के उत्तर देते हैं।".into(),
            user: "संदर्भ: {context}\nप्रश्न: {question}".into(),
            assistant: "उत्तर: {answer}".into(),
        }
    }
}

impl ChatTemplate {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::at_path(path, e))?;
        let t: ChatTemplate = serde_json::from_str(&text)?;
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        for (role, text, slots) in [
            ("user", &self.user, &["{context}", "{question}"][..]),
            ("assistant", &self.assistant, &["{answer}"][..]),
        ] {
            for slot in slots {
                if text.matches(slot).count() != 1 {
                    return Err(Error::invalid(format!(
                        "{role} message must contain {slot} exactly once"
                    )));
                }
            }
        }
        if self.system.contains('{') && self.system.contains('}') {
            return Err(Error::invalid("system message takes no placeholders"));
        }
        Ok(())
    }

    /// Literal template text, for inclusion in vocabulary training.
    pub fn literal_text(&self) -> Vec<String> {
        let strip = |s: &str| {
            ["{context}", "{question}", "{answer}"]
                .iter()
                .fold(s.to_string(), |acc, p| acc.replace(p, " "))
        };
        vec![self.system.clone(), strip(&self.user), strip(&self.assistant)]
    }
}

/// Rendered training sequence. `loss_mask` is 1 on the answer, the text that
/// follows it in the assistant message, and the closing `<eos>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChatExample {
    pub ids: Vec<usize>,
    pub loss_mask: Vec<u8>,
    /// Length of the prompt, i.e. the index of the first answer token.
    pub prompt_len: usize,
}

struct Parts {
    head: Vec<usize>,
    context: Vec<usize>,
    tail: Vec<usize>,
    answer: Vec<usize>,
}

fn render(rec: &QaRecord, t: &ChatTemplate, vocab: &Vocab) -> Result<Parts> {
    t.validate()?;
    let enc = |s: &str| vocab.encode(s, false);
    let (user_pre, user_post) = t.user.split_once("{context}").expect("validated");
    let (asst_pre, asst_post) = t.assistant.split_once("{answer}").expect("validated");
    let mut head = vec![SOS_ID];
    head.extend(enc(&t.system));
    head.push(EOS_ID);
    head.extend(enc(&user_pre.replace("{question}", &rec.question)));
    let mut tail = enc(&user_post.replace("{question}", &rec.question));
    tail.push(EOS_ID);
    tail.extend(enc(asst_pre));
    let mut answer = enc(&rec.answer);
    answer.extend(enc(asst_post));
    answer.push(EOS_ID);
    Ok(Parts {
        head,
        context: enc(&rec.context),
        tail,
        answer,
    })
}

/// Context tokens kept under `budget`: drop from the left, never past the
/// answer's first token, then from the right.
fn context_window(rec: &QaRecord, vocab: &Vocab, n: usize, budget: usize) -> (usize, usize) {
    if n <= budget {
        return (0, n);
    }
    let lo = match align_span(&rec.context, &rec.answer, rec.answer_start, vocab) {
        Ok((s, e)) if e - s < budget => (n - budget).min(s),
        _ => n - budget,
    };
    (lo, lo + budget)
}

fn assemble(rec: &QaRecord, t: &ChatTemplate, vocab: &Vocab, max_len: usize, with_answer: bool) -> Result<ChatExample> {
    let p = render(rec, t, vocab)?;
    let answer_len = if with_answer { p.answer.len() } else { 0 };
    let fixed = p.head.len() + p.tail.len() + answer_len;
    if fixed > max_len {
        return Err(Error::invalid(format!(
            "record {}: question and answer need {fixed} tokens, max_len is {max_len}",
            rec.id
        )));
    }
    let (lo, hi) = context_window(rec, vocab, p.context.len(), max_len - fixed);
    let mut ids = p.head;
    ids.extend(&p.context[lo..hi]);
    ids.extend(p.tail);
    let prompt_len = ids.len();
    let mut loss_mask = vec![0u8; prompt_len];
    if with_answer {
        ids.extend(p.answer);
        loss_mask.resize(ids.len(), 1);
    }
    Ok(ChatExample {
        ids,
        loss_mask,
        prompt_len,
    })
}

pub fn build_chat_example(rec: &QaRecord, template: &ChatTemplate, vocab: &Vocab, max_len: usize) -> Result<ChatExample> {
    assemble(rec, template, vocab, max_len, true)
}

/// The prompt alone, ending where the answer should begin.
pub fn build_chat_prompt(rec: &QaRecord, template: &ChatTemplate, vocab: &Vocab, max_len: usize) -> Result<Vec<usize>> {
    Ok(assemble(rec, template, vocab, max_len, false)?.ids)
}
