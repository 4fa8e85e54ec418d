//! SQuAD-style records: ingestion, span alignment, batching, chat rendering and statistics.

mod align;
mod chat;
mod stats;
pub mod synth;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub use align::{align_span, encode_query, encode_record, pad_and_mask, strip_padding, EncodedRecord, PaddedBatch};
pub use chat::{build_chat_example, build_chat_prompt, ChatExample, ChatTemplate};
pub use stats::{compute_stats, pearson, DatasetStats, FeatureSummary, FEATURES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Lang {
    Hi,
    Mr,
    Other,
}

impl Lang {
    pub fn as_str(self) -> &'static str {
        match self {
            Lang::Hi => "hi",
            Lang::Mr => "mr",
            Lang::Other => "other",
        }
    }

    pub fn parse(s: &str) -> Option<Lang> {
        match s {
            "hi" => Some(Lang::Hi),
            "mr" => Some(Lang::Mr),
            "other" => Some(Lang::Other),
            _ => None,
        }
    }
}

impl fmt::Display for Lang {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One context/question/answer sample. `answer_start` counts Unicode scalar values.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaRecord {
    pub id: String,
    pub lang: Lang,
    pub context: String,
    pub question: String,
    pub answer: String,
    pub answer_start: usize,
}

impl QaRecord {
    /// Checks that the context slice at `answer_start` equals the answer.
    pub fn validate(&self) -> Result<()> {
        let fail = |reason: String| Error::Validation {
            id: self.id.clone(),
            reason,
        };
        let n_ctx = self.context.chars().count();
        let n_ans = self.answer.chars().count();
        if self.answer_start + n_ans > n_ctx {
            return Err(fail(format!(
                "answer_start {} + answer length {n_ans} exceeds context length {n_ctx}",
                self.answer_start
            )));
        }
        let slice: String = self.context.chars().skip(self.answer_start).take(n_ans).collect();
        if slice != self.answer {
            return Err(fail(format!(
                "context at {} reads {slice:?}, expected {:?}",
                self.answer_start, self.answer
            )));
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct Corpus<'a> {
    data: &'a [QaRecord],
}

fn parse_record(idx: usize, v: &Value) -> Result<QaRecord> {
    let id = v
        .get("id")
        .and_then(Value::as_str)
        .map(str::to_owned)
        .unwrap_or_else(|| format!("#{idx}"));
    let fail = |reason: String| Error::Validation { id: id.clone(), reason };
    let text = |key: &str| {
        v.get(key)
            .and_then(Value::as_str)
            .map(str::to_owned)
            .ok_or_else(|| fail(format!("missing or non-string field `{key}`")))
    };
    if v.get("id").and_then(Value::as_str).is_none() {
        return Err(fail("missing or non-string field `id`".into()));
    }
    let lang_s = text("lang")?;
    let lang = Lang::parse(&lang_s).ok_or_else(|| fail(format!("unknown language tag {lang_s:?}")))?;
    let answer_start = v
        .get("answer_start")
        .and_then(Value::as_u64)
        .ok_or_else(|| fail("missing or non-integer field `answer_start`".into()))? as usize;
    let rec = QaRecord {
        id: id.clone(),
        lang,
        context: text("context")?,
        question: text("question")?,
        answer: text("answer")?,
        answer_start,
    };
    rec.validate()?;
    Ok(rec)
}

/// Parses `{"data": [...]}` and validates every record.
pub fn parse_squad_style(json: &str) -> Result<Vec<QaRecord>> {
    let root: Value = serde_json::from_str(json)?;
    let data = root
        .get("data")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::invalid("top-level object must hold a `data` array"))?;
    data.iter().enumerate().map(|(i, v)| parse_record(i, v)).collect()
}

pub fn load_squad_style(path: &Path) -> Result<Vec<QaRecord>> {
    let bytes = std::fs::read(path).map_err(|e| Error::at_path(path, e))?;
    parse_squad_style(std::str::from_utf8(&bytes)?)
}

/// Canonical JSON form; loading it yields the same records.
pub fn to_squad_json(records: &[QaRecord]) -> Result<String> {
    Ok(serde_json::to_string_pretty(&Corpus { data: records })?)
}

pub fn save_squad_style(records: &[QaRecord], path: &Path) -> Result<()> {
    std::fs::write(path, to_squad_json(records)?).map_err(|e| Error::at_path(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Validation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub lang: Lang,
    pub split: Split,
    /// Declared number of records.
    pub count: usize,
    /// Data file relative to the manifest, when the split is present locally.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

/// Declares the splits that make up a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub splits: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::at_path(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn counts(&self) -> BTreeMap<(Lang, Split), usize> {
        self.splits.iter().map(|e| ((e.lang, e.split), e.count)).collect()
    }

    /// Loads every split with a data file and checks it against the declared count.
    pub fn load_splits(&self, base: &Path) -> Result<BTreeMap<(Lang, Split), Vec<QaRecord>>> {
        let mut out = BTreeMap::new();
        for e in &self.splits {
            let Some(rel) = &e.path else { continue };
            let records = load_squad_style(&base.join(rel))?;
            if records.len() != e.count {
                return Err(Error::Validation {
                    id: format!("{}/{:?}", e.lang, e.split),
                    reason: format!("manifest declares {} records, file holds {}", e.count, records.len()),
                });
            }
            if let Some(r) = records.iter().find(|r| r.lang != e.lang) {
                return Err(Error::Validation {
                    id: r.id.clone(),
                    reason: format!("language {} in a {} split", r.lang, e.lang),
                });
            }
            out.insert((e.lang, e.split), records);
        }
        Ok(out)
    }
}
