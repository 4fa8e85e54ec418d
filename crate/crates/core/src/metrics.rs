//! Answer-quality metrics: exact match, token F1, BLEU, ROUGE-L/N and an
//! embedding-similarity score, plus per-language reports.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};
use crate::tokenizer::{Vocab, UNK_ID};

/// NFC, drop ASCII punctuation, collapse whitespace, strip trailing dandas.
pub fn normalize(text: &str) -> String {
    let nfc: String = text.nfc().filter(|c| !c.is_ascii_punctuation()).collect();
    let collapsed = nfc.split_whitespace().collect::<Vec<_>>().join(" ");
    let trimmed = collapsed.trim_end_matches(|c: char| c == '।' || c == '॥' || c.is_whitespace());
    trimmed.nfc().collect()
}

pub fn exact_match(pred: &str, gold: &str) -> f64 {
    if normalize(pred) == normalize(gold) {
        1.0
    } else {
        0.0
    }
}

/// Splits already-normalized text into metric tokens.
pub trait TextTokenizer {
    fn tokens(&self, text: &str) -> Vec<String>;
}

pub struct WhitespaceTokenizer;

impl TextTokenizer for WhitespaceTokenizer {
    fn tokens(&self, text: &str) -> Vec<String> {
        text.split_whitespace().map(str::to_owned).collect()
    }
}

/// Vocabulary pieces with spaces dropped; unknown tokens keep their source text.
impl TextTokenizer for Vocab {
    fn tokens(&self, text: &str) -> Vec<String> {
        let chars: Vec<char> = text.chars().collect();
        self.encode_with_offsets(text)
            .into_iter()
            .filter_map(|t| {
                let s: String = if t.id == UNK_ID {
                    chars[t.char_start..t.char_end].iter().collect()
                } else {
                    self.piece(t.id)?.to_owned()
                };
                (!s.trim().is_empty()).then_some(s)
            })
            .collect()
    }
}

fn counts<'a>(items: impl IntoIterator<Item = &'a [String]>) -> HashMap<&'a [String], usize> {
    let mut m = HashMap::new();
    for it in items {
        *m.entry(it).or_insert(0) += 1;
    }
    m
}

fn overlap(pred: &[String], gold: &[String], n: usize) -> usize {
    let g = counts(gold.windows(n));
    counts(pred.windows(n))
        .into_iter()
        .map(|(k, c)| c.min(g.get(k).copied().unwrap_or(0)))
        .sum()
}

fn f_measure(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Multiset token F1. Both empty scores 1; one empty scores 0.
pub fn token_f1_tokens(pred: &[String], gold: &[String]) -> f64 {
    match (pred.is_empty(), gold.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let common = overlap(pred, gold, 1) as f64;
    f_measure(common / pred.len() as f64, common / gold.len() as f64)
}

pub fn token_f1(pred: &str, gold: &str, tok: &dyn TextTokenizer) -> f64 {
    token_f1_tokens(&tok.tokens(&normalize(pred)), &tok.tokens(&normalize(gold)))
}

/// Geometric mean of clipped n-gram precisions for `n = 1..=min(n_max, |pred|)`
/// times the brevity penalty. No smoothing.
pub fn bleu_tokens(pred: &[String], gold: &[String], n_max: usize) -> f64 {
    if pred.is_empty() || n_max == 0 {
        return 0.0;
    }
    let top = n_max.min(pred.len());
    let mut log_sum = 0.0;
    for n in 1..=top {
        let total = pred.len() + 1 - n;
        let hit = overlap(pred, gold, n);
        if hit == 0 {
            return 0.0;
        }
        log_sum += (hit as f64 / total as f64).ln();
    }
    let bp = (1.0 - gold.len() as f64 / pred.len() as f64).exp().min(1.0);
    bp * (log_sum / top as f64).exp()
}

pub fn bleu(pred: &str, gold: &str, n_max: usize, tok: &dyn TextTokenizer) -> f64 {
    bleu_tokens(&tok.tokens(&normalize(pred)), &tok.tokens(&normalize(gold)), n_max)
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

pub fn rouge_l_tokens(pred: &[String], gold: &[String]) -> f64 {
    if pred.is_empty() || gold.is_empty() {
        return 0.0;
    }
    let l = lcs(pred, gold) as f64;
    f_measure(l / pred.len() as f64, l / gold.len() as f64)
}

pub fn rouge_l(pred: &str, gold: &str, tok: &dyn TextTokenizer) -> f64 {
    rouge_l_tokens(&tok.tokens(&normalize(pred)), &tok.tokens(&normalize(gold)))
}

/// ROUGE-N F-measure on clipped n-gram overlap.
pub fn rouge_n_tokens(pred: &[String], gold: &[String], n: usize) -> f64 {
    if n == 0 || pred.len() < n || gold.len() < n {
        return 0.0;
    }
    let hit = overlap(pred, gold, n) as f64;
    f_measure(hit / (pred.len() + 1 - n) as f64, hit / (gold.len() + 1 - n) as f64)
}

/// Produces one vector per metric token.
pub trait TokenEmbedder {
    fn embed(&self, tokens: &[String]) -> Vec<Vec<f64>>;
}

/// Hashed one-hot vectors: distinct tokens are orthogonal unless their
/// hashes collide in `ONE_HOT_DIM` buckets.
pub struct OneHotEmbedder;

pub const ONE_HOT_DIM: usize = 4096;

impl TokenEmbedder for OneHotEmbedder {
    fn embed(&self, tokens: &[String]) -> Vec<Vec<f64>> {
        tokens
            .iter()
            .map(|t| {
                let h = t
                    .bytes()
                    .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
                let mut v = vec![0.0; ONE_HOT_DIM];
                v[(h % ONE_HOT_DIM as u64) as usize] = 1.0;
                v
            })
            .collect()
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(0.0, 1.0)
    }
}

/// Greedy-matching similarity over precomputed token vectors.
pub fn embed_score_vectors(pred: &[Vec<f64>], gold: &[Vec<f64>]) -> f64 {
    if pred.is_empty() || gold.is_empty() {
        return 0.0;
    }
    let best = |from: &[Vec<f64>], to: &[Vec<f64>]| {
        from.iter()
            .map(|u| to.iter().map(|v| cosine(u, v)).fold(0.0, f64::max))
            .sum::<f64>()
            / from.len() as f64
    };
    f_measure(best(pred, gold), best(gold, pred))
}

pub fn embed_score(pred: &str, gold: &str, tok: &dyn TextTokenizer, model: &dyn TokenEmbedder) -> f64 {
    let p = tok.tokens(&normalize(pred));
    let g = tok.tokens(&normalize(gold));
    embed_score_vectors(&model.embed(&p), &model.embed(&g))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScores {
    pub id: String,
    pub lang: String,
    pub prediction: String,
    pub gold: String,
    pub em: f64,
    pub f1: f64,
    pub bleu: f64,
    pub rouge_l: f64,
    pub embed: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rouge_1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rouge_2: Option<f64>,
}

/// Scores predictions with a shared tokenizer and embedder.
pub struct Scorer<'a> {
    pub tokenizer: &'a dyn TextTokenizer,
    pub embedder: &'a dyn TokenEmbedder,
    pub bleu_n: usize,
    pub rouge_n: bool,
}

impl<'a> Scorer<'a> {
    pub fn new(tokenizer: &'a dyn TextTokenizer, embedder: &'a dyn TokenEmbedder) -> Self {
        Scorer {
            tokenizer,
            embedder,
            bleu_n: 4,
            rouge_n: false,
        }
    }

    pub fn score(&self, id: &str, lang: &str, pred: &str, gold: &str) -> SampleScores {
        let p = self.tokenizer.tokens(&normalize(pred));
        let g = self.tokenizer.tokens(&normalize(gold));
        SampleScores {
            id: id.to_string(),
            lang: lang.to_string(),
            prediction: pred.to_string(),
            gold: gold.to_string(),
            em: exact_match(pred, gold),
            f1: token_f1_tokens(&p, &g),
            bleu: bleu_tokens(&p, &g, self.bleu_n),
            rouge_l: rouge_l_tokens(&p, &g),
            embed: embed_score_vectors(&self.embedder.embed(&p), &self.embedder.embed(&g)),
            rouge_1: self.rouge_n.then(|| rouge_n_tokens(&p, &g, 1)),
            rouge_2: self.rouge_n.then(|| rouge_n_tokens(&p, &g, 2)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusScores {
    pub count: usize,
    pub em: f64,
    pub f1: f64,
    pub bleu: f64,
    pub rouge_l: f64,
    pub embed: f64,
}

pub const ALL_LANGS: &str = "all";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_sample: Vec<SampleScores>,
    /// Means per language plus an `all` entry.
    pub corpus: BTreeMap<String, CorpusScores>,
}

fn mean_of(rows: &[&SampleScores]) -> CorpusScores {
    let n = rows.len() as f64;
    let m = |f: fn(&SampleScores) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / n;
    CorpusScores {
        count: rows.len(),
        em: m(|r| r.em),
        f1: m(|r| r.f1),
        bleu: m(|r| r.bleu),
        rouge_l: m(|r| r.rouge_l),
        embed: m(|r| r.embed),
    }
}

pub fn report(samples: Vec<SampleScores>) -> Result<MetricReport> {
    if samples.is_empty() {
        return Err(Error::invalid("cannot report on zero samples"));
    }
    let mut groups: BTreeMap<String, Vec<&SampleScores>> = BTreeMap::new();
    for s in &samples {
        groups.entry(s.lang.clone()).or_default().push(s);
    }
    let mut corpus: BTreeMap<String, CorpusScores> = groups.iter().map(|(k, v)| (k.clone(), mean_of(v))).collect();
    corpus.insert(ALL_LANGS.into(), mean_of(&samples.iter().collect::<Vec<_>>()));
    Ok(MetricReport {
        per_sample: samples,
        corpus,
    })
}

fn csv_err(e: csv::Error) -> Error {
    Error::invalid(format!("csv: {e}"))
}

impl MetricReport {
    pub fn corpus_all(&self) -> &CorpusScores {
        &self.corpus[ALL_LANGS]
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::at_path(path, e))
    }

    /// Writes the per-sample rows to `path` and the corpus table next to it
    /// with a `_corpus` suffix.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        for row in &self.per_sample {
            w.serialize(row).map_err(csv_err)?;
        }
        w.flush()?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
        let corpus_path = path.with_file_name(format!("{stem}_corpus.csv"));
        let mut w = csv::Writer::from_path(&corpus_path).map_err(csv_err)?;
        w.write_record(["lang", "count", "em", "f1", "bleu", "rouge_l", "embed"]).map_err(csv_err)?;
        for (lang, c) in &self.corpus {
            w.write_record([
                lang.clone(),
                c.count.to_string(),
                c.em.to_string(),
                c.f1.to_string(),
                c.bleu.to_string(),
                c.rouge_l.to_string(),
                c.embed.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}
