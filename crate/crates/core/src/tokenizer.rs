//! Grapheme-cluster vocabulary and greedy longest-match tokenizer.
//!
//! Pieces never split an extended grapheme cluster. A single space is its
//! own piece at a fixed id so decoding is lossless.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use unicode_segmentation::UnicodeSegmentation;

use crate::error::{Error, Result};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const SOS_ID: usize = 2;
pub const EOS_ID: usize = 3;
/// Id of the space piece.
pub const SPACE_ID: usize = 4;
pub const N_RESERVED: usize = 5;

pub const SPECIAL_PIECES: [&str; 4] = ["<pad>", "<unk>", "<sos>", "<eos>"];
/// Rendered in place of unknown tokens.
pub const UNK_GLYPH: &str = "⁇";

/// Splits `text` into extended grapheme clusters.
pub fn segment_graphemes(text: &str) -> Vec<&str> {
    text.graphemes(true).collect()
}

/// Like [`segment_graphemes`] for raw bytes, rejecting invalid UTF-8.
pub fn segment_graphemes_bytes(bytes: &[u8]) -> Result<Vec<String>> {
    let text = std::str::from_utf8(bytes)?;
    Ok(text.graphemes(true).map(str::to_owned).collect())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    pieces: Vec<String>,
    counts: Vec<u64>,
    index: HashMap<String, usize>,
    /// Longest piece measured in clusters.
    max_clusters: usize,
}

/// One emitted token with the character range it covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenSpan {
    pub id: usize,
    pub char_start: usize,
    pub char_end: usize,
}

fn is_space(cluster: &str) -> bool {
    cluster.chars().all(char::is_whitespace)
}

impl Vocab {
    /// Builds a vocabulary of at most `target_size` entries. Whole
    /// whitespace-delimited words are admitted first by frequency, then single
    /// clusters fill the remaining room; ties break lexicographically.
    pub fn train<'a>(corpus: impl IntoIterator<Item = &'a str>, target_size: usize) -> Result<Self> {
        if target_size <= N_RESERVED - 1 {
            return Err(Error::invalid(format!(
                "vocabulary size must exceed {} reserved entries, got {target_size}",
                N_RESERVED - 1
            )));
        }
        let mut words: BTreeMap<&str, u64> = BTreeMap::new();
        let mut clusters: BTreeMap<&str, u64> = BTreeMap::new();
        let mut spaces = 0u64;
        for line in corpus {
            for c in line.graphemes(true) {
                if c == " " {
                    spaces += 1;
                } else {
                    *clusters.entry(c).or_default() += 1;
                }
            }
            for word in line.split(' ') {
                if !word.is_empty() && !is_space(word) {
                    *words.entry(word).or_default() += 1;
                }
            }
        }
        if clusters.is_empty() {
            return Err(Error::invalid("cannot train a vocabulary on an empty corpus"));
        }
        let ranked = |m: BTreeMap<&'a str, u64>| {
            let mut v: Vec<(&str, u64)> = m.into_iter().collect();
            v.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
            v
        };
        let mut pieces: Vec<String> = SPECIAL_PIECES.iter().map(|s| s.to_string()).collect();
        let mut counts = vec![0; SPECIAL_PIECES.len()];
        pieces.push(" ".into());
        counts.push(spaces);
        let singles: Vec<(&str, u64)> = ranked(clusters)
            .into_iter()
            .filter(|(c, _)| *c != " " && !words.contains_key(c))
            .collect();
        let mut all = ranked(words);
        all.extend(singles);
        for (piece, count) in all.into_iter().take(target_size - N_RESERVED) {
            pieces.push(piece.to_string());
            counts.push(count);
        }
        Self::from_parts(pieces, counts)
    }

    fn from_parts(pieces: Vec<String>, counts: Vec<u64>) -> Result<Self> {
        let mut index = HashMap::with_capacity(pieces.len());
        let mut max_clusters = 1;
        for (id, p) in pieces.iter().enumerate() {
            if id >= N_RESERVED - 1 {
                if p.is_empty() {
                    return Err(Error::invalid(format!("empty piece at id {id}")));
                }
                if index.insert(p.clone(), id).is_some() {
                    return Err(Error::invalid(format!("duplicate piece {p:?} at id {id}")));
                }
                max_clusters = max_clusters.max(p.graphemes(true).count());
            }
        }
        Ok(Vocab {
            pieces,
            counts,
            index,
            max_clusters,
        })
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn piece(&self, id: usize) -> Option<&str> {
        self.pieces.get(id).map(String::as_str)
    }

    pub fn count(&self, id: usize) -> Option<u64> {
        self.counts.get(id).copied()
    }

    /// Id of a non-special piece.
    pub fn id(&self, piece: &str) -> Option<usize> {
        self.index.get(piece).copied()
    }

    pub fn is_special(id: usize) -> bool {
        id < SPECIAL_PIECES.len()
    }

    /// Greedy longest match with the character range of every token.
    pub fn encode_with_offsets(&self, text: &str) -> Vec<TokenSpan> {
        let clusters: Vec<&str> = text.graphemes(true).collect();
        let mut starts = Vec::with_capacity(clusters.len() + 1);
        let mut pos = 0;
        for c in &clusters {
            starts.push(pos);
            pos += c.chars().count();
        }
        starts.push(pos);
        let mut out = Vec::new();
        let mut i = 0;
        let mut buf = String::new();
        while i < clusters.len() {
            let mut best = None;
            let top = (i + self.max_clusters).min(clusters.len());
            buf.clear();
            for (j, c) in clusters[i..top].iter().enumerate() {
                buf.push_str(c);
                if let Some(&id) = self.index.get(buf.as_str()) {
                    best = Some((id, i + j + 1));
                }
            }
            let (id, next) = best.unwrap_or((UNK_ID, i + 1));
            out.push(TokenSpan {
                id,
                char_start: starts[i],
                char_end: starts[next],
            });
            i = next;
        }
        out
    }

    pub fn encode(&self, text: &str, add_bounds: bool) -> Vec<usize> {
        let body = self.encode_with_offsets(text).into_iter().map(|t| t.id);
        if add_bounds {
            std::iter::once(SOS_ID).chain(body).chain(std::iter::once(EOS_ID)).collect()
        } else {
            body.collect()
        }
    }

    /// Concatenates pieces. Unknown tokens render as [`UNK_GLYPH`]; other
    /// specials are dropped when `strip_specials` is set.
    pub fn decode(&self, ids: &[usize], strip_specials: bool) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            let piece = self.piece(id).ok_or_else(|| {
                Error::invalid(format!("token id {id} out of range for vocabulary of {}", self.len()))
            })?;
            match id {
                UNK_ID => out.push_str(UNK_GLYPH),
                PAD_ID | SOS_ID | EOS_ID if strip_specials => {}
                _ => out.push_str(piece),
            }
        }
        Ok(out)
    }

    /// Text of one token as it appears in the source; `None` for specials.
    pub fn surface(&self, id: usize) -> Option<&str> {
        (!Self::is_special(id)).then(|| self.piece(id)).flatten()
    }

    /// `id<TAB>piece<TAB>count` lines with `\t`, `\n`, `\r` and `\\` escaped.
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for (id, (p, c)) in self.pieces.iter().zip(&self.counts).enumerate() {
            let _ = writeln!(s, "{id}\t{}\t{c}", escape(p));
        }
        s
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut pieces = Vec::new();
        let mut counts = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let bad = |why: &str| Error::invalid(format!("vocab line {}: {why}", lineno + 1));
            let mut cols = line.split('\t');
            let (Some(id), Some(piece), Some(count), None) = (cols.next(), cols.next(), cols.next(), cols.next()) else {
                return Err(bad("expected three tab-separated columns"));
            };
            let id: usize = id.parse().map_err(|_| bad("id is not an integer"))?;
            if id != pieces.len() {
                return Err(bad(&format!("expected id {}, found {id}", pieces.len())));
            }
            let piece = unescape(piece).ok_or_else(|| bad("bad escape sequence"))?;
            if id < SPECIAL_PIECES.len() && piece != SPECIAL_PIECES[id] {
                return Err(bad(&format!("reserved id {id} must be {}", SPECIAL_PIECES[id])));
            }
            if id == SPACE_ID && piece != " " {
                return Err(bad("id 4 must be the space piece"));
            }
            counts.push(count.parse().map_err(|_| bad("count is not an integer"))?);
            pieces.push(piece);
        }
        if pieces.len() < N_RESERVED {
            return Err(Error::invalid("vocabulary file is missing reserved entries"));
        }
        Self::from_parts(pieces, counts)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::at_path(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::at_path(path, e))?;
        Self::from_tsv(std::str::from_utf8(&bytes)?)
    }
}

fn escape(p: &str) -> String {
    let mut s = String::with_capacity(p.len());
    for ch in p.chars() {
        match ch {
            '\\' => s.push_str("\\\\"),
            '\t' => s.push_str("\\t"),
            '\n' => s.push_str("\\n"),
            '\r' => s.push_str("\\r"),
            c => s.push(c),
        }
    }
    s
}

fn unescape(p: &str) -> Option<String> {
    let mut s = String::with_capacity(p.len());
    let mut it = p.chars();
    while let Some(ch) = it.next() {
        if ch != '\\' {
            s.push(ch);
            continue;
        }
        s.push(match it.next()? {
            '\\' => '\\',
            't' => '\t',
            'n' => '\n',
            'r' => '\r',
            _ => return None,
        });
    }
    Some(s)
}
