//! Subword vocabulary and WordPiece-style segmentation.
//!
//! Vocabularies are built by greedy pair merging over word-internal symbol
//! sequences. Continuation pieces carry a `##` prefix. Segmentation is
//! greedy longest-match-first per whitespace word, falling back to single
//! characters, then `[UNK]`.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};

pub type TokenId = usize;

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const BOS: &str = "[BOS]";
pub const SEP: &str = "[SEP]";
pub const EOS: &str = "[EOS]";
pub const MASK: &str = "[MASK]";
pub const SLU: &str = "[SLU]";

/// Specials in id order. They always occupy ids `0..SPECIALS.len()`.
pub const SPECIALS: [&str; 7] = [PAD, UNK, BOS, SEP, EOS, MASK, SLU];

pub const VOCAB_HEADER: &str = "#slp-vocab v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SpecialIds {
    pub pad: TokenId,
    pub unk: TokenId,
    pub bos: TokenId,
    pub sep: TokenId,
    pub eos: TokenId,
    pub mask: TokenId,
    pub slu: TokenId,
}

impl SpecialIds {
    pub const FIXED: SpecialIds = SpecialIds {
        pad: 0,
        unk: 1,
        bos: 2,
        sep: 3,
        eos: 4,
        mask: 5,
        slu: 6,
    };
}

#[derive(Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl fmt::Debug for Vocabulary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Vocabulary").field("size", &self.tokens.len()).finish()
    }
}

/// Lowercases and collapses runs of whitespace to single spaces.
pub fn normalize(text: &str) -> String {
    text.split_whitespace()
        .map(|w| w.to_lowercase())
        .collect::<Vec<_>>()
        .join(" ")
}

fn continuation(piece: &str) -> String {
    format!("##{piece}")
}

impl Vocabulary {
    /// A vocabulary holding only the specials plus `tokens`, in order.
    /// Duplicates are skipped.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Vocabulary {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for s in SPECIALS {
            v.push(s.to_string());
        }
        for t in tokens {
            let t = t.into();
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::invalid(format!("invalid token {t:?}")));
            }
            v.push(t);
        }
        Ok(v)
    }

    fn push(&mut self, token: String) -> bool {
        if self.index.contains_key(&token) {
            return false;
        }
        self.index.insert(token.clone(), self.tokens.len());
        self.tokens.push(token);
        true
    }

    /// Adds `token` as an atomic entry (both word-initial and continuation
    /// forms), returning its word-initial id.
    pub fn inject_atomic(&mut self, token: &str) -> Result<TokenId> {
        let t = normalize(token);
        if t.is_empty() || t.contains(' ') || t.starts_with("##") {
            return Err(Error::invalid(format!("cannot inject {token:?}")));
        }
        self.push(t.clone());
        self.push(continuation(&t));
        Ok(self.index[&t])
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn specials(&self) -> SpecialIds {
        SpecialIds::FIXED
    }

    pub fn num_specials(&self) -> usize {
        SPECIALS.len()
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        id < SPECIALS.len()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Builds a vocabulary by frequency-greedy pair merging.
    pub fn train<I, S>(corpus: I, target_size: usize, min_freq: usize) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut word_counts: BTreeMap<String, usize> = BTreeMap::new();
        for line in corpus {
            for w in normalize(line.as_ref()).split(' ').filter(|w| !w.is_empty()) {
                *word_counts.entry(w.to_string()).or_default() += 1;
            }
        }
        if word_counts.is_empty() {
            return Err(Error::invalid("cannot train a vocabulary on an empty corpus"));
        }

        // Each word type as a symbol sequence: first char plain, rest "##c".
        let mut words: Vec<(Vec<String>, usize)> = word_counts
            .iter()
            .map(|(w, &c)| {
                let syms = w
                    .chars()
                    .enumerate()
                    .map(|(i, ch)| {
                        if i == 0 {
                            ch.to_string()
                        } else {
                            continuation(&ch.to_string())
                        }
                    })
                    .collect();
                (syms, c)
            })
            .collect();

        let mut alphabet: Vec<String> = words.iter().flat_map(|(s, _)| s.iter().cloned()).collect();
        alphabet.sort();
        alphabet.dedup();
        if target_size <= SPECIALS.len() + alphabet.len() {
            return Err(Error::Config(format!(
                "vocabulary size {target_size} leaves no room for merges over {} specials and {} base symbols",
                SPECIALS.len(),
                alphabet.len()
            )));
        }
        let mut vocab = Vocabulary::from_tokens(alphabet)?;

        while vocab.len() < target_size {
            let mut pairs: BTreeMap<(&str, &str), usize> = BTreeMap::new();
            for (syms, c) in &words {
                for w in syms.windows(2) {
                    *pairs.entry((w[0].as_str(), w[1].as_str())).or_default() += c;
                }
            }
            // Highest count wins; BTreeMap order breaks ties lexicographically.
            let best = pairs
                .iter()
                .fold(None::<(&(&str, &str), usize)>, |best, (k, &c)| match best {
                    Some((_, bc)) if bc >= c => best,
                    _ => Some((k, c)),
                });
            let Some((&(a, b), count)) = best else { break };
            if count < min_freq.max(1) {
                break;
            }
            let merged = format!("{a}{}", b.trim_start_matches("##"));
            let (a, b) = (a.to_string(), b.to_string());
            for (syms, _) in words.iter_mut() {
                let mut i = 0;
                while i + 1 < syms.len() {
                    if syms[i] == a && syms[i + 1] == b {
                        syms[i] = merged.clone();
                        syms.remove(i + 1);
                    }
                    i += 1;
                }
            }
            vocab.push(merged);
        }
        Ok(vocab)
    }

    /// Segments normalized text. Never emits special ids other than `[UNK]`.
    pub fn tokenize(&self, text: &str) -> Vec<TokenId> {
        let norm = normalize(text);
        let mut out = Vec::new();
        for word in norm.split(' ').filter(|w| !w.is_empty()) {
            match self.segment_greedy(word).or_else(|| self.segment_chars(word)) {
                Some(ids) => out.extend(ids),
                None => out.push(SpecialIds::FIXED.unk),
            }
        }
        out
    }

    fn lookup_piece(&self, piece: &str, initial: bool) -> Option<TokenId> {
        let id = if initial {
            self.id(piece)
        } else {
            self.id(&continuation(piece))
        }?;
        (!self.is_special(id)).then_some(id)
    }

    fn segment_greedy(&self, word: &str) -> Option<Vec<TokenId>> {
        let bounds: Vec<usize> = word
            .char_indices()
            .map(|(i, _)| i)
            .chain(std::iter::once(word.len()))
            .collect();
        let mut out = Vec::new();
        let mut start = 0;
        while start + 1 < bounds.len() {
            let found = (start + 1..bounds.len()).rev().find_map(|end| {
                let piece = &word[bounds[start]..bounds[end]];
                self.lookup_piece(piece, start == 0).map(|id| (id, end))
            });
            let (id, end) = found?;
            out.push(id);
            start = end;
        }
        Some(out)
    }

    fn segment_chars(&self, word: &str) -> Option<Vec<TokenId>> {
        word.chars()
            .enumerate()
            .map(|(i, c)| self.lookup_piece(&c.to_string(), i == 0))
            .collect()
    }

    /// Joins tokens with spaces, fusing `##` continuations and dropping `[PAD]`.
    pub fn detokenize(&self, ids: &[TokenId]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            let tok = self
                .token(id)
                .ok_or_else(|| Error::invalid(format!("token id {id} out of range {}", self.len())))?;
            if id == SpecialIds::FIXED.pad {
                continue;
            }
            match tok.strip_prefix("##") {
                Some(rest) if !out.is_empty() => out.push_str(rest),
                _ => {
                    if !out.is_empty() {
                        out.push(' ');
                    }
                    out.push_str(tok);
                }
            }
        }
        Ok(out)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from(VOCAB_HEADER);
        s.push('\n');
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(VOCAB_HEADER) {
            return Err(Error::format(0, "missing vocabulary header"));
        }
        let tokens: Vec<&str> = lines.collect();
        for (i, s) in SPECIALS.iter().enumerate() {
            if tokens.get(i) != Some(s) {
                return Err(Error::format(
                    0,
                    format!("special token {s} missing from line {}", i + 2),
                ));
            }
        }
        let mut v = Vocabulary::from_tokens(Vec::<String>::new())?;
        for t in &tokens[SPECIALS.len()..] {
            if !v.push(t.to_string()) {
                return Err(Error::format(0, format!("duplicate token {t:?}")));
            }
        }
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}
