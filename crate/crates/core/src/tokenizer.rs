//! WordPiece tokenization of (prompt, essay) pairs.
//!
//! Text is NFC-normalized (case preserved), split on whitespace with every
//! punctuation character isolated, then each word is segmented by greedy
//! longest-match-first lookup against the vocabulary. Pairs are framed as
//! `[CLS] prompt [SEP] essay [SEP]` and padded to a fixed length.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use unicode_general_category::{get_general_category, GeneralCategory};
use unicode_normalization::UnicodeNormalization;

use crate::corpus::Corpus;
use crate::error::{AesError, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;
pub const SEP_ID: u32 = 3;

pub const SPECIAL_TOKENS: [&str; 4] = [PAD, UNK, CLS, SEP];

pub const CONTINUATION_PREFIX: &str = "##";

pub const DEFAULT_MAX_WORD_CHARS: usize = 100;

/// Smallest sequence length `encode_pair` accepts.
pub const MIN_MAX_LEN: usize = 8;

pub fn is_punctuation(c: char) -> bool {
    use GeneralCategory::*;
    matches!(
        get_general_category(c),
        ConnectorPunctuation
            | DashPunctuation
            | OpenPunctuation
            | ClosePunctuation
            | InitialPunctuation
            | FinalPunctuation
            | OtherPunctuation
    )
}

/// Splits text into words: NFC normalization, whitespace splitting, and
/// punctuation characters as standalone words.
pub fn pre_tokenize(text: &str) -> Vec<String> {
    let mut words = Vec::new();
    let mut current = String::new();
    for c in text.nfc() {
        if c.is_whitespace() {
            if !current.is_empty() {
                words.push(std::mem::take(&mut current));
            }
        } else if is_punctuation(c) {
            if !current.is_empty() {
                words.push(std::mem::take(&mut current));
            }
            words.push(c.to_string());
        } else {
            current.push(c);
        }
    }
    if !current.is_empty() {
        words.push(current);
    }
    words
}

/// Token string to id table. Ids are contiguous with the four special tokens
/// at 0..=3.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
}

impl Vocab {
    /// Builds a vocabulary from tokens in id order.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (id, special) in SPECIAL_TOKENS.iter().enumerate() {
            if tokens.get(id).map(String::as_str) != Some(*special) {
                return Err(AesError::InvalidVocab(format!(
                    "token id {id} must be {special}"
                )));
            }
        }
        let mut token_to_id = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if tok.is_empty() {
                return Err(AesError::InvalidVocab(format!("empty token at id {id}")));
            }
            if token_to_id.insert(tok.clone(), id as u32).is_some() {
                return Err(AesError::InvalidVocab(format!("duplicate token {tok:?}")));
            }
        }
        Ok(Vocab {
            token_to_id,
            id_to_token: tokens,
        })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_to_id.contains_key(token)
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    /// One token per line; the 0-based line number is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.id_to_token.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| AesError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| AesError::io(path, e))?;
        let tokens = text
            .lines()
            .map(|l| l.trim_end_matches('\r').to_string())
            .collect();
        Vocab::from_tokens(tokens)
    }
}

/// Builds a vocabulary by frequency: the special tokens, every character of
/// the pre-tokenized corpus with its `##` variant, then whole words and
/// word-final suffix pieces ordered by descending count (ties
/// lexicographic) until `target_size` entries exist.
pub fn build_vocab(corpus: &Corpus, target_size: usize, min_freq: usize) -> Result<Vocab> {
    let mut word_counts: HashMap<String, usize> = HashMap::new();
    for r in corpus.records() {
        for text in [&r.prompt, &r.essay] {
            for w in pre_tokenize(text) {
                *word_counts.entry(w).or_default() += 1;
            }
        }
    }

    let alphabet: BTreeSet<char> = word_counts.keys().flat_map(|w| w.chars()).collect();
    let required = SPECIAL_TOKENS.len() + 2 * alphabet.len();
    if target_size < required {
        return Err(AesError::TargetTooSmall {
            target: target_size,
            required,
        });
    }

    let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
    tokens.extend(alphabet.iter().map(|c| c.to_string()));
    tokens.extend(alphabet.iter().map(|c| format!("{CONTINUATION_PREFIX}{c}")));

    // Candidate counts: whole words by occurrence, suffix pieces by the
    // occurrences of every word ending in them.
    let mut candidates: HashMap<String, usize> = HashMap::new();
    for (word, &count) in &word_counts {
        let chars: Vec<char> = word.chars().collect();
        if chars.len() > DEFAULT_MAX_WORD_CHARS {
            continue;
        }
        if chars.len() > 1 {
            *candidates.entry(word.clone()).or_default() += count;
        }
        for start in 1..chars.len().saturating_sub(1) {
            let piece: String = chars[start..].iter().collect();
            *candidates
                .entry(format!("{CONTINUATION_PREFIX}{piece}"))
                .or_default() += count;
        }
    }
    let mut ranked: Vec<(String, usize)> = candidates
        .into_iter()
        .filter(|(_, c)| *c >= min_freq.max(1))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

    let remaining = target_size - tokens.len();
    tokens.extend(ranked.into_iter().take(remaining).map(|(t, _)| t));
    Vocab::from_tokens(tokens)
}

/// Greedy longest-match-first segmentation of one word. Returns `[UNK]` when
/// the word is too long or cannot be fully covered.
pub fn wordpiece(word: &str, vocab: &Vocab, max_word_chars: usize) -> Vec<String> {
    let chars: Vec<char> = word.chars().collect();
    if chars.is_empty() {
        return Vec::new();
    }
    if chars.len() > max_word_chars {
        return vec![UNK.to_string()];
    }
    let mut pieces = Vec::new();
    let mut start = 0;
    while start < chars.len() {
        let mut end = chars.len();
        let mut found = None;
        while start < end {
            let mut candidate: String = chars[start..end].iter().collect();
            if start > 0 {
                candidate.insert_str(0, CONTINUATION_PREFIX);
            }
            if vocab.contains(&candidate) {
                found = Some(candidate);
                break;
            }
            end -= 1;
        }
        match found {
            Some(piece) => pieces.push(piece),
            None => return vec![UNK.to_string()],
        }
        start = end;
    }
    pieces
}

/// Pre-tokenizes and WordPiece-encodes a text into ids.
pub fn tokenize_ids(text: &str, vocab: &Vocab, max_word_chars: usize) -> Vec<u32> {
    pre_tokenize(text)
        .iter()
        .flat_map(|w| wordpiece(w, vocab, max_word_chars))
        .map(|piece| vocab.id(&piece).unwrap_or(UNK_ID))
        .collect()
}

/// Model input for one (prompt, essay) pair.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenizedInput {
    pub ids: Vec<u32>,
    pub type_ids: Vec<u32>,
    pub mask: Vec<u32>,
}

impl TokenizedInput {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of unpadded positions.
    pub fn active_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m == 1).count()
    }
}

/// Frames `[CLS] prompt [SEP] essay [SEP]` and pads to `max_len`.
///
/// Overlong input is cut from the end of the essay; the prompt is cut only
/// when it alone cannot fit next to the three frame tokens.
pub fn encode_pair(prompt: &str, essay: &str, vocab: &Vocab, max_len: usize) -> Result<TokenizedInput> {
    if max_len < MIN_MAX_LEN {
        return Err(AesError::MaxLenTooSmall(max_len));
    }
    let mut a = tokenize_ids(prompt, vocab, DEFAULT_MAX_WORD_CHARS);
    let mut b = tokenize_ids(essay, vocab, DEFAULT_MAX_WORD_CHARS);
    let budget = max_len - 3;
    a.truncate(budget);
    b.truncate(budget - a.len());

    let mut ids = Vec::with_capacity(max_len);
    let mut type_ids = Vec::with_capacity(max_len);
    ids.push(CLS_ID);
    ids.extend_from_slice(&a);
    ids.push(SEP_ID);
    type_ids.resize(ids.len(), 0);
    ids.extend_from_slice(&b);
    ids.push(SEP_ID);
    type_ids.resize(ids.len(), 1);

    let active = ids.len();
    let mut mask = vec![1; active];
    ids.resize(max_len, PAD_ID);
    type_ids.resize(max_len, 0);
    mask.resize(max_len, 0);
    Ok(TokenizedInput { ids, type_ids, mask })
}

/// Inverse of encoding, up to whitespace: specials are dropped, `##` pieces
/// are glued to their predecessor and other pieces are space-separated.
pub fn decode(ids: &[u32], vocab: &Vocab) -> Result<String> {
    let mut out = String::new();
    for &id in ids {
        let tok = vocab.token(id).ok_or(AesError::UnknownId {
            id,
            size: vocab.len(),
        })?;
        if (id as usize) < SPECIAL_TOKENS.len() {
            continue;
        }
        match tok.strip_prefix(CONTINUATION_PREFIX) {
            Some(rest) if !rest.is_empty() => out.push_str(rest),
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
