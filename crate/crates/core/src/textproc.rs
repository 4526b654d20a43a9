//! Transcript normalization and the token vocabulary.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::ops::Deref;

use unicode_general_category::{get_general_category, GeneralCategory};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;
pub const SEP_ID: u32 = 3;
pub const RESERVED: [&str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"];

/// Default frequency cutoff for [`build_vocab`].
pub const DEFAULT_MIN_FREQUENCY: u32 = 2;

const FILLERS: [&str; 2] = ["um", "uh"];
const MERGES: [(&str, &str, &str); 2] = [("you", "know", "you_know"), ("i", "mean", "i_mean")];

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TextError {
    #[error("sentence has no tokens")]
    EmptySentence,
    #[error("token {0:?} is empty or contains whitespace")]
    BadToken(String),
    #[error("corpus contained no sentences")]
    EmptyCorpus,
    #[error("min_frequency must be at least 1")]
    BadMinFrequency,
    #[error("vocabulary entry {token:?} has id {id}, expected {expected}")]
    BadVocabEntry { token: String, id: u32, expected: u32 },
}

/// A non-empty sequence of whitespace-free tokens.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Sentence(Vec<String>);

impl Sentence {
    pub fn new(tokens: Vec<String>) -> Result<Self, TextError> {
        if tokens.is_empty() {
            return Err(TextError::EmptySentence);
        }
        if let Some(bad) = tokens.iter().find(|t| t.is_empty() || t.chars().any(char::is_whitespace)) {
            return Err(TextError::BadToken(bad.clone()));
        }
        Ok(Sentence(tokens))
    }

    /// Splits on whitespace without any normalization.
    pub fn from_whitespace(line: &str) -> Result<Self, TextError> {
        Self::new(line.split_whitespace().map(ToString::to_string).collect())
    }

    pub fn tokens(&self) -> &[String] {
        &self.0
    }

    pub fn into_tokens(self) -> Vec<String> {
        self.0
    }

    pub fn join(&self) -> String {
        self.0.join(" ")
    }
}

impl Deref for Sentence {
    type Target = [String];

    fn deref(&self) -> &[String] {
        &self.0
    }
}

impl AsRef<[String]> for Sentence {
    fn as_ref(&self) -> &[String] {
        &self.0
    }
}

impl fmt::Display for Sentence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.join())
    }
}

fn is_punctuation(c: char) -> bool {
    matches!(
        get_general_category(c),
        GeneralCategory::ConnectorPunctuation
            | GeneralCategory::DashPunctuation
            | GeneralCategory::OpenPunctuation
            | GeneralCategory::ClosePunctuation
            | GeneralCategory::InitialPunctuation
            | GeneralCategory::FinalPunctuation
            | GeneralCategory::OtherPunctuation
    )
}

/// Apostrophes and underscores survive only between two alphanumerics
/// (`it's`, `you_know`).
fn is_connector(c: char) -> bool {
    matches!(c, '\'' | '\u{2019}' | '_')
}

fn clean_token(raw: &str) -> Option<String> {
    let chars: Vec<char> = raw.chars().collect();
    // Partial words end with a dash, possibly followed by other punctuation.
    let trimmed = chars.iter().rposition(|&c| !(is_punctuation(c) && c != '-')).map(|end| &chars[..=end])?;
    if trimmed.last() == Some(&'-') {
        return None;
    }
    let mut out = String::new();
    for (i, &c) in chars.iter().enumerate() {
        if is_connector(c) {
            let left = i > 0 && chars[i - 1].is_alphanumeric();
            let right = chars.get(i + 1).is_some_and(|n| n.is_alphanumeric());
            if left && right {
                out.push(if c == '_' { '_' } else { '\'' });
            }
        } else if !is_punctuation(c) {
            out.push(c);
        }
    }
    (!out.is_empty()).then_some(out)
}

/// Lower-cases, strips punctuation and partial words, drops `um`/`uh`, and
/// merges `you know` / `i mean` into single tokens. Returns `None` when no
/// token survives.
pub fn normalize(raw_line: &str) -> Option<Sentence> {
    let lowered = raw_line.to_lowercase();
    let cleaned: Vec<String> =
        lowered.split_whitespace().filter_map(clean_token).filter(|t| !FILLERS.contains(&t.as_str())).collect();

    let mut tokens = Vec::with_capacity(cleaned.len());
    let mut i = 0;
    while i < cleaned.len() {
        let merged = cleaned
            .get(i + 1)
            .and_then(|next| MERGES.iter().find(|(a, b, _)| cleaned[i] == *a && next == b).map(|(_, _, m)| *m));
        match merged {
            Some(m) => {
                tokens.push(m.to_string());
                i += 2;
            }
            None => {
                tokens.push(cleaned[i].clone());
                i += 1;
            }
        }
    }
    Sentence::new(tokens).ok()
}

/// Bidirectional token/id mapping with four reserved entries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: BTreeMap<String, u32>,
    min_frequency: u32,
}

impl Vocabulary {
    /// Rebuilds a vocabulary from its id-ordered token list (reserved
    /// entries first), e.g. when reading it back from disk.
    pub fn from_tokens(tokens: Vec<String>, min_frequency: u32) -> Result<Self, TextError> {
        for (id, reserved) in RESERVED.iter().enumerate() {
            match tokens.get(id) {
                Some(t) if t == reserved => {}
                _ => {
                    return Err(TextError::BadVocabEntry {
                        token: String::from(*reserved),
                        id: u32::MAX,
                        expected: id as u32,
                    })
                }
            }
        }
        let mut ids = BTreeMap::new();
        for (id, tok) in tokens.iter().enumerate() {
            if let Some(prev) = ids.insert(tok.clone(), id as u32) {
                return Err(TextError::BadVocabEntry { token: tok.clone(), id: id as u32, expected: prev });
            }
        }
        Ok(Vocabulary { tokens, ids, min_frequency })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn min_frequency(&self) -> u32 {
        self.min_frequency
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Tokens in id order, reserved entries first.
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// FNV-1a hash of the id-ordered token list; identifies the id space a
    /// checkpoint was trained against.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for tok in &self.tokens {
            for b in tok.bytes().chain(core::iter::once(b'\n')) {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<u32> {
        tokens.iter().map(|t| self.id(t).unwrap_or(UNK_ID)).collect()
    }

    /// Maps ids back to tokens; out-of-range ids decode as `[UNK]`.
    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter().map(|&id| String::from(self.token(id).unwrap_or(RESERVED[UNK_ID as usize]))).collect()
    }
}

/// Counts tokens and keeps those seen at least `min_frequency` times. Ids
/// follow descending frequency with lexicographic tie-breaking.
pub fn build_vocab<I>(corpus: I, min_frequency: u32) -> Result<Vocabulary, TextError>
where
    I: IntoIterator,
    I::Item: AsRef<[String]>,
{
    if min_frequency == 0 {
        return Err(TextError::BadMinFrequency);
    }
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    let mut sentences = 0usize;
    for sentence in corpus {
        sentences += 1;
        for tok in sentence.as_ref() {
            *counts.entry(tok.clone()).or_insert(0) += 1;
        }
    }
    if sentences == 0 {
        return Err(TextError::EmptyCorpus);
    }
    let mut kept: Vec<(String, u64)> = counts
        .into_iter()
        .filter(|(tok, n)| *n >= u64::from(min_frequency) && !RESERVED.contains(&tok.as_str()))
        .collect();
    // BTreeMap iteration is already lexicographic; a stable sort keeps it for ties.
    kept.sort_by_key(|&(_, n)| core::cmp::Reverse(n));
    let tokens = RESERVED.iter().map(|r| String::from(*r)).chain(kept.into_iter().map(|(t, _)| t)).collect();
    Vocabulary::from_tokens(tokens, min_frequency)
}

/// Shorthand for [`Vocabulary::encode`] on a sentence.
pub fn encode(sentence: &Sentence, vocab: &Vocabulary) -> Vec<u32> {
    vocab.encode(sentence.tokens())
}
