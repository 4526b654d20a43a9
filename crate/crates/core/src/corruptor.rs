//! Pseudo training data: disfluent sentences with added-word labels for the
//! tagging task, and (fluent, corrupted) sentence pairs for the
//! classification task.
//!
//! Every perturbation that adds words is expressed as "splice a block of
//! `D`-labeled tokens before original position `k`". Repetition splices a
//! copy of the following span, Inserting splices an m-gram drawn from the
//! corpus. Because blocks only ever go *before* original tokens, removing
//! the `D` tokens always gives back the source sentence.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::Rng;

use crate::rng::seeded;
use crate::textproc::Sentence;

/// Longest span any perturbation touches.
pub const MAX_SPAN: usize = 6;
/// Most perturbation sites per sentence.
pub const MAX_SITES: usize = 3;
/// Default reservoir size per m-gram length.
pub const DEFAULT_NGRAM_CAPACITY: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CorruptError {
    #[error("no {m}-gram found in the corpus")]
    InsufficientNgrams { m: usize },
    #[error("deleting from a one-token sentence would leave it empty")]
    DegenerateDelete,
    #[error("corpus exhausted: needed {needed} sentences, only {available} usable")]
    InsufficientCorpus { needed: usize, available: usize },
    #[error("position {k} out of range for a sentence of length {len}")]
    PositionOutOfRange { k: usize, len: usize },
    #[error("span length {0} outside 1..=6")]
    BadSpan(usize),
    #[error("n-gram capacity must be at least 1")]
    BadCapacity,
    #[error("labels ({labels}) and tokens ({tokens}) differ in length")]
    LengthMismatch { tokens: usize, labels: usize },
    #[error("unknown label {0:?}")]
    UnknownLabel(String),
}

/// Per-token label: `D` for added (disfluent) words, `O` for fluent ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Tag {
    O,
    D,
}

impl Tag {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Tag {
        if i == 1 {
            Tag::D
        } else {
            Tag::O
        }
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Tag::O => "O",
            Tag::D => "D",
        })
    }
}

impl FromStr for Tag {
    type Err = CorruptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "O" => Ok(Tag::O),
            "D" => Ok(Tag::D),
            other => Err(CorruptError::UnknownLabel(other.into())),
        }
    }
}

/// The 4-way pair label. `_0` means the first sentence was derived from the
/// second, `_1` the reverse.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PairLabel {
    Add0,
    Add1,
    Del0,
    Del1,
}

impl PairLabel {
    pub const ALL: [PairLabel; 4] = [PairLabel::Add0, PairLabel::Add1, PairLabel::Del0, PairLabel::Del1];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<PairLabel> {
        Self::ALL.get(i).copied()
    }

    pub fn new(kind: PairKind, corrupted_first: bool) -> PairLabel {
        match (kind, corrupted_first) {
            (PairKind::Add, true) => PairLabel::Add0,
            (PairKind::Add, false) => PairLabel::Add1,
            (PairKind::Del, true) => PairLabel::Del0,
            (PairKind::Del, false) => PairLabel::Del1,
        }
    }

    /// The same pair with its sentences swapped.
    pub fn swapped(self) -> PairLabel {
        match self {
            PairLabel::Add0 => PairLabel::Add1,
            PairLabel::Add1 => PairLabel::Add0,
            PairLabel::Del0 => PairLabel::Del1,
            PairLabel::Del1 => PairLabel::Del0,
        }
    }

    pub fn kind(self) -> PairKind {
        match self {
            PairLabel::Add0 | PairLabel::Add1 => PairKind::Add,
            PairLabel::Del0 | PairLabel::Del1 => PairKind::Del,
        }
    }

    /// True when the first sentence is the longer one.
    pub fn first_is_longer(self) -> bool {
        matches!(self, PairLabel::Add0 | PairLabel::Del1)
    }
}

impl fmt::Display for PairLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PairLabel::Add0 => "add_0",
            PairLabel::Add1 => "add_1",
            PairLabel::Del0 => "del_0",
            PairLabel::Del1 => "del_1",
        })
    }
}

impl FromStr for PairLabel {
    type Err = CorruptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "add_0" => PairLabel::Add0,
            "add_1" => PairLabel::Add1,
            "del_0" => PairLabel::Del0,
            "del_1" => PairLabel::Del1,
            other => return Err(CorruptError::UnknownLabel(other.into())),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairKind {
    Add,
    Del,
}

/// A single perturbation of a fluent sentence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Perturbation {
    Repetition { k: usize, m: usize },
    Inserting { k: usize, mgram: Vec<String> },
    Delete { k: usize, m: usize },
}

/// Tokens with parallel labels. The unit the tagger trains and scores on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TagSequence {
    pub tokens: Vec<String>,
    pub labels: Vec<Tag>,
}

impl TagSequence {
    pub fn new(tokens: Vec<String>, labels: Vec<Tag>) -> Result<Self, CorruptError> {
        if tokens.len() != labels.len() {
            return Err(CorruptError::LengthMismatch { tokens: tokens.len(), labels: labels.len() });
        }
        Ok(TagSequence { tokens, labels })
    }

    pub fn fluent(sentence: &Sentence) -> Self {
        TagSequence { tokens: sentence.to_vec(), labels: vec![Tag::O; sentence.len()] }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Tokens labeled `O`, in order.
    pub fn fluent_tokens(&self) -> Vec<String> {
        self.tokens.iter().zip(&self.labels).filter(|(_, l)| **l == Tag::O).map(|(t, _)| t.clone()).collect()
    }
}

/// A corrupted sentence together with the fluent sentence it came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaggedExample {
    pub tokens: Vec<String>,
    pub labels: Vec<Tag>,
    pub source: Sentence,
}

impl TaggedExample {
    pub fn into_sequence(self) -> TagSequence {
        TagSequence { tokens: self.tokens, labels: self.labels }
    }

    pub fn sequence(&self) -> TagSequence {
        TagSequence { tokens: self.tokens.clone(), labels: self.labels.clone() }
    }

    pub fn is_fluent(&self) -> bool {
        self.labels.iter().all(|l| *l == Tag::O)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairExample {
    pub s1: Sentence,
    pub s2: Sentence,
    pub label: PairLabel,
}

/// Reservoir samples of m-grams (m = 1..=6) drawn from a corpus.
///
/// Tokens are interned in `table`; bucket `m - 1` is a flat array of
/// `m`-strided ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NgramIndex {
    table: Vec<String>,
    buckets: [Vec<u32>; MAX_SPAN],
}

impl NgramIndex {
    /// Rebuilds an index from an interned token table and flat buckets.
    pub fn from_parts(table: Vec<String>, buckets: [Vec<u32>; MAX_SPAN]) -> Result<Self, CorruptError> {
        for (i, bucket) in buckets.iter().enumerate() {
            let m = i + 1;
            if bucket.is_empty() {
                return Err(CorruptError::InsufficientNgrams { m });
            }
            if bucket.len() % m != 0 || bucket.iter().any(|&id| id as usize >= table.len()) {
                return Err(CorruptError::BadSpan(m));
            }
        }
        Ok(NgramIndex { table, buckets })
    }

    pub fn table(&self) -> &[String] {
        &self.table
    }

    /// Flat id storage for m-grams of length `m`.
    pub fn bucket(&self, m: usize) -> &[u32] {
        &self.buckets[m - 1]
    }

    pub fn count(&self, m: usize) -> usize {
        self.buckets[m - 1].len() / m
    }

    pub fn get(&self, m: usize, i: usize) -> Vec<String> {
        self.buckets[m - 1][i * m..(i + 1) * m].iter().map(|&id| self.table[id as usize].clone()).collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, m: usize, rng: &mut R) -> Vec<String> {
        let i = rng.gen_range(0..self.count(m));
        self.get(m, i)
    }
}

/// Uniform reservoir sample (Algorithm R) of up to `per_m_capacity` m-grams
/// for each m. Each m draws from its own generator stream, so bucket `m`
/// depends only on the corpus, the seed and `m`.
pub fn build_ngram_index<I>(corpus: I, per_m_capacity: usize, seed: u64) -> Result<NgramIndex, CorruptError>
where
    I: IntoIterator,
    I::Item: AsRef<[String]>,
{
    if per_m_capacity == 0 {
        return Err(CorruptError::BadCapacity);
    }
    let mut table: Vec<String> = Vec::new();
    let mut interned: alloc::collections::BTreeMap<String, u32> = alloc::collections::BTreeMap::new();
    let mut buckets: [Vec<u32>; MAX_SPAN] = Default::default();
    let mut seen = [0u64; MAX_SPAN];
    let mut rngs: Vec<_> = (1..=MAX_SPAN).map(|m| seeded(seed, m as u64)).collect();

    for sentence in corpus {
        let ids: Vec<u32> = sentence
            .as_ref()
            .iter()
            .map(|t| {
                *interned.entry(t.clone()).or_insert_with(|| {
                    table.push(t.clone());
                    (table.len() - 1) as u32
                })
            })
            .collect();
        for m in 1..=MAX_SPAN.min(ids.len()) {
            let slot = m - 1;
            for gram in ids.windows(m) {
                let i = seen[slot];
                seen[slot] += 1;
                if (i as usize) < per_m_capacity {
                    buckets[slot].extend_from_slice(gram);
                } else {
                    let j = rngs[slot].gen_range(0..=i);
                    if (j as usize) < per_m_capacity {
                        let at = j as usize * m;
                        buckets[slot][at..at + m].copy_from_slice(gram);
                    }
                }
            }
        }
    }
    NgramIndex::from_parts(table, buckets)
}

fn check_span(m: usize) -> Result<(), CorruptError> {
    if (1..=MAX_SPAN).contains(&m) {
        Ok(())
    } else {
        Err(CorruptError::BadSpan(m))
    }
}

/// Builds the labeled sequence obtained by placing each `D` block before the
/// given original position (`k == len` appends). Blocks must be sorted by
/// position; at most one block per position.
fn splice(source: &Sentence, blocks: &[(usize, Vec<String>)]) -> TaggedExample {
    let extra: usize = blocks.iter().map(|(_, b)| b.len()).sum();
    let mut tokens = Vec::with_capacity(source.len() + extra);
    let mut labels = Vec::with_capacity(source.len() + extra);
    let mut next = blocks.iter().peekable();
    for k in 0..=source.len() {
        while let Some((_, block)) = next.next_if(|(pos, _)| *pos == k) {
            tokens.extend(block.iter().cloned());
            labels.extend(core::iter::repeat_n(Tag::D, block.len()));
        }
        if let Some(tok) = source.get(k) {
            tokens.push(tok.clone());
            labels.push(Tag::O);
        }
    }
    TaggedExample { tokens, labels, source: source.clone() }
}

fn repeated_span(s: &Sentence, k: usize, m: usize) -> Vec<String> {
    let m = m.min(s.len() - k);
    s[k..k + m].to_vec()
}

/// Repeats the `m` words starting at `k`; the first copy is labeled `D`.
/// `m` is clamped to the words available after `k`.
pub fn apply_repetition(s: &Sentence, k: usize, m: usize) -> Result<TaggedExample, CorruptError> {
    if k >= s.len() {
        return Err(CorruptError::PositionOutOfRange { k, len: s.len() });
    }
    check_span(m)?;
    Ok(splice(s, &[(k, repeated_span(s, k, m))]))
}

/// Inserts `mgram` before position `k` (`k == len` appends), labeled `D`.
pub fn apply_inserting(s: &Sentence, k: usize, mgram: &[String]) -> Result<TaggedExample, CorruptError> {
    if k > s.len() {
        return Err(CorruptError::PositionOutOfRange { k, len: s.len() });
    }
    check_span(mgram.len())?;
    Ok(splice(s, &[(k, mgram.to_vec())]))
}

fn delete_in_place(tokens: &mut Vec<String>, k: usize, m: usize) {
    let m = m.min(tokens.len() - k).min(tokens.len() - 1);
    tokens.drain(k..k + m);
}

/// Removes up to `m` words starting at `k`, never emptying the sentence.
pub fn apply_delete(s: &Sentence, k: usize, m: usize) -> Result<Sentence, CorruptError> {
    if s.len() < 2 {
        return Err(CorruptError::DegenerateDelete);
    }
    if k >= s.len() {
        return Err(CorruptError::PositionOutOfRange { k, len: s.len() });
    }
    check_span(m)?;
    let mut tokens = s.to_vec();
    delete_in_place(&mut tokens, k, m);
    Ok(Sentence::new(tokens).expect("clamped delete leaves at least one token"))
}

/// Distinct perturbation sites, ascending. One to three, limited by length.
fn pick_sites<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Vec<usize> {
    let p = rng.gen_range(1..=MAX_SITES).min(len);
    let mut sites = index::sample(rng, len, p).into_vec();
    sites.sort_unstable();
    sites
}

/// Draws the additive perturbations for one sentence.
pub fn sample_additions<R: Rng + ?Sized>(s: &Sentence, ngrams: &NgramIndex, rng: &mut R) -> Vec<Perturbation> {
    pick_sites(s.len(), rng)
        .into_iter()
        .map(|k| {
            let m = rng.gen_range(1..=MAX_SPAN);
            if rng.gen_bool(0.5) {
                Perturbation::Repetition { k, m }
            } else {
                Perturbation::Inserting { k, mgram: ngrams.sample(m, rng) }
            }
        })
        .collect()
}

/// Applies additive perturbations (all positions refer to `s`).
pub fn apply_additions(s: &Sentence, ops: &[Perturbation]) -> Result<TaggedExample, CorruptError> {
    let mut blocks = Vec::with_capacity(ops.len());
    for op in ops {
        match op {
            Perturbation::Repetition { k, m } => {
                if *k >= s.len() {
                    return Err(CorruptError::PositionOutOfRange { k: *k, len: s.len() });
                }
                check_span(*m)?;
                blocks.push((*k, repeated_span(s, *k, *m)));
            }
            Perturbation::Inserting { k, mgram } => {
                if *k > s.len() {
                    return Err(CorruptError::PositionOutOfRange { k: *k, len: s.len() });
                }
                check_span(mgram.len())?;
                blocks.push((*k, mgram.clone()));
            }
            Perturbation::Delete { .. } => return Err(CorruptError::BadSpan(0)),
        }
    }
    blocks.sort_by_key(|(k, _)| *k);
    Ok(splice(s, &blocks))
}

/// One to three distinct sites, each a Repetition or an Inserting with equal
/// probability, span lengths uniform on 1..=6.
pub fn corrupt_for_tagging<R: Rng + ?Sized>(s: &Sentence, ngrams: &NgramIndex, rng: &mut R) -> TaggedExample {
    let ops = sample_additions(s, ngrams, rng);
    apply_additions(s, &ops).expect("sampled perturbations are in range")
}

/// One to three Delete spans applied right to left.
pub fn corrupt_by_deletion<R: Rng + ?Sized>(s: &Sentence, rng: &mut R) -> Result<Sentence, CorruptError> {
    if s.len() < 2 {
        return Err(CorruptError::DegenerateDelete);
    }
    let sites = pick_sites(s.len(), rng);
    let spans: Vec<usize> = sites.iter().map(|_| rng.gen_range(1..=MAX_SPAN)).collect();
    let mut tokens = s.to_vec();
    for (&k, &m) in sites.iter().zip(&spans).rev() {
        if tokens.len() < 2 {
            break;
        }
        delete_in_place(&mut tokens, k, m);
    }
    Ok(Sentence::new(tokens).expect("clamped deletes leave at least one token"))
}

/// Pairs `s` with a corrupted sibling, in random order.
pub fn make_pair<R: Rng + ?Sized>(
    s: &Sentence,
    kind: PairKind,
    ngrams: &NgramIndex,
    rng: &mut R,
) -> Result<PairExample, CorruptError> {
    let corrupted = match kind {
        PairKind::Add => {
            let tagged = corrupt_for_tagging(s, ngrams, rng);
            Sentence::new(tagged.tokens).expect("additions keep sentences non-empty")
        }
        PairKind::Del => corrupt_by_deletion(s, rng)?,
    };
    let corrupted_first = rng.gen_bool(0.5);
    let label = PairLabel::new(kind, corrupted_first);
    let (s1, s2) = if corrupted_first { (corrupted, s.clone()) } else { (s.clone(), corrupted) };
    Ok(PairExample { s1, s2, label })
}

/// Output of [`build_pretraining_corpus`].
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PretrainingCorpus {
    pub tagging: Vec<TaggedExample>,
    pub pairs: Vec<PairExample>,
    /// Sentences consumed, including ones skipped as too short for deletion.
    pub consumed: usize,
}

/// Draws `n_tagging` tagging examples (half left fluent) and `n_pairs` pairs
/// (half add-kind, half del-kind) from consecutive corpus sentences. Each
/// sentence feeds at most one example.
pub fn build_pretraining_corpus<I, R>(
    corpus: I,
    n_tagging: usize,
    n_pairs: usize,
    ngrams: &NgramIndex,
    rng: &mut R,
) -> Result<PretrainingCorpus, CorruptError>
where
    I: IntoIterator<Item = Sentence>,
    R: Rng + ?Sized,
{
    let needed = n_tagging + n_pairs;
    let mut fluent = vec![false; n_tagging];
    fluent[..n_tagging / 2].iter_mut().for_each(|f| *f = true);
    fluent.shuffle(rng);
    let mut kinds = vec![PairKind::Del; n_pairs];
    kinds[..n_pairs / 2].iter_mut().for_each(|k| *k = PairKind::Add);
    kinds.shuffle(rng);

    let mut out =
        PretrainingCorpus { tagging: Vec::with_capacity(n_tagging), pairs: Vec::with_capacity(n_pairs), consumed: 0 };
    let mut sentences = corpus.into_iter();
    let exhausted = |out: &PretrainingCorpus| CorruptError::InsufficientCorpus {
        needed,
        available: out.tagging.len() + out.pairs.len(),
    };

    for keep_fluent in fluent {
        let s = sentences.next().ok_or_else(|| exhausted(&out))?;
        out.consumed += 1;
        let example = if keep_fluent {
            TaggedExample { tokens: s.to_vec(), labels: vec![Tag::O; s.len()], source: s }
        } else {
            corrupt_for_tagging(&s, ngrams, rng)
        };
        out.tagging.push(example);
    }
    for kind in kinds {
        loop {
            let s = sentences.next().ok_or_else(|| exhausted(&out))?;
            out.consumed += 1;
            match make_pair(&s, kind, ngrams, rng) {
                Ok(pair) => {
                    out.pairs.push(pair);
                    break;
                }
                Err(CorruptError::DegenerateDelete) => continue,
                Err(e) => return Err(e),
            }
        }
    }
    Ok(out)
}
