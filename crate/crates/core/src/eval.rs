//! Token-level scoring of `D` predictions, the repetition/non-repetition
//! breakdown, and pair-label accuracy.

use alloc::vec::Vec;

use crate::corruptor::{PairLabel, Tag};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EvalError {
    #[error("sentence {index}: {pred} predicted labels for {gold} gold labels")]
    Alignment { index: usize, pred: usize, gold: usize },
    #[error("{pred} predictions for {gold} gold items")]
    CountMismatch { pred: usize, gold: usize },
}

type Result<T> = core::result::Result<T, EvalError>;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl core::ops::Add for Counts {
    type Output = Counts;
    fn add(self, o: Counts) -> Counts {
        Counts { tp: self.tp + o.tp, fp: self.fp + o.fp, fn_: self.fn_ + o.fn_ }
    }
}

/// Precision, recall and F1 derived from [`Counts`]. A zero denominator
/// yields 0 and sets the matching `*_undefined` flag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub counts: Counts,
    pub precision_undefined: bool,
    pub recall_undefined: bool,
}

impl Prf {
    pub fn from_counts(counts: Counts) -> Prf {
        let ratio = |num: u64, den: u64| if den == 0 { (0.0, true) } else { (num as f64 / den as f64, false) };
        let (precision, precision_undefined) = ratio(counts.tp, counts.tp + counts.fp);
        let (recall, recall_undefined) = ratio(counts.tp, counts.tp + counts.fn_);
        let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        Prf { precision, recall, f1, counts, precision_undefined, recall_undefined }
    }
}

fn check_aligned<P: AsRef<[Tag]>, G: AsRef<[Tag]>>(pred: &[P], gold: &[G]) -> Result<()> {
    if pred.len() != gold.len() {
        return Err(EvalError::CountMismatch { pred: pred.len(), gold: gold.len() });
    }
    for (index, (p, g)) in pred.iter().zip(gold).enumerate() {
        let (p, g) = (p.as_ref(), g.as_ref());
        if p.len() != g.len() {
            return Err(EvalError::Alignment { index, pred: p.len(), gold: g.len() });
        }
    }
    Ok(())
}

/// Micro-averaged counts of `D` over the whole corpus.
pub fn token_counts<P: AsRef<[Tag]>, G: AsRef<[Tag]>>(pred: &[P], gold: &[G]) -> Result<Counts> {
    check_aligned(pred, gold)?;
    let mut c = Counts::default();
    for (p, g) in pred.iter().zip(gold) {
        for (&p, &g) in p.as_ref().iter().zip(g.as_ref()) {
            match (p, g) {
                (Tag::D, Tag::D) => c.tp += 1,
                (Tag::D, Tag::O) => c.fp += 1,
                (Tag::O, Tag::D) => c.fn_ += 1,
                (Tag::O, Tag::O) => {}
            }
        }
    }
    Ok(c)
}

pub fn token_prf<P: AsRef<[Tag]>, G: AsRef<[Tag]>>(pred: &[P], gold: &[G]) -> Result<Prf> {
    token_counts(pred, gold).map(Prf::from_counts)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpanKind {
    Repetition,
    NonRepetition,
}

/// A maximal run of `D` labels, `start..end`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub kind: SpanKind,
}

/// Splits gold `D` runs into repetition spans (the span's tokens reappear as
/// the next `O` tokens after it, skipping other `D` tokens) and the rest.
pub fn split_disfluency_spans<S: AsRef<str>>(tokens: &[S], labels: &[Tag]) -> Vec<Span> {
    let n = tokens.len().min(labels.len());
    let mut spans = Vec::new();
    let mut i = 0;
    while i < n {
        if labels[i] != Tag::D {
            i += 1;
            continue;
        }
        let start = i;
        while i < n && labels[i] == Tag::D {
            i += 1;
        }
        let mut following = (i..n).filter(|&j| labels[j] == Tag::O).map(|j| tokens[j].as_ref());
        let repeated = tokens[start..i].iter().all(|t| following.next() == Some(t.as_ref()));
        let kind = if repeated { SpanKind::Repetition } else { SpanKind::NonRepetition };
        spans.push(Span { start, end: i, kind });
    }
    spans
}

/// Scores restricted to gold repetition spans, gold non-repetition spans,
/// and overall. Predicted `D` on gold `O` only counts against `either`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CategoryPrf {
    pub repetition: Prf,
    pub non_repetition: Prf,
    pub either: Prf,
}

pub fn category_prf<P, T, G, S>(pred: &[P], gold: &[(T, G)]) -> Result<CategoryPrf>
where
    P: AsRef<[Tag]>,
    T: AsRef<[S]>,
    G: AsRef<[Tag]>,
    S: AsRef<str>,
{
    let gold_labels: Vec<&[Tag]> = gold.iter().map(|(_, g)| g.as_ref()).collect();
    let either = token_counts(pred, &gold_labels)?;
    let (mut rep, mut non) = (Counts::default(), Counts::default());
    for (p, (tokens, labels)) in pred.iter().zip(gold) {
        let p = p.as_ref();
        for span in split_disfluency_spans(tokens.as_ref(), labels.as_ref()) {
            let c = match span.kind {
                SpanKind::Repetition => &mut rep,
                SpanKind::NonRepetition => &mut non,
            };
            for &t in &p[span.start..span.end] {
                match t {
                    Tag::D => c.tp += 1,
                    Tag::O => c.fn_ += 1,
                }
            }
        }
    }
    Ok(CategoryPrf {
        repetition: Prf::from_counts(rep),
        non_repetition: Prf::from_counts(non),
        either: Prf::from_counts(either),
    })
}

/// Fraction of exact matches over the 4-way label set.
pub fn pair_accuracy(pred: &[PairLabel], gold: &[PairLabel]) -> Result<f64> {
    if pred.len() != gold.len() {
        return Err(EvalError::CountMismatch { pred: pred.len(), gold: gold.len() });
    }
    if gold.is_empty() {
        return Ok(0.0);
    }
    let hits = pred.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / gold.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub repetition_f1: f64,
    pub non_repetition_f1: f64,
    pub either_f1: f64,
    pub pair_accuracy: Option<f64>,
    pub counts: Counts,
    pub precision_undefined: bool,
    pub recall_undefined: bool,
}

impl EvalReport {
    pub fn new(categories: &CategoryPrf, pair_accuracy: Option<f64>) -> Self {
        let e = &categories.either;
        EvalReport {
            precision: e.precision,
            recall: e.recall,
            f1: e.f1,
            repetition_f1: categories.repetition.f1,
            non_repetition_f1: categories.non_repetition.f1,
            either_f1: e.f1,
            pair_accuracy,
            counts: e.counts,
            precision_undefined: e.precision_undefined,
            recall_undefined: e.recall_undefined,
        }
    }
}

/// Full tagging report over `gold` `(tokens, labels)` sentences.
pub fn evaluate<P, T, G, S>(pred: &[P], gold: &[(T, G)]) -> Result<EvalReport>
where
    P: AsRef<[Tag]>,
    T: AsRef<[S]>,
    G: AsRef<[Tag]>,
    S: AsRef<str>,
{
    Ok(EvalReport::new(&category_prf(pred, gold)?, None))
}
