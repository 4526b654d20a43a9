//! Glue between files and the core library: encoding, pseudo-data
//! generation, prediction and scoring.

use dforge_core::corruptor::{build_pretraining_corpus, NgramIndex, PretrainingCorpus, Tag, TagSequence};
use dforge_core::eval::{self, EvalReport};
use dforge_core::model::ModelParameters;
use dforge_core::numerics::Real;
use dforge_core::rng::seeded;
use dforge_core::textproc::{Sentence, Vocabulary};
use dforge_core::trainer::{self, Checkpoint, PairItem, TagItem};
use rand::seq::SliceRandom;

use crate::error::{Error, Result};

/// RNG stream for pseudo-data generation.
pub const CORRUPT_STREAM: u64 = 0xc0;
/// RNG stream for gold-set subsampling.
pub const SUBSAMPLE_STREAM: u64 = 0x5b;

pub fn encode_tagging(seqs: &[TagSequence], vocab: &Vocabulary) -> Vec<TagItem> {
    seqs.iter().map(|s| TagItem::encode(s, vocab)).collect()
}

pub fn encode_pairs(pairs: &[dforge_core::PairExample], vocab: &Vocabulary) -> Vec<PairItem> {
    pairs.iter().map(|p| PairItem::encode(p, vocab)).collect()
}

/// Pseudo tagging and pair sets drawn from `corpus[skip..]`.
pub fn pseudo_data(
    corpus: &[Sentence],
    skip: usize,
    ngrams: &NgramIndex,
    n_tagging: usize,
    n_pairs: usize,
    seed: u64,
) -> Result<PretrainingCorpus> {
    let source = corpus.iter().skip(skip).cloned();
    Ok(build_pretraining_corpus(source, n_tagging, n_pairs, ngrams, &mut seeded(seed, CORRUPT_STREAM))?)
}

/// The first `n` sequences of a seed-shuffled copy. `n = 0` keeps the whole
/// set in its original order.
pub fn subsample(seqs: &[TagSequence], n: usize, seed: u64) -> Vec<TagSequence> {
    let mut out = seqs.to_vec();
    if n > 0 {
        out.shuffle(&mut seeded(seed, SUBSAMPLE_STREAM));
        out.truncate(n);
    }
    out
}

/// Fails unless the checkpoint was trained against `vocab`.
pub fn check_vocab(ckpt: &Checkpoint, vocab: &Vocabulary) -> Result<()> {
    if ckpt.metadata.vocab_fingerprint != vocab.fingerprint() {
        return Err(trainer::TrainError::VocabMismatch {
            checkpoint: ckpt.metadata.vocab_fingerprint,
            data: vocab.fingerprint(),
        }
        .into());
    }
    Ok(())
}

/// Predicted labels for token sequences.
pub fn predict<T: Real>(
    params: &ModelParameters<T>,
    tokens: &[&[String]],
    vocab: &Vocabulary,
) -> Result<Vec<Vec<Tag>>> {
    let items: Vec<TagItem> =
        tokens.iter().map(|t| TagItem { ids: vocab.encode(t), labels: vec![Tag::O; t.len()] }).collect();
    Ok(trainer::predict_items(params, &items, params.config().max_len)?)
}

/// Scores `pred` against `gold`, checking that both carry the same tokens.
pub fn score_sequences(pred: &[TagSequence], gold: &[TagSequence]) -> Result<EvalReport> {
    if pred.len() != gold.len() {
        return Err(eval::EvalError::CountMismatch { pred: pred.len(), gold: gold.len() }.into());
    }
    for (i, (p, g)) in pred.iter().zip(gold).enumerate() {
        if p.tokens != g.tokens && p.len() == g.len() {
            return Err(Error::data(format!("sentence {i}: predicted tokens differ from gold tokens")));
        }
    }
    let pred_labels: Vec<&[Tag]> = pred.iter().map(|p| &p.labels[..]).collect();
    score_labels(&pred_labels, gold)
}

pub fn score_labels<P: AsRef<[Tag]>>(pred: &[P], gold: &[TagSequence]) -> Result<EvalReport> {
    let gold: Vec<(&[String], &[Tag])> = gold.iter().map(|g| (&g.tokens[..], &g.labels[..])).collect();
    Ok(eval::evaluate(pred, &gold)?)
}

/// Tags `gold`'s tokens with the model and scores the result.
pub fn evaluate_model<T: Real>(
    params: &ModelParameters<T>,
    gold: &[TagSequence],
    vocab: &Vocabulary,
) -> Result<EvalReport> {
    let tokens: Vec<&[String]> = gold.iter().map(|g| &g.tokens[..]).collect();
    let pred = predict(params, &tokens, vocab)?;
    score_labels(&pred, gold)
}
