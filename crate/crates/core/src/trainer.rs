//! Adam, the mixed tagging/pair batch sampler, and the pre-training and
//! fine-tuning loops.

use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

pub use crate::checkpoint::{Checkpoint, CheckpointError, Metadata, TrainingTask, CHECKPOINT_VERSION};
use crate::corruptor::{PairExample, PairLabel, Tag, TagSequence};
use crate::eval;
use crate::model::{joint_loss, predict_pairs, predict_tags, EncodedBatch, ModelConfig, ModelError, ModelParameters};
use crate::numerics::{Real, Tensor};
use crate::rng::{derive_seed, seeded};
use crate::textproc::Vocabulary;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrainError {
    #[error("invalid hyperparameters: {0}")]
    Hyper(String),
    #[error("non-finite gradient for {name}")]
    NonFiniteGradient { name: String },
    #[error("{0} set is empty")]
    EmptyData(&'static str),
    #[error("checkpoint vocabulary {checkpoint:#018x} does not match data vocabulary {data:#018x}")]
    VocabMismatch { checkpoint: u64, data: u64 },
    #[error("checkpoint config does not match the requested model config")]
    ConfigMismatch,
    #[error("loss became non-finite at step {step}")]
    Diverged { step: u64, last_good: Box<Checkpoint> },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] eval::EvalError),
}

type Result<T> = core::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq)]
pub struct HyperParams {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub tagging_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub max_stream_tokens: usize,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl HyperParams {
    /// lr 1e-4, batch 256, 30 epochs.
    pub fn pretrain_paper() -> Self {
        HyperParams {
            learning_rate: 1e-4,
            batch_size: 256,
            epochs: 30,
            tagging_fraction: 0.3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            max_stream_tokens: 128,
            clip_norm: Some(1.0),
        }
    }

    /// lr 1e-5, batch 32, 20 epochs.
    pub fn finetune_paper() -> Self {
        HyperParams { learning_rate: 1e-5, batch_size: 32, epochs: 20, ..Self::pretrain_paper() }
    }

    /// Desk-scale pre-training for the toy model.
    pub fn pretrain_toy() -> Self {
        HyperParams { learning_rate: 1e-3, batch_size: 64, epochs: 6, ..Self::pretrain_paper() }
    }

    /// Desk-scale fine-tuning for the toy model.
    pub fn finetune_toy() -> Self {
        HyperParams { learning_rate: 3e-4, batch_size: 16, epochs: 20, ..Self::pretrain_paper() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Hyper(m.into()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.tagging_fraction > 0.0 && self.tagging_fraction < 1.0) {
            return bad("tagging_fraction must lie strictly between 0 and 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return bad("adam betas must lie in [0, 1) and eps must be positive");
        }
        if self.max_stream_tokens < 3 {
            return bad("max_stream_tokens must be at least 3");
        }
        if matches!(self.clip_norm, Some(c) if c.is_nan() || c <= 0.0) {
            return bad("clip_norm must be positive");
        }
        Ok(())
    }

    /// Tagging and pair counts in one mixed batch.
    pub fn batch_split(&self) -> (usize, usize) {
        let tagging = libm::floor(self.tagging_fraction * self.batch_size as f64) as usize;
        (tagging, self.batch_size - tagging)
    }
}

/// Adam moments for every parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(params: &ModelParameters<T>) -> Self {
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        OptimizerState { step: 0, m: zeros(), v: zeros() }
    }
}

/// Scales `grads` so their joint L2 norm is at most `max_norm`; returns the
/// norm before scaling.
pub fn clip_global_norm<T: Real>(grads: &mut [Option<Tensor<T>>], max_norm: f64) -> f64 {
    let sq: f64 = grads
        .iter()
        .flatten()
        .flat_map(|g| g.data())
        .map(|v| {
            let x = v.to_f64().unwrap();
            x * x
        })
        .sum();
    let norm = libm::sqrt(sq);
    if norm > max_norm {
        let scale = T::of(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            for v in g.data_mut() {
                *v = *v * scale;
            }
        }
    }
    norm
}

/// One bias-corrected Adam update. Parameters without a gradient are
/// treated as having a zero gradient.
pub fn adam_step<T: Real>(
    params: &mut ModelParameters<T>,
    grads: &[Option<Tensor<T>>],
    state: &mut OptimizerState<T>,
    lr: f64,
    hyper: &HyperParams,
) -> Result<()> {
    for (i, g) in grads.iter().enumerate() {
        if let Some(g) = g {
            if !g.is_finite() {
                return Err(TrainError::NonFiniteGradient { name: params.names()[i].clone() });
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::of(hyper.beta1), T::of(hyper.beta2));
    let c1 = T::of(1.0 - libm::pow(hyper.beta1, f64::from(t)));
    let c2 = T::of(1.0 - libm::pow(hyper.beta2, f64::from(t)));
    let (lr, eps) = (T::of(lr), T::of(hyper.eps));
    let (one, zero) = (T::one(), T::zero());
    for (i, p) in params.tensors_mut().iter_mut().enumerate() {
        let g = grads.get(i).and_then(Option::as_ref);
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            let gj = g.map_or(zero, |g| g.data()[j]);
            m[j] = b1 * m[j] + (one - b1) * gj;
            v[j] = b2 * v[j] + (one - b2) * gj * gj;
            let mhat = m[j] / c1;
            let vhat = v[j] / c2;
            *w = *w - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// A tagging example in id space.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TagItem {
    pub ids: Vec<u32>,
    pub labels: Vec<Tag>,
}

impl TagItem {
    pub fn encode(seq: &TagSequence, vocab: &Vocabulary) -> Self {
        TagItem { ids: vocab.encode(&seq.tokens), labels: seq.labels.clone() }
    }
}

/// A sentence pair in id space.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairItem {
    pub s1: Vec<u32>,
    pub s2: Vec<u32>,
    pub label: PairLabel,
}

impl PairItem {
    pub fn encode(pair: &PairExample, vocab: &Vocabulary) -> Self {
        PairItem { s1: vocab.encode(&pair.s1), s2: vocab.encode(&pair.s2), label: pair.label }
    }
}

pub fn tag_batch(items: &[&TagItem], max_len: usize, with_labels: bool) -> EncodedBatch {
    let labels: Vec<Vec<usize>> = items.iter().map(|it| it.labels.iter().map(|l| l.index()).collect()).collect();
    let rows: Vec<(&[u32], Option<&[usize]>)> =
        items.iter().zip(&labels).map(|(it, l)| (it.ids.as_slice(), with_labels.then_some(l.as_slice()))).collect();
    EncodedBatch::single(&rows, max_len)
}

pub fn pair_batch(items: &[&PairItem], max_len: usize, with_labels: bool) -> EncodedBatch {
    let rows: Vec<(&[u32], &[u32], Option<usize>)> =
        items.iter().map(|it| (it.s1.as_slice(), it.s2.as_slice(), with_labels.then_some(it.label.index()))).collect();
    EncodedBatch::pairs(&rows, max_len)
}

/// Indices into the tagging and pair sets for one training step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MixedBatch {
    pub tagging: Vec<usize>,
    pub pairs: Vec<usize>,
}

const SHUFFLE_STREAM: u64 = 0x5417;

fn epoch_order(len: usize, seed: u64, epoch: usize, which: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut seeded(derive_seed(seed, SHUFFLE_STREAM + which), epoch as u64));
    order
}

/// Batches for one epoch. Every batch holds exactly `tagging_per_batch`
/// tagging and `pairs_per_batch` pair indices. The epoch runs until both
/// sets have been visited in full; the set that finishes first continues
/// from a fresh permutation.
pub fn mixed_batch_sampler(
    n_tagging: usize,
    n_pairs: usize,
    tagging_per_batch: usize,
    pairs_per_batch: usize,
    seed: u64,
    epoch: usize,
) -> Result<Vec<MixedBatch>> {
    if tagging_per_batch > 0 && n_tagging == 0 {
        return Err(TrainError::EmptyData("tagging"));
    }
    if pairs_per_batch > 0 && n_pairs == 0 {
        return Err(TrainError::EmptyData("pair"));
    }
    if tagging_per_batch + pairs_per_batch == 0 {
        return Err(TrainError::Hyper("empty batches".into()));
    }
    let batches_for = |n: usize, per: usize| if per == 0 { 0 } else { n.div_ceil(per) };
    let count = batches_for(n_tagging, tagging_per_batch).max(batches_for(n_pairs, pairs_per_batch));
    let stream = |n: usize, per: usize, which: u64| -> Vec<usize> {
        let mut out = Vec::with_capacity(count * per);
        let mut lap = 0;
        while out.len() < count * per {
            let order = epoch_order(n, derive_seed(seed, lap), epoch, which);
            out.extend(order.into_iter().take(count * per - out.len()));
            lap += 1;
        }
        out
    };
    let tags = stream(n_tagging, tagging_per_batch, 0);
    let pairs = stream(n_pairs, pairs_per_batch, 1);
    Ok((0..count)
        .map(|b| MixedBatch {
            tagging: tags[b * tagging_per_batch..(b + 1) * tagging_per_batch].to_vec(),
            pairs: pairs[b * pairs_per_batch..(b + 1) * pairs_per_batch].to_vec(),
        })
        .collect())
}

/// One optimizer step as reported to an [`Observer`].
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub task: &'static str,
    pub loss: f64,
    pub tag_loss: Option<f64>,
    pub classify_loss: Option<f64>,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub heldout_f1: Option<f64>,
    pub heldout_pair_accuracy: Option<f64>,
}

/// Receives progress from the training loops.
pub trait Observer {
    fn on_step(&mut self, _record: &StepRecord) {}
    fn on_epoch(&mut self, _record: &EpochRecord) {}
}

impl Observer for () {}

/// Inference batch size for held-out scoring.
const EVAL_BATCH: usize = 64;

/// Predicted tags for every item, in order.
pub fn predict_items<T: Real>(params: &ModelParameters<T>, items: &[TagItem], max_len: usize) -> Result<Vec<Vec<Tag>>> {
    let mut out = Vec::with_capacity(items.len());
    let refs: Vec<&TagItem> = items.iter().collect();
    for chunk in refs.chunks(EVAL_BATCH) {
        let batch = tag_batch(chunk, max_len, false);
        for (item, tags) in chunk.iter().zip(predict_tags(params, &batch)?) {
            // Tokens cut by truncation are predicted fluent.
            let mut row: Vec<Tag> = tags.into_iter().map(Tag::from_index).collect();
            row.resize(item.ids.len(), Tag::O);
            out.push(row);
        }
    }
    Ok(out)
}

/// Token-level F1 of `params` on `items`.
pub fn tagging_f1<T: Real>(params: &ModelParameters<T>, items: &[TagItem], max_len: usize) -> Result<f64> {
    let pred = predict_items(params, items, max_len)?;
    let gold: Vec<&[Tag]> = items.iter().map(|it| it.labels.as_slice()).collect();
    Ok(eval::token_prf(&pred, &gold)?.f1)
}

pub fn predict_pair_items<T: Real>(
    params: &ModelParameters<T>,
    items: &[PairItem],
    max_len: usize,
) -> Result<Vec<PairLabel>> {
    let refs: Vec<&PairItem> = items.iter().collect();
    let mut out = Vec::with_capacity(items.len());
    for chunk in refs.chunks(EVAL_BATCH) {
        let batch = pair_batch(chunk, max_len, false);
        out.extend(predict_pairs(params, &batch)?.into_iter().map(|i| PairLabel::from_index(i).expect("4 classes")));
    }
    Ok(out)
}

pub fn pair_accuracy<T: Real>(params: &ModelParameters<T>, items: &[PairItem], max_len: usize) -> Result<f64> {
    let pred = predict_pair_items(params, items, max_len)?;
    let gold: Vec<PairLabel> = items.iter().map(|it| it.label).collect();
    Ok(eval::pair_accuracy(&pred, &gold)?)
}

/// Training and held-out sets for pre-training.
#[derive(Debug, Clone, Copy)]
pub struct PretrainData<'a> {
    pub tagging: &'a [TagItem],
    pub pairs: &'a [PairItem],
    pub heldout_tagging: &'a [TagItem],
    pub heldout_pairs: &'a [PairItem],
}

const DROPOUT_STREAM: u64 = 0xd20;
const INIT_SEED_STREAM: u64 = 0x1417;

fn stream_len(config: &ModelConfig, hyper: &HyperParams) -> usize {
    config.max_len.min(hyper.max_stream_tokens)
}

/// Joint pre-training of layers I, E, T and C. `task` selects both
/// objectives, or one of them alone as an ablation; single-task runs fill
/// whole batches with that task's examples.
pub fn pretrain(
    config: &ModelConfig,
    hyper: &HyperParams,
    task: TrainingTask,
    data: PretrainData<'_>,
    vocab_fingerprint: u64,
    observer: &mut dyn Observer,
) -> Result<Checkpoint> {
    hyper.validate()?;
    let (per_tag, per_pair) = match task {
        TrainingTask::Multi => hyper.batch_split(),
        TrainingTask::Tagging | TrainingTask::Finetune => (hyper.batch_size, 0),
        TrainingTask::Classification => (0, hyper.batch_size),
    };
    let mut params = ModelParameters::<f32>::init(config, derive_seed(hyper.seed, INIT_SEED_STREAM), true)?;
    let mut state = OptimizerState::new(&params);
    let mut history = Vec::new();
    let max_len = stream_len(config, hyper);
    let mut step = 0u64;
    let metadata = |epoch: usize, history: &[f64]| Metadata {
        epoch: epoch as u32,
        seed: hyper.seed,
        task,
        loss_history: history.to_vec(),
        vocab_fingerprint,
        clip_norm: hyper.clip_norm,
    };

    for epoch in 0..hyper.epochs {
        let batches = mixed_batch_sampler(data.tagging.len(), data.pairs.len(), per_tag, per_pair, hyper.seed, epoch)?;
        let mut total = 0.0;
        for mb in &batches {
            let tb = (!mb.tagging.is_empty()).then(|| {
                let items: Vec<&TagItem> = mb.tagging.iter().map(|&i| &data.tagging[i]).collect();
                tag_batch(&items, max_len, true)
            });
            let pb = (!mb.pairs.is_empty()).then(|| {
                let items: Vec<&PairItem> = mb.pairs.iter().map(|&i| &data.pairs[i]).collect();
                pair_batch(&items, max_len, true)
            });
            let dropout_seed = derive_seed(derive_seed(hyper.seed, DROPOUT_STREAM), step);
            let out = joint_loss(&params, tb.as_ref(), pb.as_ref(), Some(dropout_seed))?;
            let loss = f64::from(out.loss);
            if !loss.is_finite() {
                let last_good = Checkpoint::new(params, Some(state), metadata(epoch, &history));
                return Err(TrainError::Diverged { step, last_good: Box::new(last_good) });
            }
            let mut grads = out.grads.into_vec();
            if let Some(c) = hyper.clip_norm {
                clip_global_norm(&mut grads, c);
            }
            adam_step(&mut params, &grads, &mut state, hyper.learning_rate, hyper)?;
            observer.on_step(&StepRecord {
                step,
                epoch,
                task: task.name(),
                loss,
                tag_loss: out.tag_loss.map(f64::from),
                classify_loss: out.classify_loss.map(f64::from),
                learning_rate: hyper.learning_rate,
            });
            total += loss;
            step += 1;
        }
        let mean_loss = total / batches.len().max(1) as f64;
        history.push(mean_loss);
        let heldout_f1 = if data.heldout_tagging.is_empty() || per_tag == 0 {
            None
        } else {
            Some(tagging_f1(&params, data.heldout_tagging, max_len)?)
        };
        let heldout_pair_accuracy = if data.heldout_pairs.is_empty() || per_pair == 0 {
            None
        } else {
            Some(pair_accuracy(&params, data.heldout_pairs, max_len)?)
        };
        observer.on_epoch(&EpochRecord { epoch, mean_loss, heldout_f1, heldout_pair_accuracy });
    }
    Ok(Checkpoint::new(params, Some(state), metadata(hyper.epochs, &history)))
}

/// Gold training and development sets for fine-tuning.
#[derive(Debug, Clone, Copy)]
pub struct FinetuneData<'a> {
    pub train: &'a [TagItem],
    pub dev: &'a [TagItem],
}

/// Trains layers I, E and T on the tagging loss, starting from `init` or, if
/// `None`, from a random initialization of `config`. Layer C is dropped. The
/// returned parameters are those of the epoch with the best dev F1 (the
/// earliest on ties, the last epoch when `dev` is empty).
pub fn finetune(
    init: Option<&Checkpoint>,
    config: &ModelConfig,
    hyper: &HyperParams,
    data: FinetuneData<'_>,
    vocab_fingerprint: u64,
    observer: &mut dyn Observer,
) -> Result<Checkpoint> {
    hyper.validate()?;
    let mut params = match init {
        Some(ckpt) => {
            if ckpt.metadata.vocab_fingerprint != vocab_fingerprint {
                return Err(TrainError::VocabMismatch {
                    checkpoint: ckpt.metadata.vocab_fingerprint,
                    data: vocab_fingerprint,
                });
            }
            if ckpt.params.config() != config {
                return Err(TrainError::ConfigMismatch);
            }
            ckpt.params.clone().without_classifier()
        }
        None => ModelParameters::<f32>::init(config, derive_seed(hyper.seed, INIT_SEED_STREAM), false)?,
    };
    let metadata = |epoch: usize, history: &[f64]| Metadata {
        epoch: epoch as u32,
        seed: hyper.seed,
        task: TrainingTask::Finetune,
        loss_history: history.to_vec(),
        vocab_fingerprint,
        clip_norm: hyper.clip_norm,
    };
    if hyper.epochs == 0 {
        return Ok(Checkpoint::new(params, None, metadata(0, &[])));
    }
    if data.train.is_empty() {
        return Err(TrainError::EmptyData("training"));
    }
    let max_len = stream_len(config, hyper);
    let mut state = OptimizerState::new(&params);
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, ModelParameters<f32>)> = None;
    let mut step = 0u64;
    for epoch in 0..hyper.epochs {
        let order = epoch_order(data.train.len(), hyper.seed, epoch, 2);
        let mut total = 0.0;
        let mut count = 0;
        for chunk in order.chunks(hyper.batch_size) {
            let items: Vec<&TagItem> = chunk.iter().map(|&i| &data.train[i]).collect();
            let batch = tag_batch(&items, max_len, true);
            let dropout_seed = derive_seed(derive_seed(hyper.seed, DROPOUT_STREAM), step);
            let out = match joint_loss(&params, Some(&batch), None, Some(dropout_seed)) {
                // A batch made only of empty sentences has nothing to learn.
                Err(ModelError::Numerics(crate::numerics::NumericsError::MaskedEverything)) => continue,
                other => other?,
            };
            let loss = f64::from(out.loss);
            if !loss.is_finite() {
                let last_good = Checkpoint::new(params, Some(state), metadata(epoch, &history));
                return Err(TrainError::Diverged { step, last_good: Box::new(last_good) });
            }
            let mut grads = out.grads.into_vec();
            if let Some(c) = hyper.clip_norm {
                clip_global_norm(&mut grads, c);
            }
            adam_step(&mut params, &grads, &mut state, hyper.learning_rate, hyper)?;
            observer.on_step(&StepRecord {
                step,
                epoch,
                task: TrainingTask::Finetune.name(),
                loss,
                tag_loss: Some(loss),
                classify_loss: None,
                learning_rate: hyper.learning_rate,
            });
            total += loss;
            count += 1;
            step += 1;
        }
        let mean_loss = total / count.max(1) as f64;
        history.push(mean_loss);
        let dev_f1 = if data.dev.is_empty() { None } else { Some(tagging_f1(&params, data.dev, max_len)?) };
        observer.on_epoch(&EpochRecord { epoch, mean_loss, heldout_f1: dev_f1, heldout_pair_accuracy: None });
        let score = dev_f1.unwrap_or(f64::INFINITY);
        if best.as_ref().is_none_or(|(b, _, _)| score > *b || dev_f1.is_none()) {
            best = Some((score, epoch + 1, params.clone()));
        }
    }
    let (_, epoch, params) = best.expect("at least one epoch ran");
    let mut meta = metadata(epoch, &history);
    meta.loss_history = history;
    Ok(Checkpoint::new(params, None, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::Rng;
    use std::vec;

    #[test]
    fn batch_split_floors() {
        let h = |b| HyperParams { batch_size: b, ..HyperParams::pretrain_paper() };
        assert_eq!(h(10).batch_split(), (3, 7));
        assert_eq!(h(256).batch_split(), (76, 180));
        assert_eq!(h(1).batch_split(), (0, 1));
    }

    #[test]
    fn hyper_validation() {
        assert!(HyperParams::pretrain_paper().validate().is_ok());
        assert!(HyperParams::finetune_toy().validate().is_ok());
        let bad = [
            HyperParams { learning_rate: 0.0, ..HyperParams::pretrain_paper() },
            HyperParams { tagging_fraction: 1.0, ..HyperParams::pretrain_paper() },
            HyperParams { batch_size: 0, ..HyperParams::pretrain_paper() },
            HyperParams { clip_norm: Some(0.0), ..HyperParams::pretrain_paper() },
        ];
        for h in bad {
            assert!(h.validate().is_err(), "{h:?}");
        }
    }

    fn scalar_params(w: f64) -> ModelParameters<f64> {
        // Borrow a real parameter set and treat its first element as `w`.
        let mut p = ModelParameters::<f64>::init(&ModelConfig::new(1, 4, 1, 5), 0, false).unwrap();
        for t in p.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        p.tensors_mut()[0].data_mut()[0] = w;
        p
    }

    fn grad_of(p: &ModelParameters<f64>, g0: f64) -> Vec<Option<Tensor<f64>>> {
        let mut grads: Vec<Option<Tensor<f64>>> = vec![None; p.len()];
        let mut t = Tensor::zeros(p.tensors()[0].shape());
        t.data_mut()[0] = g0;
        grads[0] = Some(t);
        grads
    }

    #[test]
    fn adam_converges_on_a_parabola() {
        let hyper = HyperParams::pretrain_paper();
        let mut p = scalar_params(0.0);
        let mut state = OptimizerState::new(&p);
        for _ in 0..200 {
            let w = p.tensors()[0].data()[0];
            let grads = grad_of(&p, 2.0 * (w - 3.0));
            adam_step(&mut p, &grads, &mut state, 0.1, &hyper).unwrap();
        }
        // Reference loop written out by hand.
        let (mut w, mut m, mut v) = (0.0f64, 0.0, 0.0);
        for t in 1..=200 {
            let g = 2.0 * (w - 3.0);
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            w -= 0.1 * mh / (vh.sqrt() + 1e-8);
        }
        let got = p.tensors()[0].data()[0];
        assert!((got - 3.0).abs() < 0.05, "{got}");
        assert!((got - w).abs() < 1e-12);
    }

    #[test]
    fn adam_first_step_and_zero_gradient() {
        let hyper = HyperParams::pretrain_paper();
        let mut p = scalar_params(1.0);
        let mut state = OptimizerState::new(&p);
        let before = p.clone();
        let none = vec![None; p.len()];
        adam_step(&mut p, &none, &mut state, 0.01, &hyper).unwrap();
        assert_eq!(p, before);
        let mut p = scalar_params(1.0);
        let mut state = OptimizerState::new(&p);
        let g = grad_of(&p, -250.0);
        adam_step(&mut p, &g, &mut state, 0.01, &hyper).unwrap();
        assert!((p.tensors()[0].data()[0] - 1.01).abs() < 1e-9);
        let nan = grad_of(&p, f64::NAN);
        assert_eq!(
            adam_step(&mut p, &nan, &mut state, 0.01, &hyper),
            Err(TrainError::NonFiniteGradient { name: "embeddings.token".into() })
        );
    }

    #[test]
    fn clipping_scales_to_the_ceiling() {
        let mut grads = vec![Some(Tensor::new(vec![2], vec![3.0f64, 4.0]).unwrap()), None];
        assert_eq!(clip_global_norm(&mut grads, 1.0), 5.0);
        let clipped = grads[0].clone().unwrap();
        assert!((clipped.data()[0] - 0.6).abs() < 1e-15 && (clipped.data()[1] - 0.8).abs() < 1e-15);
        assert!((clip_global_norm(&mut grads, 2.0) - 1.0).abs() < 1e-15);
        assert_eq!(grads[0].as_ref(), Some(&clipped));
    }

    #[test]
    fn sampler_composition_and_determinism() {
        let a = mixed_batch_sampler(1000, 700, 76, 180, 3, 0).unwrap();
        assert!(a.iter().all(|b| b.tagging.len() == 76 && b.pairs.len() == 180));
        assert_eq!(a.len(), 14);
        // Every example appears in the epoch.
        let mut seen = vec![false; 1000];
        a.iter().flat_map(|b| &b.tagging).for_each(|&i| seen[i] = true);
        assert!(seen.iter().all(|s| *s));
        let mut seen = vec![false; 700];
        a.iter().flat_map(|b| &b.pairs).for_each(|&i| seen[i] = true);
        assert!(seen.iter().all(|s| *s));
        assert_eq!(a, mixed_batch_sampler(1000, 700, 76, 180, 3, 0).unwrap());
        assert_ne!(a, mixed_batch_sampler(1000, 700, 76, 180, 3, 1).unwrap());
        assert!(mixed_batch_sampler(0, 700, 76, 180, 3, 0).is_err());
        assert!(mixed_batch_sampler(10, 0, 3, 7, 3, 0).is_err());
        let single = mixed_batch_sampler(10, 0, 4, 0, 3, 0).unwrap();
        assert_eq!(single.len(), 3);
    }

    fn toy_items(n: usize, seed: u64) -> (Vec<TagItem>, Vec<PairItem>) {
        // Tag D wherever a token repeats its successor; pairs label by length.
        let mut rng = seeded(seed, 0);
        let tags = (0..n)
            .map(|_| {
                let len = rng.gen_range(2..8);
                let mut ids: Vec<u32> = (0..len).map(|_| rng.gen_range(4..12)).collect();
                let k = rng.gen_range(0..len);
                if rng.gen_bool(0.5) {
                    ids.insert(k, ids[k]);
                }
                let labels = (0..ids.len())
                    .map(|i| if i + 1 < ids.len() && ids[i] == ids[i + 1] { Tag::D } else { Tag::O })
                    .collect();
                TagItem { ids, labels }
            })
            .collect();
        let pairs = (0..n)
            .map(|_| {
                let a: Vec<u32> = (0..rng.gen_range(2..6)).map(|_| rng.gen_range(4..12)).collect();
                let mut b = a.clone();
                b.push(rng.gen_range(4..12));
                let label = PairLabel::from_index(rng.gen_range(0..4)).unwrap();
                let (s1, s2) = if label.first_is_longer() { (b, a) } else { (a, b) };
                PairItem { s1, s2, label }
            })
            .collect();
        (tags, pairs)
    }

    fn tiny_config() -> ModelConfig {
        ModelConfig { max_len: 24, dropout: 0.0, ..ModelConfig::new(1, 16, 2, 12) }
    }

    struct Recorder(Vec<StepRecord>, Vec<EpochRecord>);

    impl Observer for Recorder {
        fn on_step(&mut self, r: &StepRecord) {
            self.0.push(r.clone());
        }
        fn on_epoch(&mut self, r: &EpochRecord) {
            self.1.push(r.clone());
        }
    }

    fn tiny_hyper(epochs: usize, seed: u64) -> HyperParams {
        HyperParams { learning_rate: 3e-3, batch_size: 20, epochs, seed, ..HyperParams::pretrain_paper() }
    }

    #[test]
    fn pretraining_is_deterministic_and_learns() {
        let (tags, pairs) = toy_items(200, 1);
        let data =
            PretrainData { tagging: &tags, pairs: &pairs, heldout_tagging: &tags[..50], heldout_pairs: &pairs[..50] };
        let mut first_epoch = 0.0;
        let mut fifth_epoch = 0.0;
        for seed in 0..3 {
            let mut rec = Recorder(vec![], vec![]);
            let a = pretrain(&tiny_config(), &tiny_hyper(5, seed), TrainingTask::Multi, data, 7, &mut rec).unwrap();
            first_epoch += rec.1[0].mean_loss;
            fifth_epoch += rec.1[4].mean_loss;
            assert!(rec.0.iter().all(|r| r.tag_loss.is_some() && r.classify_loss.is_some()));
            if seed == 0 {
                let b = pretrain(&tiny_config(), &tiny_hyper(5, seed), TrainingTask::Multi, data, 7, &mut ()).unwrap();
                assert_eq!(a, b);
                assert_eq!(a.metadata.loss_history.len(), 5);
                assert!(a.params.has_classifier());
                assert!(rec.1[4].heldout_f1.is_some() && rec.1[4].heldout_pair_accuracy.is_some());
            }
        }
        assert!(fifth_epoch < first_epoch, "{fifth_epoch} >= {first_epoch}");
    }

    #[test]
    fn recorded_loss_is_the_sum_of_task_losses() {
        let (tags, pairs) = toy_items(60, 2);
        let data = PretrainData { tagging: &tags, pairs: &pairs, heldout_tagging: &[], heldout_pairs: &[] };
        let mut rec = Recorder(vec![], vec![]);
        let hyper = tiny_hyper(1, 4);
        pretrain(&tiny_config(), &hyper, TrainingTask::Multi, data, 7, &mut rec).unwrap();
        for r in &rec.0 {
            let sum = r.tag_loss.unwrap() + r.classify_loss.unwrap();
            assert!((r.loss - sum).abs() <= 1e-6 * r.loss.abs(), "{r:?}");
        }
    }

    #[test]
    fn initial_loss_with_zero_heads() {
        let (tags, pairs) = toy_items(256, 3);
        let mut params = ModelParameters::<f64>::init(&tiny_config(), 1, true).unwrap();
        let at = params.len() - 4;
        for t in &mut params.tensors_mut()[at..] {
            t.data_mut().fill(0.0);
        }
        let t: Vec<&TagItem> = tags.iter().take(76).collect();
        let p: Vec<&PairItem> = pairs.iter().take(180).collect();
        let out = joint_loss(&params, Some(&tag_batch(&t, 24, true)), Some(&pair_batch(&p, 24, true)), None).unwrap();
        let expected = 2f64.ln() + 4f64.ln();
        assert!((out.loss - expected).abs() < 1e-12, "{}", out.loss);
    }

    #[test]
    fn single_task_pretraining_fills_batches() {
        let (tags, pairs) = toy_items(40, 5);
        let data = PretrainData { tagging: &tags, pairs: &pairs, heldout_tagging: &tags, heldout_pairs: &pairs };
        let mut rec = Recorder(vec![], vec![]);
        pretrain(&tiny_config(), &tiny_hyper(1, 0), TrainingTask::Tagging, data, 7, &mut rec).unwrap();
        assert!(rec.0.iter().all(|r| r.classify_loss.is_none()));
        assert!(rec.1[0].heldout_pair_accuracy.is_none());
        let mut rec = Recorder(vec![], vec![]);
        pretrain(&tiny_config(), &tiny_hyper(1, 0), TrainingTask::Classification, data, 7, &mut rec).unwrap();
        assert!(rec.0.iter().all(|r| r.tag_loss.is_none()));
    }

    #[test]
    fn finetune_projection_and_checks() {
        let (tags, pairs) = toy_items(40, 6);
        let data = PretrainData { tagging: &tags, pairs: &pairs, heldout_tagging: &[], heldout_pairs: &[] };
        let ckpt = pretrain(&tiny_config(), &tiny_hyper(1, 0), TrainingTask::Multi, data, 7, &mut ()).unwrap();
        let gold = FinetuneData { train: &tags, dev: &tags[..10] };
        let zero = HyperParams { epochs: 0, ..tiny_hyper(0, 0) };
        let projected = finetune(Some(&ckpt), &tiny_config(), &zero, gold, 7, &mut ()).unwrap();
        assert_eq!(projected.params, ckpt.params.clone().without_classifier());
        assert!(matches!(
            finetune(Some(&ckpt), &tiny_config(), &zero, gold, 8, &mut ()),
            Err(TrainError::VocabMismatch { checkpoint: 7, data: 8 })
        ));
        let other = ModelConfig { hidden: 8, ..tiny_config() };
        assert!(matches!(finetune(Some(&ckpt), &other, &zero, gold, 7, &mut ()), Err(TrainError::ConfigMismatch)));

        let mut rec = Recorder(vec![], vec![]);
        let tuned = finetune(Some(&ckpt), &tiny_config(), &tiny_hyper(3, 1), gold, 7, &mut rec).unwrap();
        assert!(!tuned.params.has_classifier());
        let best = rec.1.iter().map(|r| r.heldout_f1.unwrap()).fold(f64::NEG_INFINITY, f64::max);
        let first_best = rec.1.iter().position(|r| r.heldout_f1.unwrap() == best).unwrap();
        assert_eq!(tuned.metadata.epoch as usize, first_best + 1);
        assert_eq!(tagging_f1(&tuned.params, &tags[..10], 24).unwrap(), best);

        let scratch = finetune(None, &tiny_config(), &tiny_hyper(1, 1), gold, 7, &mut ()).unwrap();
        assert!(!scratch.params.has_classifier());
    }

    #[test]
    fn predictions_pad_truncated_tokens() {
        let params = ModelParameters::<f32>::init(&tiny_config(), 1, false).unwrap();
        let item = TagItem { ids: vec![5; 40], labels: vec![Tag::O; 40] };
        let pred = predict_items(&params, &[item], 24).unwrap();
        assert_eq!(pred[0].len(), 40);
    }
}
