//! Transformer encoder shared by two heads.
//!
//! Layer I sums token, position and segment embeddings. Layer E is a stack of
//! post-norm transformer blocks. Layer T projects every token representation
//! to `{O, D}` logits, layer C projects the `[CLS]` representation to the
//! four pair labels.
//!
//! Input layouts:
//!
//! ```text
//! single:  [CLS] x1 .. xn                 segments 0 0 .. 0
//! pair:    [CLS] a1 .. am [SEP] b1 .. bn  segments 0 0 .. 0 0 1 .. 1
//! ```

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::numerics::{gradcheck, Gradients, Graph, NodeId, NumericsError, Real, Tensor, LAYER_NORM_EPS};
use crate::rng::{seeded, truncated_normal, DetRng};
use crate::textproc::{CLS_ID, PAD_ID, SEP_ID};

pub const INIT_STD: f64 = 0.02;
const INIT_STREAM: u64 = 0x1417;
const PARAMS_PER_LAYER: usize = 16;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("token id {id} outside vocabulary of {vocab_size}")]
    VocabRange { id: u32, vocab_size: usize },
    #[error("expected {expected:?} layout, got {got:?}")]
    Layout { expected: Layout, got: Layout },
    #[error("sequence of {len} positions exceeds max length {max}")]
    TooLong { len: usize, max: usize },
    #[error("the model has no classification layer")]
    NoClassifier,
    #[error("parameter {name} has shape {got:?}, expected {expected:?}")]
    ParamShape { name: String, expected: Vec<usize>, got: Vec<usize> },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

type Result<T> = core::result::Result<T, ModelError>;

/// Architecture sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ff_inner: usize,
    pub dropout: f64,
    pub max_len: usize,
    pub vocab_size: usize,
    pub segments: usize,
    pub tag_classes: usize,
    pub pair_classes: usize,
}

impl ModelConfig {
    /// `layers`/`hidden`/`heads` with the remaining sizes at their defaults
    /// (feed-forward width 4·hidden, dropout 0.1, 128 positions).
    pub fn new(layers: usize, hidden: usize, heads: usize, vocab_size: usize) -> Self {
        ModelConfig {
            layers,
            hidden,
            heads,
            ff_inner: 4 * hidden,
            dropout: 0.1,
            max_len: 128,
            vocab_size,
            segments: 2,
            tag_classes: 2,
            pair_classes: 4,
        }
    }

    /// 6 layers, 512 hidden units, 8 heads.
    pub fn paper(vocab_size: usize) -> Self {
        Self::new(6, 512, 8, vocab_size)
    }

    /// 2 layers, 64 hidden units, 4 heads.
    pub fn toy(vocab_size: usize) -> Self {
        Self::new(2, 64, 4, vocab_size)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ModelError::Config(m.into()));
        if self.layers == 0 || self.hidden == 0 || self.heads == 0 {
            return bad("layers, hidden and heads must be positive");
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return bad("hidden size must be divisible by the head count");
        }
        if self.max_len < 3 {
            return bad("max_len must leave room for [CLS] and [SEP]");
        }
        if self.ff_inner < self.hidden {
            return bad("ff_inner must be at least the hidden size");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if self.vocab_size <= SEP_ID as usize {
            return bad("vocabulary must contain the reserved tokens");
        }
        if self.segments != 2 || self.tag_classes != 2 || self.pair_classes != 4 {
            return bad("segment/tag/pair class counts are fixed at 2/2/4");
        }
        Ok(())
    }

    /// Names and shapes of every parameter in storage order.
    pub fn parameter_shapes(&self, with_classifier: bool) -> Vec<(String, Vec<usize>)> {
        let (h, f) = (self.hidden, self.ff_inner);
        let mut out = vec![
            (String::from("embeddings.token"), vec![self.vocab_size, h]),
            (String::from("embeddings.position"), vec![self.max_len, h]),
            (String::from("embeddings.segment"), vec![self.segments, h]),
        ];
        for l in 0..self.layers {
            for (suffix, shape) in [
                ("attention.query.weight", vec![h, h]),
                ("attention.query.bias", vec![h]),
                ("attention.key.weight", vec![h, h]),
                ("attention.key.bias", vec![h]),
                ("attention.value.weight", vec![h, h]),
                ("attention.value.bias", vec![h]),
                ("attention.output.weight", vec![h, h]),
                ("attention.output.bias", vec![h]),
                ("attention_norm.gain", vec![h]),
                ("attention_norm.bias", vec![h]),
                ("feed_forward.inner.weight", vec![h, f]),
                ("feed_forward.inner.bias", vec![f]),
                ("feed_forward.outer.weight", vec![f, h]),
                ("feed_forward.outer.bias", vec![h]),
                ("output_norm.gain", vec![h]),
                ("output_norm.bias", vec![h]),
            ] {
                out.push((format!("encoder.{l}.{suffix}"), shape));
            }
        }
        out.push((String::from("tagger.weight"), vec![h, self.tag_classes]));
        out.push((String::from("tagger.bias"), vec![self.tag_classes]));
        if with_classifier {
            out.push((String::from("classifier.weight"), vec![h, self.pair_classes]));
            out.push((String::from("classifier.bias"), vec![self.pair_classes]));
        }
        out
    }

    pub fn parameter_count(&self, with_classifier: bool) -> usize {
        self.parameter_shapes(with_classifier).iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

/// Indices of the fixed parameters.
const TOKEN_EMB: usize = 0;
const POSITION_EMB: usize = 1;
const SEGMENT_EMB: usize = 2;
const FIXED_PARAMS: usize = 3;

fn layer_param(layer: usize, offset: usize) -> usize {
    FIXED_PARAMS + layer * PARAMS_PER_LAYER + offset
}

/// All learnable tensors of layers I, E, T and (optionally) C.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters<T> {
    config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> ModelParameters<T> {
    /// Truncated-normal (std 0.02) weights and embeddings, zero biases, unit
    /// layer-norm gains.
    pub fn init(config: &ModelConfig, seed: u64, with_classifier: bool) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(seed, INIT_STREAM);
        let (names, tensors) = config
            .parameter_shapes(with_classifier)
            .into_iter()
            .map(|(name, shape)| {
                let t = if name.ends_with(".bias") {
                    Tensor::zeros(&shape)
                } else if name.ends_with(".gain") {
                    Tensor::full(&shape, T::one())
                } else {
                    let n = shape.iter().product();
                    let data = (0..n).map(|_| T::of(truncated_normal(&mut rng, INIT_STD))).collect();
                    Tensor::new(shape, data).expect("shape matches")
                };
                (name, t)
            })
            .unzip();
        Ok(ModelParameters { config: config.clone(), names, tensors })
    }

    /// Assembles parameters from named tensors, checking names and shapes
    /// against `config`. The classifier pair may be absent.
    pub fn from_named(config: &ModelConfig, named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        config.validate()?;
        let with_classifier = named.iter().any(|(n, _)| n.starts_with("classifier."));
        let expected = config.parameter_shapes(with_classifier);
        if expected.len() != named.len() {
            return Err(ModelError::Config(format!("expected {} tensors, got {}", expected.len(), named.len())));
        }
        let mut names = Vec::with_capacity(named.len());
        let mut tensors = Vec::with_capacity(named.len());
        for ((name, shape), (got_name, tensor)) in expected.into_iter().zip(named) {
            if name != got_name || shape != tensor.shape() {
                return Err(ModelError::ParamShape { name: got_name, expected: shape, got: tensor.shape().to_vec() });
            }
            names.push(name);
            tensors.push(tensor);
        }
        Ok(ModelParameters { config: config.clone(), names, tensors })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.tensors[i])
    }

    pub fn has_classifier(&self) -> bool {
        self.tensors.len() == self.tagger_index() + 4
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    fn tagger_index(&self) -> usize {
        FIXED_PARAMS + self.config.layers * PARAMS_PER_LAYER
    }

    fn classifier_index(&self) -> Result<usize> {
        if self.has_classifier() {
            Ok(self.tagger_index() + 2)
        } else {
            Err(ModelError::NoClassifier)
        }
    }

    /// Drops layer C, keeping I, E and T untouched.
    pub fn without_classifier(mut self) -> Self {
        let keep = self.tagger_index() + 2;
        self.names.truncate(keep);
        self.tensors.truncate(keep);
        self
    }

    /// Adds a freshly initialized layer C if missing.
    pub fn with_classifier(mut self, seed: u64) -> Self {
        if self.has_classifier() {
            return self;
        }
        let fresh = ModelParameters::<T>::init(&self.config, seed, true).expect("config already validated");
        let at = fresh.tagger_index() + 2;
        self.names.extend(fresh.names[at..].iter().cloned());
        self.tensors.extend(fresh.tensors[at..].iter().cloned());
        self
    }

    pub fn cast<U: Real>(&self) -> ModelParameters<U> {
        ModelParameters {
            config: self.config.clone(),
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.map(|v| U::of(v.to_f64().unwrap()))).collect(),
        }
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    Single,
    Pair,
}

/// A padded batch of model inputs, plus training targets when known.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedBatch {
    pub layout: Layout,
    pub batch: usize,
    pub seq_len: usize,
    pub token_ids: Vec<u32>,
    pub segment_ids: Vec<u32>,
    pub position_ids: Vec<u32>,
    /// True at real (non-pad) positions.
    pub attention_mask: Vec<bool>,
    /// Per-position tag targets (single layout); `None` where no loss applies.
    pub tag_targets: Vec<Option<usize>>,
    /// Per-example pair targets (pair layout).
    pub pair_targets: Vec<Option<usize>>,
}

/// Truncates a pair so that `[CLS] a [SEP] b` fits in `max_len`, trimming
/// the longer side first and alternating on ties.
pub fn truncate_pair(a: &mut Vec<u32>, b: &mut Vec<u32>, max_len: usize) {
    let budget = max_len.saturating_sub(2);
    let mut trim_a_on_tie = true;
    while a.len() + b.len() > budget {
        let trim_a = match a.len().cmp(&b.len()) {
            core::cmp::Ordering::Greater => true,
            core::cmp::Ordering::Less => false,
            core::cmp::Ordering::Equal => {
                trim_a_on_tie = !trim_a_on_tie;
                !trim_a_on_tie
            }
        };
        if trim_a {
            a.pop();
        } else {
            b.pop();
        }
    }
}

impl EncodedBatch {
    /// `[CLS] x1..xn` per example; sequences longer than `max_len - 1` are
    /// cut on the right. `labels[i]` (if given) must match `ids[i]` in length.
    pub fn single(examples: &[(&[u32], Option<&[usize]>)], max_len: usize) -> Self {
        let lens: Vec<usize> = examples.iter().map(|(ids, _)| ids.len().min(max_len - 1) + 1).collect();
        let seq_len = lens.iter().copied().max().unwrap_or(1);
        let batch = examples.len();
        let mut out = EncodedBatch::empty(Layout::Single, batch, seq_len);
        for (b, (ids, labels)) in examples.iter().enumerate() {
            let base = b * seq_len;
            out.token_ids[base] = CLS_ID;
            out.attention_mask[base] = true;
            for i in 0..lens[b] - 1 {
                out.token_ids[base + 1 + i] = ids[i];
                out.attention_mask[base + 1 + i] = true;
                out.tag_targets[base + 1 + i] = labels.map(|l| l[i]);
            }
        }
        out
    }

    /// `[CLS] a [SEP] b` per example (no trailing `[SEP]`), truncated with
    /// [`truncate_pair`].
    pub fn pairs(examples: &[(&[u32], &[u32], Option<usize>)], max_len: usize) -> Self {
        let trimmed: Vec<(Vec<u32>, Vec<u32>)> = examples
            .iter()
            .map(|(a, b, _)| {
                let (mut a, mut b) = (a.to_vec(), b.to_vec());
                truncate_pair(&mut a, &mut b, max_len);
                (a, b)
            })
            .collect();
        let seq_len = trimmed.iter().map(|(a, b)| a.len() + b.len() + 2).max().unwrap_or(2);
        let batch = examples.len();
        let mut out = EncodedBatch::empty(Layout::Pair, batch, seq_len);
        for (i, ((a, b), (_, _, label))) in trimmed.iter().zip(examples).enumerate() {
            let base = i * seq_len;
            let seq = core::iter::once(CLS_ID).chain(a.iter().copied()).chain([SEP_ID]).chain(b.iter().copied());
            for (j, id) in seq.enumerate() {
                out.token_ids[base + j] = id;
                out.attention_mask[base + j] = true;
                out.segment_ids[base + j] = u32::from(j > a.len() + 1);
            }
            out.pair_targets[i] = *label;
        }
        out
    }

    fn empty(layout: Layout, batch: usize, seq_len: usize) -> Self {
        let n = batch * seq_len;
        EncodedBatch {
            layout,
            batch,
            seq_len,
            token_ids: vec![PAD_ID; n],
            segment_ids: vec![0; n],
            position_ids: (0..n).map(|i| (i % seq_len) as u32).collect(),
            attention_mask: vec![false; n],
            tag_targets: vec![None; n],
            pair_targets: vec![None; batch],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.batch == 0
    }

    /// Number of real tokens (excluding `[CLS]`) in example `b`.
    pub fn real_tokens(&self, b: usize) -> usize {
        self.length(b) - 1
    }

    /// Unpadded length of example `b`, special tokens included.
    pub fn length(&self, b: usize) -> usize {
        self.attention_mask[b * self.seq_len..(b + 1) * self.seq_len].iter().filter(|m| **m).count()
    }

    /// The examples `rows`, in that order, padded only to their own longest
    /// length.
    pub fn select(&self, rows: &[usize]) -> EncodedBatch {
        let seq_len = rows.iter().map(|&b| self.length(b)).max().unwrap_or(1).max(1);
        let mut out = EncodedBatch::empty(self.layout, rows.len(), seq_len);
        for (i, &b) in rows.iter().enumerate() {
            let (src, dst) = (b * self.seq_len, i * seq_len);
            let n = self.length(b);
            out.token_ids[dst..dst + n].copy_from_slice(&self.token_ids[src..src + n]);
            out.segment_ids[dst..dst + n].copy_from_slice(&self.segment_ids[src..src + n]);
            out.attention_mask[dst..dst + n].copy_from_slice(&self.attention_mask[src..src + n]);
            out.tag_targets[dst..dst + n].copy_from_slice(&self.tag_targets[src..src + n]);
            out.pair_targets[i] = self.pair_targets[b];
        }
        out
    }
}

/// Splits a batch into groups of similar length so that little work is
/// spent on padding. Groups are contiguous runs of the examples sorted by
/// length (ties by index) and are chosen to minimize an estimate of the
/// forward cost: per-token projections, attention quadratic in the padded
/// length, and a fixed overhead per group.
pub fn length_groups(batch: &EncodedBatch, config: &ModelConfig) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..batch.batch).collect();
    order.sort_by_key(|&b| (batch.length(b), b));
    let n = order.len();
    if n == 0 {
        return Vec::new();
    }
    let (h, f) = (config.hidden as f64, config.ff_inner as f64);
    let per_token = 4.0 * h * h + 2.0 * h * f;
    let cost = |count: usize, len: usize| {
        let len = len as f64;
        count as f64 * len * (per_token + 4.0 * h * len) + GROUP_OVERHEAD_TOKENS * per_token
    };
    // best[j]: cheapest split of the first j sorted examples.
    let mut best = vec![(0.0f64, 0usize); n + 1];
    for j in 1..=n {
        let len = batch.length(order[j - 1]);
        best[j] = (0..j).map(|i| (best[i].0 + cost(j - i, len), i)).min_by(|a, b| a.0.total_cmp(&b.0)).expect("j >= 1");
    }
    let mut groups = Vec::new();
    let mut j = n;
    while j > 0 {
        let i = best[j].1;
        groups.push(order[i..j].to_vec());
        j = i;
    }
    groups.reverse();
    groups
}

/// Fixed cost of one extra group, in units of per-token projection work.
const GROUP_OVERHEAD_TOKENS: f64 = 24.0;

/// Dropout randomness for one forward pass; `None` runs in inference mode.
pub type DropoutRng = Option<DetRng>;

/// One forward pass over a shared set of parameters. Parameter leaves are
/// created lazily, so a path that never touches a layer never reads it.
pub struct Session<'p, T> {
    pub graph: Graph<'p, T>,
    params: &'p ModelParameters<T>,
    leaves: Vec<Option<NodeId>>,
}

impl<'p, T: Real> Session<'p, T> {
    pub fn new(params: &'p ModelParameters<T>) -> Self {
        Session { graph: Graph::new(), params, leaves: vec![None; params.len()] }
    }

    fn leaf(&mut self, index: usize) -> NodeId {
        *self.leaves[index].get_or_insert_with(|| self.graph.param(&self.params.tensors[index], index))
    }

    /// Layer I. Output `[batch, seq, hidden]`.
    pub fn embed(&mut self, batch: &EncodedBatch, rng: &mut DropoutRng) -> Result<NodeId> {
        let params: &'p ModelParameters<T> = self.params;
        let cfg = &params.config;
        if let Some(&id) = batch.token_ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
            return Err(ModelError::VocabRange { id, vocab_size: cfg.vocab_size });
        }
        if batch.seq_len > cfg.max_len {
            return Err(ModelError::TooLong { len: batch.seq_len, max: cfg.max_len });
        }
        let (tok, pos, seg) = (self.leaf(TOKEN_EMB), self.leaf(POSITION_EMB), self.leaf(SEGMENT_EMB));
        let t = self.graph.gather(tok, &batch.token_ids)?;
        let p = self.graph.gather(pos, &batch.position_ids)?;
        let s = self.graph.gather(seg, &batch.segment_ids)?;
        let sum = self.graph.add(t, p)?;
        let sum = self.graph.add(sum, s)?;
        let sum = self.graph.reshape(sum, vec![batch.batch, batch.seq_len, cfg.hidden])?;
        self.dropout(sum, rng)
    }

    fn dropout(&mut self, x: NodeId, rng: &mut DropoutRng) -> Result<NodeId> {
        let rate = self.params.config.dropout;
        Ok(match rng {
            Some(r) => self.graph.dropout(x, rate, r, true)?,
            None => x,
        })
    }

    fn linear(&mut self, x: NodeId, weight: usize) -> Result<NodeId> {
        let (w, b) = (self.leaf(weight), self.leaf(weight + 1));
        let y = self.graph.matmul(x, w)?;
        Ok(self.graph.add_bias(y, b)?)
    }

    fn block(&mut self, x: NodeId, layer: usize, rng: &mut DropoutRng) -> Result<NodeId> {
        let cfg = &self.params.config;
        let (a, head_dim) = (cfg.heads, cfg.hidden / cfg.heads);
        let p = |offset| layer_param(layer, offset);
        let q = self.linear(x, p(0))?;
        let k = self.linear(x, p(2))?;
        let v = self.linear(x, p(4))?;
        let q = self.graph.split_heads(q, a)?;
        let k = self.graph.split_heads(k, a)?;
        let v = self.graph.split_heads(v, a)?;
        let scores = self.graph.batch_matmul(q, k, true)?;
        let scores = self.graph.scale(scores, T::one() / T::from_usize(head_dim).unwrap().sqrt())?;
        let scores = self.graph.mask_keys(scores)?;
        let probs = self.graph.softmax(scores, 2)?;
        let probs = self.dropout(probs, rng)?;
        let ctx = self.graph.batch_matmul(probs, v, false)?;
        let ctx = self.graph.merge_heads(ctx, a)?;
        let attn = self.linear(ctx, p(6))?;
        let attn = self.dropout(attn, rng)?;
        let res = self.graph.add(x, attn)?;
        let (g1, b1) = (self.leaf(p(8)), self.leaf(p(9)));
        let x = self.graph.layer_norm(res, g1, b1, T::of(LAYER_NORM_EPS))?;

        let inner = self.linear(x, p(10))?;
        let inner = self.graph.gelu(inner)?;
        let out = self.linear(inner, p(12))?;
        let out = self.dropout(out, rng)?;
        let res = self.graph.add(x, out)?;
        let (g2, b2) = (self.leaf(p(14)), self.leaf(p(15)));
        Ok(self.graph.layer_norm(res, g2, b2, T::of(LAYER_NORM_EPS))?)
    }

    /// Layers I and E. Output `[batch, seq, hidden]` with `h_[CLS]` at
    /// position 0.
    pub fn encode(&mut self, batch: &EncodedBatch, rng: &mut DropoutRng) -> Result<NodeId> {
        self.graph.set_key_mask(batch.attention_mask.clone(), batch.batch, batch.seq_len)?;
        let mut x = self.embed(batch, rng)?;
        for layer in 0..self.params.config.layers {
            x = self.block(x, layer, rng)?;
        }
        Ok(x)
    }

    /// Layer T on a single-layout batch. Output `[batch, seq, 2]`.
    pub fn tag_logits(&mut self, batch: &EncodedBatch, rng: &mut DropoutRng) -> Result<NodeId> {
        if batch.layout != Layout::Single {
            return Err(ModelError::Layout { expected: Layout::Single, got: batch.layout });
        }
        let h = self.encode(batch, rng)?;
        let t = self.params.tagger_index();
        self.linear(h, t)
    }

    /// Layer C on a pair-layout batch. Output `[batch, 4]`.
    pub fn classify_logits(&mut self, batch: &EncodedBatch, rng: &mut DropoutRng) -> Result<NodeId> {
        if batch.layout != Layout::Pair {
            return Err(ModelError::Layout { expected: Layout::Pair, got: batch.layout });
        }
        let c = self.params.classifier_index()?;
        let h = self.encode(batch, rng)?;
        let cls_rows: Vec<usize> = (0..batch.batch).map(|b| b * batch.seq_len).collect();
        let cls = self.graph.select_rows(h, &cls_rows)?;
        self.linear(cls, c)
    }

    /// Mean loss over the labeled items of `batch`, computed per length
    /// group and recombined with count weights.
    fn grouped_loss(&mut self, batch: &EncodedBatch, rng: &mut DropoutRng, tagging: bool) -> Result<NodeId> {
        let labeled = |b: &EncodedBatch| {
            if tagging {
                b.tag_targets.iter().filter(|t| t.is_some()).count()
            } else {
                b.pair_targets.iter().filter(|t| t.is_some()).count()
            }
        };
        let total = labeled(batch);
        if total == 0 {
            return Err(NumericsError::MaskedEverything.into());
        }
        let mut sum = None;
        for rows in length_groups(batch, &self.params.config) {
            let part = batch.select(&rows);
            let n = labeled(&part);
            if n == 0 {
                continue;
            }
            let loss = if tagging { self.tag_loss(&part, rng)? } else { self.classify_loss(&part, rng)? };
            let loss = if n == total {
                loss
            } else {
                self.graph.scale(loss, T::from_usize(n).unwrap() / T::from_usize(total).unwrap())?
            };
            sum = Some(match sum {
                Some(acc) => self.graph.add(acc, loss)?,
                None => loss,
            });
        }
        Ok(sum.expect("some group is labeled"))
    }

    /// Mean token cross-entropy over labeled real tokens; `[CLS]` and padding
    /// never count.
    pub fn tag_loss(&mut self, batch: &EncodedBatch, rng: &mut DropoutRng) -> Result<NodeId> {
        let logits = self.tag_logits(batch, rng)?;
        let targets: Vec<usize> = batch.tag_targets.iter().map(|t| t.unwrap_or(0)).collect();
        let keep: Vec<bool> = batch.tag_targets.iter().map(Option::is_some).collect();
        Ok(self.graph.cross_entropy(logits, &targets, &keep)?)
    }

    pub fn classify_loss(&mut self, batch: &EncodedBatch, rng: &mut DropoutRng) -> Result<NodeId> {
        let logits = self.classify_logits(batch, rng)?;
        let targets: Vec<usize> = batch.pair_targets.iter().map(|t| t.unwrap_or(0)).collect();
        let keep: Vec<bool> = batch.pair_targets.iter().map(Option::is_some).collect();
        Ok(self.graph.cross_entropy(logits, &targets, &keep)?)
    }

    pub fn value(&self, node: NodeId) -> &Tensor<T> {
        self.graph.value(node)
    }

    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        Ok(self.graph.backward(loss)?)
    }
}

/// Result of [`joint_loss`].
#[derive(Debug, Clone)]
pub struct JointLoss<T> {
    pub loss: T,
    pub tag_loss: Option<T>,
    pub classify_loss: Option<T>,
    pub grads: Gradients<T>,
}

/// Dropout stream for the tagging pass of a step.
pub const TAG_DROPOUT_STREAM: u64 = 0;
/// Dropout stream for the pair pass of a step.
pub const PAIR_DROPOUT_STREAM: u64 = 1;

/// `Loss_tag + Loss_cl` on one tagging and one pair batch, sharing layers I
/// and E. An empty batch contributes exactly zero. With `dropout_seed`
/// set, each pass draws its dropout masks from its own stream derived from
/// the seed, so a task's loss can be recomputed on its own.
pub fn joint_loss<T: Real>(
    params: &ModelParameters<T>,
    tagging: Option<&EncodedBatch>,
    pairs: Option<&EncodedBatch>,
    dropout_seed: Option<u64>,
) -> Result<JointLoss<T>> {
    let tagging = tagging.filter(|b| !b.is_empty());
    let pairs = pairs.filter(|b| !b.is_empty());
    if tagging.is_none() && pairs.is_none() {
        return Err(NumericsError::MaskedEverything.into());
    }
    let mut session = Session::new(params);
    let mut tag_node = None;
    let mut pair_node = None;
    if let Some(batch) = tagging {
        let mut rng = dropout_seed.map(|s| seeded(s, TAG_DROPOUT_STREAM));
        tag_node = Some(session.grouped_loss(batch, &mut rng, true)?);
    }
    if let Some(batch) = pairs {
        let mut rng = dropout_seed.map(|s| seeded(s, PAIR_DROPOUT_STREAM));
        pair_node = Some(session.grouped_loss(batch, &mut rng, false)?);
    }
    let total = match (tag_node, pair_node) {
        (Some(a), Some(b)) => session.graph.add(a, b)?,
        (Some(a), None) | (None, Some(a)) => a,
        (None, None) => unreachable!(),
    };
    let grads = session.backward(total)?;
    Ok(JointLoss {
        loss: session.value(total).item(),
        tag_loss: tag_node.map(|n| session.value(n).item()),
        classify_loss: pair_node.map(|n| session.value(n).item()),
        grads,
    })
}

/// Argmax tag per real token (excluding `[CLS]`), one vector per example.
pub fn predict_tags<T: Real>(params: &ModelParameters<T>, batch: &EncodedBatch) -> Result<Vec<Vec<usize>>> {
    let classes = params.config.tag_classes;
    let mut out = vec![Vec::new(); batch.batch];
    for rows in length_groups(batch, &params.config) {
        let part = batch.select(&rows);
        let mut session = Session::new(params);
        let logits = session.tag_logits(&part, &mut None)?;
        let data = session.value(logits).data();
        for (i, &b) in rows.iter().enumerate() {
            out[b] = (1..=part.real_tokens(i))
                .map(|j| argmax(&data[(i * part.seq_len + j) * classes..(i * part.seq_len + j + 1) * classes]))
                .collect();
        }
    }
    Ok(out)
}

/// Argmax pair label index per example.
pub fn predict_pairs<T: Real>(params: &ModelParameters<T>, batch: &EncodedBatch) -> Result<Vec<usize>> {
    let c = params.config.pair_classes;
    let mut out = vec![0; batch.batch];
    for rows in length_groups(batch, &params.config) {
        let part = batch.select(&rows);
        let mut session = Session::new(params);
        let logits = session.classify_logits(&part, &mut None)?;
        for (&b, row) in rows.iter().zip(session.value(logits).data().chunks(c)) {
            out[b] = argmax(row);
        }
    }
    Ok(out)
}

fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Compares reverse-mode gradients of the tagging loss (`tagging = true`) or
/// the classification loss against central finite differences, for every
/// element of every parameter, in f64. Weights are perturbed off their init
/// scale and dropout is active with a fixed mask so every path contributes.
pub fn check_gradients(
    config: &ModelConfig,
    tagging: bool,
    seed: u64,
) -> Result<Vec<(String, gradcheck::ParamReport)>> {
    use rand::Rng;
    let mut params = ModelParameters::<f64>::init(config, seed, true)?;
    let mut rng = seeded(seed, 99);
    for t in params.tensors_mut() {
        for v in t.data_mut() {
            *v += 0.3 * crate::rng::standard_normal(&mut rng);
        }
    }
    let vocab = config.vocab_size as u32;
    let mut ids = |n: usize| -> Vec<u32> { (0..n).map(|_| rng.gen_range(SEP_ID + 1..vocab)).collect() };
    let seqs: Vec<Vec<u32>> = [5, 3, 6].iter().map(|&n| ids(n)).collect();
    let pairs: Vec<(Vec<u32>, Vec<u32>)> = [(3, 4), (2, 2), (5, 3)].iter().map(|&(m, n)| (ids(m), ids(n))).collect();
    let labels: Vec<Vec<usize>> = seqs.iter().map(|s| s.iter().map(|_| rng.gen_range(0..2)).collect()).collect();
    let tb = EncodedBatch::single(
        &seqs.iter().zip(&labels).map(|(s, l)| (s.as_slice(), Some(l.as_slice()))).collect::<Vec<_>>(),
        config.max_len,
    );
    let pb = EncodedBatch::pairs(
        &pairs.iter().map(|(a, b)| (a.as_slice(), b.as_slice(), Some(rng.gen_range(0..4)))).collect::<Vec<_>>(),
        config.max_len,
    );
    let (t, p) = if tagging { (Some(&tb), None) } else { (None, Some(&pb)) };
    let joint = joint_loss(&params, t, p, Some(seed))?;
    let grads: Vec<Tensor<f64>> =
        params.tensors().iter().enumerate().map(|(k, x)| joint.grads.get_or_zeros(k, x.shape())).collect();
    let names = params.names().to_vec();
    let mut tensors = params.tensors().to_vec();
    let reports = gradcheck::check(&mut tensors, &grads, 1e-5, |ts| {
        let named = names.iter().cloned().zip(ts.iter().cloned()).collect();
        let ps = ModelParameters::from_named(config, named).expect("same shapes");
        joint_loss(&ps, t, p, Some(seed)).map(|j| j.loss).unwrap_or(f64::NAN)
    });
    Ok(names.into_iter().zip(reports).collect())
}
