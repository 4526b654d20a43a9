//! Self-supervised pre-training for disfluency detection.
//!
//! The crate is `no_std` (with `alloc`) and holds the algorithmic pipeline:
//!
//! * [`textproc`] normalizes transcript-style text and maps tokens to ids.
//! * [`corruptor`] builds pseudo disfluent sentences (tagging task) and
//!   fluent/disfluent sentence pairs (classification task) from raw text.
//! * [`numerics`] is a small reverse-mode differentiation kernel.
//! * [`model`] is a transformer encoder with a token tagging head and a
//!   sentence-pair classification head.
//! * [`trainer`] runs joint pre-training, fine-tuning and Adam updates;
//!   [`checkpoint`] serializes their results.
//! * [`eval`] scores taggers with token-level precision, recall and F1.
//!
//! File formats, the command line tool and anything touching the file system
//! live in the companion `dforge` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod checkpoint;
pub mod corruptor;
pub mod eval;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod textproc;
pub mod trainer;

pub use corruptor::{NgramIndex, PairExample, PairLabel, Tag, TagSequence, TaggedExample};
pub use eval::EvalReport;
pub use model::{ModelConfig, ModelParameters};
pub use textproc::{Sentence, Vocabulary};
pub use trainer::{Checkpoint, HyperParams};
