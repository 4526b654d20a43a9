//! Grids of pre-train, fine-tune and evaluate runs along one axis, written as
//! a curve CSV for external plotting.

use std::fmt::Write as _;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use dforge_core::corruptor::{build_ngram_index, NgramIndex, TagSequence, DEFAULT_NGRAM_CAPACITY};
use dforge_core::model::ModelConfig;
use dforge_core::rng::derive_seed;
use dforge_core::textproc::{build_vocab, Sentence, Vocabulary, DEFAULT_MIN_FREQUENCY};
use dforge_core::trainer::{self, Checkpoint, FinetuneData, HyperParams, PretrainData, TrainingTask};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::formats;
use crate::pipeline;

pub const CSV_HEADER: &str = "axis,x,seed,p,r,f1,error";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    PseudoDataSize,
    GoldDataSize,
    ModelSize,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::PseudoDataSize => "pseudo-data-size",
            Axis::GoldDataSize => "gold-data-size",
            Axis::ModelSize => "model-size",
        }
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pseudo-data-size" => Ok(Axis::PseudoDataSize),
            "gold-data-size" => Ok(Axis::GoldDataSize),
            "model-size" => Ok(Axis::ModelSize),
            other => {
                Err(Error::usage(format!("axis must be pseudo-data-size, gold-data-size or model-size, got {other:?}")))
            }
        }
    }
}

/// Everything a point needs besides its axis value and seed.
pub struct SweepSetup {
    pub axis: Axis,
    pub corpus: Vec<Sentence>,
    pub vocab: Vocabulary,
    pub ngrams: Option<NgramIndex>,
    pub gold_train: Vec<TagSequence>,
    pub gold_dev: Vec<TagSequence>,
    pub gold_test: Vec<TagSequence>,
    /// Shared starting point for the gold-data-size axis.
    pub init: Option<Checkpoint>,
    pub base_model: ModelConfig,
    pub pretrain: HyperParams,
    pub finetune: HyperParams,
    pub n_pseudo: usize,
    pub n_gold: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub x: usize,
    pub seed: u64,
    pub p: f64,
    pub r: f64,
    pub f1: f64,
    pub error: Option<String>,
}

impl SweepRow {
    fn failed(x: usize, seed: u64, e: &Error) -> Self {
        SweepRow { x, seed, p: f64::NAN, r: f64::NAN, f1: f64::NAN, error: Some(e.message.clone()) }
    }
}

/// Parses a comma-separated grid of non-negative integers.
pub fn parse_grid(grid: &str) -> Result<Vec<usize>> {
    let values: Vec<usize> = grid
        .split(',')
        .map(|v| v.trim().parse().map_err(|_| Error::usage(format!("grid value {v:?} is not a count"))))
        .collect::<Result<_>>()?;
    if values.is_empty() || grid.trim().is_empty() {
        return Err(Error::usage("grid is empty"));
    }
    Ok(values)
}

/// Checks grid values against the axis before any work starts.
pub fn validate_grid(axis: Axis, grid: &[usize], model: &ModelConfig) -> Result<()> {
    for &x in grid {
        if axis == Axis::ModelSize {
            let probe = ModelConfig { hidden: x, ff_inner: 4 * x, ..model.clone() };
            probe.validate().map_err(|e| Error::usage(format!("model-size {x}: {e}")))?;
        }
    }
    Ok(())
}

impl SweepSetup {
    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        let axis: Axis = cfg.str("axis").parse()?;
        let init = cfg.path("init-checkpoint").map(|p| formats::read_checkpoint(&p)).transpose()?;
        let corpus = match cfg.path("corpus") {
            Some(p) => formats::read_corpus(&p)?,
            None if axis == Axis::GoldDataSize && init.is_some() => Vec::new(),
            None => return Err(Error::usage("--corpus is required")),
        };
        let vocab = match cfg.path("vocab") {
            Some(p) => formats::read_vocab(&p)?,
            None if !corpus.is_empty() => build_vocab(&corpus, DEFAULT_MIN_FREQUENCY)?,
            None => return Err(Error::usage("--vocab is required without a corpus")),
        };
        if let Some(c) = &init {
            pipeline::check_vocab(c, &vocab)?;
        }
        let ngrams = if corpus.is_empty() {
            None
        } else {
            Some(build_ngram_index(corpus.iter().cloned(), DEFAULT_NGRAM_CAPACITY, cfg.seed()?)?)
        };
        Ok(SweepSetup {
            axis,
            ngrams,
            gold_train: formats::read_tagging(&cfg.require_path("gold-train")?)?,
            gold_dev: match cfg.path("gold-dev") {
                Some(p) => formats::read_tagging(&p)?,
                None => Vec::new(),
            },
            gold_test: formats::read_tagging(&cfg.require_path("gold-test")?)?,
            init,
            base_model: cfg.model_config(vocab.len())?,
            vocab,
            corpus,
            pretrain: cfg.hyper("pretrain-")?,
            finetune: cfg.hyper("finetune-")?,
            n_pseudo: cfg.usize("n-pseudo")?,
            n_gold: cfg.usize("n-gold")?,
        })
    }

    /// Multi-task pre-training on `n` tagging and `n` pair examples; `None`
    /// for `n = 0`, which means random initialization.
    pub fn pretrain(&self, model: &ModelConfig, n: usize, seed: u64) -> Result<Option<Checkpoint>> {
        if n == 0 {
            return Ok(None);
        }
        let ngrams = self.ngrams.as_ref().ok_or_else(|| Error::usage("pre-training needs a corpus"))?;
        let data = pipeline::pseudo_data(&self.corpus, 0, ngrams, n, n, seed)?;
        let tagging: Vec<_> = data.tagging.into_iter().map(|e| e.into_sequence()).collect();
        let tag_items = pipeline::encode_tagging(&tagging, &self.vocab);
        let pair_items = pipeline::encode_pairs(&data.pairs, &self.vocab);
        let hyper = HyperParams { seed, ..self.pretrain.clone() };
        let pdata = PretrainData { tagging: &tag_items, pairs: &pair_items, heldout_tagging: &[], heldout_pairs: &[] };
        Ok(Some(trainer::pretrain(model, &hyper, TrainingTask::Multi, pdata, self.vocab.fingerprint(), &mut ())?))
    }

    /// Fine-tunes on `n_gold` seed-subsampled gold sentences and scores the
    /// test set. Returns (P, R, F1).
    pub fn finetune_and_score(
        &self,
        init: Option<&Checkpoint>,
        model: &ModelConfig,
        n_gold: usize,
        seed: u64,
    ) -> Result<(f64, f64, f64)> {
        let train = pipeline::subsample(&self.gold_train, n_gold, seed);
        let train_items = pipeline::encode_tagging(&train, &self.vocab);
        let dev_items = pipeline::encode_tagging(&self.gold_dev, &self.vocab);
        let hyper = HyperParams { seed, ..self.finetune.clone() };
        let data = FinetuneData { train: &train_items, dev: &dev_items };
        let ckpt = trainer::finetune(init, model, &hyper, data, self.vocab.fingerprint(), &mut ())?;
        let report = pipeline::evaluate_model::<f32>(&ckpt.params, &self.gold_test, &self.vocab)?;
        Ok((report.precision, report.recall, report.f1))
    }

    fn model_for(&self, x: usize) -> ModelConfig {
        match self.axis {
            Axis::ModelSize => ModelConfig { hidden: x, ff_inner: 4 * x, ..self.base_model.clone() },
            _ => self.base_model.clone(),
        }
    }

    /// One grid point. `shared` is the per-seed pre-trained checkpoint used
    /// by the gold-data-size axis.
    pub fn point(&self, x: usize, seed: u64, shared: Option<&Checkpoint>) -> Result<(f64, f64, f64)> {
        let model = self.model_for(x);
        match self.axis {
            Axis::PseudoDataSize => {
                let init = self.pretrain(&model, x, seed)?;
                self.finetune_and_score(init.as_ref(), &model, self.n_gold, seed)
            }
            Axis::GoldDataSize => self.finetune_and_score(shared, &model, x, seed),
            Axis::ModelSize => {
                let init = self.pretrain(&model, self.n_pseudo, seed)?;
                self.finetune_and_score(init.as_ref(), &model, self.n_gold, seed)
            }
        }
    }

    /// Runs every (x, seed) point, `jobs` at a time. A failing point becomes
    /// a NaN row carrying the error; the others are unaffected. Rows come
    /// back in grid order, seeds innermost.
    pub fn run(&self, grid: &[usize], seeds: &[u64], jobs: usize) -> Vec<SweepRow> {
        // Gold-data-size points share one pre-trained model per seed.
        let shared: Vec<std::result::Result<Option<Checkpoint>, String>> = seeds
            .iter()
            .map(|&seed| match (self.axis, &self.init) {
                (Axis::GoldDataSize, Some(c)) => Ok(Some(c.clone())),
                (Axis::GoldDataSize, None) => {
                    self.pretrain(&self.base_model, self.n_pseudo, seed).map_err(|e| e.message)
                }
                _ => Ok(None),
            })
            .collect();
        let points: Vec<(usize, usize)> = grid.iter().flat_map(|&x| (0..seeds.len()).map(move |s| (x, s))).collect();
        let rows: Vec<Mutex<Option<SweepRow>>> = points.iter().map(|_| Mutex::new(None)).collect();
        let next = AtomicUsize::new(0);
        let work = || loop {
            let i = next.fetch_add(1, Ordering::SeqCst);
            let Some(&(x, s)) = points.get(i) else { break };
            let seed = seeds[s];
            let row = match &shared[s] {
                Err(msg) => SweepRow::failed(x, seed, &Error::data(msg.clone())),
                Ok(init) => match self.point(x, seed, init.as_ref()) {
                    Ok((p, r, f1)) => SweepRow { x, seed, p, r, f1, error: None },
                    Err(e) => SweepRow::failed(x, seed, &e),
                },
            };
            *rows[i].lock().unwrap() = Some(row);
        };
        if jobs <= 1 {
            work();
        } else {
            std::thread::scope(|scope| {
                for _ in 0..jobs {
                    scope.spawn(work);
                }
            });
        }
        rows.into_iter().map(|m| m.into_inner().unwrap().expect("every point ran")).collect()
    }
}

/// Per-seed values derived from the base seed.
pub fn point_seeds(base: u64, count: usize) -> Vec<u64> {
    (0..count as u64).map(|i| derive_seed(base, i)).collect()
}

pub fn format_csv(axis: Axis, rows: &[SweepRow]) -> String {
    let mut out = String::new();
    writeln!(out, "{CSV_HEADER}").unwrap();
    for r in rows {
        let note = r.error.as_deref().unwrap_or("").replace([',', '\n', '\r'], ";");
        writeln!(out, "{},{},{},{},{},{},{note}", axis.name(), r.x, r.seed, r.p, r.r, r.f1).unwrap();
    }
    out
}

pub fn cmd_sweep(cfg: &RunConfig) -> Result<()> {
    let out = cfg.require_path("out")?;
    let grid = parse_grid(cfg.str("grid"))?;
    let setup = SweepSetup::from_config(cfg)?;
    validate_grid(setup.axis, &grid, &setup.base_model)?;
    let seeds = point_seeds(cfg.seed()?, cfg.usize("seeds")?.max(1));
    let rows = setup.run(&grid, &seeds, cfg.usize("jobs")?);
    formats::write_bytes(&out, format_csv(setup.axis, &rows).as_bytes())?;
    let failed = rows.iter().filter(|r| r.error.is_some()).count();
    println!("{} points ({failed} failed); curve written to {}", rows.len(), out.display());
    Ok(())
}
